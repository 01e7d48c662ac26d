#!/usr/bin/env python3
"""Benchmark the compiled kernel core against the numpy fallback.

Times the three kernel entry points (frame rollout, taped rollout, adjoint
sweep) on desk-scale systems and prints a comparison table. Run after
building the extension:

    python3 setup.py build_ext --inplace
    python3 benchmarks/bench_backends.py
"""

import argparse
import time

import numpy as np

from elastica._core import available_backends
from elastica.binding import build_topology


def _timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench(n_anchors: int, frames: int, substeps: int, repeats: int):
    rng = np.random.default_rng(7)
    x0 = rng.normal(size=(n_anchors, 3)) * 0.3 + np.array([0.0, 1.0, 0.0])
    v0 = np.zeros((n_anchors, 3))
    topo = build_topology(x0, 8)
    n_edges = topo.n_edges
    args = dict(
        x0=x0,
        v0=v0,
        edges=topo.edges,
        rest=topo.rest_lengths,
        mass=np.full(n_anchors, 1.7),
        stiff=np.full(n_edges, 250.0),
        damp=np.full(n_edges, 1.2),
        friction=0.4,
        gravity=np.array([0.0, -9.8, 0.0]),
        dt=1.0 / 300.0,
        p_k=1.0,
        ground=0.0,
        eps=1e-8,
    )
    n_steps = frames * substeps
    upstream = np.full((frames, n_anchors, 3), 1e-3)

    rows = []
    for name, mod in sorted(available_backends().items()):
        t_roll = _timeit(
            lambda: mod.run_rollout(**args, n_steps=n_steps, record_every=substeps),
            repeats,
        )
        tape = mod.run_rollout_taped(**args, n_steps=n_steps)
        t_tape = _timeit(lambda: mod.run_rollout_taped(**args, n_steps=n_steps), repeats)
        t_adj = _timeit(
            lambda: mod.adjoint_sweep(
                tape[0], tape[1], tape[2], tape[3],
                args["edges"], args["rest"], args["mass"], args["stiff"],
                args["damp"], args["friction"], args["dt"], args["p_k"],
                args["ground"], args["eps"], substeps, upstream, True,
            ),
            repeats,
        )
        rows.append((name, t_roll, t_tape, t_adj))
    return n_edges, rows


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--frames", type=int, default=20)
    ap.add_argument("--substeps", type=int, default=10)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--sizes", default="64,128,512")
    opts = ap.parse_args()

    sizes = [int(s) for s in opts.sizes.split(",")]
    print(f"{opts.frames} frames x {opts.substeps} substeps, best of {opts.repeats}")
    header = f"{'N':>5} {'edges':>6} {'backend':>8} {'rollout':>10} {'taped':>10} {'adjoint':>10}"
    print(header)
    print("-" * len(header))
    for n in sizes:
        n_edges, rows = bench(n, opts.frames, opts.substeps, opts.repeats)
        for name, t_roll, t_tape, t_adj in rows:
            print(
                f"{n:>5} {n_edges:>6} {name:>8} "
                f"{t_roll * 1e3:>8.2f}ms {t_tape * 1e3:>8.2f}ms {t_adj * 1e3:>8.2f}ms"
            )
        if len(rows) == 2:
            (n0, *t0), (n1, *t1) = rows
            fast, slow = (t0, t1) if sum(t0) < sum(t1) else (t1, t0)
            fname = n0 if sum(t0) < sum(t1) else n1
            print(
                f"      -> {fname} is "
                + " / ".join(f"{s / f:.1f}x" for f, s in zip(fast, slow))
                + " faster (rollout/taped/adjoint)"
            )
    print()


if __name__ == "__main__":
    main()
