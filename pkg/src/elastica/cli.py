"""Command-line entry point.

Subcommands: gen | simulate | render | identify | train | predict | eval |
serve. Exit codes: 0 success, 1 usage error, 2 data/validation error,
3 numerical divergence. Failures emit machine-readable JSON on stderr with
keys code, message, context. ELASTICA_LOG={error,info,debug} controls
logging verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit_error(code: str, message: str, context: dict | None = None) -> None:
    sys.stderr.write(
        json.dumps({"code": code, "message": message, "context": context or {}}) + "\n"
    )


def _setup_logging() -> None:
    level = os.environ.get("ELASTICA_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        level = "error"
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="elastica", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[], help="synthesize a dataset + manifest")
    g.add_argument("--objects", type=int, required=True)
    g.add_argument("--samples", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--shapes", default=None, help="comma-separated subset of shapes")
    g.add_argument("--drop-height", type=float, default=1.0)
    g.add_argument("--test-objects", type=int, default=None)
    g.add_argument("--gaussians", type=int, default=400)
    g.add_argument("--anchors", type=int, default=128)
    g.add_argument("--res", type=int, default=64, help="view render resolution")
    g.add_argument("--no-views", action="store_true", help="skip PNG view rendering")
    g.add_argument("--jobs", type=int, default=os.cpu_count() or 1)

    s = sub.add_parser("simulate", help="roll a bundle forward into a trajectory file")
    s.add_argument("--bundle", required=True)
    s.add_argument("--frames", type=int, required=True)
    s.add_argument("--params", default=None, help="params JSON overriding bundle attributes")
    s.add_argument("--out", required=True)
    s.add_argument("--binary", action="store_true", help="write the SMTJ binary format")

    r = sub.add_parser("render", help="render trajectory frames to PNGs")
    r.add_argument("--bundle", required=True)
    r.add_argument("--traj", required=True)
    r.add_argument("--view", default="az45", choices=["+x", "-x", "+y", "+z", "-z", "az45"])
    r.add_argument("--out", required=True)
    r.add_argument("--res", type=int, default=256)

    i = sub.add_parser("identify", help="per-scene gradient identification")
    i.add_argument("--bundle", required=True)
    i.add_argument("--observed", required=True, help="trajectory file (JSON or SMTJ)")
    i.add_argument("--iters", type=int, default=500)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out", required=True, help="params JSON; loss CSV lands beside it")
    i.add_argument("--loss", default="traj", choices=["traj", "photo"])
    i.add_argument("--frames", type=int, default=20, help="observation frames to fit")
    i.add_argument("--dump-grads", default=None, help="write final GradientReport JSON here")

    t = sub.add_parser("train", help="train the feedforward predictor on a dataset")
    t.add_argument("--manifest", required=True)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="model JSON; loss CSV lands beside it")
    t.add_argument("--loss", default="traj", choices=["traj", "photo"])
    t.add_argument("--jobs", type=int, default=os.cpu_count() or 1)

    pr = sub.add_parser("predict", help="feedforward attribute prediction")
    pr.add_argument("--model", required=True)
    pr.add_argument("--observed", required=True)
    pr.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="evaluate a parameter source on a dataset split")
    e.add_argument("--manifest", required=True)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--model", default=None)
    src.add_argument("--params-dir", default=None)
    src.add_argument("--mean-baseline", action="store_true")
    src.add_argument("--ground-truth", action="store_true")
    e.add_argument("--out", required=True, help="report JSON path; CSV lands beside it")
    e.add_argument("--split", default="test", choices=["train", "test"])
    e.add_argument("--view", default="az45", choices=["+x", "-x", "+y", "+z", "-z", "az45"])
    e.add_argument("--res", type=int, default=64)
    e.add_argument("--jobs", type=int, default=os.cpu_count() or 1)

    sv = sub.add_parser("serve", help="run the interactive manipulation service")
    sv.add_argument("--bundle", required=True)
    sv.add_argument("--params", default=None)
    sv.add_argument("--port", type=int, default=8710)
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--hz", type=float, default=30.0)
    sv.add_argument("--ui-dir", default=None, help="serve a static web client from this dir")
    return p


def _read_params(path):
    from .core import attributes_from_dict

    return attributes_from_dict(json.loads(Path(path).read_text()))


def _write_params(path, attrs):
    from .core import attributes_to_dict

    Path(path).write_text(json.dumps(attributes_to_dict(attrs), indent=2) + "\n")


def _loss_csv_path(out_path) -> Path:
    out_path = Path(out_path)
    return out_path.with_name(out_path.stem + ".loss.csv")


def _cmd_gen(args) -> int:
    from .datagen import SHAPES, build_dataset

    shapes = tuple(args.shapes.split(",")) if args.shapes else SHAPES
    for sh in shapes:
        if sh not in SHAPES:
            raise UsageError(f"unknown shape {sh!r}; choose from {','.join(SHAPES)}")
    rows = build_dataset(
        n_objects=args.objects,
        samples_per_object=args.samples,
        out_dir=args.out,
        master_seed=args.seed,
        shapes=shapes,
        test_objects=args.test_objects,
        drop_height=args.drop_height,
        n_gaussians=args.gaussians,
        n_anchors=args.anchors,
        with_views=not args.no_views,
        resolution=args.res,
        jobs=args.jobs,
    )
    print(f"wrote {len(rows)} bundles under {args.out} (manifest.json)")
    return EXIT_OK


def _cmd_simulate(args) -> int:
    from .core import read_bundle, write_trajectory_binary, write_trajectory_json
    from .simulator import rollout_positions

    bundle = read_bundle(args.bundle)
    attrs = _read_params(args.params) if args.params else bundle.attributes
    if args.frames < 1:
        raise UsageError("--frames must be >= 1")
    frames = [bundle.anchors.positions[None]]
    if args.frames > 1:
        frames.append(
            rollout_positions(
                bundle.anchors, bundle.topology, attrs, bundle.config, args.frames - 1
            )
        )
    traj = np.concatenate(frames, axis=0)
    if args.binary or str(args.out).endswith(".smtj"):
        write_trajectory_binary(args.out, traj)
    else:
        write_trajectory_json(args.out, traj, bundle.config.frame_rate)
    print(f"wrote {traj.shape[0]} frames to {args.out}")
    return EXIT_OK


def _cmd_render(args) -> int:
    from .binding import interpolate_centers
    from .core import read_bundle, read_trajectory
    from .renderer import make_camera, render, write_png

    bundle = read_bundle(args.bundle)
    traj = read_trajectory(args.traj)
    cam = make_camera(args.view, args.res)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t in range(traj.shape[0]):
        centers = interpolate_centers(
            bundle.binding,
            traj[t],
            rest_anchors=bundle.anchors.positions,
            rest_centers=bundle.gaussians.centers,
        )
        write_png(render(bundle.gaussians.with_centers(centers), cam), out / f"{t:04d}.png")
    print(f"wrote {traj.shape[0]} frames to {out}")
    return EXIT_OK


def _cmd_identify(args) -> int:
    from .core import read_bundle, read_trajectory
    from .identify import identify_scene, write_loss_csv

    bundle = read_bundle(args.bundle)
    observed = read_trajectory(args.observed)
    observed = observed[: args.frames]
    attrs, curve = identify_scene(
        bundle,
        observed,
        iters=args.iters,
        seed=args.seed,
        loss_kind=args.loss,
    )
    _write_params(args.out, attrs)
    write_loss_csv(_loss_csv_path(args.out), curve)
    if args.dump_grads:
        from .identify import _build_loss
        from .autodiff import rollout_with_gradients

        loss_fn, frames = _build_loss(bundle, observed, args.loss)
        _, _, report = rollout_with_gradients(bundle, attrs, loss_fn, frames, detach_states=False)
        Path(args.dump_grads).write_text(report.to_json())
    print(f"identified params written to {args.out} (final loss {curve[-1]!r})")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .core import read_bundle
    from .identify import train_predictor, write_loss_csv

    manifest_path = Path(args.manifest)
    rows = json.loads(manifest_path.read_text())
    train_rows = [r for r in rows if r["split"] == "train"]
    if not train_rows:
        raise ValueError("manifest has no train rows")
    dataset = [read_bundle(manifest_path.parent / r["path"]) for r in train_rows]
    model, history = train_predictor(
        dataset,
        epochs=args.epochs,
        batch_size=args.batch,
        seed=args.seed,
        loss_kind=args.loss,
        log_every=1,
    )
    model.save(args.out)
    write_loss_csv(_loss_csv_path(args.out), history)
    print(f"trained on {len(dataset)} scenes; model written to {args.out}")
    return EXIT_OK


def _cmd_predict(args) -> int:
    from .core import read_trajectory
    from .identify import DESCRIPTOR_FRAMES, MlpModel, predict

    model = MlpModel.load(args.model)
    observed = read_trajectory(args.observed)[:DESCRIPTOR_FRAMES]
    t0 = time.perf_counter()
    attrs = predict(model, observed)
    elapsed_ms = (time.perf_counter() - t0) * 1000.0
    _write_params(args.out, attrs)
    print(f"predicted in {elapsed_ms:.2f} ms; params written to {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .identify import MlpModel
    from .metrics import (
        FixedAttrsProvider,
        GroundTruthProvider,
        ModelProvider,
        ParamsDirProvider,
        evaluate,
        mean_baseline_attrs,
        write_report,
    )

    if args.model:
        provider = ModelProvider(MlpModel.load(args.model).to_dict())
    elif args.params_dir:
        provider = ParamsDirProvider(args.params_dir)
    elif args.mean_baseline:
        provider = FixedAttrsProvider(mean_baseline_attrs(args.manifest))
    else:
        provider = GroundTruthProvider()
    report = evaluate(
        args.manifest,
        provider,
        split=args.split,
        view=args.view,
        resolution=args.res,
        jobs=args.jobs,
    )
    write_report(report, args.out)
    fut = report["future"]
    print(
        f"evaluated {report['n_scenes']} scenes; future median CD "
        f"{fut['cd'].get('median', float('nan')):.6g}, future median PSNR "
        f"{fut['psnr'].get('median', float('nan')):.3f} dB; report at {args.out}"
    )
    return EXIT_OK


def _cmd_serve(args) -> int:
    import uvicorn

    from .core import read_bundle
    from .manip import create_app

    bundle = read_bundle(args.bundle)
    attrs = _read_params(args.params) if args.params else None
    app = create_app(bundle, attrs=attrs, hz=args.hz, ui_dir=args.ui_dir)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


_COMMANDS = {
    "gen": _cmd_gen,
    "simulate": _cmd_simulate,
    "render": _cmd_render,
    "identify": _cmd_identify,
    "train": _cmd_train,
    "predict": _cmd_predict,
    "eval": _cmd_eval,
    "serve": _cmd_serve,
}


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        _emit_error("usage", str(exc))
        return EXIT_USAGE

    from .identify import IdentificationFailure
    from .simulator import IntegrationDivergence

    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        _emit_error("usage", str(exc))
        return EXIT_USAGE
    except IntegrationDivergence as exc:
        _emit_error(
            "divergence",
            str(exc),
            {"step_index": exc.step_index, "frame_index": exc.frame_index},
        )
        return EXIT_DIVERGED
    except IdentificationFailure as exc:
        _emit_error("identification_failure", str(exc), exc.diagnostics)
        return EXIT_DIVERGED
    except (ValueError, KeyError, OSError) as exc:
        _emit_error("data", f"{type(exc).__name__}: {exc}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
