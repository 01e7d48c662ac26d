"""Shared domain types: attributes, states, topology, Gaussians, bundles.

All types are immutable after construction (arrays are frozen read-only) and
can be shared across workers without copying. Serialization is canonical
JSON: fixed key order, full round-trip float precision, so writing a bundle
that was read from canonical-form JSON reproduces the input byte for byte.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

QUAT_NORM_TOL = 1e-6
CONFIG_RATE_TOL = 1e-9


def _frozen(a, dtype=np.float64):
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PhysicalAttributes:
    """Mass / stiffness / damping / friction, shared or per-element.

    In shared mode each of mass, stiffness, damping is a single scalar that
    applies to every anchor or spring. Heterogeneous storage (per-anchor
    mass, per-spring coefficients) is kept in the data model but estimators
    only ever operate on the four shared scalars.
    """

    mass: float | np.ndarray
    stiffness: float | np.ndarray
    damping: float | np.ndarray
    friction: float
    shared_mode: bool = True

    def __post_init__(self):
        if self.shared_mode:
            object.__setattr__(self, "mass", float(self.mass))
            object.__setattr__(self, "stiffness", float(self.stiffness))
            object.__setattr__(self, "damping", float(self.damping))
        else:
            object.__setattr__(self, "mass", _frozen(self.mass))
            object.__setattr__(self, "stiffness", _frozen(self.stiffness))
            object.__setattr__(self, "damping", _frozen(self.damping))
        object.__setattr__(self, "friction", float(self.friction))

    def mass_per_anchor(self, n_anchors: int) -> np.ndarray:
        if self.shared_mode:
            return np.full(n_anchors, self.mass, dtype=np.float64)
        return np.asarray(self.mass, dtype=np.float64)

    def stiffness_per_spring(self, n_springs: int) -> np.ndarray:
        if self.shared_mode:
            return np.full(n_springs, self.stiffness, dtype=np.float64)
        return np.asarray(self.stiffness, dtype=np.float64)

    def damping_per_spring(self, n_springs: int) -> np.ndarray:
        if self.shared_mode:
            return np.full(n_springs, self.damping, dtype=np.float64)
        return np.asarray(self.damping, dtype=np.float64)

    def as_vector(self) -> np.ndarray:
        """Shared-mode (m, k, d, f) as a 4-vector."""
        if not self.shared_mode:
            raise ValueError("as_vector requires shared_mode attributes")
        return np.array(
            [self.mass, self.stiffness, self.damping, self.friction], dtype=np.float64
        )

    @staticmethod
    def from_vector(p) -> "PhysicalAttributes":
        m, k, d, f = (float(v) for v in p)
        return PhysicalAttributes(mass=m, stiffness=k, damping=d, friction=f)

    def scaled(self, c: float) -> "PhysicalAttributes":
        """Jointly rescale (m, k, d) by c; friction is untouched."""
        return PhysicalAttributes(
            mass=np.asarray(self.mass) * c if not self.shared_mode else self.mass * c,
            stiffness=np.asarray(self.stiffness) * c
            if not self.shared_mode
            else self.stiffness * c,
            damping=np.asarray(self.damping) * c
            if not self.shared_mode
            else self.damping * c,
            friction=self.friction,
            shared_mode=self.shared_mode,
        )


@dataclass(frozen=True)
class SpringMassState:
    """Anchor positions and velocities at one integrator step."""

    positions: np.ndarray  # (N_A, 3) meters
    velocities: np.ndarray  # (N_A, 3) m/s
    time_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "positions", _frozen(self.positions))
        object.__setattr__(self, "velocities", _frozen(self.velocities))

    @property
    def n_anchors(self) -> int:
        return self.positions.shape[0]

    def with_state(self, positions, velocities, time_index=None) -> "SpringMassState":
        return SpringMassState(
            positions,
            velocities,
            self.time_index + 1 if time_index is None else time_index,
        )


@dataclass(frozen=True)
class SpringTopology:
    """Undirected spring edges (i < j) with rest lengths, from symmetrized KNN."""

    edges: np.ndarray  # (E, 2) int64, i < j, lexicographically sorted
    rest_lengths: np.ndarray  # (E,) meters
    neighbor_count: int

    def __post_init__(self):
        object.__setattr__(self, "edges", _frozen(self.edges, dtype=np.int64))
        object.__setattr__(self, "rest_lengths", _frozen(self.rest_lengths))

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]


@dataclass(frozen=True)
class GaussianKernel:
    """One isotropic Gaussian: center, scale, color, opacity, rotation.

    Rotation is persisted for round-tripping only; the isotropic renderer
    ignores it.
    """

    center: np.ndarray  # (3,)
    scale: float
    color: np.ndarray  # (3,) RGB in [0, 1]
    opacity: float
    rotation: np.ndarray = field(
        default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0])
    )  # (w, x, y, z)

    def __post_init__(self):
        object.__setattr__(self, "center", _frozen(self.center))
        object.__setattr__(self, "color", _frozen(self.color))
        object.__setattr__(self, "rotation", _frozen(self.rotation))
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "opacity", float(self.opacity))


@dataclass(frozen=True)
class GaussianSet:
    """N Gaussian kernels in struct-of-arrays form."""

    centers: np.ndarray  # (N, 3)
    scales: np.ndarray  # (N,)
    colors: np.ndarray  # (N, 3)
    opacities: np.ndarray  # (N,)
    rotations: np.ndarray  # (N, 4) wxyz unit quaternions

    def __post_init__(self):
        object.__setattr__(self, "centers", _frozen(self.centers))
        object.__setattr__(self, "scales", _frozen(self.scales))
        object.__setattr__(self, "colors", _frozen(self.colors))
        object.__setattr__(self, "opacities", _frozen(self.opacities))
        object.__setattr__(self, "rotations", _frozen(self.rotations))

    def __len__(self) -> int:
        return self.centers.shape[0]

    def kernel(self, i: int) -> GaussianKernel:
        return GaussianKernel(
            center=self.centers[i],
            scale=float(self.scales[i]),
            color=self.colors[i],
            opacity=float(self.opacities[i]),
            rotation=self.rotations[i],
        )

    def with_centers(self, centers) -> "GaussianSet":
        return replace(self, centers=centers)


@dataclass(frozen=True)
class BindingTable:
    """Per-Gaussian nearest anchors with initial distances for IDW transfer."""

    indices: np.ndarray  # (N, n_b) int64 anchor ids
    rest_distances: np.ndarray  # (N, n_b) meters
    p_b: float = 2.0  # falloff exponent
    n_b: int = 4
    eps_r: float = 1e-9  # rest-distance floor; below it the Gaussian follows rigidly

    def __post_init__(self):
        object.__setattr__(self, "indices", _frozen(self.indices, dtype=np.int64))
        object.__setattr__(self, "rest_distances", _frozen(self.rest_distances))


@dataclass(frozen=True)
class SimConfig:
    """Integrator configuration. dt * substeps_per_frame must equal 1/frame_rate."""

    dt: float = 1.0 / 300.0
    substeps_per_frame: int = 10
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, -9.8, 0.0]))
    spring_exponent: float = 1.0
    ground_height: float = 0.0
    frame_rate: float = 30.0

    def __post_init__(self):
        object.__setattr__(self, "gravity", _frozen(self.gravity))
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "substeps_per_frame", int(self.substeps_per_frame))
        object.__setattr__(self, "spring_exponent", float(self.spring_exponent))
        object.__setattr__(self, "ground_height", float(self.ground_height))
        object.__setattr__(self, "frame_rate", float(self.frame_rate))


@dataclass(frozen=True)
class SceneBundle:
    """Persisted unit: canonical Gaussians + physical scaffold + trajectory."""

    object_id: str
    gaussians: GaussianSet
    anchors: SpringMassState
    topology: SpringTopology
    binding: BindingTable
    attributes: PhysicalAttributes
    config: SimConfig
    trajectory: np.ndarray | None = None  # (T, N_A, 3) or None

    def __post_init__(self):
        if self.trajectory is not None:
            object.__setattr__(self, "trajectory", _frozen(self.trajectory))

    @property
    def n_anchors(self) -> int:
        return self.anchors.n_anchors


# ---------------------------------------------------------------------------
# Validation


def _check(violations, ok, message):
    if not ok:
        violations.append(message)


def validate_bundle(bundle: SceneBundle) -> list[str]:
    """Check every type invariant; returns one description per violation.

    An empty list means the bundle is well formed. Violations are data, not
    exceptions: callers decide whether to reject.
    """
    v: list[str] = []
    g = bundle.gaussians
    n_a = bundle.anchors.positions.shape[0]

    # attributes
    a = bundle.attributes
    masses = np.atleast_1d(np.asarray(a.mass, dtype=np.float64))
    _check(v, bool(np.all(masses > 0)), "attributes.mass: every anchor mass must be > 0")
    _check(
        v,
        bool(np.all(np.atleast_1d(np.asarray(a.stiffness, dtype=np.float64)) >= 0)),
        "attributes.stiffness: must be >= 0",
    )
    _check(
        v,
        bool(np.all(np.atleast_1d(np.asarray(a.damping, dtype=np.float64)) >= 0)),
        "attributes.damping: must be >= 0",
    )
    _check(v, a.friction >= 0, "attributes.friction: must be >= 0")
    if not a.shared_mode:
        _check(
            v,
            np.asarray(a.mass).shape == (n_a,),
            "attributes.mass: per-anchor array length must equal anchor count",
        )
        _check(
            v,
            np.asarray(a.stiffness).shape == (bundle.topology.n_edges,),
            "attributes.stiffness: per-spring array length must equal edge count",
        )
        _check(
            v,
            np.asarray(a.damping).shape == (bundle.topology.n_edges,),
            "attributes.damping: per-spring array length must equal edge count",
        )

    # anchor state
    st = bundle.anchors
    _check(
        v,
        st.positions.shape == st.velocities.shape and st.positions.shape == (n_a, 3),
        "anchors: positions and velocities must both have shape (N_A, 3)",
    )
    _check(
        v,
        bool(np.all(np.isfinite(st.positions)) and np.all(np.isfinite(st.velocities))),
        "anchors: all position/velocity components must be finite",
    )

    # topology
    t = bundle.topology
    if t.n_edges:
        _check(v, bool(np.all(t.edges[:, 0] < t.edges[:, 1])), "topology.edges: self-loop or unordered pair (need i < j)")
        _check(v, bool(np.all(t.edges >= 0) and np.all(t.edges < n_a)), "topology.edges: index out of range")
        uniq = np.unique(t.edges, axis=0)
        _check(v, uniq.shape[0] == t.n_edges, "topology.edges: duplicate undirected pair")
        _check(v, bool(np.all(t.rest_lengths > 0)), "topology.rest_lengths: must be > 0")
        _check(
            v,
            t.rest_lengths.shape == (t.n_edges,),
            "topology.rest_lengths: one per edge",
        )

    # gaussians
    _check(v, bool(np.all(g.scales > 0)), "gaussians.scale: must be > 0")
    _check(
        v,
        bool(np.all(g.opacities >= 0) and np.all(g.opacities <= 1)),
        "gaussians.opacity: must be in [0, 1]",
    )
    _check(
        v,
        bool(np.all(g.colors >= 0) and np.all(g.colors <= 1)),
        "gaussians.color: channels must be in [0, 1]",
    )
    qn = np.sqrt(np.sum(g.rotations**2, axis=1))
    _check(
        v,
        bool(np.all(np.abs(qn - 1.0) <= QUAT_NORM_TOL)),
        f"gaussians.rotation: quaternion norm must be within {QUAT_NORM_TOL} of 1",
    )

    # binding
    b = bundle.binding
    _check(
        v,
        b.indices.shape == (len(g), b.n_b) and b.rest_distances.shape == (len(g), b.n_b),
        "binding: each Gaussian needs exactly n_b anchor entries",
    )
    _check(v, bool(np.all(b.rest_distances >= 0)), "binding.rest_distances: must be >= 0")
    _check(
        v,
        bool(np.all(b.indices >= 0) and np.all(b.indices < n_a)),
        "binding.indices: anchor index out of range",
    )
    _check(v, b.p_b > 0, "binding.p_b: falloff exponent must be > 0")
    if b.rest_distances.size:
        w = 1.0 / np.maximum(b.rest_distances, b.eps_r) ** b.p_b
        _check(v, bool(np.all(np.isfinite(w))), "binding: derived IDW weights must be finite")

    # config
    c = bundle.config
    _check(v, c.dt > 0, "config.dt: must be > 0")
    _check(v, c.substeps_per_frame >= 1, "config.substeps_per_frame: must be >= 1")
    _check(
        v,
        math.isclose(c.dt * c.substeps_per_frame, 1.0 / c.frame_rate, rel_tol=CONFIG_RATE_TOL),
        "config: dt * substeps_per_frame must equal 1/frame_rate",
    )

    # trajectory
    if bundle.trajectory is not None:
        _check(
            v,
            bundle.trajectory.ndim == 3 and bundle.trajectory.shape[1:] == (n_a, 3),
            "trajectory: every frame must hold N_A points",
        )
    return v


# ---------------------------------------------------------------------------
# Serialization (canonical JSON)


def bundle_to_dict(bundle: SceneBundle) -> dict:
    g = bundle.gaussians
    d = {
        "object_id": bundle.object_id,
        "gaussians": [
            {
                "center": g.centers[i].tolist(),
                "scale": float(g.scales[i]),
                "color": g.colors[i].tolist(),
                "opacity": float(g.opacities[i]),
                "rotation": g.rotations[i].tolist(),
            }
            for i in range(len(g))
        ],
        "anchors": {
            "positions": bundle.anchors.positions.tolist(),
            "velocities": bundle.anchors.velocities.tolist(),
        },
        "springs": {
            "edges": bundle.topology.edges.tolist(),
            "rest_lengths": bundle.topology.rest_lengths.tolist(),
            "k_neighbors": bundle.topology.neighbor_count,
        },
        "binding": {
            "indices": bundle.binding.indices.tolist(),
            "rest_distances": bundle.binding.rest_distances.tolist(),
            "p_b": float(bundle.binding.p_b),
            "n_b": int(bundle.binding.n_b),
        },
        "attributes": attributes_to_dict(bundle.attributes),
        "config": {
            "dt": bundle.config.dt,
            "substeps_per_frame": bundle.config.substeps_per_frame,
            "gravity": bundle.config.gravity.tolist(),
            "p_k": bundle.config.spring_exponent,
            "ground_height": bundle.config.ground_height,
            "frame_rate": bundle.config.frame_rate,
        },
    }
    if bundle.trajectory is not None:
        d["trajectory"] = bundle.trajectory.tolist()
    return d


def attributes_to_dict(a: PhysicalAttributes) -> dict:
    def enc(x):
        return float(x) if a.shared_mode else np.asarray(x).tolist()

    return {
        "mass": enc(a.mass),
        "stiffness": enc(a.stiffness),
        "damping": enc(a.damping),
        "friction": float(a.friction),
        "shared": a.shared_mode,
    }


def attributes_from_dict(d: dict) -> PhysicalAttributes:
    return PhysicalAttributes(
        mass=d["mass"],
        stiffness=d["stiffness"],
        damping=d["damping"],
        friction=d["friction"],
        shared_mode=bool(d["shared"]),
    )


def bundle_from_dict(d: dict) -> SceneBundle:
    gs = d["gaussians"]
    gaussians = GaussianSet(
        centers=np.array([k["center"] for k in gs], dtype=np.float64).reshape(len(gs), 3),
        scales=np.array([k["scale"] for k in gs], dtype=np.float64),
        colors=np.array([k["color"] for k in gs], dtype=np.float64).reshape(len(gs), 3),
        opacities=np.array([k["opacity"] for k in gs], dtype=np.float64),
        rotations=np.array([k["rotation"] for k in gs], dtype=np.float64).reshape(len(gs), 4),
    )
    anchors = SpringMassState(
        positions=d["anchors"]["positions"], velocities=d["anchors"]["velocities"]
    )
    springs = d["springs"]
    topology = SpringTopology(
        edges=np.array(springs["edges"], dtype=np.int64).reshape(-1, 2),
        rest_lengths=springs["rest_lengths"],
        neighbor_count=int(springs["k_neighbors"]),
    )
    bd = d["binding"]
    binding = BindingTable(
        indices=np.array(bd["indices"], dtype=np.int64),
        rest_distances=np.array(bd["rest_distances"], dtype=np.float64),
        p_b=float(bd["p_b"]),
        n_b=int(bd["n_b"]),
    )
    cfg = d["config"]
    config = SimConfig(
        dt=cfg["dt"],
        substeps_per_frame=cfg["substeps_per_frame"],
        gravity=np.array(cfg["gravity"], dtype=np.float64),
        spring_exponent=cfg["p_k"],
        ground_height=cfg["ground_height"],
        frame_rate=cfg["frame_rate"],
    )
    traj = d.get("trajectory")
    return SceneBundle(
        object_id=d["object_id"],
        gaussians=gaussians,
        anchors=anchors,
        topology=topology,
        binding=binding,
        attributes=attributes_from_dict(d["attributes"]),
        config=config,
        trajectory=np.array(traj, dtype=np.float64) if traj is not None else None,
    )


def dumps_bundle(bundle: SceneBundle) -> str:
    return json.dumps(bundle_to_dict(bundle), indent=2) + "\n"


def write_bundle(bundle: SceneBundle, path) -> None:
    Path(path).write_text(dumps_bundle(bundle))


def read_bundle(path) -> SceneBundle:
    return bundle_from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Trajectory files: JSON and the compact "SMTJ" binary variant

SMTJ_MAGIC = b"SMTJ"


def write_trajectory_json(path, frames: np.ndarray, frame_rate: float) -> None:
    frames = np.asarray(frames, dtype=np.float64)
    payload = {"frame_rate": float(frame_rate), "frames": frames.tolist()}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def read_trajectory_json(path) -> tuple[np.ndarray, float]:
    d = json.loads(Path(path).read_text())
    return np.array(d["frames"], dtype=np.float64), float(d["frame_rate"])


def write_trajectory_binary(path, frames: np.ndarray) -> None:
    """Magic "SMTJ", u32 N_A, u32 T, then T*N_A*3 little-endian f64."""
    frames = np.asarray(frames, dtype=np.float64)
    t, n_a = frames.shape[0], frames.shape[1]
    with open(path, "wb") as fh:
        fh.write(SMTJ_MAGIC)
        fh.write(struct.pack("<II", n_a, t))
        fh.write(frames.astype("<f8").tobytes())


def read_trajectory_binary(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != SMTJ_MAGIC:
        raise ValueError(f"not an SMTJ trajectory file: bad magic {raw[:4]!r}")
    n_a, t = struct.unpack("<II", raw[4:12])
    body = np.frombuffer(raw, dtype="<f8", offset=12)
    if body.size != t * n_a * 3:
        raise ValueError(
            f"SMTJ payload has {body.size} values, expected {t * n_a * 3} (T={t}, N_A={n_a})"
        )
    return body.reshape(t, n_a, 3).astype(np.float64)


def read_trajectory(path) -> np.ndarray:
    """Load either format, sniffing the SMTJ magic."""
    p = Path(path)
    with open(p, "rb") as fh:
        magic = fh.read(4)
    if magic == SMTJ_MAGIC:
        return read_trajectory_binary(p)
    return read_trajectory_json(p)[0]
