"""Reverse-mode gradients of the rollout (and optional render) pipeline.

A rollout records a tape of per-substep primal states; the adjoint sweeps it
backwards, accumulating gradients into the four shared attribute scalars.
Non-smooth points (contact activation, stick/slip switch, signed power at
zero extension) differentiate along the branch taken in the primal pass.

Two horizon modes: detach_states=True truncates gradient flow at frame
boundaries (each frame's loss only sees its own substeps); False is full
backpropagation through time. Forward trajectories are bitwise identical to
the plain simulator either way.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import _core
from .binding import interpolation_adjoint, interpolate_centers
from .core import PhysicalAttributes, SceneBundle
from .renderer import (
    Camera,
    photometric_loss,
    photometric_loss_gradient,
    render,
    render_gradient,
)
from .simulator import LENGTH_EPS, IntegrationDivergence


class NonFiniteGradient(RuntimeError):
    def __init__(self, frame_index):
        self.frame_index = frame_index
        super().__init__(f"non-finite gradient at frame {frame_index}")


@dataclass(frozen=True)
class Tape:
    """Recorded primal values of one rollout: per-substep entry states and
    pre-boundary integrator outputs, plus the frame layout."""

    x: np.ndarray  # (S, N, 3) entry positions
    v: np.ndarray  # (S, N, 3) entry velocities
    vhat: np.ndarray  # (S, N, 3) pre-boundary velocities
    xhat: np.ndarray  # (S, N, 3) pre-boundary positions
    final_x: np.ndarray
    final_v: np.ndarray
    substeps: int

    @property
    def n_steps(self) -> int:
        return self.x.shape[0]

    @property
    def n_frames(self) -> int:
        return self.n_steps // self.substeps

    def frame_positions(self) -> np.ndarray:
        """(T, N, 3) post-step positions at each frame boundary."""
        ends = [(t + 1) * self.substeps for t in range(self.n_frames)]
        out = np.empty((self.n_frames, self.x.shape[1], 3))
        for t, s in enumerate(ends):
            out[t] = self.x[s] if s < self.n_steps else self.final_x
        return out


@dataclass
class GradientReport:
    d_mass: float
    d_stiffness: float
    d_damping: float
    d_friction: float
    per_frame_loss: list[float] = field(default_factory=list)

    def as_vector(self) -> np.ndarray:
        return np.array(
            [self.d_mass, self.d_stiffness, self.d_damping, self.d_friction]
        )

    def to_dict(self) -> dict:
        return {
            "d_mass": self.d_mass,
            "d_stiffness": self.d_stiffness,
            "d_damping": self.d_damping,
            "d_friction": self.d_friction,
            "per_frame_loss": list(self.per_frame_loss),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


# ---------------------------------------------------------------------------
# Loss functions over frame positions


class TrajectoryLoss:
    """Mean squared error against a target anchor trajectory.

    Total loss is the mean over frames of the per-frame component-mean
    squared difference ("trajectory MSE", units m^2).
    """

    reduction = "mean"

    def __init__(self, target: np.ndarray):
        self.target = np.asarray(target, dtype=np.float64)
        self.n_frames = self.target.shape[0]

    def frame_value(self, t: int, positions: np.ndarray) -> float:
        d = positions - self.target[t]
        return float(np.mean(d * d))

    def frame_gradient(self, t: int, positions: np.ndarray) -> np.ndarray:
        d = positions - self.target[t]
        return 2.0 * d / (d.size * self.n_frames)

    def reduce(self, values) -> float:
        return float(np.mean(values))


class PhotometricLoss:
    """Squared pixel error of rendered frames against observed images.

    Per frame: the view-mean of the per-pixel-mean squared difference;
    frames are summed. Gradients chain through the splatter and the IDW
    binding back to anchor positions; appearance stays frozen.
    """

    reduction = "sum"

    def __init__(self, targets, cameras, gaussians, binding, rest_anchors):
        # targets: (V, T, H, W, 3); cameras: list of V Camera
        self.targets = [np.asarray(v, dtype=np.float64) for v in targets]
        self.cameras: list[Camera] = list(cameras)
        self.gaussians = gaussians
        self.binding = binding
        self.rest_anchors = np.asarray(rest_anchors, dtype=np.float64)
        self.n_frames = self.targets[0].shape[0]

    def _deformed(self, positions):
        centers = interpolate_centers(
            self.binding,
            positions,
            rest_anchors=self.rest_anchors,
            rest_centers=self.gaussians.centers,
        )
        return self.gaussians.with_centers(centers)

    def frame_value(self, t: int, positions: np.ndarray) -> float:
        gset = self._deformed(positions)
        vals = [
            photometric_loss(render(gset, cam), tgt[t])
            for cam, tgt in zip(self.cameras, self.targets)
        ]
        return float(np.mean(vals))

    def frame_gradient(self, t: int, positions: np.ndarray) -> np.ndarray:
        gset = self._deformed(positions)
        d_centers = np.zeros((len(gset), 3))
        for cam, tgt in zip(self.cameras, self.targets):
            img = render(gset, cam)
            d_pixels = photometric_loss_gradient(img, tgt[t])
            d_centers += render_gradient(gset, cam, d_pixels)
        d_centers /= len(self.cameras)
        return interpolation_adjoint(self.binding, d_centers, positions.shape[0])

    def reduce(self, values) -> float:
        return float(np.sum(values))

    @staticmethod
    def from_bundle(bundle: SceneBundle, frames: np.ndarray, cameras) -> "PhotometricLoss":
        """Build targets by rendering a ground-truth anchor trajectory."""
        loss = PhotometricLoss(
            targets=[np.zeros((frames.shape[0], c.height, c.width, 3)) for c in cameras],
            cameras=cameras,
            gaussians=bundle.gaussians,
            binding=bundle.binding,
            rest_anchors=bundle.anchors.positions,
        )
        for vi, cam in enumerate(cameras):
            for t in range(frames.shape[0]):
                loss.targets[vi][t] = render(loss._deformed(frames[t]), cam)
        return loss


# ---------------------------------------------------------------------------


def _shared_kernel_args(bundle: SceneBundle, attrs: PhysicalAttributes):
    n = bundle.n_anchors
    topo = bundle.topology
    cfg = bundle.config
    return dict(
        x0=bundle.anchors.positions,
        v0=bundle.anchors.velocities,
        edges=topo.edges,
        rest=topo.rest_lengths,
        mass=attrs.mass_per_anchor(n),
        stiff=attrs.stiffness_per_spring(topo.n_edges),
        damp=attrs.damping_per_spring(topo.n_edges),
        friction=attrs.friction,
        gravity=np.asarray(cfg.gravity, dtype=np.float64),
        dt=cfg.dt,
        p_k=cfg.spring_exponent,
        ground=cfg.ground_height,
        eps=LENGTH_EPS,
    )


def record_tape(bundle: SceneBundle, attrs: PhysicalAttributes, frames: int,
                substeps: int | None = None) -> Tape:
    if substeps is None:
        substeps = bundle.config.substeps_per_frame
    args = _shared_kernel_args(bundle, attrs)
    tx, tv, tvh, txh, fx, fv, status = _core.run_rollout_taped(
        **args, n_steps=frames * substeps
    )
    if status >= 0:
        raise IntegrationDivergence(status, frame_index=status // substeps)
    return Tape(x=tx, v=tv, vhat=tvh, xhat=txh, final_x=fx, final_v=fv, substeps=substeps)


def rollout_with_gradients(
    bundle: SceneBundle,
    attrs: PhysicalAttributes,
    loss_fn,
    frames: int,
    detach_states: bool = True,
    substeps: int | None = None,
):
    """Forward rollout + reverse sweep.

    Returns (frame_positions (T, N, 3), total_loss, GradientReport). The
    forward pass is bitwise identical to simulator.rollout; the rollout is
    always self-forced (each step consumes the previous predicted state).
    """
    if not attrs.shared_mode:
        raise ValueError("gradients accumulate into shared scalars; attrs must be shared_mode")
    tape = record_tape(bundle, attrs, frames, substeps)
    positions = tape.frame_positions()

    upstream = np.zeros_like(positions)
    per_frame = []
    for t in range(frames):
        per_frame.append(loss_fn.frame_value(t, positions[t]))
        upstream[t] = loss_fn.frame_gradient(t, positions[t])
        if not np.isfinite(upstream[t]).all():
            raise NonFiniteGradient(t)
    total = loss_fn.reduce(per_frame)

    args = _shared_kernel_args(bundle, attrs)
    g_m, g_k, g_d, g_f = _core.adjoint_sweep(
        tape.x,
        tape.v,
        tape.vhat,
        tape.xhat,
        args["edges"],
        args["rest"],
        args["mass"],
        args["stiff"],
        args["damp"],
        args["friction"],
        args["dt"],
        args["p_k"],
        args["ground"],
        args["eps"],
        tape.substeps,
        upstream,
        detach_states,
    )
    grads = np.array([g_m, g_k, g_d, g_f])
    if not np.isfinite(grads).all():
        raise NonFiniteGradient(None)
    report = GradientReport(
        d_mass=g_m, d_stiffness=g_k, d_damping=g_d, d_friction=g_f,
        per_frame_loss=per_frame,
    )
    return positions, total, report


def _loss_of(bundle, attrs, loss_fn, frames, substeps):
    tape = record_tape(bundle, attrs, frames, substeps)
    positions = tape.frame_positions()
    return loss_fn.reduce([loss_fn.frame_value(t, positions[t]) for t in range(frames)])


def finite_difference_gradients(
    bundle: SceneBundle,
    attrs: PhysicalAttributes,
    loss_fn,
    frames: int,
    h: float = 1e-4,
    detach_states: bool = False,
    substeps: int | None = None,
) -> GradientReport:
    """Central-difference oracle over the four shared scalars.

    Steps are relative (h * |p|, or h absolute for zero-valued parameters)
    and each evaluation reruns the full forward rollout. detach_states=True
    reproduces the truncated-horizon semantics by perturbing parameters one
    frame at a time from the unperturbed frame-entry states.
    """
    if h <= 0:
        raise ValueError("h must be > 0")
    if substeps is None:
        substeps = bundle.config.substeps_per_frame
    base = attrs.as_vector()
    grads = np.zeros(4)

    if not detach_states:
        for i in range(4):
            delta = h * (abs(base[i]) if base[i] != 0.0 else 1.0)
            pp = base.copy()
            pp[i] += delta
            pm = base.copy()
            pm[i] -= delta
            lp = _loss_of(bundle, PhysicalAttributes.from_vector(pp), loss_fn, frames, substeps)
            lm = _loss_of(bundle, PhysicalAttributes.from_vector(pm), loss_fn, frames, substeps)
            grads[i] = (lp - lm) / (2.0 * delta)
    else:
        base_tape = record_tape(bundle, attrs, frames, substeps)
        args = _shared_kernel_args(bundle, attrs)

        def detached_total(p):
            pat = PhysicalAttributes.from_vector(p)
            vals = []
            for t in range(frames):
                s0 = t * substeps
                xs, _, status = _core.run_rollout(
                    x0=base_tape.x[s0],
                    v0=base_tape.v[s0],
                    edges=args["edges"],
                    rest=args["rest"],
                    mass=pat.mass_per_anchor(base_tape.x.shape[1]),
                    stiff=pat.stiffness_per_spring(args["rest"].shape[0]),
                    damp=pat.damping_per_spring(args["rest"].shape[0]),
                    friction=pat.friction,
                    gravity=args["gravity"],
                    dt=args["dt"],
                    p_k=args["p_k"],
                    ground=args["ground"],
                    eps=args["eps"],
                    n_steps=substeps,
                    record_every=substeps,
                )
                if status >= 0:
                    raise IntegrationDivergence(status, frame_index=t)
                vals.append(loss_fn.frame_value(t, xs[0]))
            return loss_fn.reduce(vals)

        for i in range(4):
            delta = h * (abs(base[i]) if base[i] != 0.0 else 1.0)
            pp = base.copy()
            pp[i] += delta
            pm = base.copy()
            pm[i] -= delta
            grads[i] = (detached_total(pp) - detached_total(pm)) / (2.0 * delta)

    return GradientReport(
        d_mass=float(grads[0]),
        d_stiffness=float(grads[1]),
        d_damping=float(grads[2]),
        d_friction=float(grads[3]),
    )
