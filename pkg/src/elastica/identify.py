"""Physical attribute estimators.

Two routes to p = (m, k, d, f) from an observed 20-frame motion window:

  * identify_scene: per-scene Adam descent in an unconstrained raw space,
    squashed into the valid parameter ranges, with full backpropagation
    through time over the rollout loss.
  * train_predictor / predict: a small MLP over per-frame trajectory
    descriptors, trained self-supervised across a dataset by backpropagating
    the reconstruction loss through the simulator (per-frame state
    detachment, self-forced rollouts). No estimator ever reads ground-truth
    attributes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import PhotometricLoss, TrajectoryLoss, rollout_with_gradients
from .core import PhysicalAttributes, SceneBundle
from .simulator import IntegrationDivergence

DESCRIPTOR_FRAMES = 20
FEATURES_PER_FRAME = 8  # centroid (3) + extents (3) + mean speed + vertical KE proxy


@dataclass(frozen=True)
class ParameterRanges:
    mass: tuple[float, float] = (0.2, 6.0)
    stiffness: tuple[float, float] = (10.0, 1200.0)
    damping: tuple[float, float] = (0.1, 5.0)
    friction: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        for name in ("mass", "stiffness", "damping", "friction"):
            lo, hi = getattr(self, name)
            if not (0 <= lo < hi):
                raise ValueError(f"range for {name} must satisfy 0 <= min < max")

    def lows(self) -> np.ndarray:
        return np.array(
            [self.mass[0], self.stiffness[0], self.damping[0], self.friction[0]]
        )

    def highs(self) -> np.ndarray:
        return np.array(
            [self.mass[1], self.stiffness[1], self.damping[1], self.friction[1]]
        )

    def contains(self, attrs: PhysicalAttributes) -> bool:
        p = attrs.as_vector()
        return bool(np.all(p >= self.lows()) and np.all(p <= self.highs()))

    def to_dict(self) -> dict:
        return {
            "mass": list(self.mass),
            "stiffness": list(self.stiffness),
            "damping": list(self.damping),
            "friction": list(self.friction),
        }

    @staticmethod
    def from_dict(d: dict) -> "ParameterRanges":
        return ParameterRanges(
            mass=tuple(d["mass"]),
            stiffness=tuple(d["stiffness"]),
            damping=tuple(d["damping"]),
            friction=tuple(d["friction"]),
        )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -500.0, 500.0)))


def squash(raw, ranges: ParameterRanges = ParameterRanges()) -> PhysicalAttributes:
    """Map unconstrained raw values into the valid ranges: lo + (hi-lo)*sigmoid."""
    raw = np.asarray(raw, dtype=np.float64)
    p = ranges.lows() + (ranges.highs() - ranges.lows()) * _sigmoid(raw)
    return PhysicalAttributes.from_vector(p)


def squash_jacobian(raw, ranges: ParameterRanges = ParameterRanges()) -> np.ndarray:
    """d p_i / d raw_i (diagonal) of the squash map."""
    s = _sigmoid(np.asarray(raw, dtype=np.float64))
    return (ranges.highs() - ranges.lows()) * s * (1.0 - s)


def unsquash(attrs: PhysicalAttributes, ranges: ParameterRanges = ParameterRanges()) -> np.ndarray:
    """Inverse of squash for in-range attributes (clipped slightly inside)."""
    p = attrs.as_vector()
    frac = (p - ranges.lows()) / (ranges.highs() - ranges.lows())
    frac = np.clip(frac, 1e-9, 1.0 - 1e-9)
    return np.log(frac / (1.0 - frac))


# ---------------------------------------------------------------------------
# Trajectory descriptors


def extract_descriptor(trajectory: np.ndarray, frame_rate: float = 30.0,
                       n_frames: int = DESCRIPTOR_FRAMES) -> np.ndarray:
    """Fixed-length features of an observed anchor trajectory.

    Per frame: centroid (3), bounding-box extents (3), mean anchor speed,
    and mean squared vertical velocity. Speeds use frame differences scaled
    by the frame rate (frame 0 reuses the first difference). Horizontal
    translation of the whole trajectory moves only the centroid features.
    """
    trajectory = np.asarray(trajectory, dtype=np.float64)
    if trajectory.ndim != 3 or trajectory.shape[0] != n_frames:
        raise ValueError(
            f"expected a ({n_frames}, N, 3) trajectory, got shape {trajectory.shape}"
        )
    diffs = np.diff(trajectory, axis=0) * frame_rate  # (T-1, N, 3)
    vel = np.concatenate([diffs[:1], diffs], axis=0)  # (T, N, 3)
    cent = trajectory.mean(axis=1)  # (T, 3)
    extent = trajectory.max(axis=1) - trajectory.min(axis=1)  # (T, 3)
    speed = np.sqrt(np.sum(vel**2, axis=2)).mean(axis=1)  # (T,)
    vert_ke = np.mean(vel[:, :, 1] ** 2, axis=1)  # (T,)
    feats = np.concatenate(
        [cent, extent, speed[:, None], vert_ke[:, None]], axis=1
    )  # (T, 8)
    return feats.reshape(-1)


# ---------------------------------------------------------------------------
# MLP predictor


@dataclass
class MlpModel:
    """Tanh MLP over standardized descriptors; raw outputs feed squash()."""

    sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    feature_mean: np.ndarray
    feature_std: np.ndarray
    ranges: ParameterRanges = field(default_factory=ParameterRanges)

    def to_dict(self) -> dict:
        return {
            "layers": list(self.sizes),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "feature_mean": self.feature_mean.tolist(),
            "feature_std": self.feature_std.tolist(),
            "ranges": self.ranges.to_dict(),
        }

    @staticmethod
    def from_dict(d: dict) -> "MlpModel":
        return MlpModel(
            sizes=list(d["layers"]),
            weights=[np.array(w, dtype=np.float64) for w in d["weights"]],
            biases=[np.array(b, dtype=np.float64) for b in d["biases"]],
            feature_mean=np.array(d["feature_mean"], dtype=np.float64),
            feature_std=np.array(d["feature_std"], dtype=np.float64),
            ranges=ParameterRanges.from_dict(d["ranges"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @staticmethod
    def load(path) -> "MlpModel":
        return MlpModel.from_dict(json.loads(Path(path).read_text()))


def init_model(
    n_features: int = FEATURES_PER_FRAME * DESCRIPTOR_FRAMES,
    hidden: tuple[int, ...] = (128, 64),
    seed: int = 0,
    ranges: ParameterRanges = ParameterRanges(),
) -> MlpModel:
    """Seeded uniform fan-in initialization, zero biases, unit feature stats."""
    sizes = [n_features, *hidden, 4]
    rng = np.random.default_rng(seed)
    weights = []
    biases = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpModel(
        sizes=sizes,
        weights=weights,
        biases=biases,
        feature_mean=np.zeros(n_features),
        feature_std=np.ones(n_features),
        ranges=ranges,
    )


def _forward(model: MlpModel, x: np.ndarray):
    """Returns (raw outputs, cached activations) for a batch (B, n_features)."""
    acts = [x]
    h = x
    n_layers = len(model.weights)
    for li, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w.T + b
        h = np.tanh(z) if li < n_layers - 1 else z
        acts.append(h)
    return h, acts


def _backward(model: MlpModel, acts, d_raw: np.ndarray):
    """Gradients of sum-of-batch loss wrt weights/biases given d loss/d raw."""
    gw = [np.zeros_like(w) for w in model.weights]
    gb = [np.zeros_like(b) for b in model.biases]
    delta = d_raw
    for li in range(len(model.weights) - 1, -1, -1):
        gw[li] = delta.T @ acts[li]
        gb[li] = delta.sum(axis=0)
        if li > 0:
            delta = (delta @ model.weights[li]) * (1.0 - acts[li] ** 2)
    return gw, gb


def predict(model: MlpModel, observed: np.ndarray,
            frame_rate: float = 30.0) -> PhysicalAttributes:
    """Feedforward attribute estimate from an observed trajectory window."""
    desc = extract_descriptor(observed, frame_rate, n_frames=DESCRIPTOR_FRAMES)
    if desc.shape[0] != model.sizes[0]:
        raise ValueError(
            f"descriptor length {desc.shape[0]} does not match model input {model.sizes[0]}"
        )
    z = (desc - model.feature_mean) / model.feature_std
    raw, _ = _forward(model, z[None, :])
    return squash(raw[0], model.ranges)


# ---------------------------------------------------------------------------
# Adam


class _Adam:
    def __init__(self, shape_like, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in shape_like]
        self.v = [np.zeros_like(p) for p in shape_like]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr_scale=1.0):
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            mh = self.m[i] / (1 - self.beta1**self.t)
            vh = self.v[i] / (1 - self.beta2**self.t)
            out.append(p - lr_scale * self.lr * mh / (np.sqrt(vh) + self.eps))
        return out


def _cosine(iteration: int, total: int) -> float:
    return 0.5 * (1.0 + np.cos(np.pi * iteration / max(total, 1)))


# ---------------------------------------------------------------------------
# Per-scene identification


class IdentificationFailure(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def _build_loss(bundle: SceneBundle, observed: np.ndarray, kind: str, cameras=None):
    """Loss over frames 1..T-1 of the observation (frame 0 is the known
    initial state and carries no signal)."""
    target = np.asarray(observed, dtype=np.float64)[1:]
    if kind == "traj":
        return TrajectoryLoss(target), target.shape[0]
    if kind == "photo":
        from .renderer import make_camera

        if cameras is None:
            cameras = [make_camera("az45", 64)]
        return PhotometricLoss.from_bundle(bundle, target, cameras), target.shape[0]
    raise ValueError(f"unknown loss kind {kind!r} (expected 'traj' or 'photo')")


def _descend(bundle, loss_fn, frames, raw0, iters, lr, ranges):
    """Adam descent in raw space; returns (best_raw, best_loss, curve)."""
    raw = raw0.copy()
    adam = _Adam([raw], lr)
    best_raw = raw.copy()
    best_loss = np.inf
    curve: list[float] = []
    lr_damp = 1.0
    consecutive_failures = 0
    for it in range(iters):
        attrs = squash(raw, ranges)
        try:
            _, total, report = rollout_with_gradients(
                bundle, attrs, loss_fn, frames, detach_states=False
            )
        except IntegrationDivergence as exc:
            consecutive_failures += 1
            lr_damp *= 0.5
            if consecutive_failures > 25:
                raise IdentificationFailure(
                    "persistent integration divergence during identification",
                    {"iteration": it, "step_index": exc.step_index, "lr_damp": lr_damp},
                ) from exc
            # reject: retreat halfway toward the best-known iterate
            raw = 0.5 * (raw + best_raw)
            continue
        consecutive_failures = 0
        curve.append(total)
        if total < best_loss:
            best_loss = total
            best_raw = raw.copy()
        g_raw = report.as_vector() * squash_jacobian(raw, ranges)
        (raw,) = adam.step([raw], [g_raw], lr_scale=lr_damp * _cosine(it, iters))
    return best_raw, best_loss, curve


def _first_contact_frame(observed: np.ndarray, ground: float) -> int:
    low = observed[:, :, 1].min(axis=1) <= ground + 1e-9
    hits = np.nonzero(low)[0]
    return int(hits[0]) if hits.size else observed.shape[0]


def _full_objective(bundle, loss_fn, frames, raw, ranges):
    from .autodiff import record_tape

    tape = record_tape(bundle, squash(raw, ranges), frames)
    positions = tape.frame_positions()
    return loss_fn.reduce(
        [loss_fn.frame_value(t, positions[t]) for t in range(frames)]
    )


# grid over the (mass, stiffness) plane probed before descent; only the
# ratio k/m is dynamically meaningful, and it is globally non-convex
# (bounce timing), so the scan spans the full reachable ratio range
_SCAN_RAW_MASS = (-4.5, -1.5, 1.5)
_SCAN_STIFF_POINTS = 16


def identify_scene(
    bundle: SceneBundle,
    observed: np.ndarray,
    iters: int = 500,
    lr: float = 2e-2,
    seed: int = 0,
    loss_kind: str = "traj",
    ranges: ParameterRanges = ParameterRanges(),
    cameras=None,
    curriculum: bool = True,
):
    """Per-scene gradient identification; returns (attrs, loss_curve).

    Adam in raw space through squash(), cosine-decayed step size, full
    backpropagation through time; the best-loss iterate wins and every
    forward evaluation counts against the iteration budget. The descent
    starts at the range midpoints, aided by two cheap globalization stages
    that the budget pays for:

      * a coarse scan over the stiffness/mass plane (the loss is globally
        non-convex in k/m through contact timing), and
      * a warmup descent on the airborne prefix of the observation, whose
        objective is smooth in (k/m, d/m).

    The better of the two (by full objective) seeds the main descent plus a
    short small-step polish. The returned curve holds full-objective values
    only. A diverging trial step is rejected and the step size halved;
    sustained divergence raises IdentificationFailure. Deterministic given
    (inputs, seed).
    """
    del seed  # reserved; the procedure is deterministic without randomness
    observed = np.asarray(observed, dtype=np.float64)
    if observed.shape[0] < 2:
        raise ValueError("observed sequence needs at least 2 frames")
    loss_fn, frames = _build_loss(bundle, observed, loss_kind, cameras)

    midpoint = np.zeros(4)  # sigmoid(0) = 0.5 -> range midpoints
    budget = iters
    candidates: list[tuple[float, np.ndarray]] = []

    if curriculum and loss_kind == "traj" and iters >= 200:
        # stage 1: stiffness-plane scan
        best_scan, best_scan_loss = None, np.inf
        for rm in _SCAN_RAW_MASS:
            for rk in np.linspace(-7.0, 7.0, _SCAN_STIFF_POINTS):
                raw = np.array([rm, rk, 0.0, 0.0])
                budget -= 1
                try:
                    value = _full_objective(bundle, loss_fn, frames, raw, ranges)
                except IntegrationDivergence:
                    continue
                if value < best_scan_loss:
                    best_scan_loss, best_scan = value, raw
        if best_scan is not None:
            candidates.append((best_scan_loss, best_scan))

        # stage 2: airborne-prefix warmup from the midpoints
        t_contact = _first_contact_frame(observed, bundle.config.ground_height)
        if 4 <= t_contact < observed.shape[0]:
            warm_iters = budget * 2 // 5
            warm_loss, warm_frames = _build_loss(
                bundle, observed[:t_contact], loss_kind, cameras
            )
            warm_raw, _, _ = _descend(
                bundle, warm_loss, warm_frames, midpoint, warm_iters, 5e-2, ranges
            )
            budget -= warm_iters + 1
            try:
                warm_value = _full_objective(bundle, loss_fn, frames, warm_raw, ranges)
                candidates.append((warm_value, warm_raw))
            except IntegrationDivergence:
                pass

    start = min(candidates, key=lambda c: c[0])[1] if candidates else midpoint

    if candidates:
        # stage 3: friction line scan; contact frames couple strongly to f
        # but its descent from the midpoint stalls in stick-dominated scenes
        best_f_loss, best_f = np.inf, start[3]
        for rf in np.linspace(-5.0, 5.0, 11):
            raw = start.copy()
            raw[3] = rf
            budget -= 1
            try:
                value = _full_objective(bundle, loss_fn, frames, raw, ranges)
            except IntegrationDivergence:
                continue
            if value < best_f_loss:
                best_f_loss, best_f = value, rf
        start = start.copy()
        start[3] = best_f

    main_iters = budget * 7 // 10
    raw, _, main_curve = _descend(bundle, loss_fn, frames, start, main_iters, lr, ranges)
    raw, _, polish_curve = _descend(
        bundle, loss_fn, frames, raw, budget - main_iters, lr / 4.0, ranges
    )
    return squash(raw, ranges), main_curve + polish_curve


# ---------------------------------------------------------------------------
# Predictor training


def train_predictor(
    dataset: list[SceneBundle],
    epochs: int = 200,
    batch_size: int = 8,
    seed: int = 0,
    lr: float = 1e-3,
    loss_kind: str = "traj",
    obs_frames: int = DESCRIPTOR_FRAMES,
    hidden: tuple[int, ...] = (128, 64),
    ranges: ParameterRanges = ParameterRanges(),
    log_every: int = 0,
):
    """Self-supervised training of the feedforward predictor.

    For every sample: descriptor -> MLP -> squash -> self-forced rollout with
    per-frame state detachment -> reconstruction loss against the observed
    window; gradients flow back through the simulator into the MLP. Returns
    (model, per-epoch mean loss history). Deterministic given (dataset order,
    seed); batch gradients are reduced in sample order.

    A sample whose rollout diverges contributes no gradient that step and its
    loss is clipped into the epoch mean; an epoch with more than half of its
    samples divergent aborts with a report.
    """
    if not dataset:
        raise ValueError("dataset must be nonempty")
    for b in dataset:
        if b.trajectory is None or b.trajectory.shape[0] < obs_frames:
            raise ValueError(
                f"bundle {b.object_id} lacks the {obs_frames}-frame observation window"
            )

    observations = [np.asarray(b.trajectory[:obs_frames]) for b in dataset]
    descriptors = np.stack(
        [
            extract_descriptor(obs, b.config.frame_rate, obs_frames)
            for obs, b in zip(observations, dataset)
        ]
    )
    feat_mean = descriptors.mean(axis=0)
    feat_std = np.maximum(descriptors.std(axis=0), 1e-8)
    z = (descriptors - feat_mean) / feat_std

    model = init_model(descriptors.shape[1], hidden, seed, ranges)
    model.feature_mean = feat_mean
    model.feature_std = feat_std
    losses_per_sample = [
        TrajectoryLoss(obs[1:]) if loss_kind == "traj" else _build_loss(b, obs, loss_kind)[0]
        for obs, b in zip(observations, dataset)
    ]
    frames = obs_frames - 1

    rng = np.random.default_rng(seed)
    adam = _Adam(model.weights + model.biases, lr)
    history: list[float] = []
    n = len(dataset)

    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_losses = []
        n_divergent = 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            zb = z[idx]
            raw, acts = _forward(model, zb)
            d_raw = np.zeros_like(raw)
            batch_losses = []
            for row, sample_i in enumerate(idx):
                attrs = squash(raw[row], ranges)
                try:
                    _, total, report = rollout_with_gradients(
                        dataset[sample_i],
                        attrs,
                        losses_per_sample[sample_i],
                        frames,
                        detach_states=True,
                    )
                except IntegrationDivergence:
                    n_divergent += 1
                    clip = epoch_losses[-1] if epoch_losses else 1.0
                    batch_losses.append(clip)
                    continue
                batch_losses.append(total)
                d_raw[row] = report.as_vector() * squash_jacobian(raw[row], ranges)
            d_raw /= len(idx)
            gw, gb = _backward(model, acts, d_raw)
            new_params = adam.step(
                model.weights + model.biases, gw + gb, lr_scale=_cosine(epoch, epochs)
            )
            model.weights = new_params[: len(model.weights)]
            model.biases = new_params[len(model.weights) :]
            epoch_losses.extend(batch_losses)
        if n_divergent * 2 > n:
            raise IdentificationFailure(
                f"{n_divergent}/{n} samples diverged in epoch {epoch}; aborting",
                {"epoch": epoch, "divergent": n_divergent, "total": n},
            )
        mean_loss = float(np.mean(epoch_losses))
        if not np.isfinite(mean_loss):
            raise IdentificationFailure(
                f"non-finite epoch loss at epoch {epoch}", {"epoch": epoch}
            )
        history.append(mean_loss)
        if log_every and (epoch + 1) % log_every == 0:
            import logging

            logging.getLogger("elastica").info(
                "epoch %d/%d loss %.6g", epoch + 1, epochs, mean_loss
            )
    return model, history


def write_loss_csv(path, history) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,loss\n")
        for i, value in enumerate(history):
            fh.write(f"{i},{value!r}\n")
