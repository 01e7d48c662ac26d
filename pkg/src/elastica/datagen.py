"""Procedural synthesis of the desk-scale dataset.

Assets are solid primitive shapes filled with seeded uniform samples; every
random choice derives from the object's id hash or the dataset master seed,
so a rebuild is byte-identical. Scenes are 30-frame free-fall drops onto the
ground plane; the first 20 frames form the observation (recon) window and
the last 10 are held out for future prediction.
"""

from __future__ import annotations

import json
import logging
import shutil
from pathlib import Path

import numpy as np

from .binding import (
    DEFAULT_ANCHOR_COUNT,
    DEFAULT_BIND_COUNT,
    DEFAULT_BIND_FALLOFF,
    DEFAULT_NEIGHBORS,
    build_binding,
    build_topology,
    object_seed,
    sample_anchors,
)
from .core import (
    GaussianSet,
    PhysicalAttributes,
    SceneBundle,
    SimConfig,
    SpringMassState,
    validate_bundle,
    write_bundle,
)
from .identify import ParameterRanges
from .renderer import make_camera, render, write_png
from .simulator import IntegrationDivergence, rollout_positions
from .binding import interpolate_centers

log = logging.getLogger("elastica")

SHAPES = ("sphere", "box", "torus", "ellipsoid", "capsule")
DATASET_VIEWS = ("+x", "+z", "+y", "az45")
DEFAULT_FRAMES = 30
DEFAULT_DROP_HEIGHT = 1.0
DEFAULT_GAUSSIANS = 400


class SceneRejected(RuntimeError):
    pass


def _sample_inside(shape: str, n: int, rng: np.random.Generator, size: float) -> np.ndarray:
    """Uniform points inside a solid primitive centered at the origin."""
    if shape == "sphere":
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = size * rng.uniform(0.0, 1.0, n) ** (1.0 / 3.0)
        return d * r[:, None]
    if shape == "box":
        half = np.array([size, 0.7 * size, 0.85 * size])
        return rng.uniform(-1.0, 1.0, (n, 3)) * half
    if shape == "ellipsoid":
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = rng.uniform(0.0, 1.0, n) ** (1.0 / 3.0)
        return d * r[:, None] * np.array([size, 0.6 * size, 0.8 * size])
    if shape == "torus":
        major, minor = size * 0.72, size * 0.28
        pts = np.empty((n, 3))
        filled = 0
        while filled < n:
            cand = rng.uniform(-1.0, 1.0, (2 * (n - filled) + 16, 3)) * np.array(
                [major + minor, minor, major + minor]
            )
            ring = np.sqrt(cand[:, 0] ** 2 + cand[:, 2] ** 2) - major
            keep = ring**2 + cand[:, 1] ** 2 <= minor**2
            take = cand[keep][: n - filled]
            pts[filled : filled + take.shape[0]] = take
            filled += take.shape[0]
        return pts
    if shape == "capsule":
        radius, half_len = 0.45 * size, 0.55 * size
        pts = np.empty((n, 3))
        filled = 0
        while filled < n:
            cand = rng.uniform(-1.0, 1.0, (2 * (n - filled) + 16, 3)) * np.array(
                [radius, half_len + radius, radius]
            )
            yc = np.clip(cand[:, 1], -half_len, half_len)
            keep = cand[:, 0] ** 2 + (cand[:, 1] - yc) ** 2 + cand[:, 2] ** 2 <= radius**2
            take = cand[keep][: n - filled]
            pts[filled : filled + take.shape[0]] = take
            filled += take.shape[0]
        return pts
    raise ValueError(f"unknown shape {shape!r}; expected one of {SHAPES}")


def make_asset(
    shape: str,
    n_gaussians: int,
    object_id: str,
    center=(0.0, 0.0, 0.0),
    size: float = 0.28,
) -> GaussianSet:
    """Seeded Gaussian cloud filling a solid primitive.

    The per-Gaussian scale is half the mean nearest-neighbor spacing of the
    sampled centers; colors come from a seeded per-object palette; opacity is
    fixed at 0.8.
    """
    if n_gaussians < 16:
        raise ValueError("n_gaussians must be >= 16")
    rng = np.random.default_rng(object_seed(object_id))
    pts = _sample_inside(shape, n_gaussians, rng, size) + np.asarray(center, dtype=np.float64)

    diff = pts[:, None, :] - pts[None, :, :]
    d2 = np.sum(diff**2, axis=2)
    np.fill_diagonal(d2, np.inf)
    mean_nn = float(np.sqrt(d2.min(axis=1)).mean())
    base = rng.uniform(0.15, 0.9, 3)
    colors = np.clip(base + rng.normal(0.0, 0.08, (n_gaussians, 3)), 0.0, 1.0)
    return GaussianSet(
        centers=pts,
        scales=np.full(n_gaussians, 0.5 * mean_nn),
        colors=colors,
        opacities=np.full(n_gaussians, 0.8),
        rotations=np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n_gaussians, 1)),
    )


def sample_attributes(rng_seed, ranges: ParameterRanges = ParameterRanges()) -> PhysicalAttributes:
    """Independent uniform draws from the parameter ranges."""
    rng = (
        rng_seed
        if isinstance(rng_seed, np.random.Generator)
        else np.random.default_rng(rng_seed)
    )
    lo, hi = ranges.lows(), ranges.highs()
    p = rng.uniform(lo, hi)
    return PhysicalAttributes.from_vector(p)


def synthesize_scene(
    object_id: str,
    shape: str,
    attrs: PhysicalAttributes | None = None,
    attr_seed=None,
    drop_height: float = DEFAULT_DROP_HEIGHT,
    frames: int = DEFAULT_FRAMES,
    n_gaussians: int = DEFAULT_GAUSSIANS,
    n_anchors: int = DEFAULT_ANCHOR_COUNT,
    config: SimConfig | None = None,
    max_retries: int = 3,
) -> SceneBundle:
    """Build and simulate one free-fall scene.

    The asset is built at the origin, scaffold sampled with the id-hash seed,
    then the whole scene is lifted so the lowest anchor starts at
    drop_height. Frame 0 of the stored trajectory is that rest pose; frames
    1..frames-1 are simulated. A diverging simulation resamples attributes
    (with a derived seed) up to max_retries times.
    """
    if drop_height <= 0:
        raise ValueError("drop_height must be > 0")
    if config is None:
        config = SimConfig()
    asset = make_asset(shape, n_gaussians, object_id)
    anchors0 = sample_anchors(asset.centers, n_anchors, object_seed(object_id))
    lift = drop_height - anchors0[:, 1].min()
    offset = np.array([0.0, lift, 0.0])
    anchors0 = anchors0 + offset
    asset = asset.with_centers(asset.centers + offset)

    topology = build_topology(anchors0, DEFAULT_NEIGHBORS)
    binding = build_binding(asset.centers, anchors0, DEFAULT_BIND_COUNT, DEFAULT_BIND_FALLOFF)
    if attrs is None:
        if attr_seed is None:
            raise ValueError("need attrs or attr_seed")
        attrs = sample_attributes(attr_seed)

    state0 = SpringMassState(anchors0, np.zeros_like(anchors0))
    for attempt in range(max_retries + 1):
        try:
            sim = rollout_positions(state0, topology, attrs, config, frames - 1)
            break
        except IntegrationDivergence as exc:
            log.warning(
                "scene %s diverged at step %d (attempt %d); resampling attributes",
                object_id,
                exc.step_index,
                attempt,
            )
            if attempt == max_retries:
                raise SceneRejected(
                    f"scene {object_id} diverged after {max_retries} resamples"
                ) from exc
            attrs = sample_attributes(object_seed(f"{object_id}/retry{attempt}"))
    trajectory = np.concatenate([anchors0[None], sim], axis=0)

    bundle = SceneBundle(
        object_id=object_id,
        gaussians=asset,
        anchors=state0,
        topology=topology,
        binding=binding,
        attributes=attrs,
        config=config,
        trajectory=trajectory,
    )
    violations = validate_bundle(bundle)
    if violations:
        raise SceneRejected(f"scene {object_id} failed validation: {violations}")
    return bundle


def render_views(bundle: SceneBundle, out_dir, views=DATASET_VIEWS, resolution: int = 64) -> None:
    """PNG frames for each view: out_dir/views/{view}/{frame:04d}.png."""
    out_dir = Path(out_dir)
    for view in views:
        cam = make_camera(view, resolution)
        vdir = out_dir / "views" / view
        vdir.mkdir(parents=True, exist_ok=True)
        for t in range(bundle.trajectory.shape[0]):
            centers = interpolate_centers(
                bundle.binding,
                bundle.trajectory[t],
                rest_anchors=bundle.anchors.positions,
                rest_centers=bundle.gaussians.centers,
            )
            img = render(bundle.gaussians.with_centers(centers), cam)
            write_png(img, vdir / f"{t:04d}.png")


def _scene_task(packed):
    (
        out_dir,
        object_id,
        shape,
        sample_idx,
        split,
        attr_seed_state,
        drop_height,
        frames,
        n_gaussians,
        n_anchors,
        with_views,
        resolution,
    ) = packed
    scene_dir = Path(out_dir) / split / object_id / f"sample_{sample_idx:02d}"
    try:
        bundle = synthesize_scene(
            object_id,
            shape,
            attr_seed=np.random.default_rng(attr_seed_state),
            drop_height=drop_height,
            frames=frames,
            n_gaussians=n_gaussians,
            n_anchors=n_anchors,
        )
        scene_dir.mkdir(parents=True, exist_ok=True)
        write_bundle(bundle, scene_dir / "bundle.json")
        if with_views:
            render_views(bundle, scene_dir, resolution=resolution)
    except Exception:
        shutil.rmtree(scene_dir, ignore_errors=True)
        raise
    return {
        "object_id": object_id,
        "sample": sample_idx,
        "split": split,
        "path": str(Path(split) / object_id / f"sample_{sample_idx:02d}" / "bundle.json"),
        "attributes": {
            "m": bundle.attributes.mass,
            "k": bundle.attributes.stiffness,
            "d": bundle.attributes.damping,
            "f": bundle.attributes.friction,
        },
    }


def build_dataset(
    n_objects: int,
    samples_per_object: int,
    out_dir,
    master_seed: int,
    shapes=SHAPES,
    test_objects: int | None = None,
    drop_height: float = DEFAULT_DROP_HEIGHT,
    frames: int = DEFAULT_FRAMES,
    n_gaussians: int = DEFAULT_GAUSSIANS,
    n_anchors: int = DEFAULT_ANCHOR_COUNT,
    with_views: bool = True,
    resolution: int = 64,
    jobs: int = 1,
) -> list[dict]:
    """Synthesize the dataset tree and write manifest.json.

    Layout: out/{train,test}/{object_id}/sample_{k:02d}/bundle.json plus
    views/. The object split is cross-object (no test object id appears in
    train). Rebuilding with the same master_seed is byte-identical.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if test_objects is None:
        test_objects = max(1, round(n_objects * 8 / 58))
    if test_objects >= n_objects:
        raise ValueError("test_objects must be < n_objects")

    object_ids = [
        f"{shapes[i % len(shapes)]}-{master_seed:08x}-{i:03d}" for i in range(n_objects)
    ]
    if len(set(object_ids)) != n_objects:
        raise ValueError("object_id collision in generated names")
    rng = np.random.default_rng(master_seed)
    order = rng.permutation(n_objects)
    test_set = set(order[:test_objects].tolist())

    tasks = []
    for i, object_id in enumerate(object_ids):
        split = "test" if i in test_set else "train"
        for s in range(samples_per_object):
            seed_seq = np.random.SeedSequence(master_seed, spawn_key=(i, s))
            tasks.append(
                (
                    str(out_dir),
                    object_id,
                    shapes[i % len(shapes)],
                    s,
                    split,
                    seed_seq,
                    drop_height,
                    frames,
                    n_gaussians,
                    n_anchors,
                    with_views,
                    resolution,
                )
            )

    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as ex:
            rows = list(ex.map(_scene_task, tasks))
    else:
        rows = [_scene_task(t) for t in tasks]

    rows.sort(key=lambda r: (r["object_id"], r["sample"]))
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(rows, indent=2) + "\n")
    return rows
