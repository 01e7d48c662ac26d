"""Physical scaffold construction and motion transfer.

Turns a Gaussian point cloud into a simulatable spring-mass system: volume
anchor sampling on a dilated occupancy grid, symmetrized KNN springs, and
inverse-distance-weighted binding that carries anchor motion back to the
Gaussian centers. Everything here is deterministic given (object_id,
centers): the sampling seed comes from an FNV-1a hash of the id.
"""

from __future__ import annotations

import numpy as np

from .core import BindingTable, SpringTopology

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3

DEFAULT_GRID_RESOLUTION = 32
DEFAULT_NEIGHBORS = 8  # K for spring topology
DEFAULT_BIND_COUNT = 4  # n_b anchors per Gaussian
DEFAULT_BIND_FALLOFF = 2.0  # p_b
DEFAULT_ANCHOR_COUNT = 128

DEGENERATE_EDGE_EPS = 1e-8


class AnchorCapacityError(ValueError):
    """Requested more anchors than the occupancy grid has occupied voxels."""


def object_seed(object_id: str) -> int:
    """64-bit FNV-1a hash of the id's UTF-8 bytes; rejects empty ids."""
    if not object_id:
        raise ValueError("object_id must be non-empty")
    h = FNV_OFFSET
    for b in object_id.encode("utf-8"):
        h ^= b
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def _occupied_voxel_centers(centers: np.ndarray, grid_resolution: int):
    """Centers of occupied voxels after one-voxel dilation.

    The grid covers the cloud's AABB with a one-voxel margin on each side so
    dilation can spill past the tight bounds. Degenerate extents are padded.
    """
    lo = centers.min(axis=0)
    hi = centers.max(axis=0)
    span = hi - lo
    span = np.where(span <= 0, 1e-6, span)
    voxel = span / grid_resolution
    r = grid_resolution + 2  # one-cell margin per side
    occ = np.zeros((r, r, r), dtype=bool)
    idx = np.floor((centers - lo) / voxel).astype(np.int64) + 1
    idx = np.clip(idx, 1, grid_resolution)
    occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True

    dil = np.zeros_like(occ)
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                dil |= np.roll(occ, (dx, dy, dz), axis=(0, 1, 2))
    ii, jj, kk = np.nonzero(dil)
    cell = np.stack([ii, jj, kk], axis=1).astype(np.float64)
    return lo + (cell - 1.0 + 0.5) * voxel, voxel


def sample_anchors(
    centers,
    n_anchors: int,
    seed: int,
    grid_resolution: int = DEFAULT_GRID_RESOLUTION,
) -> np.ndarray:
    """Pick n_anchors voxel centers spread through the cloud's volume.

    Farthest-point sampling over the occupied (dilated) voxel centers,
    started from a seeded uniform pick; output rows follow the sampling
    sequence, so results are reproducible bit for bit.
    """
    centers = np.asarray(centers, dtype=np.float64)
    if centers.shape[0] < 4:
        raise ValueError("need at least 4 points to sample anchors")
    if n_anchors < 4:
        raise ValueError("n_anchors must be >= 4")
    candidates, _ = _occupied_voxel_centers(centers, grid_resolution)
    m = candidates.shape[0]
    if n_anchors > m:
        raise AnchorCapacityError(
            f"requested {n_anchors} anchors but only {m} occupied voxels exist; "
            f"use a coarser grid (resolution < {grid_resolution}) or fewer anchors"
        )
    rng = np.random.default_rng(seed)
    first = int(rng.integers(m))
    chosen = np.empty(n_anchors, dtype=np.int64)
    chosen[0] = first
    d2 = np.sum((candidates - candidates[first]) ** 2, axis=1)
    for k in range(1, n_anchors):
        nxt = int(np.argmax(d2))  # ties resolve to the lowest index
        chosen[k] = nxt
        d2 = np.minimum(d2, np.sum((candidates - candidates[nxt]) ** 2, axis=1))
    return candidates[chosen]


def build_topology(anchors, k_neighbors: int) -> SpringTopology:
    """Symmetrized K-nearest-neighbor springs with rest lengths.

    Directed KNN lists (self excluded, ties broken by lower index) are merged
    into an undirected deduplicated edge set; an edge survives if either
    endpoint selected the other.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    n = anchors.shape[0]
    if k_neighbors >= n:
        raise ValueError(f"K={k_neighbors} must be < number of anchors ({n})")
    diff = anchors[:, None, :] - anchors[None, :, :]
    d2 = np.sum(diff**2, axis=2)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k_neighbors]
    rows = np.repeat(np.arange(n), k_neighbors)
    cols = order.reshape(-1)
    pairs = np.stack([np.minimum(rows, cols), np.maximum(rows, cols)], axis=1)
    edges = np.unique(pairs, axis=0)
    rest = np.sqrt(d2[edges[:, 0], edges[:, 1]])
    bad = rest < DEGENERATE_EDGE_EPS
    if np.any(bad):
        listed = ", ".join(f"({int(i)},{int(j)})" for i, j in edges[bad][:8])
        raise ValueError(
            f"degenerate springs (rest length < {DEGENERATE_EDGE_EPS}) between "
            f"coincident anchors: {listed}"
        )
    return SpringTopology(edges=edges, rest_lengths=rest, neighbor_count=k_neighbors)


def build_binding(
    gaussian_centers,
    anchors,
    n_b: int = DEFAULT_BIND_COUNT,
    p_b: float = DEFAULT_BIND_FALLOFF,
) -> BindingTable:
    """Bind each Gaussian to its n_b nearest anchors at rest.

    Entries per Gaussian are sorted by ascending initial distance (ties by
    anchor index).
    """
    gaussian_centers = np.asarray(gaussian_centers, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    if n_b > anchors.shape[0]:
        raise ValueError(f"n_b={n_b} exceeds anchor count {anchors.shape[0]}")
    diff = gaussian_centers[:, None, :] - anchors[None, :, :]
    d2 = np.sum(diff**2, axis=2)
    order = np.argsort(d2, axis=1, kind="stable")[:, :n_b]
    rows = np.arange(gaussian_centers.shape[0])[:, None]
    dist = np.sqrt(d2[rows, order])
    return BindingTable(indices=order, rest_distances=dist, p_b=float(p_b), n_b=int(n_b))


def idw_weights(binding: BindingTable) -> np.ndarray:
    """Normalized IDW weights (N, n_b); rows with a sub-eps_r rest distance
    collapse onto their closest anchor (rigid follow)."""
    w = 1.0 / np.maximum(binding.rest_distances, binding.eps_r) ** binding.p_b
    rigid = np.any(binding.rest_distances < binding.eps_r, axis=1)
    if np.any(rigid):
        w = w.copy()
        nearest = np.argmin(binding.rest_distances[rigid], axis=1)
        w[rigid] = 0.0
        w[np.nonzero(rigid)[0], nearest] = 1.0
    return w / w.sum(axis=1, keepdims=True)


def interpolate_centers(
    binding: BindingTable,
    anchor_positions,
    rest_anchors=None,
    rest_centers=None,
    mode: str = "displacement",
) -> np.ndarray:
    """Carry anchor motion to Gaussian centers by IDW.

    mode="displacement" (default) applies the weighting to anchor
    displacements from rest and adds them to the rest centers, which keeps
    the rest pose exactly; mode="absolute" weights the anchor positions
    themselves.
    """
    anchor_positions = np.asarray(anchor_positions, dtype=np.float64)
    w = idw_weights(binding)
    if mode == "absolute":
        return np.einsum("gb,gbc->gc", w, anchor_positions[binding.indices])
    if mode != "displacement":
        raise ValueError(f"unknown interpolation mode {mode!r}")
    if rest_anchors is None or rest_centers is None:
        raise ValueError("displacement mode needs rest_anchors and rest_centers")
    rest_anchors = np.asarray(rest_anchors, dtype=np.float64)
    disp = anchor_positions - rest_anchors
    return np.asarray(rest_centers, dtype=np.float64) + np.einsum(
        "gb,gbc->gc", w, disp[binding.indices]
    )


def interpolation_adjoint(binding: BindingTable, d_centers, n_anchors: int) -> np.ndarray:
    """Pull a gradient on Gaussian centers back to anchor positions.

    The center map is affine in anchor positions with the IDW weights as
    coefficients (identically in both modes), so the adjoint is a weighted
    scatter.
    """
    d_centers = np.asarray(d_centers, dtype=np.float64)
    w = idw_weights(binding)
    out = np.zeros((n_anchors, 3))
    contrib = w[:, :, None] * d_centers[:, None, :]
    np.add.at(out, binding.indices.reshape(-1), contrib.reshape(-1, 3))
    return out
