import numpy as np
import pytest

from elastica.binding import build_binding, build_topology
from elastica.core import (
    GaussianSet,
    PhysicalAttributes,
    SceneBundle,
    SimConfig,
    SpringMassState,
)


def identity_rotations(n):
    return np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1))


def make_gaussians(centers, scale=0.05):
    centers = np.asarray(centers, dtype=np.float64)
    n = centers.shape[0]
    return GaussianSet(
        centers=centers,
        scales=np.full(n, scale),
        colors=np.full((n, 3), 0.6),
        opacities=np.full(n, 0.8),
        rotations=identity_rotations(n),
    )


def make_bundle(
    positions,
    velocities=None,
    k_neighbors=3,
    attrs=None,
    config=None,
    object_id="test-scene",
    trajectory=None,
):
    """Small hand-built bundle for unit tests: anchors double as Gaussians."""
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    if velocities is None:
        velocities = np.zeros((n, 3))
    topo = build_topology(positions, min(k_neighbors, n - 1))
    binding = build_binding(positions, positions, n_b=min(2, n))
    return SceneBundle(
        object_id=object_id,
        gaussians=make_gaussians(positions),
        anchors=SpringMassState(positions, velocities),
        topology=topo,
        binding=binding,
        attributes=attrs or PhysicalAttributes(1.0, 100.0, 0.5, 0.3),
        config=config or SimConfig(),
        trajectory=trajectory,
    )


@pytest.fixture
def spring_pair_bundle():
    """Two anchors, one spring, stretched 20% along x, far above ground."""
    pos = np.array([[0.0, 2.0, 0.0], [0.6, 2.0, 0.0]])
    bundle = make_bundle(pos, k_neighbors=1, attrs=PhysicalAttributes(1.0, 100.0, 0.5, 0.3))
    # stretch by replacing positions while keeping rest lengths from build
    stretched = np.array([[0.0, 2.0, 0.0], [0.72, 2.0, 0.0]])
    return SceneBundle(
        object_id=bundle.object_id,
        gaussians=bundle.gaussians,
        anchors=SpringMassState(stretched, np.zeros((2, 3))),
        topology=bundle.topology,
        binding=bundle.binding,
        attributes=bundle.attributes,
        config=SimConfig(gravity=np.zeros(3)),
    )


def random_cluster_bundle(seed, n=8, height=2.0, lateral_speed=0.0, k=200.0, d=1.0,
                          m=1.5, f=0.4, k_neighbors=3):
    rng = np.random.default_rng(seed)
    pos = rng.normal(size=(n, 3)) * 0.12 + np.array([0.0, height, 0.0])
    vel = np.tile([lateral_speed, 0.0, 0.0], (n, 1)) + rng.normal(size=(n, 3)) * 0.02
    return make_bundle(
        pos,
        velocities=vel,
        k_neighbors=k_neighbors,
        attrs=PhysicalAttributes(m, k, d, f),
        object_id=f"cluster-{seed}",
    )
