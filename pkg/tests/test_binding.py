import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elastica.binding import (
    AnchorCapacityError,
    build_binding,
    build_topology,
    idw_weights,
    interpolate_centers,
    interpolation_adjoint,
    object_seed,
    sample_anchors,
)


class TestObjectSeed:
    def test_known_fnv1a_vector(self):
        assert object_seed("a") == 0xAF63DC4C8601EC8C

    def test_empty_id_rejected(self):
        with pytest.raises(ValueError):
            object_seed("")

    def test_deterministic(self):
        assert object_seed("torus-007") == object_seed("torus-007")

    def test_distinct_ids_differ(self):
        assert object_seed("a") != object_seed("b")


class TestSampleAnchors:
    def test_cube_corners_contained_in_dilated_occupancy(self):
        corners = np.array(
            [[x, y, z] for x in (0, 1.0) for y in (0, 1.0) for z in (0, 1.0)]
        )
        anchors = sample_anchors(corners, 8, seed=123, grid_resolution=4)
        assert anchors.shape == (8, 3)
        # dilation adds at most two voxels (0.25 each at res 4) beyond the box
        assert np.all(anchors >= -0.5 - 1e-9)
        assert np.all(anchors <= 1.5 + 1e-9)

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(0)
        cloud = rng.normal(size=(300, 3))
        a = sample_anchors(cloud, 32, seed=99)
        b = sample_anchors(cloud, 32, seed=99)
        np.testing.assert_array_equal(a, b)

    def test_seed_changes_output(self):
        rng = np.random.default_rng(0)
        cloud = rng.normal(size=(300, 3))
        a = sample_anchors(cloud, 32, seed=1)
        b = sample_anchors(cloud, 32, seed=2)
        assert not np.array_equal(a, b)

    def test_solid_sphere_has_interior_anchors(self):
        # volume sampling must place anchors inside, not only on the shell
        rng = np.random.default_rng(7)
        d = rng.normal(size=(4000, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = 0.5 * rng.uniform(0, 1, 4000) ** (1 / 3)
        cloud = d * r[:, None]
        anchors = sample_anchors(cloud, 128, seed=object_seed("sphere-x"))
        voxel = 1.0 / 32  # bbox extent ~1.0 at resolution 32
        radii = np.linalg.norm(anchors, axis=1)
        interior = np.sum(radii < 0.5 - voxel)
        assert interior >= 0.2 * 128

    def test_capacity_error_when_too_few_voxels(self):
        cloud = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
        with pytest.raises(AnchorCapacityError, match="coarser"):
            sample_anchors(cloud, 4000, seed=1, grid_resolution=8)


class TestBuildTopology:
    def test_collinear_three_points_k1(self):
        anchors = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
        topo = build_topology(anchors, 1)
        np.testing.assert_array_equal(topo.edges, [[0, 1], [1, 2]])
        np.testing.assert_allclose(topo.rest_lengths, [1.0, 1.0])

    def test_complete_graph_when_k_is_n_minus_1(self):
        rng = np.random.default_rng(3)
        anchors = rng.normal(size=(7, 3))
        topo = build_topology(anchors, 6)
        assert topo.n_edges == 21  # C(7,2)

    def test_asymmetric_neighbor_still_yields_single_edge(self):
        # point 2 is far: 2's nearest is 1, but 1's nearest is 0.
        anchors = np.array([[0.0, 0, 0], [1.0, 0, 0], [3.5, 0, 0]])
        topo = build_topology(anchors, 1)
        assert [1, 2] in topo.edges.tolist()
        assert topo.edges.tolist().count([1, 2]) == 1

    def test_brute_force_oracle_agreement(self):
        rng = np.random.default_rng(11)
        anchors = rng.normal(size=(20, 3))
        k = 4
        topo = build_topology(anchors, k)
        expected = set()
        for i in range(20):
            d = np.linalg.norm(anchors - anchors[i], axis=1)
            d[i] = np.inf
            for j in np.argsort(d, kind="stable")[:k]:
                expected.add((min(i, int(j)), max(i, int(j))))
        assert set(map(tuple, topo.edges.tolist())) == expected

    def test_duplicate_anchor_positions_rejected(self):
        anchors = np.array([[0.0, 0, 0], [0.0, 0, 0], [1.0, 0, 0]])
        with pytest.raises(ValueError, match="degenerate"):
            build_topology(anchors, 1)

    def test_k_must_be_less_than_n(self):
        with pytest.raises(ValueError):
            build_topology(np.zeros((3, 3)) + np.arange(3)[:, None], 3)


class TestBuildBinding:
    def test_coincident_anchor_is_first_with_zero_distance(self):
        anchors = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
        binding = build_binding(np.array([[1.0, 0, 0]]), anchors, n_b=2)
        assert binding.indices[0, 0] == 1
        assert binding.rest_distances[0, 0] == 0.0

    def test_single_bind_uses_nearest(self):
        anchors = np.array([[0.0, 0, 0], [1.0, 0, 0]])
        binding = build_binding(np.array([[0.2, 0, 0], [0.9, 0, 0]]), anchors, n_b=1)
        assert binding.indices[:, 0].tolist() == [0, 1]

    def test_midpoint_gets_equal_distances(self):
        anchors = np.array([[0.0, 0, 0], [2.0, 0, 0]])
        binding = build_binding(np.array([[1.0, 0, 0]]), anchors, n_b=2)
        assert binding.rest_distances[0, 0] == binding.rest_distances[0, 1] == 1.0


class TestInterpolation:
    def test_idw_hand_value_absolute_mode(self):
        # r = (1, 2), p_b = 2, anchors at scalar positions 0 and 3 -> 0.6
        anchors = np.array([[0.0, 0, 0], [3.0, 0, 0]])
        binding = build_binding(np.array([[1.0, 0, 0]]), anchors, n_b=2)
        np.testing.assert_allclose(binding.rest_distances[0], [1.0, 2.0])
        out = interpolate_centers(binding, anchors, mode="absolute")
        np.testing.assert_allclose(out[0], [0.6, 0.0, 0.0], atol=1e-12)

    def test_translation_moves_centers_exactly(self):
        rng = np.random.default_rng(5)
        anchors = rng.normal(size=(10, 3))
        centers = rng.normal(size=(6, 3)) * 0.5
        binding = build_binding(centers, anchors, n_b=4)
        delta = np.array([0.3, -1.2, 0.7])
        moved = interpolate_centers(
            binding, anchors + delta, rest_anchors=anchors, rest_centers=centers
        )
        np.testing.assert_allclose(moved, centers + delta, atol=1e-12)

    def test_symmetric_anchors_cancel(self):
        anchors = np.array([[0.0, 0, 0], [2.0, 0, 0]])
        centers = np.array([[1.0, 0, 0]])
        binding = build_binding(centers, anchors, n_b=2)
        moved_anchors = np.array([[0.0, 1.0, 0], [2.0, -1.0, 0]])
        out = interpolate_centers(
            binding, moved_anchors, rest_anchors=anchors, rest_centers=centers
        )
        np.testing.assert_allclose(out[0], [1.0, 0.0, 0.0], atol=1e-12)

    def test_displacement_mode_reproduces_rest_pose_exactly(self):
        rng = np.random.default_rng(8)
        anchors = rng.normal(size=(12, 3))
        centers = rng.normal(size=(30, 3))
        binding = build_binding(centers, anchors, n_b=4)
        out = interpolate_centers(binding, anchors, rest_anchors=anchors, rest_centers=centers)
        np.testing.assert_array_equal(out, centers)

    def test_rigid_follow_when_rest_distance_below_floor(self):
        anchors = np.array([[1.0, 1.0, 1.0], [5.0, 0, 0]])
        centers = np.array([[1.0, 1.0, 1.0]])  # exactly on anchor 0
        binding = build_binding(centers, anchors, n_b=2)
        moved = anchors + np.array([[2.0, 0, 0], [0, 0, 0]])
        out = interpolate_centers(binding, moved, rest_anchors=anchors, rest_centers=centers)
        np.testing.assert_allclose(out[0], [3.0, 1.0, 1.0], atol=1e-12)

    @given(st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_partition_of_unity(self, seed):
        rng = np.random.default_rng(seed)
        anchors = rng.normal(size=(9, 3))
        centers = rng.normal(size=(5, 3))
        binding = build_binding(centers, anchors, n_b=4)
        w = idw_weights(binding)
        np.testing.assert_allclose(w.sum(axis=1), np.ones(5), atol=1e-12)

    def test_adjoint_matches_jacobian_transpose(self):
        rng = np.random.default_rng(9)
        anchors = rng.normal(size=(7, 3))
        centers = rng.normal(size=(4, 3))
        binding = build_binding(centers, anchors, n_b=3)
        d_centers = rng.normal(size=(4, 3))
        adj = interpolation_adjoint(binding, d_centers, 7)
        # directional check: <d_centers, J u> == <adj, u> for random u
        u = rng.normal(size=(7, 3))
        moved = interpolate_centers(
            binding, anchors + 1e-7 * u, rest_anchors=anchors, rest_centers=centers
        )
        base = interpolate_centers(binding, anchors, rest_anchors=anchors, rest_centers=centers)
        lhs = np.sum(d_centers * (moved - base) / 1e-7)
        rhs = np.sum(adj * u)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-6)

    def test_scaffold_determinism_from_id_and_centers(self):
        rng = np.random.default_rng(10)
        cloud = rng.normal(size=(200, 3))
        seed = object_seed("object-42")
        a1 = sample_anchors(cloud, 24, seed)
        a2 = sample_anchors(cloud, 24, seed)
        np.testing.assert_array_equal(a1, a2)
        t1, t2 = build_topology(a1, 4), build_topology(a2, 4)
        np.testing.assert_array_equal(t1.edges, t2.edges)
        np.testing.assert_array_equal(t1.rest_lengths, t2.rest_lengths)
        b1, b2 = build_binding(cloud, a1, 4), build_binding(cloud, a2, 4)
        np.testing.assert_array_equal(b1.indices, b2.indices)
        np.testing.assert_array_equal(b1.rest_distances, b2.rest_distances)
