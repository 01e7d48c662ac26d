import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_bundle, random_cluster_bundle
from elastica.core import PhysicalAttributes, SceneBundle, SpringMassState
from elastica.identify import (
    MlpModel,
    ParameterRanges,
    extract_descriptor,
    identify_scene,
    init_model,
    predict,
    squash,
    squash_jacobian,
    train_predictor,
    unsquash,
)
from elastica.simulator import rollout_positions


class TestSquash:
    def test_midpoint_at_raw_zero(self):
        attrs = squash(np.zeros(4))
        assert attrs.mass == pytest.approx(3.1)  # 0.2 + 5.8 * 0.5
        assert attrs.stiffness == pytest.approx(605.0)
        assert attrs.damping == pytest.approx(2.55)
        assert attrs.friction == pytest.approx(0.5)

    def test_large_raw_saturates_to_max(self):
        attrs = squash(np.full(4, 50.0))
        ranges = ParameterRanges()
        np.testing.assert_allclose(attrs.as_vector(), ranges.highs(), atol=1e-10)

    @given(st.lists(st.floats(-1e6, 1e6), min_size=4, max_size=4))
    @settings(max_examples=200, deadline=None)
    def test_output_always_in_ranges(self, raw):
        attrs = squash(np.array(raw))
        assert ParameterRanges().contains(attrs)

    def test_unsquash_inverts(self):
        attrs = PhysicalAttributes(1.7, 333.0, 2.2, 0.41)
        back = squash(unsquash(attrs))
        np.testing.assert_allclose(back.as_vector(), attrs.as_vector(), rtol=1e-9)

    def test_jacobian_matches_fd(self):
        raw = np.array([0.3, -1.2, 0.7, 2.0])
        jac = squash_jacobian(raw)
        h = 1e-6
        fd = (squash(raw + h).as_vector() - squash(raw - h).as_vector()) / (2 * h)
        np.testing.assert_allclose(jac, fd, rtol=1e-6)


class TestDescriptor:
    def test_static_trajectory_has_zero_speed_features(self):
        traj = np.tile(np.random.default_rng(0).normal(size=(5, 3)), (20, 1, 1))
        desc = extract_descriptor(traj).reshape(20, 8)
        np.testing.assert_array_equal(desc[:, 6], np.zeros(20))  # mean speed
        np.testing.assert_array_equal(desc[:, 7], np.zeros(20))  # vertical KE

    def test_horizontal_translation_changes_only_centroid(self):
        rng = np.random.default_rng(1)
        traj = rng.normal(size=(20, 6, 3))
        moved = traj + np.array([1.5, 0.0, -2.0])
        a = extract_descriptor(traj).reshape(20, 8)
        b = extract_descriptor(moved).reshape(20, 8)
        np.testing.assert_allclose(a[:, 3:], b[:, 3:], rtol=1e-9)  # extents + speeds
        assert not np.allclose(a[:, 0], b[:, 0])

    def test_free_fall_centroid_matches_kinematics(self):
        # no springs: centroid follows the integrator's closed-form drop
        b = make_bundle(
            np.array([[0.0, 5.0, 0.0], [20.0, 5.0, 0.0], [40.0, 5.0, 0.0], [60.0, 5.0, 0.0]]),
            k_neighbors=1,
            attrs=PhysicalAttributes(1.0, 0.0, 0.0, 0.0),
        )
        frames = np.concatenate(
            [
                b.anchors.positions[None],
                rollout_positions(b.anchors, b.topology, b.attributes, b.config, 19),
            ],
            axis=0,
        )
        desc = extract_descriptor(frames).reshape(20, 8)
        g, dt, sub = 9.8, b.config.dt, b.config.substeps_per_frame
        for t in range(20):
            s = t * sub
            y = 5.0 - g * dt * dt * (s * (s + 1) / 2)
            assert desc[t, 1] == pytest.approx(y, abs=1e-9)
        # and the continuous-time law within integrator error
        t_end = 19 / b.config.frame_rate
        assert desc[19, 1] == pytest.approx(5.0 - 0.5 * g * t_end**2, abs=g * t_end * dt)

    def test_frame_count_mismatch_rejected(self):
        with pytest.raises(ValueError, match="20"):
            extract_descriptor(np.zeros((19, 4, 3)))


def _trajectory_bundle(seed, frames=20, **kw):
    b = random_cluster_bundle(seed, **kw)
    traj = np.concatenate(
        [
            b.anchors.positions[None],
            rollout_positions(b.anchors, b.topology, b.attributes, b.config, frames - 1),
        ],
        axis=0,
    )
    return SceneBundle(
        object_id=b.object_id,
        gaussians=b.gaussians,
        anchors=b.anchors,
        topology=b.topology,
        binding=b.binding,
        attributes=b.attributes,
        config=b.config,
        trajectory=traj,
    )


class TestIdentifyScene:
    def test_self_consistent_recovery_contact_free(self):
        b = random_cluster_bundle(31, n=6, height=2.0, k=400.0, d=2.0, m=2.0)
        truth = b.attributes
        obs = np.concatenate(
            [
                b.anchors.positions[None],
                rollout_positions(b.anchors, b.topology, truth, b.config, 19),
            ],
            axis=0,
        )
        est, curve = identify_scene(b, obs, iters=300)
        assert min(curve) < 1e-6
        assert est.stiffness / est.mass == pytest.approx(truth.stiffness / truth.mass, rel=0.05)

    def test_observed_at_initialization_is_fixed_point(self):
        b = random_cluster_bundle(32, n=6, height=2.0)
        mid = squash(np.zeros(4))
        obs = np.concatenate(
            [
                b.anchors.positions[None],
                rollout_positions(b.anchors, b.topology, mid, b.config, 9),
            ],
            axis=0,
        )
        est, curve = identify_scene(b, obs, iters=40, curriculum=False)
        assert curve[0] == 0.0
        np.testing.assert_allclose(est.as_vector(), mid.as_vector(), rtol=1e-12)

    def test_friction_stays_near_init_without_contact(self):
        b = random_cluster_bundle(33, n=6, height=3.0)
        truth = PhysicalAttributes(1.5, 250.0, 1.2, 0.9)
        obs = np.concatenate(
            [
                b.anchors.positions[None],
                rollout_positions(b.anchors, b.topology, truth, b.config, 14),
            ],
            axis=0,
        )
        est, _ = identify_scene(b, obs, iters=120, curriculum=False)
        # friction is unidentifiable airborne; it must stay near the 0.5 init
        assert abs(est.friction - 0.5) < 0.05

    def test_too_few_frames_rejected(self):
        b = random_cluster_bundle(34)
        with pytest.raises(ValueError, match="2 frames"):
            identify_scene(b, b.anchors.positions[None], iters=5)

    def test_estimates_always_inside_ranges(self):
        b = random_cluster_bundle(35, n=6, height=0.3)
        obs = np.concatenate(
            [
                b.anchors.positions[None],
                rollout_positions(b.anchors, b.topology, b.attributes, b.config, 12),
            ],
            axis=0,
        )
        est, _ = identify_scene(b, obs, iters=60, curriculum=False)
        assert ParameterRanges().contains(est)


class TestTrainPredictor:
    def test_zero_epochs_returns_seeded_initialization(self):
        ds = [_trajectory_bundle(41, n=6)]
        model, history = train_predictor(ds, epochs=0, seed=7)
        ref = init_model(model.sizes[0], (128, 64), seed=7)
        assert history == []
        for w, rw in zip(model.weights, ref.weights):
            np.testing.assert_array_equal(w, rw)
        for b_, rb in zip(model.biases, ref.biases):
            np.testing.assert_array_equal(b_, rb)

    def test_single_sample_memorization(self):
        ds = [_trajectory_bundle(42, n=8, height=1.0, k=300.0, d=1.0, m=1.0)]
        model, history = train_predictor(ds, epochs=250, batch_size=1, seed=0)
        assert history[-1] < 1e-4
        assert all(np.isfinite(history))

    def test_deterministic_given_seed(self):
        ds = [_trajectory_bundle(s, n=6) for s in (43, 44)]
        m1, h1 = train_predictor(ds, epochs=3, seed=5)
        m2, h2 = train_predictor(ds, epochs=3, seed=5)
        assert h1 == h2
        for w1, w2 in zip(m1.weights, m2.weights):
            np.testing.assert_array_equal(w1, w2)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="nonempty"):
            train_predictor([], epochs=1)

    def test_missing_observation_window_rejected(self):
        b = random_cluster_bundle(45)
        with pytest.raises(ValueError, match="observation"):
            train_predictor([b], epochs=1)


class TestPredict:
    def test_output_in_ranges_and_deterministic(self):
        ds = [_trajectory_bundle(51, n=6)]
        model, _ = train_predictor(ds, epochs=2, seed=0)
        obs = ds[0].trajectory[:20]
        a = predict(model, obs)
        b = predict(model, obs)
        assert ParameterRanges().contains(a)
        np.testing.assert_array_equal(a.as_vector(), b.as_vector())

    def test_model_json_roundtrip(self, tmp_path):
        model = init_model(seed=3)
        p = tmp_path / "model.json"
        model.save(p)
        again = MlpModel.load(p)
        assert again.sizes == model.sizes
        for w1, w2 in zip(model.weights, again.weights):
            np.testing.assert_array_equal(w1, w2)
        np.testing.assert_array_equal(model.feature_mean, again.feature_mean)

    def test_descriptor_size_mismatch_rejected(self):
        model = init_model(seed=0)
        with pytest.raises(ValueError, match="trajectory|descriptor"):
            predict(model, np.zeros((10, 4, 3)))
