import itertools
import json
from pathlib import Path

import numpy as np
import pytest

from elastica.core import PhysicalAttributes
from elastica.metrics import chamfer, emd, parameter_mae, psnr, ssim

FIXTURES = json.loads(
    (Path(__file__).parent / "fixtures" / "metric_fixtures.json").read_text()
)


class TestPsnr:
    def test_identical_images_cap_at_99(self):
        img = np.random.default_rng(0).uniform(0, 1, (12, 12, 3))
        assert psnr(img, img) == 99.0

    def test_closed_form_20db(self):
        # MSE 0.01 -> 20 dB
        a = np.zeros((10, 10, 3))
        b = np.full((10, 10, 3), 0.1)
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(0, 1, (8, 8, 3))
        b = rng.uniform(0, 1, (8, 8, 3))
        assert psnr(a, b) == psnr(b, a)

    def test_fixture_values(self):
        for pair in FIXTURES["psnr_pairs"]:
            got = psnr(np.array(pair["a"]), np.array(pair["b"]))
            assert got == pytest.approx(pair["psnr"], abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4, 3)), np.zeros((5, 4, 3)))


class TestSsim:
    def test_identical_is_one(self):
        img = np.random.default_rng(2).uniform(0, 1, (16, 16))
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)

    def test_reference_fixture_values(self):
        # frozen from an independent reference implementation
        for pair in FIXTURES["ssim_pairs"]:
            got = ssim(np.array(pair["a"]), np.array(pair["b"]))
            assert got == pytest.approx(pair["ssim"], abs=1e-6)

    def test_negative_structural_term_for_inverted_pattern(self):
        yy, xx = np.mgrid[0:16, 0:16]
        patt = 0.5 + 0.4 * np.sin(xx / 2.0) * np.cos(yy / 3.0)
        assert ssim(patt, 1.0 - patt) < 0.0

    def test_constant_images_luminance_term_only(self):
        # structure/contrast terms are 1 for constants: S = (2ab+C1)/(a^2+b^2+C1)
        a, b = 0.4, 0.5
        expected = (2 * a * b + 0.01**2) / (a * a + b * b + 0.01**2)
        got = ssim(np.full((16, 16), a), np.full((16, 16), b))
        assert got == pytest.approx(expected, abs=1e-12)

    def test_too_small_image_rejected(self):
        with pytest.raises(ValueError, match="11"):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))

    def test_live_agreement_with_skimage(self):
        skimage = pytest.importorskip("skimage.metrics")
        rng = np.random.default_rng(77)
        a = rng.uniform(0, 1, (24, 24))
        b = np.clip(a + rng.normal(0, 0.2, (24, 24)), 0, 1)
        ref = skimage.structural_similarity(
            a, b, win_size=11, gaussian_weights=True, sigma=1.5,
            use_sample_covariance=False, data_range=1.0,
        )
        assert ssim(a, b) == pytest.approx(ref, abs=1e-10)


class TestChamfer:
    def test_identical_sets_zero(self):
        pts = np.random.default_rng(3).normal(size=(20, 3))
        assert chamfer(pts, pts) == 0.0

    def test_hand_value_two_points(self):
        assert chamfer(np.array([[0.0, 0, 0]]), np.array([[1.0, 0, 0]])) == pytest.approx(2.0)

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(9, 3))
        b = rng.normal(size=(14, 3))
        assert chamfer(a, b) == chamfer(b, a)

    def test_fixture_values(self):
        for pair in FIXTURES["chamfer_pairs"]:
            got = chamfer(np.array(pair["a"]), np.array(pair["b"]))
            assert got == pytest.approx(pair["cd"], abs=1e-6)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            chamfer(np.zeros((0, 3)), np.zeros((3, 3)))


def brute_force_emd(a, b):
    n = a.shape[0]
    best = np.inf
    for perm in itertools.permutations(range(n)):
        cost = np.mean(np.linalg.norm(a - b[list(perm)], axis=1))
        best = min(best, cost)
    return best


class TestEmd:
    def test_identical_sets_zero(self):
        pts = np.random.default_rng(5).normal(size=(10, 3))
        assert emd(pts, pts) == 0.0

    def test_permutation_invariance(self):
        pts = np.random.default_rng(6).normal(size=(8, 3))
        shuffled = pts[::-1].copy()
        assert emd(pts, shuffled) == pytest.approx(0.0, abs=1e-12)

    def test_matches_brute_force_n5(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            a = rng.normal(size=(5, 3))
            b = rng.normal(size=(5, 3))
            assert emd(a, b) == pytest.approx(brute_force_emd(a, b), rel=1e-12)

    def test_unequal_sizes_rejected(self):
        with pytest.raises(ValueError):
            emd(np.zeros((3, 3)), np.zeros((4, 3)))

    def test_sinkhorn_path_close_to_hungarian(self):
        # force the approximate path by exceeding the exact-size limit
        rng = np.random.default_rng(8)
        a = rng.normal(size=(300, 3))
        shift = a + np.array([0.05, 0.0, 0.0])
        approx = emd(a, shift)
        # optimal assignment is the identity: mean distance 0.05
        assert approx == pytest.approx(0.05, rel=0.05)

    def test_size_limit_enforced(self):
        with pytest.raises(ValueError, match="1024"):
            emd(np.zeros((1100, 3)), np.zeros((1100, 3)))


class TestParameterMae:
    def test_exact_match_is_zero(self):
        p = PhysicalAttributes(2.0, 500.0, 1.0, 0.5)
        out = parameter_mae(p, p)
        assert all(v == 0.0 for v in out.values())

    def test_stiffness_hand_value(self):
        pred = PhysicalAttributes(1.0, 100.0, 1.0, 0.5)
        truth = PhysicalAttributes(1.0, 400.0, 1.0, 0.5)
        assert parameter_mae(pred, truth)["k"] == 300.0

    def test_nonnegative(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            pred = PhysicalAttributes(*rng.uniform(0.3, 5, 4))
            truth = PhysicalAttributes(*rng.uniform(0.3, 5, 4))
            assert all(v >= 0 for v in parameter_mae(pred, truth).values())

    def test_ratio_keys(self):
        pred = PhysicalAttributes(2.0, 200.0, 2.0, 0.0)
        truth = PhysicalAttributes(1.0, 100.0, 1.0, 0.0)
        out = parameter_mae(pred, truth, which=("k/m", "d/m"))
        assert out["k/m"] == 0.0
        assert out["d/m"] == 0.0
