import numpy as np
import pytest

from pertattr.errors import MethodError, ParameterError
from pertattr.fillers import GrayFill, HarmonicInpaintFill
from pertattr.lime import (
    LimeConfig,
    draw_presence_vectors,
    dump_samples,
    fit_weighted_lasso,
    lime_attribute,
    lime_sample_batch,
)
from pertattr.oracle import ClassifierOracle, UniformOracle
from pertattr.superpixel import slic


class PresenceLinearOracle(ClassifierOracle):
    """Scores a0 + z . a_star by detecting which superpixels were kept.

    The test image contains no pixel equal to the gray filler color, so a
    superpixel is "kept" exactly when its pixels match the original image.
    This turns the image-space pipeline into a planted linear model on the
    presence vectors.
    """

    num_classes = 2

    def __init__(self, x, seg, a0, a_star):
        self.x = np.asarray(x)
        self.seg = seg
        self.a0 = float(a0)
        self.a_star = np.asarray(a_star, dtype=np.float64)

    def presence(self, xbar) -> np.ndarray:
        z = np.zeros(self.seg.num_segments)
        for k in range(self.seg.num_segments):
            member = self.seg.labels == k
            z[k] = 1.0 if np.array_equal(xbar[member], self.x[member]) else 0.0
        return z

    def score_all(self, xbar):
        p = self.a0 + float(self.presence(np.asarray(xbar)) @ self.a_star)
        return np.array([1.0 - p, p])


def weighted_least_squares(z, y, w):
    """Independent closed-form oracle: solve the weighted normal equations."""
    design = np.hstack([np.ones((z.shape[0], 1)), z])
    wd = design * w[:, None]
    theta = np.linalg.solve(design.T @ wd, wd.T @ y)
    return theta[0], theta[1:]


@pytest.fixture()
def planted(rng):
    x = rng.uniform(0.55, 1.0, (32, 32, 3))  # nowhere near the gray filler color
    seg = slic(x, n_segments=12)
    s = seg.num_segments
    a_star = rng.uniform(-0.02, 0.02, s)
    a0 = 0.5
    oracle = PresenceLinearOracle(x, seg, a0, a_star)
    return x, seg, oracle, a0, a_star


class TestFit:
    def test_recovers_planted_coefficients(self, planted):
        x, seg, oracle, a0, a_star = planted
        s = seg.num_segments
        cfg = LimeConfig(
            n_segments=12,
            n_samples=4 * s,
            lasso_lambda=0.0,
            fit_steps=1000,
            seed=11,
            filler=GrayFill(color=(0.25, 0.25, 0.25)),
            target_class=1,
        )
        result = lime_attribute(x, oracle, cfg)
        assert result.segmentation.num_segments == s
        assert np.abs(result.coef - a_star).max() < 1e-3
        assert abs(result.intercept - a0) < 1e-3

    def test_matches_weighted_normal_equations(self, planted, rng):
        x, seg, oracle, a0, a_star = planted
        s = seg.num_segments
        z = draw_presence_vectors(s, 4 * s, 0.5, seed=4).astype(np.float64)
        y = rng.normal(0.3, 0.05, size=4 * s)
        w = rng.uniform(0.5, 1.0, size=4 * s)
        fit_a0, fit_a, _ = fit_weighted_lasso(z, y, w, lam=0.0, steps=1000)
        exp_a0, exp_a = weighted_least_squares(z, y, w)
        assert abs(fit_a0 - exp_a0) < 1e-6
        assert np.abs(fit_a - exp_a).max() < 1e-6

    def test_constant_oracle_yields_zero_coefficients(self, rng):
        x = rng.random((24, 24, 3))
        cfg = LimeConfig(n_segments=6, n_samples=40, lasso_lambda=0.05, fit_steps=300, seed=0)
        result = lime_attribute(x, UniformOracle(2), cfg)
        assert np.array_equal(result.coef, np.zeros_like(result.coef))
        assert abs(result.intercept - 0.5) < 1e-12
        assert np.array_equal(result.map.data, np.zeros((24, 24)))

    def test_objective_non_increasing(self, rng):
        z = (rng.random((60, 10)) < 0.5).astype(float)
        z[0] = 1.0
        y = rng.random(60)
        w = rng.uniform(0.1, 1.0, 60)
        _, _, history = fit_weighted_lasso(z, y, w, lam=0.02, steps=200)
        diffs = np.diff(np.array(history))
        assert diffs.max() <= 1e-9

    def test_degenerate_design_rejected(self):
        z = np.ones((10, 4))
        with pytest.raises(MethodError):
            fit_weighted_lasso(z, np.ones(10), np.ones(10), 0.0, 10)


class TestSampling:
    def test_same_seed_identical_batch(self, rng):
        x = rng.random((24, 24, 3))
        seg = slic(x, 6)
        cfg = LimeConfig(n_segments=6, n_samples=12, seed=9)
        a = lime_sample_batch(x, seg, cfg, seed=9)
        b = lime_sample_batch(x, seg, cfg, seed=9)
        assert len(a) == len(b) == 12
        for sa, sb in zip(a, b):
            assert np.array_equal(sa.z, sb.z)
            assert np.array_equal(sa.image, sb.image)
            assert sa.weight == sb.weight

    def test_first_sample_keeps_everything(self, rng):
        x = rng.random((24, 24, 3))
        seg = slic(x, 6)
        batch = lime_sample_batch(x, seg, LimeConfig(n_segments=6, n_samples=5), seed=0)
        assert batch[0].z.all()
        assert np.array_equal(batch[0].image, x)
        assert batch[0].weight == 1.0

    def test_kept_fraction_matches_occlusion_probability(self):
        z = draw_presence_vectors(20, 5000, occlusion_prob=0.5, seed=0)
        kept = z[1:].mean()  # skip the forced all-ones sample
        assert abs(kept - 0.5) < 0.01

    def test_scores_filled_when_oracle_given(self, rng):
        x = rng.random((24, 24, 3))
        seg = slic(x, 6)
        batch = lime_sample_batch(
            x, seg, LimeConfig(n_segments=6, n_samples=4), seed=1, oracle=UniformOracle(2)
        )
        assert all(s.score == 0.5 for s in batch)

    def test_dump_samples(self, tmp_path, rng):
        x = rng.random((16, 16, 3))
        seg = slic(x, 4)
        batch = lime_sample_batch(x, seg, LimeConfig(n_segments=4, n_samples=3), seed=0)
        dump_samples(batch, tmp_path)
        assert (tmp_path / "samples.csv").exists()
        assert len(list(tmp_path.glob("sample_*.png"))) == 3


class TestMapStructure:
    def test_map_piecewise_constant_on_superpixels(self, planted):
        x, seg, oracle, _, _ = planted
        cfg = LimeConfig(
            n_segments=12,
            n_samples=60,
            lasso_lambda=0.001,
            fit_steps=200,
            seed=3,
            filler=GrayFill(color=(0.25, 0.25, 0.25)),
            target_class=1,
        )
        result = lime_attribute(x, oracle, cfg)
        for k in range(result.segmentation.num_segments):
            values = result.map.data[result.segmentation.labels == k]
            assert np.unique(values).size == 1
            assert values[0] == result.coef[k]

    def test_filler_is_the_only_difference(self, rng):
        # same filler + seed => bit-identical maps through both entry points
        x = rng.uniform(0.3, 0.9, (24, 24, 3))

        class MeanOracle(ClassifierOracle):
            num_classes = 2

            def score_all(self, xbar):
                p = float(np.clip(np.asarray(xbar).mean(), 0, 1))
                return np.array([1 - p, p])

        # keep probability 0.65 with 12 superpixels: an all-occluded draw
        # (which a boundary-based inpainter cannot fill) has p ~ 3e-6
        cfg = LimeConfig(
            n_segments=12, n_samples=30, seed=5, occlusion_prob=0.35,
            filler=GrayFill(), target_class=1,
        )
        a = lime_attribute(x, MeanOracle(), cfg)
        b = lime_attribute(x, MeanOracle(), cfg)
        assert np.array_equal(a.map.data, b.map.data)
        # and an inpainting filler actually changes the samples
        cfg_g = LimeConfig(
            n_segments=12, n_samples=30, seed=5, occlusion_prob=0.35,
            filler=HarmonicInpaintFill(), target_class=1,
        )
        c = lime_attribute(x, MeanOracle(), cfg_g)
        assert not np.array_equal(a.map.data, c.map.data)

    def test_config_validation(self):
        with pytest.raises(ParameterError):
            LimeConfig(n_samples=0)
        with pytest.raises(ParameterError):
            LimeConfig(kernel_width=0.0)
        with pytest.raises(ParameterError):
            LimeConfig(lasso_lambda=-0.1)
