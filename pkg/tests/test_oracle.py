import sys
import textwrap

import numpy as np
import pytest

from pertattr.errors import CapabilityError, ExternalToolError, ParameterError
from pertattr.imgcore import BoundingBox
from pertattr.oracle import (
    ClassifierOracle,
    FiniteDiffGradients,
    RegionMeanOracle,
    ScoreServerOracle,
    UniformOracle,
    finite_diff_gradient,
)


class LinearOracle(ClassifierOracle):
    """score(class 1) = clamp(w . x, 0, 1); linear inside the unit interval."""

    num_classes = 2
    has_gradients = True

    def __init__(self, w):
        self.w = np.asarray(w, dtype=np.float64)

    def score_all(self, x):
        p = float(np.clip((self.w * np.asarray(x)).sum(), 0.0, 1.0))
        return np.array([1.0 - p, p])

    def input_gradient(self, x, class_id):
        self._check_class(class_id)
        return self.w if class_id == 1 else -self.w


class TestUniformOracle:
    def test_equal_scores(self):
        oracle = UniformOracle(5)
        probs = oracle.score_all(np.zeros((4, 4, 3)))
        assert np.allclose(probs, 0.2)
        assert abs(probs.sum() - 1.0) < 1e-6

    def test_zero_gradient(self):
        oracle = UniformOracle(3)
        g = oracle.input_gradient(np.ones((4, 4, 3)), 1)
        assert np.array_equal(g, np.zeros((4, 4, 3)))

    def test_class_range_checked(self):
        with pytest.raises(ParameterError):
            UniformOracle(2).score(np.zeros((4, 4, 3)), 2)


class TestRegionMeanOracle:
    def test_half_constant_image_scores_half(self):
        oracle = RegionMeanOracle(BoundingBox(1, 1, 3, 3))
        probs = oracle.score_all(np.full((6, 6, 3), 0.5))
        assert np.allclose(probs, [0.5, 0.5])

    def test_gradient_uniform_inside_zero_outside(self, rng):
        box = BoundingBox(2, 1, 4, 3)
        oracle = RegionMeanOracle(box)
        x = rng.random((6, 6, 3))
        g = oracle.input_gradient(x, 1)
        area = 3 * 3 * 3
        inside = g[1:4, 2:5, :]
        assert np.allclose(inside, 1.0 / area)
        g2 = g.copy()
        g2[1:4, 2:5, :] = 0.0
        assert np.array_equal(g2, np.zeros_like(g2))

    def test_gradient_matches_finite_differences(self, rng):
        oracle = RegionMeanOracle(BoundingBox(0, 0, 2, 2))
        x = rng.uniform(0.2, 0.8, (4, 4, 3))
        analytic = oracle.input_gradient(x, 1)
        numeric = finite_diff_gradient(oracle, x, 1, h=1e-5)
        assert np.abs(analytic - numeric).max() < 1e-9

    def test_score_sums_to_one(self, rng):
        oracle = RegionMeanOracle(BoundingBox(0, 0, 3, 3))
        for _ in range(5):
            probs = oracle.score_all(rng.random((5, 5, 3)))
            assert abs(probs.sum() - 1.0) < 1e-6
            assert probs.min() >= 0.0 and probs.max() <= 1.0


class TestFiniteDifferences:
    def test_linear_model_recovered_exactly(self, rng):
        w = rng.normal(scale=0.01, size=(3, 3, 3))
        oracle = LinearOracle(w)
        x = np.full((3, 3, 3), 0.5)
        g = finite_diff_gradient(oracle, x, 1, h=1e-4)
        assert np.abs(g - w).max() < 1e-9  # exact up to O(h^2) curvature = 0

    def test_default_step_positive(self, rng):
        with pytest.raises(ParameterError):
            finite_diff_gradient(UniformOracle(2), rng.random((2, 2, 3)), 0, h=0.0)

    def test_wrapper_adds_capability_with_warning(self, rng):
        class ScoresOnly(ClassifierOracle):
            num_classes = 2

            def score_all(self, x):
                p = float(np.clip(np.asarray(x).mean(), 0, 1))
                return np.array([1 - p, p])

        base = ScoresOnly()
        with pytest.raises(CapabilityError):
            base.input_gradient(np.zeros((2, 2, 3)), 1)
        with pytest.warns(UserWarning):
            wrapped = FiniteDiffGradients(base)
        assert wrapped.has_gradients
        g = wrapped.input_gradient(np.full((2, 2, 3), 0.5), 1)
        assert np.allclose(g, 1.0 / 12.0, atol=1e-6)


SERVER = textwrap.dedent(
    """
    import sys
    for line in sys.stdin:
        path = line.strip()
        if not path:
            break
        print("0.25 0.75", flush=True)
    """
)


class TestScoreServer:
    def test_protocol_round_trip(self, tmp_path, rng):
        script = tmp_path / "server.py"
        script.write_text(SERVER)
        with ScoreServerOracle([sys.executable, str(script)], num_classes=2) as oracle:
            probs = oracle.score_all(rng.random((4, 4, 3)))
            assert np.allclose(probs, [0.25, 0.75])
            assert oracle.score(rng.random((4, 4, 3)), 1) == 0.75

    def test_wrong_arity_rejected(self, tmp_path, rng):
        script = tmp_path / "server.py"
        script.write_text(SERVER)
        with ScoreServerOracle([sys.executable, str(script)], num_classes=3) as oracle:
            with pytest.raises(ExternalToolError):
                oracle.score_all(rng.random((4, 4, 3)))

    def test_missing_command(self):
        with pytest.raises(ExternalToolError):
            ScoreServerOracle(["/nonexistent/binary"], num_classes=2)
