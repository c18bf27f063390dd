import sys
import textwrap

import numpy as np
import pytest

from pertattr.errors import ExternalToolError, ParameterError
from pertattr.fillers import (
    CachingFill,
    BlurFill,
    ExternalInpaintFill,
    GrayFill,
    HarmonicInpaintFill,
    NoiseFill,
    counter_noise,
    make_filler,
)
from pertattr.imgcore import composite, gaussian_blur

COPY_TOOL = textwrap.dedent(
    """
    import shutil, sys
    shutil.copyfile(sys.argv[1], sys.argv[3])
    """
)

GRAY_TOOL = textwrap.dedent(
    """
    import sys
    import numpy as np
    from PIL import Image
    with Image.open(sys.argv[1]) as im:
        w, h = im.size
    color = np.zeros((h, w, 3), dtype=np.uint8)
    color[:] = (124, 116, 104)
    Image.fromarray(color, mode="RGB").save(sys.argv[3])
    """
)

FAIL_TOOL = "import sys; sys.exit(9)"

NO_OUTPUT_TOOL = "pass"


def random_binary_mask(rng, h, w, p=0.3):
    m = (rng.random((h, w)) < p).astype(float)
    if m.sum() == 0:
        m[h // 2, w // 2] = 1.0
    if m.sum() == m.size:
        m[0, 0] = 0.0
    return m


class TestGray:
    def test_default_is_dataset_mean(self):
        f = GrayFill().fill(np.zeros((4, 4, 3)), np.zeros((4, 4)))
        assert np.allclose(f[0, 0], (0.485, 0.456, 0.406))

    def test_full_mask_composites_to_constant(self, rng):
        x = rng.random((4, 4, 3))
        out = composite(x, np.ones((4, 4)), GrayFill().fill(x, np.ones((4, 4))))
        assert np.allclose(out, np.broadcast_to((0.485, 0.456, 0.406), (4, 4, 3)))

    def test_zero_mask_composites_to_original(self, rng):
        x = rng.random((4, 4, 3))
        out = composite(x, np.zeros((4, 4)), GrayFill().fill(x, np.zeros((4, 4))))
        assert np.array_equal(out, x)

    def test_color_validated(self):
        with pytest.raises(ParameterError):
            GrayFill(color=(1.5, 0.0, 0.0))


class TestNoise:
    def test_seed_determinism(self, rng):
        x = rng.random((6, 6, 3))
        a = NoiseFill(7).fill(x, np.zeros((6, 6)))
        b = NoiseFill(7).fill(x, np.zeros((6, 6)))
        assert np.array_equal(a, b)

    def test_seeds_differ(self, rng):
        x = rng.random((6, 6, 3))
        a = NoiseFill(1).fill(x, np.zeros((6, 6)))
        b = NoiseFill(2).fill(x, np.zeros((6, 6)))
        assert not np.array_equal(a, b)

    def test_large_sample_mean(self):
        values = counter_noise(123, (1000, 1000))
        assert 0.499 <= values.mean() <= 0.501

    def test_known_reference_values(self):
        # splitmix-style mix of (seed, flat index), top 24 bits -> [0, 1)
        vals = counter_noise(0, (4,))
        assert vals.min() >= 0.0 and vals.max() < 1.0
        assert np.array_equal(vals, counter_noise(0, (4,)))

    def test_order_independence(self):
        # the value at a flat index does not depend on the array shape
        flat = counter_noise(5, (24,))
        shaped = counter_noise(5, (2, 4, 3))
        assert np.array_equal(flat.reshape(2, 4, 3), shaped)


class TestBlurFill:
    def test_delegates_to_gaussian_blur(self, rng):
        x = rng.random((10, 10, 3))
        assert np.array_equal(BlurFill(2.0).fill(x, np.zeros((10, 10))), gaussian_blur(x, 2.0))

    def test_constant_fixed_point(self):
        x = np.full((8, 8, 3), 0.7)
        assert np.allclose(BlurFill(10.0).fill(x, np.zeros((8, 8))), 0.7, atol=1e-12)

    def test_sigma_validated(self):
        with pytest.raises(ParameterError):
            BlurFill(0.0)


class TestHarmonicInpaint:
    def test_constant_image_fixed_point(self, rng):
        x = np.full((8, 8, 3), 0.6)
        m = random_binary_mask(rng, 8, 8)
        out = HarmonicInpaintFill().fill(x, m)
        assert np.allclose(out, 0.6, atol=1e-9)

    def test_center_column_becomes_linear_ramp(self):
        # left half black, right half white, one masked column in between:
        # the harmonic solution interpolates linearly between the sides
        x = np.zeros((8, 9, 3))
        x[:, 5:, :] = 1.0
        m = np.zeros((8, 9))
        m[:, 4] = 1.0
        out = HarmonicInpaintFill(iterations=20000, tolerance=1e-10).fill(x, m)
        assert np.allclose(out[:, 4, :], 0.5, atol=1e-4)

    def test_maximum_principle_100_instances(self):
        rng = np.random.default_rng(0)
        strategy = HarmonicInpaintFill(iterations=500, tolerance=1e-6)
        for _ in range(100):
            h = int(rng.integers(6, 14))
            w = int(rng.integers(6, 14))
            x = rng.random((h, w, 3))
            m = random_binary_mask(rng, h, w, p=float(rng.uniform(0.1, 0.6)))
            out = strategy.fill(x, m)
            hole = m >= 0.5
            for c in range(3):
                boundary = x[:, :, c][~hole]
                filled = out[:, :, c][hole]
                assert filled.min() >= boundary.min() - 1e-12
                assert filled.max() <= boundary.max() + 1e-12

    def test_residual_monotone_convergence(self, rng):
        # rerun the relaxation manually and track the max update per sweep
        x = rng.random((12, 12, 3))
        m = random_binary_mask(rng, 12, 12, 0.4)
        hole = m >= 0.5
        out = x.copy()
        out[hole] = x[~hole].reshape(-1, 3).mean(axis=0)
        count = np.zeros((12, 12))
        count[:-1] += 1
        count[1:] += 1
        count[:, :-1] += 1
        count[:, 1:] += 1
        deltas = []
        for _ in range(300):
            acc = np.zeros_like(out)
            acc[:-1] += out[1:]
            acc[1:] += out[:-1]
            acc[:, :-1] += out[:, 1:]
            acc[:, 1:] += out[:, :-1]
            avg = acc / count[:, :, None]
            deltas.append(np.abs(avg[hole] - out[hole]).max())
            out[hole] = avg[hole]
        diffs = np.diff(np.array(deltas))
        assert diffs.max() <= 1e-12

    def test_fully_masked_rejected(self, rng):
        with pytest.raises(ParameterError):
            HarmonicInpaintFill().fill(rng.random((4, 4, 3)), np.ones((4, 4)))

    def test_empty_mask_returns_copy(self, rng):
        x = rng.random((4, 4, 3))
        out = HarmonicInpaintFill().fill(x, np.zeros((4, 4)))
        assert np.array_equal(out, x)


class TestExternalInpaint:
    def _tool(self, tmp_path, source, name="tool.py"):
        script = tmp_path / name
        script.write_text(source)
        return [sys.executable, str(script)]

    def test_identity_tool_round_trips(self, tmp_path, rng):
        x = np.round(rng.random((6, 6, 3)) * 255) / 255.0  # 8-bit representable
        m = random_binary_mask(rng, 6, 6)
        strategy = ExternalInpaintFill(self._tool(tmp_path, COPY_TOOL))
        out = composite(x, m, strategy.fill(x, m))
        assert np.allclose(out, x, atol=1e-9)
        assert np.array_equal(out[m < 0.5], x[m < 0.5])

    def test_constant_gray_tool_matches_gray_fill(self, tmp_path, rng):
        x = np.round(rng.random((6, 6, 3)) * 255) / 255.0
        m = random_binary_mask(rng, 6, 6)
        strategy = ExternalInpaintFill(self._tool(tmp_path, GRAY_TOOL))
        got = composite(x, m, strategy.fill(x, m))
        expected = composite(x, m, np.broadcast_to(np.array([124, 116, 104]) / 255.0, x.shape))
        assert np.allclose(got, expected, atol=1e-9)

    def test_mask_png_encoding(self, tmp_path, rng):
        # masked = white (255), keep = black (0), 8-bit grayscale
        capture = tmp_path / "cap"
        capture.mkdir()
        tool = textwrap.dedent(
            f"""
            import shutil, sys
            shutil.copyfile(sys.argv[2], r"{capture / 'mask.png'}")
            shutil.copyfile(sys.argv[1], sys.argv[3])
            """
        )
        x = rng.random((4, 4, 3))
        m = np.zeros((4, 4))
        m[1, 2] = 1.0
        ExternalInpaintFill(self._tool(tmp_path, tool)).fill(x, m)
        from PIL import Image

        with Image.open(capture / "mask.png") as im:
            assert im.mode == "L"
            arr = np.asarray(im)
        expected = np.zeros((4, 4), dtype=np.uint8)
        expected[1, 2] = 255
        assert np.array_equal(arr, expected)

    def test_nonzero_exit_raises(self, tmp_path, rng):
        strategy = ExternalInpaintFill(self._tool(tmp_path, FAIL_TOOL))
        with pytest.raises(ExternalToolError):
            strategy.fill(rng.random((4, 4, 3)), random_binary_mask(rng, 4, 4))

    def test_missing_output_raises(self, tmp_path, rng):
        strategy = ExternalInpaintFill(self._tool(tmp_path, NO_OUTPUT_TOOL))
        with pytest.raises(ExternalToolError):
            strategy.fill(rng.random((4, 4, 3)), random_binary_mask(rng, 4, 4))


class TestContracts:
    def test_unmasked_pixels_bit_exact_for_every_strategy(self, tmp_path, rng):
        x = np.round(rng.random((8, 8, 3)) * 255) / 255.0
        m = random_binary_mask(rng, 8, 8)
        keep = m < 0.5
        script = tmp_path / "copy.py"
        script.write_text(COPY_TOOL)
        strategies = [
            GrayFill(),
            NoiseFill(3),
            BlurFill(2.0),
            HarmonicInpaintFill(),
            ExternalInpaintFill([sys.executable, str(script)]),
        ]
        for strategy in strategies:
            out = composite(x, m, strategy.fill(x, m))
            assert np.array_equal(out[keep], x[keep]), strategy.name

    def test_caching_wrapper_returns_same_fill(self, rng):
        calls = []

        class Counting(HarmonicInpaintFill):
            def fill(self, x, m):
                calls.append(1)
                return super().fill(x, m)

        cached = CachingFill(Counting())
        x = rng.random((6, 6, 3))
        m = random_binary_mask(rng, 6, 6)
        a = cached.fill(x, m)
        b = cached.fill(x, m)
        assert np.array_equal(a, b)
        assert len(calls) == 1

    def test_factory_spellings(self):
        assert make_filler("gray").name == "gray"
        assert make_filler("noise", noise_seed=5).seed == 5
        assert make_filler("blur", blur_sigma=3.0).sigma == 3.0
        assert make_filler("inpaint").name == "inpaint"
        ext = make_filler("inpaint-ext:cp -f")
        assert ext.command == ["cp", "-f"]
        with pytest.raises(ParameterError):
            make_filler("sparkles")
