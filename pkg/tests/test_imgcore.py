import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pertattr.errors import FormatError, ParameterError, ShapeError
from pertattr.imgcore import (
    AttributionMap,
    BoundingBox,
    bilinear_resize,
    bilinear_resize_adjoint,
    composite,
    gaussian_blur,
    jitter,
    jitter_adjoint,
    read_heatmap,
    read_image,
    render_heatmap_u8,
    resize_image,
    write_heatmap,
    write_image,
)


def random_image(rng, h=8, w=8):
    return rng.random((h, w, 3))


# ---------------------------------------------------------------------------
# composite
# ---------------------------------------------------------------------------


class TestComposite:
    def test_zero_mask_is_identity(self, rng):
        x = random_image(rng)
        f = random_image(rng)
        out = composite(x, np.zeros((8, 8)), f)
        assert np.array_equal(out, x)

    def test_full_mask_returns_filler(self, rng):
        x = random_image(rng)
        f = random_image(rng)
        out = composite(x, np.ones((8, 8)), f)
        assert np.array_equal(out, f)

    def test_single_pixel_against_elementwise_oracle(self, rng):
        x = random_image(rng)
        f = random_image(rng)
        m = np.zeros((8, 8))
        m[3, 5] = 1.0
        out = composite(x, m, f)
        # element-wise reference loop
        for r in range(8):
            for c in range(8):
                expected = f[r, c] if (r, c) == (3, 5) else x[r, c]
                assert np.array_equal(out[r, c], expected)

    def test_shape_mismatch(self, rng):
        x = random_image(rng)
        with pytest.raises(ShapeError):
            composite(x, np.zeros((4, 4)), x)
        with pytest.raises(ShapeError):
            composite(x, np.zeros((8, 8)), random_image(rng, 4, 4))

    def test_mask_range_checked(self, rng):
        x = random_image(rng)
        with pytest.raises(ShapeError):
            composite(x, np.full((8, 8), 1.5), x)

    @given(seed=st.integers(0, 2**16))
    @settings(max_examples=25, deadline=None)
    def test_binary_idempotence(self, seed):
        rng = np.random.default_rng(seed)
        x = random_image(rng)
        f = random_image(rng)
        m = (rng.random((8, 8)) < 0.4).astype(float)
        once = composite(x, m, f)
        twice = composite(once, m, f)
        assert np.array_equal(once, twice)

    @given(seed=st.integers(0, 2**16))
    @settings(max_examples=25, deadline=None)
    def test_output_in_unit_range(self, seed):
        rng = np.random.default_rng(seed)
        x = random_image(rng)
        f = random_image(rng)
        m = rng.random((8, 8))
        out = composite(x, m, f)
        assert out.min() >= 0.0 and out.max() <= 1.0


# ---------------------------------------------------------------------------
# gaussian blur
# ---------------------------------------------------------------------------


def dense_blur_oracle(x, sigma):
    """Direct 2-D convolution with explicit mirror indexing."""
    radius = int(np.ceil(3.0 * sigma))
    t = np.arange(-radius, radius + 1, dtype=float)
    taps = np.exp(-0.5 * (t / sigma) ** 2)
    taps /= taps.sum()
    kernel = np.outer(taps, taps)
    h, w, _ = x.shape

    def mirror(i, n):
        # reflect about the edge pixel, no duplication: period 2n-2
        period = 2 * n - 2 if n > 1 else 1
        i = abs(i) % period
        return period - i if i >= n else i

    out = np.zeros_like(x)
    for r in range(h):
        for c in range(w):
            acc = np.zeros(3)
            for dr in range(-radius, radius + 1):
                for dc in range(-radius, radius + 1):
                    rr = mirror(r + dr, h)
                    cc = mirror(c + dc, w)
                    acc += kernel[dr + radius, dc + radius] * x[rr, cc]
            out[r, c] = acc
    return out


class TestGaussianBlur:
    def test_constant_image_is_fixed_point(self):
        x = np.full((12, 12, 3), 0.37)
        out = gaussian_blur(x, 2.0)
        assert np.allclose(out, 0.37, atol=1e-12)

    def test_matches_dense_convolution_oracle(self, rng):
        x = random_image(rng, 16, 16)
        expected = dense_blur_oracle(x, 1.2)
        got = gaussian_blur(x, 1.2)
        assert np.abs(got - expected).max() < 1e-6

    def test_mean_approximately_preserved(self, rng):
        x = random_image(rng, 16, 16)
        out = gaussian_blur(x, 1.0)
        assert abs(out.mean() - x.mean()) < 5e-3

    def test_paper_scale_configuration(self):
        x = np.linspace(0, 1, 224 * 224 * 3).reshape(224, 224, 3)
        out = gaussian_blur(x, 10.0)
        assert out.shape == (224, 224, 3)
        assert np.all(np.isfinite(out))

    def test_rejects_nonpositive_sigma(self, rng):
        with pytest.raises(ParameterError):
            gaussian_blur(random_image(rng), 0.0)


# ---------------------------------------------------------------------------
# bilinear resize and adjoint
# ---------------------------------------------------------------------------


class TestBilinearResize:
    def test_constant_field_stays_constant(self):
        src = np.full((5, 7), 0.42)
        out = bilinear_resize(src, 13, 3)
        assert np.allclose(out, 0.42, atol=1e-12)

    def test_identity_at_same_size(self, rng):
        src = rng.random((9, 9))
        assert np.abs(bilinear_resize(src, 9, 9) - src).max() == 0.0

    def test_mask_upsample_shape(self):
        out = bilinear_resize(np.random.default_rng(0).random((28, 28)), 224, 224)
        assert out.shape == (224, 224)

    def test_adjoint_identity_against_dense_matrix(self, rng):
        # build the explicit operator matrix for 4x4 -> 7x7
        basis = np.zeros((4, 4))
        columns = []
        for i in range(16):
            basis.flat[i] = 1.0
            columns.append(bilinear_resize(basis, 7, 7).ravel())
            basis.flat[i] = 0.0
        dense = np.stack(columns, axis=1)  # (49, 16)
        for _ in range(10):
            c = rng.random((4, 4))
            y = rng.random((7, 7))
            lhs = float(bilinear_resize(c, 7, 7).ravel() @ y.ravel())
            rhs = float(c.ravel() @ bilinear_resize_adjoint(y, 4, 4).ravel())
            assert abs(lhs - rhs) < 1e-9
            assert np.allclose(dense @ c.ravel(), bilinear_resize(c, 7, 7).ravel(), atol=1e-12)
            assert np.allclose(dense.T @ y.ravel(), bilinear_resize_adjoint(y, 4, 4).ravel(), atol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ShapeError):
            bilinear_resize(np.zeros((0, 3)), 4, 4)
        with pytest.raises(ShapeError):
            bilinear_resize(np.zeros((3, 3)), 0, 4)

    def test_resize_image_channels(self, rng):
        x = random_image(rng, 6, 6)
        out = resize_image(x, 12, 12)
        for c in range(3):
            assert np.allclose(out[:, :, c], bilinear_resize(x[:, :, c], 12, 12))


# ---------------------------------------------------------------------------
# jitter
# ---------------------------------------------------------------------------


class TestJitter:
    def test_tau_zero_is_identity(self, rng):
        x = random_image(rng, 4, 4)
        assert np.array_equal(jitter(x, 0, "horizontal"), x)

    def test_horizontal_ramp_shift(self):
        ramp = np.tile(np.arange(4.0), (4, 1))
        out = jitter(ramp, 2, "horizontal")
        # content moves right; the vacated band replicates column 0
        expected = np.array([[0.0, 0.0, 0.0, 1.0]] * 4)
        assert np.array_equal(out, expected)

    def test_vertical_shift(self):
        ramp = np.tile(np.arange(4.0)[:, None], (1, 4))
        out = jitter(ramp, 1, "vertical")
        expected = np.array([[0.0] * 4, [0.0] * 4, [1.0] * 4, [2.0] * 4])
        assert np.array_equal(out, expected)

    def test_tau_out_of_range(self, rng):
        with pytest.raises(ParameterError):
            jitter(random_image(rng), 5, "horizontal")
        with pytest.raises(ParameterError):
            jitter(random_image(rng), -1, "vertical")

    @given(
        tau=st.integers(0, 4),
        direction=st.sampled_from(["horizontal", "vertical"]),
        seed=st.integers(0, 2**16),
    )
    @settings(max_examples=40, deadline=None)
    def test_adjoint_dot_product_identity(self, tau, direction, seed):
        rng = np.random.default_rng(seed)
        x = rng.random((6, 7))
        g = rng.random((6, 7))
        lhs = float((jitter(x, tau, direction) * g).sum())
        rhs = float((x * jitter_adjoint(g, tau, direction)).sum())
        assert abs(lhs - rhs) < 1e-12


# ---------------------------------------------------------------------------
# heatmap + image files
# ---------------------------------------------------------------------------


class TestHeatmapIO:
    def test_round_trip_bit_exact_with_negatives(self, tmp_path, rng):
        data = rng.normal(size=(5, 9)).astype(np.float32).astype(np.float64)
        amap = AttributionMap(data, method="test")
        write_heatmap(amap, tmp_path / "m.png", tmp_path / "m.hmap")
        back = read_heatmap(tmp_path / "m.hmap")
        assert back.dtype == np.float32
        assert np.array_equal(back, data.astype(np.float32))

    def test_all_zero_renders_black(self, tmp_path):
        amap = AttributionMap(np.zeros((4, 4)))
        write_heatmap(amap, tmp_path / "z.png", tmp_path / "z.hmap")
        from PIL import Image

        with Image.open(tmp_path / "z.png") as im:
            assert im.mode == "L"
            assert np.asarray(im).max() == 0

    def test_known_grid_exact_bytes(self, tmp_path):
        data = np.array([[0.0, 1.0, -1.0], [0.5, 0.25, 2.0], [-0.5, 0.75, 3.0]])
        write_heatmap(AttributionMap(data), tmp_path / "g.png", tmp_path / "g.hmap")
        blob = (tmp_path / "g.hmap").read_bytes()
        expected = b"HMAP" + bytes([1]) + (3).to_bytes(4, "little") * 2
        expected += data.astype("<f4").tobytes()
        assert blob == expected

    def test_truncated_and_bad_magic(self, tmp_path):
        path = tmp_path / "bad.hmap"
        path.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(FormatError):
            read_heatmap(path)
        write_heatmap(AttributionMap(np.ones((2, 2))), tmp_path / "x.png", tmp_path / "x.hmap")
        good = (tmp_path / "x.hmap").read_bytes()
        (tmp_path / "trunc.hmap").write_bytes(good[:-3])
        with pytest.raises(FormatError):
            read_heatmap(tmp_path / "trunc.hmap")

    def test_render_flat_map_black(self):
        assert render_heatmap_u8(np.full((3, 3), 7.0)).max() == 0


class TestImageIO:
    def test_round_trip_8bit(self, tmp_path, rng):
        x = np.round(rng.random((5, 6, 3)) * 255) / 255.0
        write_image(x, tmp_path / "img.png")
        back = read_image(tmp_path / "img.png")
        assert np.allclose(back, x, atol=1e-9)

    def test_grayscale_png_loads_as_rgb(self, tmp_path):
        from PIL import Image

        Image.fromarray(np.full((4, 4), 128, dtype=np.uint8), mode="L").save(tmp_path / "g.png")
        x = read_image(tmp_path / "g.png")
        assert x.shape == (4, 4, 3)
        assert np.allclose(x[:, :, 0], x[:, :, 1])

    def test_16bit_png_rejected(self, tmp_path):
        from PIL import Image

        Image.fromarray(np.full((4, 4), 1000, dtype=np.uint16)).save(tmp_path / "deep.png")
        with pytest.raises(FormatError):
            read_image(tmp_path / "deep.png")

    def test_unreadable_file(self, tmp_path):
        path = tmp_path / "junk.png"
        path.write_bytes(b"not a png")
        with pytest.raises(FormatError):
            read_image(path)


# ---------------------------------------------------------------------------
# types
# ---------------------------------------------------------------------------


class TestTypes:
    def test_normalized_is_a_view_not_mutation(self):
        data = np.array([[1.0, -4.0], [2.0, 0.0]])
        amap = AttributionMap(data.copy())
        norm = amap.normalized()
        assert norm.max() <= 1.0 and norm.min() >= -1.0
        assert np.array_equal(amap.data, data)
        assert norm[0, 1] == -1.0

    def test_zero_map_stays_zero(self):
        amap = AttributionMap(np.zeros((3, 3)))
        assert np.array_equal(amap.normalized(), np.zeros((3, 3)))

    def test_non_finite_rejected(self):
        with pytest.raises(ShapeError):
            AttributionMap(np.array([[np.nan, 0.0]]))

    def test_bounding_box_invariants(self):
        box = BoundingBox(0, 0, 9, 9)
        assert box.area == 100
        with pytest.raises(ParameterError):
            BoundingBox(5, 0, 4, 9)
