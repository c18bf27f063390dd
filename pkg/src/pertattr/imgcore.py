"""Core image and heatmap primitives shared by every attribution method.

Conventions used throughout the package:

* An *image* is a float64 array of shape (H, W, 3) with values in [0, 1],
  row-major, channel-interleaved.
* A *mask* is a float64 array of shape (H, W).  Continuous masks take values
  in [0, 1]; binary masks take values in {0, 1}.  A single mask channel is
  broadcast over all three color channels.
* Gaussian blur uses mirror padding (reflection about the edge pixel, no
  edge duplication) and a kernel truncated at +/-3 sigma, renormalized to
  sum 1.
* Bilinear resizing uses the align-corners-false convention: output sample
  i maps to source position (i + 0.5) * scale - 0.5, clamped to the valid
  range.  The operator is linear and an explicit adjoint is provided so
  gradients can flow through it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from PIL import Image as _PILImage
from scipy.ndimage import correlate1d

from .errors import FormatError, ParameterError, ShapeError

__all__ = [
    "AttributionMap",
    "BoundingBox",
    "as_image",
    "as_mask",
    "composite",
    "gaussian_blur",
    "bilinear_resize",
    "bilinear_resize_adjoint",
    "resize_image",
    "jitter",
    "jitter_adjoint",
    "read_image",
    "write_image",
    "write_heatmap",
    "read_heatmap",
    "render_heatmap_u8",
]

HMAP_MAGIC = b"HMAP"
HMAP_VERSION = 1


def as_image(x) -> np.ndarray:
    """Validate and return ``x`` as an (H, W, 3) float64 image in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ShapeError(f"image must have shape (H, W, 3), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ShapeError("image contains non-finite values")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ShapeError("image intensities must lie in [0, 1]")
    return x


def as_mask(m, kind: str = "continuous") -> np.ndarray:
    """Validate and return ``m`` as an (H, W) float64 mask.

    ``kind`` is "continuous" (values in [0, 1]) or "binary" ({0, 1}).
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"mask must have shape (H, W), got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ShapeError("mask contains non-finite values")
    if kind == "continuous":
        if m.min() < 0.0 or m.max() > 1.0:
            raise ShapeError("continuous mask values must lie in [0, 1]")
    elif kind == "binary":
        if not np.all((m == 0.0) | (m == 1.0)):
            raise ShapeError("binary mask values must lie in {0, 1}")
    else:
        raise ParameterError(f"unknown mask kind {kind!r}")
    return m


@dataclass(frozen=True)
class AttributionMap:
    """Real-valued per-pixel evidence scores plus run provenance.

    ``data`` holds the raw, unbounded scores; evaluation metrics consume the
    raw ordering.  ``normalized()`` returns a rescaled [-1, 1] *view* for
    display; the stored data is never mutated.
    """

    data: np.ndarray
    method: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ShapeError(f"attribution map must be 2-D, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ShapeError("attribution map contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def normalized(self) -> np.ndarray:
        """Scores divided by the max absolute value; an all-zero map stays zero."""
        peak = np.abs(self.data).max()
        if peak == 0.0:
            return self.data.copy()
        return self.data / peak


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box with inclusive pixel coordinates (x = column, y = row)."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ParameterError(f"degenerate box {self}")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min + 1

    @property
    def height(self) -> int:
        return self.y_max - self.y_min + 1

    @property
    def area(self) -> int:
        return self.width * self.height

    def intersects(self, other: "BoundingBox") -> bool:
        return not (
            self.x_max < other.x_min
            or other.x_max < self.x_min
            or self.y_max < other.y_min
            or other.y_max < self.y_min
        )


# ---------------------------------------------------------------------------
# Perturbation primitives
# ---------------------------------------------------------------------------


def composite(x: np.ndarray, m: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Blend original and filler content: ``x * (1 - m) + f * m`` per pixel.

    The mask is broadcast over the three color channels.  Where ``m`` is
    exactly 0 the output is a bit-exact copy of ``x``; where it is exactly 1,
    a bit-exact copy of ``f``.
    """
    x = np.asarray(x, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if x.shape != f.shape:
        raise ShapeError(f"image/filler shape mismatch: {x.shape} vs {f.shape}")
    if m.shape != x.shape[:2]:
        raise ShapeError(f"mask shape {m.shape} does not match image {x.shape[:2]}")
    if m.min() < 0.0 or m.max() > 1.0:
        raise ShapeError("composite mask values must lie in [0, 1]")
    mc = m[:, :, None]
    out = x * (1.0 - mc) + f * mc
    return np.clip(out, 0.0, 1.0)


def _gaussian_taps(sigma: float) -> np.ndarray:
    radius = int(np.ceil(3.0 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (t / sigma) ** 2)
    return taps / taps.sum()


def gaussian_blur(x: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with mirror padding at the borders.

    The 1-D kernel is truncated at +/-3 sigma and renormalized to sum 1, so
    constant inputs are exact fixed points.
    """
    if sigma <= 0:
        raise ParameterError(f"blur sigma must be positive, got {sigma}")
    x = np.asarray(x, dtype=np.float64)
    taps = _gaussian_taps(sigma)
    out = correlate1d(x, taps, axis=0, mode="mirror")
    out = correlate1d(out, taps, axis=1, mode="mirror")
    return np.clip(out, 0.0, 1.0) if x.ndim == 3 else out


@lru_cache(maxsize=64)
def _resize_matrix(src: int, dst: int) -> np.ndarray:
    """Dense (dst, src) matrix of 1-D bilinear interpolation weights."""
    weights = np.zeros((dst, src), dtype=np.float64)
    scale = src / dst
    for i in range(dst):
        pos = (i + 0.5) * scale - 0.5
        pos = min(max(pos, 0.0), src - 1.0)
        lo = int(np.floor(pos))
        hi = min(lo + 1, src - 1)
        frac = pos - lo
        weights[i, lo] += 1.0 - frac
        weights[i, hi] += frac
    return weights


def bilinear_resize(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a 2-D field bilinearly (align-corners-false, clamped sampling)."""
    src = np.asarray(src, dtype=np.float64)
    if src.ndim != 2 or src.size == 0:
        raise ShapeError(f"resize input must be a non-empty 2-D field, got {src.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError("output dimensions must be >= 1")
    rows = _resize_matrix(src.shape[0], out_h)
    cols = _resize_matrix(src.shape[1], out_w)
    return rows @ src @ cols.T


def bilinear_resize_adjoint(grad: np.ndarray, src_h: int, src_w: int) -> np.ndarray:
    """Apply the transpose of the resize operator mapping (src_h, src_w) -> grad.shape.

    Satisfies ``<resize(c), g> == <c, adjoint(g)>`` exactly up to rounding,
    which is what backpropagation through an upsampled mask requires.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.ndim != 2 or grad.size == 0:
        raise ShapeError(f"adjoint input must be a non-empty 2-D field, got {grad.shape}")
    rows = _resize_matrix(src_h, grad.shape[0])
    cols = _resize_matrix(src_w, grad.shape[1])
    return rows.T @ grad @ cols


def resize_image(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinearly resize an (H, W, 3) image channel by channel."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"expected (H, W, 3) image, got {x.shape}")
    out = np.stack(
        [bilinear_resize(x[:, :, c], out_h, out_w) for c in range(x.shape[2])], axis=2
    )
    return np.clip(out, 0.0, 1.0)


def jitter(x: np.ndarray, tau: int, direction: str) -> np.ndarray:
    """Translate an image right/down by ``tau`` pixels, replicating the edge.

    ``direction`` is "horizontal" (shift right) or "vertical" (shift down);
    the vacated band repeats the first column/row.  ``tau`` must lie in 0..4.
    """
    if not 0 <= tau <= 4:
        raise ParameterError(f"jitter tau must be in 0..4, got {tau}")
    x = np.asarray(x)
    if tau == 0:
        return x.copy()
    if direction == "horizontal":
        idx = np.maximum(np.arange(x.shape[1]) - tau, 0)
        return x[:, idx]
    if direction == "vertical":
        idx = np.maximum(np.arange(x.shape[0]) - tau, 0)
        return x[idx]
    raise ParameterError(f"unknown jitter direction {direction!r}")


def jitter_adjoint(grad: np.ndarray, tau: int, direction: str) -> np.ndarray:
    """Transpose of :func:`jitter` for backpropagation."""
    if not 0 <= tau <= 4:
        raise ParameterError(f"jitter tau must be in 0..4, got {tau}")
    grad = np.asarray(grad, dtype=np.float64)
    if tau == 0:
        return grad.copy()
    out = np.zeros_like(grad)
    if direction == "horizontal":
        w = grad.shape[1]
        out[:, 0] = grad[:, : tau + 1].sum(axis=1)
        out[:, 1 : w - tau] = grad[:, tau + 1 :]
        return out
    if direction == "vertical":
        h = grad.shape[0]
        out[0] = grad[: tau + 1].sum(axis=0)
        out[1 : h - tau] = grad[tau + 1 :]
        return out
    raise ParameterError(f"unknown jitter direction {direction!r}")


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------


def read_image(path) -> np.ndarray:
    """Load an 8-bit PNG (grayscale or RGB) as an (H, W, 3) image in [0, 1]."""
    try:
        with _PILImage.open(path) as im:
            if im.mode == "L":
                arr = np.asarray(im, dtype=np.float64)
                arr = np.stack([arr] * 3, axis=2)
            elif im.mode == "RGB":
                arr = np.asarray(im, dtype=np.float64)
            else:
                raise FormatError(
                    f"{path}: unsupported PNG mode {im.mode!r}; need 8-bit L or RGB"
                )
    except FormatError:
        raise
    except Exception as exc:
        raise FormatError(f"{path}: cannot read image ({exc})") from exc
    return arr / 255.0


def write_image(x: np.ndarray, path) -> None:
    """Write an image as an 8-bit RGB PNG."""
    x = as_image(x)
    u8 = np.rint(x * 255.0).astype(np.uint8)
    _PILImage.fromarray(u8, mode="RGB").save(path, format="PNG")


def render_heatmap_u8(data: np.ndarray) -> np.ndarray:
    """Min-max normalize a heatmap to 8-bit grayscale; a flat map renders black."""
    data = np.asarray(data, dtype=np.float64)
    lo, hi = data.min(), data.max()
    if hi == lo:
        return np.zeros(data.shape, dtype=np.uint8)
    return np.rint((data - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_heatmap(amap: AttributionMap, png_path, raw_path) -> None:
    """Write a heatmap as a viewable PNG plus a lossless raw sidecar.

    Sidecar layout: magic "HMAP", version byte 1, u32-LE width, u32-LE
    height, then width*height float32-LE values row-major.
    """
    h, w = amap.data.shape
    if w >= 2**32 or h >= 2**32:
        raise FormatError("heatmap dimensions overflow the u32 header fields")
    _PILImage.fromarray(render_heatmap_u8(amap.data), mode="L").save(png_path, format="PNG")
    payload = amap.data.astype("<f4").tobytes(order="C")
    with open(raw_path, "wb") as fh:
        fh.write(HMAP_MAGIC)
        fh.write(struct.pack("<B", HMAP_VERSION))
        fh.write(struct.pack("<II", w, h))
        fh.write(payload)


def read_heatmap(raw_path) -> np.ndarray:
    """Read a raw heatmap sidecar back as an (H, W) float32 array."""
    with open(raw_path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 13 or blob[:4] != HMAP_MAGIC:
        raise FormatError(f"{raw_path}: not a raw heatmap file")
    version = blob[4]
    if version != HMAP_VERSION:
        raise FormatError(f"{raw_path}: unsupported heatmap version {version}")
    w, h = struct.unpack("<II", blob[5:13])
    expected = 13 + 4 * w * h
    if len(blob) != expected:
        raise FormatError(f"{raw_path}: truncated heatmap (got {len(blob)}, want {expected})")
    return np.frombuffer(blob[13:], dtype="<f4").reshape(h, w)
