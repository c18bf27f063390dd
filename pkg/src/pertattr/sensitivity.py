"""Heatmap similarity metrics and hyperparameter-sensitivity sweeps.

A method is considered robust when rerunning it across a hyperparameter axis
yields similar heatmaps.  Three similarity measures are used, all symmetric
and reflexive at 1:

* SSIM with a uniform 7x7 window (clipped to the map size), K1=0.01,
  K2=0.03, data range = joint max - min, averaged over fully-interior
  windows;
* Pearson correlation of HOG descriptors (9 unsigned orientation bins over
  [0, 180), 8x8-pixel cells, 2x2-cell blocks with stride 1 and L2 block
  normalization, gradients by central differences);
* Spearman rank correlation with average ranks for ties.

Heatmaps are min-max normalized to [0, 1] before SSIM and HOG (the rank
metric is unaffected by monotone rescaling); SSIM on raw maps would depend
on their arbitrary data range.

MS-SSIM (for image-vs-image comparisons) uses dyadic 2x2 mean downsampling
with the standard five scale exponents, computed on Rec. 601 luminance;
scales that cannot fit the window on small images are dropped and the
exponents renormalized.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter
from scipy.stats import rankdata

from .errors import ParameterError
from .imgcore import AttributionMap
from .util import parallel_map

__all__ = [
    "ssim",
    "hog_descriptor",
    "hog_pearson",
    "spearman",
    "ms_ssim",
    "normalize_unit",
    "SweepSpec",
    "SWEEP_AXES",
    "run_sweep",
]

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)

SWEEP_AXES = {
    "patch-sizes": (5, 17, 29, 41, 53),
    "random-batches": (0, 1, 2, 3, 4),
    "mask-sizes": (28, 56, 112),
}

_AXIS_FOR_METHOD = {"sp": "patch-sizes", "lime": "random-batches", "mp2": "mask-sizes"}


def _as_field(a) -> np.ndarray:
    if isinstance(a, AttributionMap):
        return a.data
    return np.asarray(a, dtype=np.float64)


def normalize_unit(a) -> np.ndarray:
    """Min-max rescale to [0, 1]; a flat map becomes all zeros."""
    data = _as_field(a)
    lo, hi = data.min(), data.max()
    if hi == lo:
        return np.zeros_like(data)
    return (data - lo) / (hi - lo)


def _ssim_stats(a: np.ndarray, b: np.ndarray, win: int):
    mu_a = uniform_filter(a, win, mode="reflect")
    mu_b = uniform_filter(b, win, mode="reflect")
    aa = uniform_filter(a * a, win, mode="reflect") - mu_a**2
    bb = uniform_filter(b * b, win, mode="reflect") - mu_b**2
    ab = uniform_filter(a * b, win, mode="reflect") - mu_a * mu_b
    pad = win // 2
    sl = (slice(pad, a.shape[0] - pad), slice(pad, a.shape[1] - pad))
    return mu_a[sl], mu_b[sl], aa[sl], bb[sl], ab[sl]


def _effective_window(shape, window: int) -> int:
    win = min(window, shape[0], shape[1])
    if win % 2 == 0:
        win -= 1
    return max(win, 1)


def _ssim_parts(a: np.ndarray, b: np.ndarray, window: int, k1: float, k2: float):
    """Full SSIM plus the mean contrast-structure component at one scale."""
    rng_lo = min(a.min(), b.min())
    rng_hi = max(a.max(), b.max())
    data_range = rng_hi - rng_lo
    if data_range == 0.0:
        identical = bool(np.array_equal(a, b))
        if not identical:
            warnings.warn("ssim: zero joint data range on differing inputs", stacklevel=3)
        value = 1.0 if identical else 0.0
        return value, value
    win = _effective_window(a.shape, window)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a, mu_b, va, vb, cov = _ssim_stats(a, b, win)
    lum = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    cs = (2 * cov + c2) / (va + vb + c2)
    return float((lum * cs).mean()), float(cs.mean())


def ssim(a, b, window: int = 7, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity between two equal-size 2-D fields.

    Degenerate inputs (zero joint data range) score 1 when bit-identical and
    0 otherwise, with a warning.
    """
    a = _as_field(a)
    b = _as_field(b)
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch {a.shape} vs {b.shape}")
    rng_lo = min(a.min(), b.min())
    rng_hi = max(a.max(), b.max())
    if rng_hi == rng_lo:
        identical = bool(np.array_equal(a, b))
        if not identical:
            warnings.warn("ssim: zero joint data range on differing inputs", stacklevel=2)
        return 1.0 if identical else 0.0
    win = _effective_window(a.shape, window)
    data_range = rng_hi - rng_lo
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a, mu_b, va, vb, cov = _ssim_stats(a, b, win)
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (va + vb + c2)
    return float((num / den).mean())


def hog_descriptor(a, cell: int = 8, bins: int = 9, block: int = 2) -> np.ndarray:
    """Histogram-of-oriented-gradients feature vector of a 2-D field.

    Gradients come from central differences (one-sided at the edges);
    orientations are unsigned in [0, 180) with hard binning; the image is
    cropped to whole cells; blocks of block x block cells slide with stride
    one cell and are L2-normalized.
    """
    a = _as_field(a)
    h, w = a.shape
    cells_y, cells_x = h // cell, w // cell
    if cells_y < 1 or cells_x < 1:
        raise ParameterError(f"field {a.shape} smaller than one {cell}x{cell} cell")
    a = a[: cells_y * cell, : cells_x * cell]
    gy, gx = np.gradient(a)
    mag = np.hypot(gx, gy)
    ang = np.degrees(np.arctan2(gy, gx)) % 180.0
    bin_idx = np.minimum((ang / (180.0 / bins)).astype(int), bins - 1)

    hist = np.zeros((cells_y, cells_x, bins))
    cy = np.repeat(np.arange(cells_y), cell)[:, None]
    cx = np.repeat(np.arange(cells_x), cell)[None, :]
    np.add.at(hist, (np.broadcast_to(cy, a.shape), np.broadcast_to(cx, a.shape), bin_idx), mag)

    blk = min(block, cells_y, cells_x)
    blocks = np.lib.stride_tricks.sliding_window_view(hist, (blk, blk), axis=(0, 1))
    by, bx = blocks.shape[:2]
    feat = blocks.reshape(by * bx, -1).astype(np.float64).copy()
    norms = np.linalg.norm(feat, axis=1, keepdims=True)
    np.divide(feat, norms, out=feat, where=norms > 0)
    return feat.ravel()


def _pearson(u: np.ndarray, v: np.ndarray, what: str) -> float:
    du = u - u.mean()
    dv = v - v.mean()
    nu = np.linalg.norm(du)
    nv = np.linalg.norm(dv)
    if nu == 0.0 or nv == 0.0:
        identical = bool(np.array_equal(u, v))
        warnings.warn(f"{what}: zero-variance input", stacklevel=3)
        return 1.0 if identical and nu == nv else 0.0
    return float(du @ dv / (nu * nv))


def hog_pearson(a, b, cell: int = 8, bins: int = 9, block: int = 2) -> float:
    """Pearson correlation of the two HOG descriptor vectors."""
    fa = hog_descriptor(a, cell, bins, block)
    fb = hog_descriptor(b, cell, bins, block)
    if fa.shape != fb.shape:
        raise ParameterError("descriptor shapes differ; inputs must share dimensions")
    return _pearson(fa, fb, "hog_pearson")


def spearman(a, b) -> float:
    """Rank correlation over the flattened maps, average ranks for ties."""
    a = _as_field(a).ravel()
    b = _as_field(b).ravel()
    if a.shape != b.shape:
        raise ParameterError("shape mismatch")
    ra = rankdata(a, method="average")
    rb = rankdata(b, method="average")
    return _pearson(ra, rb, "spearman")


def _luminance(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x
    return 0.299 * x[:, :, 0] + 0.587 * x[:, :, 1] + 0.114 * x[:, :, 2]


def _downsample2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape
    h2, w2 = h // 2 * 2, w // 2 * 2
    x = x[:h2, :w2]
    return x.reshape(h2 // 2, 2, w2 // 2, 2).mean(axis=(1, 3))


def ms_ssim(x, y, scales: int = 5, weights=MS_SSIM_WEIGHTS, window: int = 7) -> float:
    """Multi-scale SSIM between two images (or 2-D fields) on luminance.

    Uses at most ``scales`` dyadic scales; scales where the downsampled map
    drops below the window are skipped and the exponents renormalized.  With
    a single scale this reduces to plain SSIM.
    """
    a = _luminance(x)
    b = _luminance(y)
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch {a.shape} vs {b.shape}")
    usable = 1
    h, w = a.shape
    while usable < scales and min(h, w) // 2 >= window:
        usable += 1
        h, w = h // 2, w // 2
    wts = np.array(weights[:usable], dtype=np.float64)
    wts = wts / wts.sum()

    parts = []
    for level in range(usable):
        full, cs = _ssim_parts(a, b, window, 0.01, 0.03)
        parts.append(full if level == usable - 1 else cs)
        if level != usable - 1:
            a = _downsample2(a)
            b = _downsample2(b)
    value = 1.0
    for p, wt in zip(parts, wts):
        value *= max(p, 0.0) ** wt
    return float(value)


# ---------------------------------------------------------------------------
# Sweeps: rerun a method along one hyperparameter axis, score pairwise
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepSpec:
    """One method swept along one axis.

    ``method`` is sp/lime/mp2; the axis must match the method (patch sizes
    for sp, random sample batches for lime, coarse mask sizes for mp2).
    ``values`` overrides the default axis values, e.g. for small images.
    ``base`` carries extra config keyword arguments for the method.
    """

    method: str
    axis: str
    values: tuple = ()
    base: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in _AXIS_FOR_METHOD:
            raise ParameterError(f"unknown sweep method {self.method!r}")
        if self.axis not in SWEEP_AXES:
            raise ParameterError(f"unknown sweep axis {self.axis!r}")
        if _AXIS_FOR_METHOD[self.method] != self.axis:
            raise ParameterError(f"axis {self.axis!r} does not apply to {self.method!r}")
        if not self.values:
            object.__setattr__(self, "values", SWEEP_AXES[self.axis])
        if len(self.values) < 2:
            raise ParameterError("need at least two axis values")


def _sweep_heatmaps(image, target, spec: SweepSpec, oracle, filler) -> list[np.ndarray]:
    from .lime import LimeConfig, lime_attribute
    from .mp import Mp2Config, mp2_attribute
    from .sp import SpConfig, sp_attribute

    maps = []
    if spec.method == "sp":
        for patch in spec.values:
            cfg = SpConfig(patch=patch, filler=filler, target_class=target, **spec.base)
            maps.append(sp_attribute(image, oracle, cfg).data)
    elif spec.method == "lime":
        for seed in spec.values:
            cfg = LimeConfig(seed=seed, filler=filler, target_class=target, **spec.base)
            maps.append(lime_attribute(image, oracle, cfg).map.data)
    else:
        for mask_size in spec.values:
            cfg = Mp2Config(mask_size=mask_size, filler=filler, target_class=target, **spec.base)
            maps.append(mp2_attribute(image, oracle, cfg).map.data)
    return maps


def run_sweep(items, spec: SweepSpec, oracle, filler, threads: int = 1):
    """Pairwise heatmap similarity along a hyperparameter axis.

    ``items`` is a sequence of (image, target_class).  Per image, one
    heatmap per axis value is generated (k maps, k(k-1)/2 pairs); each
    similarity metric is averaged over pairs, then mean and standard
    deviation are taken across images.  Returns a dict with per-metric
    rows plus the sweep bookkeeping.
    """
    items = list(items)
    if not items:
        raise ParameterError("empty image set")
    k = len(spec.values)
    pair_count = k * (k - 1) // 2

    def per_image(item):
        image, target = item
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            maps = _sweep_heatmaps(image, target, spec, oracle, filler)
            unit = [normalize_unit(m) for m in maps]
            scores = {"ssim": [], "hog_pearson": [], "spearman": []}
            for i in range(k):
                for j in range(i + 1, k):
                    scores["ssim"].append(ssim(unit[i], unit[j]))
                    scores["hog_pearson"].append(hog_pearson(unit[i], unit[j]))
                    scores["spearman"].append(spearman(maps[i], maps[j]))
        return {name: float(np.mean(vals)) for name, vals in scores.items()}

    per_image_means = parallel_map(per_image, items, threads)
    rows = []
    for metric in ("ssim", "hog_pearson", "spearman"):
        vals = np.array([r[metric] for r in per_image_means])
        rows.append(
            {
                "method": spec.method + ("-g" if getattr(filler, "uses_mask", False) else ""),
                "metric": metric,
                "mean": float(vals.mean()),
                "std": float(vals.std()),
            }
        )
    return {
        "rows": rows,
        "axis": spec.axis,
        "values": tuple(spec.values),
        "pairs": pair_count,
        "n_images": len(items),
        "per_image": per_image_means,
    }
