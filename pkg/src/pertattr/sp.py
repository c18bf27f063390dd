"""Sliding-patch attribution: occlude a square window at strided positions.

A patch of side ``patch`` is placed at every stride-aligned position of a
square D x D image; the attribution of position (r, c) is the probability
drop when the window content is replaced by the filler.  Positions the
stride leaves short at the right/bottom edge are dropped (floor geometry),
giving a coarse map of side (D - patch) // stride + 1 that is bilinearly
upsampled to the image size.  Patch top-left corners align to heatmap cells.

With the gray filler this is the classic occlusion heatmap; plugging in an
inpainting filler gives the generative variant, with no other change.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import MethodError, ParameterError, ShapeError
from .fillers import CachingFill, FillStrategy, GrayFill
from .imgcore import AttributionMap, bilinear_resize
from .oracle import ClassifierOracle
from .util import parallel_map

__all__ = ["SpConfig", "sp_attribute", "sp_coarse_side", "sp_positions", "sp_sample_trace"]


@dataclass(frozen=True)
class SpConfig:
    patch: int = 29
    stride: int = 3
    filler: FillStrategy = field(default_factory=GrayFill)
    target_class: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.patch < 1:
            raise ParameterError(f"patch must be >= 1, got {self.patch}")
        if self.stride < 1:
            raise ParameterError(f"stride must be >= 1, got {self.stride}")

    def describe(self) -> dict:
        return {
            "method": "sp",
            "patch": self.patch,
            "stride": self.stride,
            "target_class": self.target_class,
            **self.filler.describe(),
        }


def sp_coarse_side(image_side: int, patch: int, stride: int) -> int:
    """Number of patch positions along one axis (floor geometry)."""
    if patch > image_side:
        raise ParameterError(f"patch {patch} exceeds image side {image_side}")
    return (image_side - patch) // stride + 1


def sp_positions(image_side: int, patch: int, stride: int):
    """Top-left pixel coordinates of every patch position, row-major."""
    n = sp_coarse_side(image_side, patch, stride)
    return [(r * stride, c * stride) for r in range(n) for c in range(n)]


def _check_square(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != x.shape[1]:
        raise ShapeError(f"sliding patch expects a square (D, D, 3) image, got {x.shape}")
    return x


def _position_probs(
    x: np.ndarray, oracle: ClassifierOracle, cfg: SpConfig, rows: list[int]
) -> np.ndarray:
    """Score s(x_perturbed) for every patch position in the given coarse rows.

    Equivalent to compositing the full image per position, but only the
    window is rewritten on a scratch copy, so each position costs one oracle
    call plus two window copies.
    """
    d = x.shape[0]
    n = sp_coarse_side(d, cfg.patch, cfg.stride)
    filler = cfg.filler
    if filler.uses_mask:
        filler = CachingFill(filler) if not isinstance(filler, CachingFill) else filler
        static_fill = None
    else:
        static_fill = np.clip(filler.fill(x, np.zeros(x.shape[:2])), 0.0, 1.0)

    def run_row(r: int) -> np.ndarray:
        scratch = x.copy()
        out = np.empty(n)
        r0 = r * cfg.stride
        for c in range(n):
            c0 = c * cfg.stride
            win = (slice(r0, r0 + cfg.patch), slice(c0, c0 + cfg.patch))
            if static_fill is not None:
                scratch[win] = static_fill[win]
            else:
                mask = np.zeros(x.shape[:2])
                mask[win] = 1.0
                fill = np.clip(filler.fill(x, mask), 0.0, 1.0)
                scratch[win] = fill[win]
            try:
                out[c] = oracle.score(scratch, cfg.target_class)
            except Exception as exc:
                raise MethodError(
                    f"sp: oracle failed at patch position ({r}, {c}), "
                    f"top-left ({r0}, {c0}): {exc}"
                ) from exc
            scratch[win] = x[win]
        return out

    return np.stack(parallel_map(run_row, rows, cfg.threads))


def sp_attribute(x, oracle: ClassifierOracle, cfg: SpConfig) -> AttributionMap:
    """Full-resolution sliding-patch attribution map."""
    x = _check_square(x)
    d = x.shape[0]
    n = sp_coarse_side(d, cfg.patch, cfg.stride)
    base = oracle.score(x, cfg.target_class)
    probs = _position_probs(x, oracle, cfg, list(range(n)))
    coarse = base - probs
    data = bilinear_resize(coarse, d, d)
    return AttributionMap(data, method="sp", params=cfg.describe())


def sp_sample_trace(x, oracle: ClassifierOracle, cfg: SpConfig, row: int):
    """Diagnostic probability curve for one coarse row.

    Returns ``[(col_index, probability), ...]`` with the score of the
    perturbed image at every patch position in that row.
    """
    x = _check_square(x)
    n = sp_coarse_side(x.shape[0], cfg.patch, cfg.stride)
    if not 0 <= row < n:
        raise ParameterError(f"row {row} out of range for {n} coarse rows")
    serial = replace(cfg, threads=1)
    probs = _position_probs(x, oracle, serial, [row])[0]
    return [(c, float(p)) for c, p in enumerate(probs)]
