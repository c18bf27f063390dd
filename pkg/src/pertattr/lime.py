"""LIME-style attribution: sparse per-superpixel fits from masked samples.

The image is segmented into superpixels; random presence vectors decide
which superpixels survive in each perturbation sample (occluded ones are
replaced by the filler through the usual compositing).  Samples are weighted
by an exponential kernel on the L2 image distance and a weighted LASSO with
an unpenalized intercept is fit by cyclic coordinate descent with
soft-thresholding.  Each superpixel's coefficient is painted onto its pixels
to form the full-resolution map, so the heatmap is piecewise constant on
superpixels.

The generative variant is the same procedure with an inpainting filler.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MethodError, ParameterError
from .fillers import FillStrategy, GrayFill
from .imgcore import AttributionMap, composite, write_image
from .oracle import ClassifierOracle
from .superpixel import Segmentation, slic, superpixel_mask
from .util import parallel_map

__all__ = [
    "LimeConfig",
    "LimeSample",
    "LimeResult",
    "lime_attribute",
    "lime_sample_batch",
    "draw_presence_vectors",
    "fit_weighted_lasso",
    "dump_samples",
]


@dataclass(frozen=True)
class LimeConfig:
    n_segments: int = 50
    n_samples: int = 1000
    kernel_width: float = 0.25
    lasso_lambda: float = 0.01
    fit_steps: int = 1000
    occlusion_prob: float = 0.5
    seed: int = 0
    compactness: float = 10.0
    slic_iterations: int = 10
    filler: FillStrategy = field(default_factory=GrayFill)
    target_class: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.n_samples < 1:
            raise ParameterError("need at least one sample")
        if self.kernel_width <= 0:
            raise ParameterError("kernel width must be positive")
        if self.lasso_lambda < 0:
            raise ParameterError("lasso penalty must be non-negative")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ParameterError("occlusion probability must lie in [0, 1]")

    def describe(self) -> dict:
        return {
            "method": "lime",
            "n_segments": self.n_segments,
            "n_samples": self.n_samples,
            "kernel_width": self.kernel_width,
            "lasso_lambda": self.lasso_lambda,
            "fit_steps": self.fit_steps,
            "occlusion_prob": self.occlusion_prob,
            "seed": self.seed,
            "target_class": self.target_class,
            **self.filler.describe(),
        }


@dataclass(frozen=True)
class LimeSample:
    z: np.ndarray  # presence vector, True = superpixel kept
    image: np.ndarray
    score: float
    weight: float


@dataclass(frozen=True)
class LimeResult:
    map: AttributionMap
    coef: np.ndarray
    intercept: float
    segmentation: Segmentation
    objective: list[float]


def draw_presence_vectors(
    n_segments: int, n_samples: int, occlusion_prob: float, seed: int
) -> np.ndarray:
    """Boolean (N, S) matrix; sample 0 keeps everything, the rest keep each
    superpixel independently with probability 1 - occlusion_prob."""
    rng = np.random.default_rng(seed)
    z = rng.random((n_samples, n_segments)) >= occlusion_prob
    z[0] = True
    return z


def _sample_weight(x: np.ndarray, perturbed: np.ndarray, kernel_width: float) -> float:
    scale = np.sqrt(float(x.size))
    d = np.linalg.norm((x - perturbed).ravel()) / scale
    return float(np.exp(-(d**2) / kernel_width**2))


def _build_sample(x, seg, z, filler: FillStrategy):
    occluded = np.flatnonzero(~z)
    mask = superpixel_mask(seg, occluded)
    return composite(x, mask, filler.fill(x, mask))


def lime_sample_batch(
    x, seg: Segmentation, cfg: LimeConfig, seed: int, oracle: ClassifierOracle | None = None
) -> list[LimeSample]:
    """Materialize a deterministic batch of perturbation samples.

    Exposed separately so the sensitivity harness can re-batch with fresh
    seeds.  Scores are filled in when an oracle is supplied (NaN otherwise).
    At full image resolution a batch of 1000 samples is large; prefer
    :func:`lime_attribute` when only the fit matters.
    """
    x = np.asarray(x, dtype=np.float64)
    zs = draw_presence_vectors(seg.num_segments, cfg.n_samples, cfg.occlusion_prob, seed)
    out = []
    for z in zs:
        perturbed = _build_sample(x, seg, z, cfg.filler)
        w = _sample_weight(x, perturbed, cfg.kernel_width)
        score = float("nan") if oracle is None else oracle.score(perturbed, cfg.target_class)
        out.append(LimeSample(z=z.copy(), image=perturbed, score=score, weight=w))
    return out


def fit_weighted_lasso(
    z: np.ndarray, y: np.ndarray, w: np.ndarray, lam: float, steps: int
) -> tuple[float, np.ndarray, list[float]]:
    """Minimize sum_i w_i (y_i - a0 - z_i . a)^2 + lam * |a|_1.

    Cyclic coordinate descent with soft-thresholding; the intercept a0 is
    unpenalized.  Returns (a0, a, per-cycle objective values); the objective
    is checked to be non-increasing across cycles.
    """
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, s = z.shape
    if np.all(np.all(z == z[0], axis=1)):
        raise MethodError("lime: all presence vectors identical, design has no variance")
    wz = w[:, None] * z
    denom = (wz * z).sum(axis=0)  # sum_i w_i z_ik^2
    w_sum = w.sum()

    a0 = 0.0
    a = np.zeros(s)
    resid = y - a0 - z @ a
    history: list[float] = []
    prev = np.inf
    for _ in range(steps):
        shift = float((w * resid).sum() / w_sum)
        a0 += shift
        resid -= shift
        for k in range(s):
            if denom[k] == 0.0:
                continue
            rho = float(wz[:, k] @ resid) + denom[k] * a[k]
            new = np.sign(rho) * max(abs(rho) - lam / 2.0, 0.0) / denom[k]
            if new != a[k]:
                resid += z[:, k] * (a[k] - new)
                a[k] = new
        obj = float((w * resid**2).sum() + lam * np.abs(a).sum())
        if obj > prev + 1e-9 * max(1.0, abs(prev)):
            raise MethodError(f"lime: coordinate descent objective increased ({prev} -> {obj})")
        history.append(obj)
        prev = obj
    return a0, a, history


def lime_attribute(x, oracle: ClassifierOracle, cfg: LimeConfig) -> LimeResult:
    """Fit per-superpixel attributions and paint them into a heatmap."""
    x = np.asarray(x, dtype=np.float64)
    seg = slic(x, cfg.n_segments, cfg.compactness, cfg.slic_iterations)
    if seg.num_segments < 2:
        raise MethodError(f"lime: segmentation degenerated to {seg.num_segments} superpixel")
    zs = draw_presence_vectors(seg.num_segments, cfg.n_samples, cfg.occlusion_prob, cfg.seed)

    def score_one(z):
        perturbed = _build_sample(x, seg, z, cfg.filler)
        w = _sample_weight(x, perturbed, cfg.kernel_width)
        return oracle.score(perturbed, cfg.target_class), w

    pairs = parallel_map(score_one, list(zs), cfg.threads)
    y = np.array([p[0] for p in pairs])
    w = np.array([p[1] for p in pairs])
    a0, coef, history = fit_weighted_lasso(
        zs.astype(np.float64), y, w, cfg.lasso_lambda, cfg.fit_steps
    )
    data = coef[seg.labels]
    amap = AttributionMap(data, method="lime", params=cfg.describe())
    return LimeResult(map=amap, coef=coef, intercept=a0, segmentation=seg, objective=history)


def dump_samples(samples: list[LimeSample], out_dir) -> None:
    """Write per-sample PNGs plus a CSV of (index, presence bits, score, weight)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "samples.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "presence", "score", "weight"])
        for i, s in enumerate(samples):
            write_image(s.image, out_dir / f"sample_{i:04d}.png")
            bits = "".join("1" if b else "0" for b in s.z)
            writer.writerow([i, bits, f"{s.score:.9g}", f"{s.weight:.9g}"])
