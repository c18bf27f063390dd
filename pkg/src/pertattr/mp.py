"""Mask-optimization attribution: learn which pixels to perturb.

Three procedures share one piece of machinery, the chain rule through
"composite a filler under an upsampled coarse mask":

* ``mp_attribute`` learns a continuous coarse mask by gradient descent on
  L1 + total-variation + the expected score of jittered perturbed images;
  the learned mask, upsampled, is the attribution map.
* ``mp2_attribute`` grows a binary coarse mask greedily from all zeros,
  turning on the ``pixels_per_step`` zero pixels with the largest gradient
  magnitude each iteration, and stops as soon as the target probability
  falls to ``stop_prob``.  It has no L1/TV/jitter/step-count knobs.
* ``fido_ca_attribute`` optimizes a continuous mask with Adam under the
  preservation objective: keep the masked-in pixels, fill the complement,
  and maximize the retained score (a deletion objective is available for
  paired comparisons).

All gradients are computed analytically (oracle input gradient, times the
filler-minus-image factor from the compositing equation, pulled back through
the bilinear upsampling adjoint) so they can be validated against finite
differences.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .errors import CapabilityError, MethodError, ParameterError
from .fillers import BlurFill, CachingFill, FillStrategy, HarmonicInpaintFill
from .imgcore import (
    AttributionMap,
    bilinear_resize,
    bilinear_resize_adjoint,
    composite,
    gaussian_blur,
    jitter,
    jitter_adjoint,
)
from .oracle import ClassifierOracle

__all__ = [
    "MpConfig",
    "Mp2Config",
    "FidoConfig",
    "MpResult",
    "Mp2Result",
    "tv_norm",
    "tv_grad",
    "enumerate_jitters",
    "mp_objective_and_gradient",
    "mp_attribute",
    "score_mask_gradient",
    "mp2_attribute",
    "mp2g_attribute",
    "fido_ca_attribute",
]


# ---------------------------------------------------------------------------
# Total variation with forward differences
# ---------------------------------------------------------------------------


def _forward_diffs(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dx = np.zeros_like(m)
    dy = np.zeros_like(m)
    dx[:, :-1] = m[:, 1:] - m[:, :-1]
    dy[:-1, :] = m[1:, :] - m[:-1, :]
    return dx, dy


def tv_norm(m: np.ndarray, beta: float = 3.0) -> float:
    """Sum over pixels of the Euclidean gradient magnitude raised to beta.

    Gradients are forward differences (right and down), zero at the far
    edges; a constant mask scores exactly 0.
    """
    if beta <= 0:
        raise ParameterError("tv beta must be positive")
    dx, dy = _forward_diffs(np.asarray(m, dtype=np.float64))
    mag = np.sqrt(dx**2 + dy**2)
    return float((mag**beta).sum())


def tv_grad(m: np.ndarray, beta: float = 3.0) -> np.ndarray:
    """Analytic gradient of :func:`tv_norm` with respect to the mask."""
    if beta <= 0:
        raise ParameterError("tv beta must be positive")
    m = np.asarray(m, dtype=np.float64)
    dx, dy = _forward_diffs(m)
    mag = np.sqrt(dx**2 + dy**2)
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(mag > 0.0, beta * mag ** (beta - 2.0), 0.0)
    cx = coef * dx
    cy = coef * dy
    g = np.zeros_like(m)
    g[:, :-1] -= cx[:, :-1]
    g[:, 1:] += cx[:, :-1]
    g[:-1, :] -= cy[:-1, :]
    g[1:, :] += cy[:-1, :]
    return g


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MpConfig:
    mask_size: int = 28
    lambda1: float = 0.01  # L1 weight; not pinned by the method, documented default
    lambda2: float = 0.2  # TV weight; documented default
    tv_beta: float = 3.0
    steps: int = 300
    lr: float = 0.1
    jitter_batch: int = 4
    blur_sigma: float = 10.0
    target_class: int = 0
    seed: int = 0
    deterministic_jitter: bool = False

    def __post_init__(self):
        if self.mask_size < 1:
            raise ParameterError("mask size must be >= 1")
        if self.steps < 1:
            raise ParameterError("need at least one step")
        if self.lr <= 0:
            raise ParameterError("learning rate must be positive")
        if self.jitter_batch < 1:
            raise ParameterError("jitter batch must be >= 1")

    def describe(self) -> dict:
        return {
            "method": "mp",
            "mask_size": self.mask_size,
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "tv_beta": self.tv_beta,
            "steps": self.steps,
            "lr": self.lr,
            "jitter_batch": self.jitter_batch,
            "blur_sigma": self.blur_sigma,
            "target_class": self.target_class,
            "seed": self.seed,
            "deterministic_jitter": self.deterministic_jitter,
        }


@dataclass(frozen=True)
class Mp2Config:
    mask_size: int = 28
    pixels_per_step: int = 2
    stop_prob: float = 0.001  # 0.003 for 365-way scenery models
    max_steps: int | None = None  # default: mask_size^2 / pixels_per_step
    blur_sigma: float = 10.0
    filler: FillStrategy | None = None  # default: blur; inpainting gives the G-variant
    target_class: int = 0
    select_most_negative: bool = False  # rank by -g instead of |g|

    def __post_init__(self):
        if self.mask_size < 1:
            raise ParameterError("mask size must be >= 1")
        if not 0.0 < self.stop_prob < 1.0:
            raise ParameterError("stop probability must lie in (0, 1)")
        if self.pixels_per_step < 1:
            raise ParameterError("pixels per step must be >= 1")

    @property
    def effective_max_steps(self) -> int:
        if self.max_steps is not None:
            return self.max_steps
        return -(-self.mask_size**2 // self.pixels_per_step)

    def describe(self) -> dict:
        filler = self.filler or BlurFill(self.blur_sigma)
        return {
            "method": "mp2",
            "mask_size": self.mask_size,
            "pixels_per_step": self.pixels_per_step,
            "stop_prob": self.stop_prob,
            "max_steps": self.effective_max_steps,
            "target_class": self.target_class,
            "select_most_negative": self.select_most_negative,
            **filler.describe(),
        }


@dataclass(frozen=True)
class FidoConfig:
    mask_size: int = 56
    lr: float = 0.05
    reg: float = 0.001
    steps: int = 300
    filler: FillStrategy | None = None  # default: built-in inpainting
    target_class: int = 0
    seed: int = 0
    objective: str = "preservation"  # or "deletion"

    def __post_init__(self):
        if self.mask_size < 1:
            raise ParameterError("mask size must be >= 1")
        if self.lr <= 0:
            raise ParameterError("learning rate must be positive")
        if self.steps < 1:
            raise ParameterError("need at least one step")
        if self.objective not in ("preservation", "deletion"):
            raise ParameterError(f"unknown objective {self.objective!r}")

    def describe(self) -> dict:
        filler = self.filler or HarmonicInpaintFill()
        return {
            "method": "fido",
            "mask_size": self.mask_size,
            "lr": self.lr,
            "reg": self.reg,
            "steps": self.steps,
            "objective": self.objective,
            "target_class": self.target_class,
            "seed": self.seed,
            **filler.describe(),
        }


@dataclass(frozen=True)
class MpResult:
    map: AttributionMap
    coarse_mask: np.ndarray
    history: list[dict]


@dataclass(frozen=True)
class Mp2Result:
    map: AttributionMap
    coarse_mask: np.ndarray
    converged: bool
    iterations: int
    history: list[dict]


def _require_gradients(oracle: ClassifierOracle, method: str) -> None:
    if not oracle.has_gradients:
        raise CapabilityError(
            f"{method}: oracle provides no input gradients; wrap a score-only "
            "model in FiniteDiffGradients to enable a (slow) numeric fallback"
        )


def enumerate_jitters() -> list[tuple[int, str]]:
    """All 9 distinct translations for tau in 0..4 (tau=0 once)."""
    out = [(0, "horizontal")]
    for tau in range(1, 5):
        out.append((tau, "horizontal"))
    for tau in range(1, 5):
        out.append((tau, "vertical"))
    return out


def _jitter_adjoint_image(grad: np.ndarray, tau: int, direction: str) -> np.ndarray:
    return jitter_adjoint(grad, tau, direction)


def mp_objective_and_gradient(
    x: np.ndarray,
    oracle: ClassifierOracle,
    m: np.ndarray,
    cfg: MpConfig,
    jitters: list[tuple[int, str]],
    filler_image: np.ndarray | None = None,
) -> tuple[float, np.ndarray, dict]:
    """Evaluate the full mask objective and its analytic coarse-mask gradient.

    The objective is lambda1 * |m|_1 + lambda2 * TV(m) + mean over the given
    jitter batch of the target score of the perturbed image.  Exposed so the
    gradient can be checked against finite differences on a frozen batch.
    """
    x = np.asarray(x, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    f = gaussian_blur(x, cfg.blur_sigma) if filler_image is None else filler_image
    h, w = x.shape[:2]
    mask_full = bilinear_resize(m, h, w)
    xbar = composite(x, mask_full, f)

    score_sum = 0.0
    grad_full = np.zeros((h, w))
    fx = f - x
    for tau, direction in jitters:
        xj = jitter(xbar, tau, direction)
        score_sum += oracle.score(xj, cfg.target_class)
        gx = oracle.input_gradient(xj, cfg.target_class)
        gxb = _jitter_adjoint_image(gx, tau, direction)
        grad_full += (fx * gxb).sum(axis=2)
    score_term = score_sum / len(jitters)
    grad_full /= len(jitters)

    l1 = float(m.sum())  # m is kept in [0,1], so |m|_1 is the plain sum
    tv = tv_norm(m, cfg.tv_beta)
    obj = cfg.lambda1 * l1 + cfg.lambda2 * tv + score_term
    grad = (
        cfg.lambda1 * np.ones_like(m)
        + cfg.lambda2 * tv_grad(m, cfg.tv_beta)
        + bilinear_resize_adjoint(grad_full, m.shape[0], m.shape[1])
    )
    parts = {"l1_term": cfg.lambda1 * l1, "tv_term": cfg.lambda2 * tv, "score_term": score_term}
    return obj, grad, parts


def mp_attribute(x, oracle: ClassifierOracle, cfg: MpConfig) -> MpResult:
    """Learn a continuous blur mask by projected gradient descent."""
    _require_gradients(oracle, "mp")
    x = np.asarray(x, dtype=np.float64)
    if cfg.mask_size > min(x.shape[:2]):
        raise ParameterError(f"mask size {cfg.mask_size} exceeds image {x.shape[:2]}")
    rng = np.random.default_rng(cfg.seed)
    m = rng.random((cfg.mask_size, cfg.mask_size))
    f = gaussian_blur(x, cfg.blur_sigma)
    directions = ("horizontal", "vertical")
    history: list[dict] = []
    for step in range(cfg.steps):
        if cfg.deterministic_jitter:
            jitters = enumerate_jitters()
        else:
            jitters = [
                (int(rng.integers(0, 5)), directions[int(rng.integers(0, 2))])
                for _ in range(cfg.jitter_batch)
            ]
        obj, grad, parts = mp_objective_and_gradient(x, oracle, m, cfg, jitters, filler_image=f)
        if not np.isfinite(obj):
            raise MethodError(f"mp: non-finite objective at step {step}")
        history.append({"step": step, "objective": obj, **parts})
        m = np.clip(m - cfg.lr * grad, 0.0, 1.0)
    data = bilinear_resize(m, x.shape[0], x.shape[1])
    amap = AttributionMap(data, method="mp", params=cfg.describe())
    return MpResult(map=amap, coarse_mask=m, history=history)


# ---------------------------------------------------------------------------
# Greedy growth (MP2 / MP2-G)
# ---------------------------------------------------------------------------


def score_mask_gradient(
    x: np.ndarray,
    oracle: ClassifierOracle,
    m: np.ndarray,
    filler_image: np.ndarray,
    target_class: int,
) -> tuple[float, np.ndarray]:
    """Target probability and its gradient w.r.t. the coarse mask.

    The perturbed image is composite(x, upsample(m), filler_image) with the
    filler held fixed; the gradient chains the oracle input gradient through
    the compositing equation and the upsampling adjoint.
    """
    x = np.asarray(x, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    h, w = x.shape[:2]
    mask_full = bilinear_resize(m, h, w)
    xbar = composite(x, mask_full, filler_image)
    prob = oracle.score(xbar, target_class)
    gx = oracle.input_gradient(xbar, target_class)
    grad_full = ((filler_image - x) * gx).sum(axis=2)
    return prob, bilinear_resize_adjoint(grad_full, m.shape[0], m.shape[1])


def mp2_attribute(x, oracle: ClassifierOracle, cfg: Mp2Config) -> Mp2Result:
    """Grow a binary coarse mask two pixels at a time until the score collapses.

    The stopping check runs before each growth step, so an image already
    below the threshold yields an empty mask.  If the threshold is not
    reached by a full mask (blurring everything does not always kill the
    score) the result carries ``converged=False``.
    """
    _require_gradients(oracle, "mp2")
    x = np.asarray(x, dtype=np.float64)
    if cfg.mask_size > min(x.shape[:2]):
        raise ParameterError(f"mask size {cfg.mask_size} exceeds image {x.shape[:2]}")
    filler = cfg.filler or BlurFill(cfg.blur_sigma)
    if filler.uses_mask and not isinstance(filler, CachingFill):
        filler = CachingFill(filler)

    ms = cfg.mask_size
    m = np.zeros((ms, ms))
    total = ms * ms
    history: list[dict] = []
    converged = False
    iterations = 0
    h, w = x.shape[:2]
    while True:
        mask_full = bilinear_resize(m, h, w)
        mask_bin = (mask_full >= 0.5).astype(np.float64)
        if mask_bin.all() and filler.uses_mask:
            # boundary-based inpainters cannot fill a fully-masked image
            warnings.warn(
                "mp2: mask covers the whole image before reaching the stop "
                "threshold; the inpainting filler cannot evaluate this state",
                stacklevel=2,
            )
            break
        f = np.clip(filler.fill(x, mask_bin), 0.0, 1.0)
        xbar = composite(x, mask_full, f)
        prob = oracle.score(xbar, cfg.target_class)
        ones = int(round(m.sum()))
        history.append({"iteration": iterations, "probability": prob, "ones": ones})
        if prob <= cfg.stop_prob:
            converged = True
            break
        if ones >= total:
            warnings.warn(
                f"mp2: mask is full but probability {prob:.4g} is still above "
                f"stop threshold {cfg.stop_prob}",
                stacklevel=2,
            )
            break
        if iterations >= cfg.effective_max_steps:
            warnings.warn(
                f"mp2: reached {iterations} growth steps without hitting the "
                f"stop threshold (probability {prob:.4g})",
                stacklevel=2,
            )
            break
        gx = oracle.input_gradient(xbar, cfg.target_class)
        grad_full = ((f - x) * gx).sum(axis=2)
        g = bilinear_resize_adjoint(grad_full, ms, ms)
        key = (-g if cfg.select_most_negative else np.abs(g)).ravel()
        key = np.where(m.ravel() > 0.0, -np.inf, key)
        # stable sort keeps row-major order among ties
        order = np.argsort(-key, kind="stable")
        picks = [i for i in order[: cfg.pixels_per_step] if np.isfinite(key[i])]
        if not picks:
            break
        m.ravel()[picks] = 1.0
        iterations += 1

    data = bilinear_resize(m, h, w)
    amap = AttributionMap(data, method="mp2", params=cfg.describe())
    return Mp2Result(
        map=amap, coarse_mask=m, converged=converged, iterations=iterations, history=history
    )


def mp2g_attribute(x, oracle: ClassifierOracle, cfg: Mp2Config) -> Mp2Result:
    """MP2 with the built-in inpainter as filler (the generative variant)."""
    if cfg.filler is None:
        cfg = replace(cfg, filler=HarmonicInpaintFill())
    return mp2_attribute(x, oracle, cfg)


# ---------------------------------------------------------------------------
# Preservation objective (FIDO-style baseline)
# ---------------------------------------------------------------------------


def fido_ca_attribute(x, oracle: ClassifierOracle, cfg: FidoConfig) -> MpResult:
    """Adam-optimize a continuous mask under the preservation objective.

    Preservation keeps masked-in pixels and fills the complement, minimizing
    ``-score + reg * |1 - m|_1``; the deletion flavor fills the masked
    region instead, minimizing ``score + reg * |m|_1``.
    """
    _require_gradients(oracle, "fido")
    x = np.asarray(x, dtype=np.float64)
    if cfg.mask_size > min(x.shape[:2]):
        raise ParameterError(f"mask size {cfg.mask_size} exceeds image {x.shape[:2]}")
    filler = cfg.filler or HarmonicInpaintFill()
    if filler.uses_mask and not isinstance(filler, CachingFill):
        filler = CachingFill(filler)
    preservation = cfg.objective == "preservation"

    rng = np.random.default_rng(cfg.seed)
    ms = cfg.mask_size
    m = rng.random((ms, ms))
    h, w = x.shape[:2]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m1 = np.zeros_like(m)
    v1 = np.zeros_like(m)
    history: list[dict] = []
    for step in range(cfg.steps):
        mask_full = bilinear_resize(m, h, w)
        perturb = 1.0 - mask_full if preservation else mask_full
        perturb_bin = (perturb >= 0.5).astype(np.float64)
        try:
            f = np.clip(filler.fill(x, perturb_bin), 0.0, 1.0)
        except ParameterError as exc:
            raise MethodError(f"fido: filler failed at step {step}: {exc}") from exc
        xbar = composite(x, perturb, f)
        prob = oracle.score(xbar, cfg.target_class)
        gx = oracle.input_gradient(xbar, cfg.target_class)
        grad_perturb = ((f - x) * gx).sum(axis=2)
        if preservation:
            obj = -prob + cfg.reg * float((1.0 - m).sum())
            grad = bilinear_resize_adjoint(grad_perturb, ms, ms) - cfg.reg
        else:
            obj = prob + cfg.reg * float(m.sum())
            grad = bilinear_resize_adjoint(grad_perturb, ms, ms) + cfg.reg
        if not np.isfinite(obj):
            raise MethodError(f"fido: non-finite objective at step {step}")
        history.append({"step": step, "objective": obj, "probability": prob})
        m1 = beta1 * m1 + (1 - beta1) * grad
        v1 = beta2 * v1 + (1 - beta2) * grad * grad
        mhat = m1 / (1 - beta1 ** (step + 1))
        vhat = v1 / (1 - beta2 ** (step + 1))
        m = np.clip(m - cfg.lr * mhat / (np.sqrt(vhat) + eps), 0.0, 1.0)
    data = bilinear_resize(m, h, w)
    amap = AttributionMap(data, method="fido", params=cfg.describe())
    return MpResult(map=amap, coarse_mask=m, history=history)
