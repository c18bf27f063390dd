"""Accuracy proxies and diagnostic analyses for attribution maps.

Three per-map quality measures:

* object localization: threshold the map at ``alpha * max``, take the
  tightest box around the surviving pixels, and compare to ground truth by
  IoU at 0.5 (the threshold fraction is tuned on held-out data);
* deletion: zero out pixels in decreasing attribution order and integrate
  the target probability over the fraction removed (lower is better);
* saliency: log of the derived-box area ratio (floored at 0.05) minus the
  log score of the upsampled crop (lower is better).

Plus dataset-level diagnostics: filler comparison (classifier accuracy and
MS-SSIM on object-masked images), mean confidence under full-image blur,
mean probability change for patches fully outside the ground-truth box, and
a histogram of top-1 labels over perturbation samples.
"""

from __future__ import annotations

import warnings
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as _PILImage

from .errors import FormatError, ParameterError
from .fillers import FillStrategy
from .imgcore import AttributionMap, BoundingBox, composite, gaussian_blur, resize_image
from .oracle import ClassifierOracle
from .sensitivity import ms_ssim
from .sp import SpConfig, sp_positions

__all__ = [
    "DEFAULT_ALPHA_GRID",
    "DeletionCurve",
    "EvalItem",
    "derive_box",
    "iou",
    "localization_error",
    "select_alpha",
    "deletion_metric",
    "saliency_metric",
    "compare_fillers",
    "full_blur_confidence",
    "outside_box_drop",
    "label_histogram",
    "parse_annotations",
    "load_eval_dataset",
    "read_object_mask",
]

DEFAULT_ALPHA_GRID = tuple(round(0.05 * i, 2) for i in range(20))  # 0.00 .. 0.95


def _map_data(a) -> np.ndarray:
    if isinstance(a, AttributionMap):
        return a.data
    return np.asarray(a, dtype=np.float64)


def derive_box(a, alpha: float) -> BoundingBox:
    """Tightest box containing every pixel with value >= alpha * max.

    Falls back to the full-image box when the map has no positive peak or
    the threshold leaves no pixels.
    """
    data = _map_data(a)
    if not 0.0 <= alpha < 1.0:
        raise ParameterError(f"alpha must lie in [0, 1), got {alpha}")
    h, w = data.shape
    full = BoundingBox(0, 0, w - 1, h - 1)
    peak = data.max()
    if peak <= 0.0:
        return full
    keep = data >= alpha * peak
    if not keep.any():
        return full
    rows = np.flatnonzero(keep.any(axis=1))
    cols = np.flatnonzero(keep.any(axis=0))
    return BoundingBox(int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1]))


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union with inclusive pixel areas."""
    ix0 = max(a.x_min, b.x_min)
    iy0 = max(a.y_min, b.y_min)
    ix1 = min(a.x_max, b.x_max)
    iy1 = min(a.y_max, b.y_max)
    if ix0 > ix1 or iy0 > iy1:
        return 0.0
    inter = (ix1 - ix0 + 1) * (iy1 - iy0 + 1)
    union = a.area + b.area - inter
    return inter / union


def localization_error(entries, alpha: float) -> float:
    """Fraction of images whose best-box IoU falls below 0.5.

    ``entries`` is a sequence of (map, ground-truth boxes) pairs; with
    multiple ground-truth boxes the best (max) IoU counts.
    """
    entries = list(entries)
    if not entries:
        raise ParameterError("empty evaluation set")
    misses = 0
    for amap, boxes in entries:
        if not boxes:
            raise ParameterError("every image needs at least one ground-truth box")
        derived = derive_box(amap, alpha)
        best = max(iou(derived, gt) for gt in boxes)
        if best < 0.5:
            misses += 1
    return misses / len(entries)


def select_alpha(entries, grid=DEFAULT_ALPHA_GRID) -> float:
    """Grid-search the threshold fraction minimizing localization error.

    Ties resolve to the smaller alpha.
    """
    entries = list(entries)
    best_alpha, best_err = None, np.inf
    for alpha in grid:
        err = localization_error(entries, alpha)
        if err < best_err:
            best_alpha, best_err = alpha, err
    return float(best_alpha)


@dataclass(frozen=True)
class DeletionCurve:
    fractions: np.ndarray  # fraction of pixels removed, starts at 0, ends at 1
    probabilities: np.ndarray
    auc: float


def deletion_metric(
    x, a, oracle: ClassifierOracle, target_class: int, step_pixels: int = 224 * 8
) -> DeletionCurve:
    """Zero out pixels in decreasing attribution order, tracking the score.

    ``step_pixels`` pixels turn black per step (ties in the attribution
    ranking break row-major); the curve starts at the unperturbed
    probability and the AUC is the trapezoidal integral over the
    fraction-removed axis in [0, 1].
    """
    if step_pixels < 1:
        raise ParameterError("step_pixels must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    data = _map_data(a)
    if data.shape != x.shape[:2]:
        raise ParameterError(f"map shape {data.shape} does not match image {x.shape[:2]}")
    total = data.size
    order = np.argsort(-data.ravel(), kind="stable")
    work = x.copy()
    probs = [oracle.score(work, target_class)]
    fractions = [0.0]
    for start in range(0, total, step_pixels):
        chunk = order[start : start + step_pixels]
        rows, cols = np.unravel_index(chunk, data.shape)
        work[rows, cols, :] = 0.0
        probs.append(oracle.score(work, target_class))
        fractions.append(min(start + step_pixels, total) / total)
    fractions_arr = np.array(fractions)
    probs_arr = np.array(probs)
    auc = float(np.trapz(probs_arr, fractions_arr))
    return DeletionCurve(fractions=fractions_arr, probabilities=probs_arr, auc=auc)


def saliency_metric(x, a, oracle: ClassifierOracle, target_class: int, alpha: float) -> float:
    """log(max(area ratio, 0.05)) - log(score of the upsampled crop)."""
    x = np.asarray(x, dtype=np.float64)
    box = derive_box(a, alpha)
    h, w = x.shape[:2]
    crop = x[box.y_min : box.y_max + 1, box.x_min : box.x_max + 1, :]
    crop_up = resize_image(crop, h, w)
    area_ratio = box.area / (h * w)
    score = oracle.score(crop_up, target_class)
    return float(np.log(max(area_ratio, 0.05)) - np.log(max(score, 1e-12)))


def compare_fillers(items, oracle: ClassifierOracle, fillers: dict[str, FillStrategy]):
    """Accuracy and MS-SSIM per filling method on object-masked images.

    ``items`` is a sequence of (image, object mask, target class).  The
    first output row scores the untouched images ("real"); each following
    row fills the object mask with one strategy before compositing.  Rows
    are dicts with keys name, accuracy, ms_ssim.
    """
    items = [(np.asarray(x, dtype=np.float64), np.asarray(m, dtype=np.float64), int(c)) for x, m, c in items]
    if not items:
        raise ParameterError("empty evaluation set")

    def evaluate(strategy: FillStrategy | None) -> tuple[float, float]:
        hits = 0
        sims = []
        for x, mask, target in items:
            if strategy is None:
                xbar = x
            else:
                xbar = composite(x, mask, strategy.fill(x, mask))
            if int(np.argmax(oracle.score_all(xbar))) == target:
                hits += 1
            sims.append(ms_ssim(x, xbar))
        return hits / len(items), float(np.mean(sims))

    rows = []
    acc, sim = evaluate(None)
    rows.append({"name": "real", "accuracy": acc, "ms_ssim": sim})
    for name, strategy in fillers.items():
        acc, sim = evaluate(strategy)
        rows.append({"name": name, "accuracy": acc, "ms_ssim": sim})
    return rows


def full_blur_confidence(images, targets, oracle: ClassifierOracle, sigma: float = 10.0) -> float:
    """Mean target-class probability after blurring entire images."""
    images = list(images)
    targets = list(targets)
    if not images or len(images) != len(targets):
        raise ParameterError("need equally many images and targets")
    probs = [
        oracle.score(gaussian_blur(np.asarray(x, dtype=np.float64), sigma), t)
        for x, t in zip(images, targets)
    ]
    return float(np.mean(probs))


def outside_box_drop(x, gt_box: BoundingBox, oracle: ClassifierOracle, cfg: SpConfig) -> float:
    """Mean |probability change| over patch positions fully outside the box.

    Quantifies how much a method's filler perturbs the score when the
    occluder cannot touch the object; an empty position set yields 0 with a
    warning.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[0]
    if x.shape[0] != x.shape[1]:
        raise ParameterError(f"expected a square image, got {x.shape}")
    base = oracle.score(x, cfg.target_class)
    filler = cfg.filler
    static_fill = None
    if not filler.uses_mask:
        static_fill = np.clip(filler.fill(x, np.zeros(x.shape[:2])), 0.0, 1.0)
    drops = []
    scratch = x.copy()
    for r0, c0 in sp_positions(d, cfg.patch, cfg.stride):
        patch_box = BoundingBox(c0, r0, c0 + cfg.patch - 1, r0 + cfg.patch - 1)
        if patch_box.intersects(gt_box):
            continue
        win = (slice(r0, r0 + cfg.patch), slice(c0, c0 + cfg.patch))
        if static_fill is not None:
            scratch[win] = static_fill[win]
        else:
            mask = np.zeros(x.shape[:2])
            mask[win] = 1.0
            fill = np.clip(filler.fill(x, mask), 0.0, 1.0)
            scratch[win] = fill[win]
        drops.append(abs(base - oracle.score(scratch, cfg.target_class)))
        scratch[win] = x[win]
    if not drops:
        warnings.warn("no patch position lies fully outside the box", stacklevel=2)
        return 0.0
    return float(np.mean(drops))


def label_histogram(samples, oracle: ClassifierOracle):
    """Top-1 predicted label counts over a set of images, most common first."""
    counts = Counter(int(np.argmax(oracle.score_all(np.asarray(s, dtype=np.float64)))) for s in samples)
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))


# ---------------------------------------------------------------------------
# Dataset ingestion: PNG directory + annotation file + optional object masks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalItem:
    name: str
    class_id: int
    boxes: tuple[BoundingBox, ...]


def parse_annotations(path) -> list[EvalItem]:
    """Parse `<filename> <class_id> <x_min> <y_min> <x_max> <y_max> [...]` lines."""
    items: list[EvalItem] = []
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            if len(tokens) < 6 or (len(tokens) - 2) % 4 != 0:
                raise FormatError(f"{path}:{ln}: expected name, class and 4k box coords")
            name = tokens[0]
            class_id = int(tokens[1])
            coords = [int(t) for t in tokens[2:]]
            boxes = tuple(
                BoundingBox(coords[i], coords[i + 1], coords[i + 2], coords[i + 3])
                for i in range(0, len(coords), 4)
            )
            items.append(EvalItem(name=name, class_id=class_id, boxes=boxes))
    if not items:
        raise FormatError(f"{path}: no annotations found")
    return items


def load_eval_dataset(image_dir, annotations_path):
    """Yield (item, image) pairs for every annotated PNG."""
    from .imgcore import read_image

    image_dir = Path(image_dir)
    out = []
    for item in parse_annotations(annotations_path):
        out.append((item, read_image(image_dir / item.name)))
    return out


def read_object_mask(path) -> np.ndarray:
    """Load a `<filename>.mask.png` object mask (255 = object) as binary."""
    with _PILImage.open(path) as im:
        if im.mode != "L":
            raise FormatError(f"{path}: object masks must be 8-bit grayscale")
        arr = np.asarray(im, dtype=np.float64)
    return (arr >= 128).astype(np.float64)
