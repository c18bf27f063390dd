"""Synthetic shapes dataset: bright squares vs. bright disks on dark noise.

Every image plants one bright shape on a dark noisy background; the class is
the shape (0 = square, 1 = disk) and the plant's bounding box and pixel mask
ship as ground truth.  This gives the evaluation harness a dataset where the
discriminative evidence has a known location, so localization and deletion
results can be checked directionally without any pretrained model.

Generation is driven by a single seeded generator, so a (seed, count, size)
triple always produces byte-identical files.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as _PILImage

from .errors import ParameterError
from .imgcore import BoundingBox, write_image

__all__ = ["ShapeSample", "generate_shapes", "make_shapes_dataset"]


@dataclass(frozen=True)
class ShapeSample:
    image: np.ndarray
    class_id: int  # 0 = square, 1 = disk
    box: BoundingBox
    mask: np.ndarray  # binary, 1 on shape pixels


def _one_sample(rng: np.random.Generator, size: int, class_id: int) -> ShapeSample:
    base = rng.uniform(0.05, 0.18)
    noise = rng.normal(0.0, 0.02, size=(size, size, 3))
    image = np.clip(base + noise, 0.0, 0.35)
    color = rng.uniform(0.75, 1.0, size=3)

    half_min, half_max = max(3, size // 8), max(4, size // 4)
    half = int(rng.integers(half_min, half_max + 1))
    cy = int(rng.integers(half + 1, size - half - 1))
    cx = int(rng.integers(half + 1, size - half - 1))

    yy, xx = np.mgrid[0:size, 0:size]
    if class_id == 0:
        inside = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
    else:
        inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= half**2
    image[inside] = color
    image = np.clip(image, 0.0, 1.0)

    rows = np.flatnonzero(inside.any(axis=1))
    cols = np.flatnonzero(inside.any(axis=0))
    box = BoundingBox(int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1]))
    return ShapeSample(
        image=image, class_id=class_id, box=box, mask=inside.astype(np.float64)
    )


def generate_shapes(count: int, size: int = 32, seed: int = 0) -> list[ShapeSample]:
    """Deterministic class-balanced batch of planted-shape images."""
    if count < 1:
        raise ParameterError("need at least one sample")
    if size < 16:
        raise ParameterError("size must be at least 16")
    rng = np.random.default_rng(seed)
    return [_one_sample(rng, size, i % 2) for i in range(count)]


def make_shapes_dataset(
    out_dir, n_train: int = 200, n_eval: int = 200, size: int = 32, seed: int = 0
) -> dict:
    """Write the dataset tree used by training and evaluation.

    Layout::

        <out>/train/<class_id>/img_NNNN.png      labelled training folder
        <out>/eval/img_NNNN.png                  evaluation images
        <out>/eval/img_NNNN.png.mask.png         object masks (255 = object)
        <out>/eval/annotations.txt               name class x0 y0 x1 y1 lines

    Returns the relevant paths.
    """
    out_dir = Path(out_dir)
    train_dir = out_dir / "train"
    eval_dir = out_dir / "eval"
    train_dir.mkdir(parents=True, exist_ok=True)
    eval_dir.mkdir(parents=True, exist_ok=True)

    train = generate_shapes(n_train, size, seed)
    for cid in sorted({s.class_id for s in train}):
        (train_dir / str(cid)).mkdir(exist_ok=True)
    for i, s in enumerate(train):
        write_image(s.image, train_dir / str(s.class_id) / f"img_{i:04d}.png")

    holdout = generate_shapes(n_eval, size, seed + 1)
    lines = []
    for i, s in enumerate(holdout):
        name = f"img_{i:04d}.png"
        write_image(s.image, eval_dir / name)
        mask_u8 = (s.mask * 255).astype(np.uint8)
        _PILImage.fromarray(mask_u8, mode="L").save(eval_dir / f"{name}.mask.png", format="PNG")
        lines.append(f"{name} {s.class_id} {s.box.x_min} {s.box.y_min} {s.box.x_max} {s.box.y_max}")
    (eval_dir / "annotations.txt").write_text("\n".join(lines) + "\n")

    return {
        "train_dir": train_dir,
        "eval_dir": eval_dir,
        "annotations": eval_dir / "annotations.txt",
        "n_train": n_train,
        "n_eval": n_eval,
        "size": size,
        "seed": seed,
    }
