"""Filler strategies: the replacement content composited into masked regions.

Every strategy produces a full-size filler image ``f``; callers blend it with
the original via :func:`pertattr.imgcore.composite`, so pixels outside the
mask always stay bit-exact copies of the input.  Strategies whose output does
not depend on the mask (gray, noise, blur) advertise ``uses_mask = False`` so
sliding-window loops can compute the filler once.

The built-in inpainter is harmonic diffusion: masked pixels relax toward the
average of their 4-neighbors with unmasked pixels held fixed, which keeps the
result inside the intensity range of the surrounding content.  The external
adapter shells out to any tool honoring the CLI contract
``<command> <image.png> <mask.png> <out.png>`` (mask: 8-bit grayscale,
255 = inpaint, 0 = keep).
"""

from __future__ import annotations

import hashlib
import os
import shlex
import subprocess
import tempfile
from collections import OrderedDict
from pathlib import Path

import numpy as np
from PIL import Image as _PILImage

from .errors import ExternalToolError, ParameterError, ShapeError
from .imgcore import bilinear_resize, composite, gaussian_blur, read_image, write_image

__all__ = [
    "FillStrategy",
    "GrayFill",
    "NoiseFill",
    "BlurFill",
    "HarmonicInpaintFill",
    "ExternalInpaintFill",
    "CachingFill",
    "counter_noise",
    "make_filler",
]

IMAGENET_MEAN = (0.485, 0.456, 0.406)


class FillStrategy:
    """Base interface: ``fill(x, m) -> f`` with f values in [0, 1]."""

    name = "base"
    uses_mask = False

    def fill(self, x: np.ndarray, m: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> dict:
        return {}

    def describe(self) -> dict:
        return {"filler": self.name, **self.params()}


class GrayFill(FillStrategy):
    """Constant filler at a configurable mean color (dataset-mean gray)."""

    name = "gray"
    uses_mask = False

    def __init__(self, color: tuple[float, float, float] = IMAGENET_MEAN):
        self.color = tuple(float(c) for c in color)
        if min(self.color) < 0.0 or max(self.color) > 1.0:
            raise ParameterError(f"gray color must lie in [0,1]^3, got {color}")

    def fill(self, x: np.ndarray, m: np.ndarray) -> np.ndarray:
        out = np.empty_like(np.asarray(x, dtype=np.float64))
        out[:] = self.color
        return out

    def params(self) -> dict:
        return {"color": self.color}


def counter_noise(seed: int, shape: tuple[int, ...]) -> np.ndarray:
    """Order-independent uniform [0,1) noise keyed by (seed, flat index).

    Each value is a splitmix-style 64-bit mix of the seed and the flat array
    index; the top 24 bits become the mantissa.  The mapping is pure, so the
    same (seed, shape) yields the same array on every platform and worker.
    """
    count = int(np.prod(shape))
    idx = np.arange(1, count + 1, dtype=np.uint64)
    z = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + idx * np.uint64(0x9E3779B97F4A7C15)
    z ^= z >> np.uint64(30)
    z *= np.uint64(0xBF58476D1CE4E5B9)
    z ^= z >> np.uint64(27)
    z *= np.uint64(0x94D049BB133111EB)
    z ^= z >> np.uint64(31)
    top24 = (z >> np.uint64(40)).astype(np.float64)
    return (top24 / float(1 << 24)).reshape(shape)


class NoiseFill(FillStrategy):
    """I.i.d. uniform noise per pixel per channel from a counter-based generator."""

    name = "noise"
    uses_mask = False

    def __init__(self, seed: int = 0):
        self.seed = int(seed)

    def fill(self, x: np.ndarray, m: np.ndarray) -> np.ndarray:
        return counter_noise(self.seed, np.asarray(x).shape)

    def params(self) -> dict:
        return {"seed": self.seed}


class BlurFill(FillStrategy):
    """Gaussian-blurred copy of the whole input image."""

    name = "blur"
    uses_mask = False

    def __init__(self, sigma: float = 10.0):
        if sigma <= 0:
            raise ParameterError(f"blur sigma must be positive, got {sigma}")
        self.sigma = float(sigma)

    def fill(self, x: np.ndarray, m: np.ndarray) -> np.ndarray:
        return gaussian_blur(x, self.sigma)

    def params(self) -> dict:
        return {"sigma": self.sigma}


class HarmonicInpaintFill(FillStrategy):
    """Diffusion inpainting: Jacobi relaxation of masked pixels.

    Masked pixels (mask >= 0.5) iterate toward the average of their in-bounds
    4-neighbors while unmasked pixels stay fixed, starting from the mean of
    the unmasked content.  Iteration stops when the largest per-sweep update
    falls below ``tolerance`` or at the iteration cap.  Because every update
    is an average of values that started inside the unmasked intensity range,
    the result obeys the discrete maximum principle.
    """

    name = "inpaint"
    uses_mask = True

    def __init__(self, iterations: int = 4000, tolerance: float = 1e-5):
        if iterations < 1:
            raise ParameterError("need at least one relaxation sweep")
        if tolerance <= 0:
            raise ParameterError("tolerance must be positive")
        self.iterations = int(iterations)
        self.tolerance = float(tolerance)

    def fill(self, x: np.ndarray, m: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        m = np.asarray(m, dtype=np.float64)
        if m.shape != x.shape[:2]:
            raise ShapeError(f"mask shape {m.shape} does not match image {x.shape[:2]}")
        hole = m >= 0.5
        if not hole.any():
            return x.copy()
        if hole.all():
            raise ParameterError("mask covers the entire image; no boundary data")

        # Relax only on the hole's bounding window (plus a 1-px rim): the
        # harmonic solution inside the hole depends only on adjacent values.
        rows = np.flatnonzero(hole.any(axis=1))
        cols = np.flatnonzero(hole.any(axis=0))
        r0, r1 = max(rows[0] - 1, 0), min(rows[-1] + 2, x.shape[0])
        c0, c1 = max(cols[0] - 1, 0), min(cols[-1] + 2, x.shape[1])

        out = x.copy()
        win = out[r0:r1, c0:c1]
        hole_w = hole[r0:r1, c0:c1]
        boundary_mean = x[~hole].reshape(-1, x.shape[2]).mean(axis=0)
        win[hole_w] = boundary_mean

        h, w = hole_w.shape
        count = np.zeros((h, w))
        count[:-1] += 1.0
        count[1:] += 1.0
        count[:, :-1] += 1.0
        count[:, 1:] += 1.0

        for _ in range(self.iterations):
            acc = np.zeros_like(win)
            acc[:-1] += win[1:]
            acc[1:] += win[:-1]
            acc[:, :-1] += win[:, 1:]
            acc[:, 1:] += win[:, :-1]
            avg = acc / count[:, :, None]
            delta = np.abs(avg[hole_w] - win[hole_w]).max()
            win[hole_w] = avg[hole_w]
            if delta < self.tolerance:
                break
        return out

    def params(self) -> dict:
        return {"iterations": self.iterations, "tolerance": self.tolerance}


class ExternalInpaintFill(FillStrategy):
    """Adapter for an external inpainting tool.

    Writes the image and binary mask as PNGs, runs
    ``<command> <image.png> <mask.png> <out.png>`` and reads the result.  If
    the tool works at a fixed native resolution, set ``native_size`` and the
    adapter resizes before and after.  The tool output is re-composited with
    the original, so unmasked pixels survive whatever the tool does.
    """

    name = "inpaint-ext"
    uses_mask = True

    def __init__(self, command, timeout: float = 60.0, native_size: int | None = None):
        if isinstance(command, str):
            command = shlex.split(command)
        if not command:
            raise ParameterError("empty external inpainter command")
        self.command = list(command)
        self.timeout = float(timeout)
        self.native_size = native_size

    def fill(self, x: np.ndarray, m: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        m = np.asarray(m, dtype=np.float64)
        if m.shape != x.shape[:2]:
            raise ShapeError(f"mask shape {m.shape} does not match image {x.shape[:2]}")
        mb = (m >= 0.5).astype(np.float64)

        send_x, send_m = x, mb
        if self.native_size is not None:
            from .imgcore import resize_image

            n = self.native_size
            send_x = resize_image(x, n, n)
            send_m = (bilinear_resize(mb, n, n) >= 0.5).astype(np.float64)

        tmpdir = os.environ.get("ATTRIB_TMPDIR") or None
        with tempfile.TemporaryDirectory(dir=tmpdir) as workdir:
            img_path = str(Path(workdir) / "image.png")
            mask_path = str(Path(workdir) / "mask.png")
            out_path = str(Path(workdir) / "out.png")
            write_image(send_x, img_path)
            _PILImage.fromarray((send_m * 255).astype(np.uint8), mode="L").save(
                mask_path, format="PNG"
            )
            try:
                proc = subprocess.run(
                    self.command + [img_path, mask_path, out_path],
                    timeout=self.timeout,
                    capture_output=True,
                )
            except subprocess.TimeoutExpired as exc:
                raise ExternalToolError(
                    f"inpainter timed out after {self.timeout}s: {self.command}"
                ) from exc
            except OSError as exc:
                raise ExternalToolError(f"cannot run inpainter {self.command}: {exc}") from exc
            if proc.returncode != 0:
                raise ExternalToolError(
                    f"inpainter exited {proc.returncode}: {proc.stderr.decode(errors='replace')[:500]}"
                )
            if not os.path.exists(out_path):
                raise ExternalToolError("inpainter produced no output file")
            result = read_image(out_path)

        if self.native_size is not None:
            from .imgcore import resize_image

            result = resize_image(result, x.shape[0], x.shape[1])
        if result.shape != x.shape:
            raise ExternalToolError(
                f"inpainter output shape {result.shape} does not match input {x.shape}"
            )
        return composite(x, mb, result)

    def params(self) -> dict:
        return {"command": self.command, "timeout": self.timeout, "native_size": self.native_size}


class CachingFill(FillStrategy):
    """LRU cache around a mask-dependent strategy, keyed by (image, mask) hash.

    Sliding-window sweeps and greedy mask growth revisit identical masks;
    caching avoids recomputing the fill.
    """

    def __init__(self, inner: FillStrategy, maxsize: int = 512):
        self.inner = inner
        self.name = inner.name
        self.uses_mask = inner.uses_mask
        self.maxsize = maxsize
        self._cache: OrderedDict[bytes, np.ndarray] = OrderedDict()

    def fill(self, x: np.ndarray, m: np.ndarray) -> np.ndarray:
        digest = hashlib.sha1()
        digest.update(np.ascontiguousarray(x).tobytes())
        digest.update(np.ascontiguousarray(m).tobytes())
        key = digest.digest()
        hit = self._cache.get(key)
        if hit is not None:
            self._cache.move_to_end(key)
            return hit
        out = self.inner.fill(x, m)
        self._cache[key] = out
        if len(self._cache) > self.maxsize:
            self._cache.popitem(last=False)
        return out

    def params(self) -> dict:
        return self.inner.params()


def make_filler(spec: str, noise_seed: int = 0, blur_sigma: float = 10.0) -> FillStrategy:
    """Build a filler from its CLI spelling.

    Accepted: ``gray``, ``noise``, ``blur``, ``inpaint``, and
    ``inpaint-ext:<command>``.
    """
    if spec == "gray":
        return GrayFill()
    if spec == "noise":
        return NoiseFill(noise_seed)
    if spec == "blur":
        return BlurFill(blur_sigma)
    if spec == "inpaint":
        return HarmonicInpaintFill()
    if spec.startswith("inpaint-ext:"):
        return ExternalInpaintFill(spec.split(":", 1)[1])
    raise ParameterError(f"unknown filler {spec!r}")
