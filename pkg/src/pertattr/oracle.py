"""Classifier oracles: the scoring interface every attribution method consumes.

An oracle maps an (H, W, 3) float image to a softmax probability vector.
Methods that only need probabilities (sliding-patch, LIME) work with any
oracle; the mask-optimization family additionally needs input gradients,
advertised through ``has_gradients``.  Score-only models can be wrapped in
:class:`FiniteDiffGradients` to serve gradients numerically at desk scale.

Oracles accept any float array of the right shape; they do not clamp inputs,
so finite-difference probes slightly outside [0, 1] are scored consistently.
"""

from __future__ import annotations

import os
import subprocess
import tempfile
import warnings

import numpy as np

from .errors import CapabilityError, ExternalToolError, ParameterError, ShapeError
from .imgcore import BoundingBox, write_image

__all__ = [
    "ClassifierOracle",
    "UniformOracle",
    "RegionMeanOracle",
    "FiniteDiffGradients",
    "ScoreServerOracle",
    "finite_diff_gradient",
]


class ClassifierOracle:
    """Base class: black-box scoring plus optional input gradients."""

    num_classes: int = 0
    has_gradients: bool = False

    def score_all(self, x: np.ndarray) -> np.ndarray:
        """Probability vector over all classes; sums to 1 within 1e-6."""
        raise NotImplementedError

    def score(self, x: np.ndarray, class_id: int) -> float:
        self._check_class(class_id)
        return float(self.score_all(x)[class_id])

    def input_gradient(self, x: np.ndarray, class_id: int) -> np.ndarray:
        """d score(class_id) / d x, same shape as x."""
        raise CapabilityError(f"{type(self).__name__} does not provide input gradients")

    def _check_class(self, class_id: int) -> None:
        if not 0 <= class_id < self.num_classes:
            raise ParameterError(
                f"class id {class_id} out of range for {self.num_classes} classes"
            )


class UniformOracle(ClassifierOracle):
    """Constant-output model: every class scores 1/K, gradients are zero."""

    has_gradients = True

    def __init__(self, num_classes: int = 2):
        if num_classes < 2:
            raise ParameterError("need at least 2 classes")
        self.num_classes = num_classes

    def score_all(self, x: np.ndarray) -> np.ndarray:
        return np.full(self.num_classes, 1.0 / self.num_classes)

    def input_gradient(self, x: np.ndarray, class_id: int) -> np.ndarray:
        self._check_class(class_id)
        return np.zeros_like(np.asarray(x, dtype=np.float64))


class RegionMeanOracle(ClassifierOracle):
    """Synthetic two-class oracle: class 1 scores the mean intensity of a box.

    The probability of class 1 is the mean of all pixel values (all three
    channels) inside the declared box, clamped to [0, 1]; class 0 gets the
    complement.  Its gradient is uniform inside the box and zero outside,
    which makes it a convenient analytic test model.
    """

    num_classes = 2
    has_gradients = True

    def __init__(self, box: BoundingBox):
        self.box = box

    def _region(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3:
            raise ShapeError(f"expected (H, W, 3) image, got {x.shape}")
        b = self.box
        if b.y_max >= x.shape[0] or b.x_max >= x.shape[1]:
            raise ShapeError(f"box {b} exceeds image bounds {x.shape[:2]}")
        return x[b.y_min : b.y_max + 1, b.x_min : b.x_max + 1, :]

    def score_all(self, x: np.ndarray) -> np.ndarray:
        p = float(np.clip(self._region(x).mean(), 0.0, 1.0))
        return np.array([1.0 - p, p])

    def input_gradient(self, x: np.ndarray, class_id: int) -> np.ndarray:
        self._check_class(class_id)
        region = self._region(x)
        grad = np.zeros(np.asarray(x).shape, dtype=np.float64)
        b = self.box
        g = 1.0 / region.size
        grad[b.y_min : b.y_max + 1, b.x_min : b.x_max + 1, :] = g
        return grad if class_id == 1 else -grad


def finite_diff_gradient(
    oracle: ClassifierOracle, x: np.ndarray, class_id: int, h: float = 1e-4
) -> np.ndarray:
    """Central-difference gradient of score(class_id); 2*size score calls."""
    if h <= 0:
        raise ParameterError(f"step h must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        hi = oracle.score(x, class_id)
        flat_x[i] = orig - h
        lo = oracle.score(x, class_id)
        flat_x[i] = orig
        flat_g[i] = (hi - lo) / (2.0 * h)
    return grad


class FiniteDiffGradients(ClassifierOracle):
    """Adds numeric gradients to a score-only oracle.

    Every gradient costs 2 * H * W * 3 score calls, so this is strictly a
    desk-scale fallback; construction warns about the cost.
    """

    has_gradients = True

    def __init__(self, inner: ClassifierOracle, h: float = 1e-4):
        if h <= 0:
            raise ParameterError(f"step h must be positive, got {h}")
        self.inner = inner
        self.h = h
        self.num_classes = inner.num_classes
        warnings.warn(
            "finite-difference gradients cost 2*H*W*3 score calls per gradient",
            stacklevel=2,
        )

    def score_all(self, x: np.ndarray) -> np.ndarray:
        return self.inner.score_all(x)

    def input_gradient(self, x: np.ndarray, class_id: int) -> np.ndarray:
        self._check_class(class_id)
        return finite_diff_gradient(self.inner, x, class_id, self.h)


class ScoreServerOracle(ClassifierOracle):
    """Adapter for an external scoring process.

    The server reads one PNG path per line on stdin and answers with one
    line of ``num_classes`` whitespace-separated probabilities on stdout.
    Temp images go to $ATTRIB_TMPDIR when set.
    """

    def __init__(self, command: list[str], num_classes: int, timeout: float = 60.0):
        self.num_classes = num_classes
        self.timeout = timeout
        self._tmpdir = os.environ.get("ATTRIB_TMPDIR") or None
        try:
            self._proc = subprocess.Popen(
                command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise ExternalToolError(f"cannot start score server {command!r}: {exc}") from exc

    def score_all(self, x: np.ndarray) -> np.ndarray:
        fd, path = tempfile.mkstemp(suffix=".png", dir=self._tmpdir)
        os.close(fd)
        try:
            write_image(np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0), path)
            assert self._proc.stdin is not None and self._proc.stdout is not None
            self._proc.stdin.write(path + "\n")
            self._proc.stdin.flush()
            line = self._proc.stdout.readline()
        finally:
            os.unlink(path)
        if not line:
            raise ExternalToolError("score server closed its output stream")
        probs = np.array([float(tok) for tok in line.split()], dtype=np.float64)
        if probs.size != self.num_classes:
            raise ExternalToolError(
                f"score server returned {probs.size} values, expected {self.num_classes}"
            )
        if probs.min() < 0.0 or probs.max() > 1.0 or abs(probs.sum() - 1.0) > 1e-6:
            raise ExternalToolError("score server response is not a probability vector")
        return probs

    def close(self) -> None:
        if self._proc.poll() is None:
            assert self._proc.stdin is not None
            self._proc.stdin.close()
            self._proc.wait(timeout=self.timeout)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
