"""A small CNN with a hand-written backward pass.

This is the built-in white-box classifier used for desk-scale runs: conv 3x3
layers (same or valid padding), ReLU, 2x2 average pooling, a dense layer and
a softmax head.  Forward and backward passes are plain numpy so the analytic
input gradients can be cross-checked against finite differences instead of
trusting an autodiff framework.

Weights are held at float32 precision (computation runs in float64), so a
model saved to disk and loaded back reproduces its scores bit-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError, ShapeError
from .imgcore import read_image
from .oracle import ClassifierOracle

__all__ = ["TinyCnn", "save_model", "load_model", "train_tiny_cnn", "load_dataset_folder"]

MODEL_MAGIC = b"TCNN"
MODEL_VERSION = 1

_TAG_CONV = 1
_TAG_RELU = 2
_TAG_POOL = 3
_TAG_DENSE = 4
_TAG_SOFTMAX = 5


def _f32(a: np.ndarray) -> np.ndarray:
    """Round to float32 precision but keep float64 storage."""
    return a.astype(np.float32).astype(np.float64)


class Conv2D:
    tag = _TAG_CONV

    def __init__(self, weights: np.ndarray, bias: np.ndarray, padding: str = "same"):
        if padding not in ("same", "valid"):
            raise ParameterError(f"conv padding must be same/valid, got {padding!r}")
        self.w = np.asarray(weights, dtype=np.float64)  # (kh, kw, cin, cout)
        self.b = np.asarray(bias, dtype=np.float64)
        self.padding = padding
        self.grad_w = np.zeros_like(self.w)
        self.grad_b = np.zeros_like(self.b)
        self._patches = None
        self._in_shape = None

    def out_shape(self, shape):
        h, w, c = shape
        kh, kw, cin, cout = self.w.shape
        if c != cin:
            raise FormatError(f"conv expects {cin} input channels, got {c}")
        if self.padding == "same":
            return (h, w, cout)
        if h < kh or w < kw:
            raise FormatError(f"conv kernel {kh}x{kw} larger than input {h}x{w}")
        return (h - kh + 1, w - kw + 1, cout)

    def _pad(self, x):
        if self.padding == "valid":
            return x
        kh, kw = self.w.shape[:2]
        ph, pw = kh // 2, kw // 2
        return np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._in_shape = x.shape
        xp = self._pad(x)
        kh, kw = self.w.shape[:2]
        # (N, OH, OW, C, kh, kw)
        patches = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
        self._patches = patches
        out = np.tensordot(patches, self.w, axes=([3, 4, 5], [2, 0, 1]))
        return out + self.b

    def backward(self, grad: np.ndarray) -> np.ndarray:
        self.grad_b = grad.sum(axis=(0, 1, 2))
        gw = np.tensordot(self._patches, grad, axes=([0, 1, 2], [0, 1, 2]))
        self.grad_w = np.transpose(gw, (1, 2, 0, 3))  # (cin,kh,kw,cout) -> (kh,kw,cin,cout)
        kh, kw = self.w.shape[:2]
        n, oh, ow, _ = grad.shape
        pad_shape = (n,) + self._pad(np.zeros((1,) + self._in_shape[1:])).shape[1:3] + (
            self.w.shape[2],
        )
        gxp = np.zeros(pad_shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + oh, j : j + ow, :] += np.tensordot(
                    grad, self.w[i, j], axes=([3], [1])
                )
        if self.padding == "same":
            ph, pw = kh // 2, kw // 2
            gxp = gxp[:, ph : ph + self._in_shape[1], pw : pw + self._in_shape[2], :]
        return gxp


class ReLU:
    tag = _TAG_RELU

    def out_shape(self, shape):
        return shape

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad):
        return np.where(self._mask, grad, 0.0)


class AvgPool:
    tag = _TAG_POOL

    def __init__(self, size: int = 2):
        self.size = size

    def out_shape(self, shape):
        h, w, c = shape
        if h % self.size or w % self.size:
            raise FormatError(f"pool size {self.size} does not divide {h}x{w}")
        return (h // self.size, w // self.size, c)

    def forward(self, x):
        n, h, w, c = x.shape
        s = self.size
        self._in_hw = (h, w)
        return x.reshape(n, h // s, s, w // s, s, c).mean(axis=(2, 4))

    def backward(self, grad):
        s = self.size
        up = np.repeat(np.repeat(grad, s, axis=1), s, axis=2)
        return up / (s * s)


class Dense:
    tag = _TAG_DENSE

    def __init__(self, weights: np.ndarray, bias: np.ndarray):
        self.w = np.asarray(weights, dtype=np.float64)  # (n_in, n_out)
        self.b = np.asarray(bias, dtype=np.float64)
        self.grad_w = np.zeros_like(self.w)
        self.grad_b = np.zeros_like(self.b)

    def out_shape(self, shape):
        n_in = int(np.prod(shape))
        if n_in != self.w.shape[0]:
            raise FormatError(f"dense expects {self.w.shape[0]} inputs, got {n_in}")
        return (self.w.shape[1],)

    def forward(self, x):
        self._in_shape = x.shape
        flat = x.reshape(x.shape[0], -1)
        self._flat = flat
        return flat @ self.w + self.b

    def backward(self, grad):
        self.grad_w = self._flat.T @ grad
        self.grad_b = grad.sum(axis=0)
        return (grad @ self.w.T).reshape(self._in_shape)


class Softmax:
    tag = _TAG_SOFTMAX

    def out_shape(self, shape):
        return shape

    def forward(self, z):
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        self._p = e / e.sum(axis=-1, keepdims=True)
        return self._p

    def backward(self, grad):
        p = self._p
        return p * (grad - (grad * p).sum(axis=-1, keepdims=True))


class TinyCnn(ClassifierOracle):
    """Stack of layers implementing the classifier-oracle interface."""

    has_gradients = True

    def __init__(self, layers: list, input_shape: tuple[int, int, int]):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        shape = self.input_shape
        for layer in layers:
            shape = layer.out_shape(shape)
        if len(shape) != 1:
            raise FormatError(f"network output is not a vector: {shape}")
        if not layers or layers[-1].tag != _TAG_SOFTMAX:
            raise FormatError("network must end with a softmax layer")
        self.num_classes = shape[0]

    @classmethod
    def build(
        cls,
        input_shape: tuple[int, int, int] = (32, 32, 3),
        num_classes: int = 2,
        conv_channels: tuple[int, ...] = (16, 32),
        seed: int = 0,
    ) -> "TinyCnn":
        """Random He-initialized conv/pool stack with a dense softmax head."""
        rng = np.random.default_rng(seed)
        h, w, cin = input_shape
        layers: list = []
        for cout in conv_channels:
            std = np.sqrt(2.0 / (9 * cin))
            layers.append(
                Conv2D(
                    _f32(rng.normal(0.0, std, size=(3, 3, cin, cout))),
                    np.zeros(cout),
                    padding="same",
                )
            )
            layers.append(ReLU())
            layers.append(AvgPool(2))
            cin = cout
            h, w = h // 2, w // 2
        n_in = h * w * cin
        std = np.sqrt(2.0 / n_in)
        layers.append(Dense(_f32(rng.normal(0.0, std, size=(n_in, num_classes))), np.zeros(num_classes)))
        layers.append(Softmax())
        return cls(layers, input_shape)

    # -- forward / backward ------------------------------------------------

    def forward_batch(self, xs: np.ndarray) -> np.ndarray:
        """Probabilities for a batch of images, shape (N, num_classes)."""
        xs = np.asarray(xs, dtype=np.float64)
        if xs.shape[1:] != self.input_shape:
            raise ShapeError(f"expected batch of {self.input_shape} images, got {xs.shape}")
        out = xs
        for layer in self.layers:
            out = layer.forward(out)
        return out

    def backward_batch(self, grad_probs: np.ndarray) -> np.ndarray:
        """Backpropagate d(objective)/d(probs) to the input batch."""
        grad = grad_probs
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def score_all(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.input_shape:
            raise ShapeError(f"expected {self.input_shape} image, got {x.shape}")
        return self.forward_batch(x[None])[0]

    def input_gradient(self, x: np.ndarray, class_id: int) -> np.ndarray:
        self._check_class(class_id)
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.input_shape:
            raise ShapeError(f"expected {self.input_shape} image, got {x.shape}")
        self.forward_batch(x[None])
        seed = np.zeros((1, self.num_classes))
        seed[0, class_id] = 1.0
        return self.backward_batch(seed)[0]

    def round_weights_to_f32(self) -> None:
        for layer in self.layers:
            if hasattr(layer, "w"):
                layer.w = _f32(layer.w)
                layer.b = _f32(layer.b)


# ---------------------------------------------------------------------------
# Serialization: magic "TCNN", version, input dims, then tagged layer records
# ---------------------------------------------------------------------------


def save_model(model: TinyCnn, path) -> None:
    h, w, c = model.input_shape
    parts = [MODEL_MAGIC, struct.pack("<B", MODEL_VERSION), struct.pack("<III", h, w, c)]
    parts.append(struct.pack("<I", len(model.layers)))
    for layer in model.layers:
        parts.append(struct.pack("<B", layer.tag))
        if layer.tag == _TAG_CONV:
            kh, kw, cin, cout = layer.w.shape
            pad = 1 if layer.padding == "same" else 0
            parts.append(struct.pack("<BIIII", pad, kh, kw, cin, cout))
            parts.append(layer.w.astype("<f4").tobytes())
            parts.append(layer.b.astype("<f4").tobytes())
        elif layer.tag == _TAG_POOL:
            parts.append(struct.pack("<I", layer.size))
        elif layer.tag == _TAG_DENSE:
            n_in, n_out = layer.w.shape
            parts.append(struct.pack("<II", n_in, n_out))
            parts.append(layer.w.astype("<f4").tobytes())
            parts.append(layer.b.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"{self.path}: truncated model file")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float64)


def load_model(path) -> TinyCnn:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, path)
    if r.take(4) != MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic, not a model file")
    (version,) = r.unpack("<B")
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported model version {version}")
    h, w, c = r.unpack("<III")
    (n_layers,) = r.unpack("<I")
    layers: list = []
    for _ in range(n_layers):
        (tag,) = r.unpack("<B")
        if tag == _TAG_CONV:
            pad, kh, kw, cin, cout = r.unpack("<BIIII")
            wts = r.floats(kh * kw * cin * cout).reshape(kh, kw, cin, cout)
            bias = r.floats(cout)
            layers.append(Conv2D(wts, bias, "same" if pad else "valid"))
        elif tag == _TAG_RELU:
            layers.append(ReLU())
        elif tag == _TAG_POOL:
            (size,) = r.unpack("<I")
            layers.append(AvgPool(size))
        elif tag == _TAG_DENSE:
            n_in, n_out = r.unpack("<II")
            wts = r.floats(n_in * n_out).reshape(n_in, n_out)
            bias = r.floats(n_out)
            layers.append(Dense(wts, bias))
        elif tag == _TAG_SOFTMAX:
            layers.append(Softmax())
        else:
            raise FormatError(f"{path}: unknown layer tag {tag}")
    if r.pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - r.pos} trailing bytes")
    return TinyCnn(layers, (h, w, c))


# ---------------------------------------------------------------------------
# Training on a labelled image folder: <class_id>/<name>.png
# ---------------------------------------------------------------------------


def load_dataset_folder(root) -> tuple[np.ndarray, np.ndarray]:
    """Load a `<class_id>/<name>.png` tree into (images, labels) arrays."""
    root = Path(root)
    class_dirs = sorted((d for d in root.iterdir() if d.is_dir()), key=lambda d: d.name)
    if not class_dirs:
        raise ParameterError(f"{root}: no class subdirectories")
    try:
        ids = sorted(int(d.name) for d in class_dirs)
    except ValueError as exc:
        raise ParameterError(f"{root}: class directories must be integer ids") from exc
    if ids != list(range(len(ids))):
        raise ParameterError(f"{root}: class ids must be contiguous from 0, got {ids}")
    images, labels = [], []
    for d in sorted(class_dirs, key=lambda d: int(d.name)):
        label = int(d.name)
        for png in sorted(d.glob("*.png")):
            images.append(read_image(png))
            labels.append(label)
    if not images:
        raise ParameterError(f"{root}: dataset is empty")
    return np.stack(images), np.array(labels, dtype=np.int64)


def train_tiny_cnn(
    dataset,
    epochs: int = 30,
    lr: float = 0.005,
    seed: int = 0,
    batch_size: int = 50,
    conv_channels: tuple[int, ...] = (16, 32),
    lr_decay: float = 0.12,
) -> tuple[TinyCnn, list[float]]:
    """Train a fresh TinyCnn with Adam; deterministic for a fixed seed.

    ``dataset`` is either a labelled image folder or an (images, labels)
    pair.  The learning rate anneals as lr / (1 + lr_decay * epoch), which
    keeps the recorded loss curve (full-dataset cross-entropy after each
    epoch) steadily decreasing on the bundled shapes data.  Returns the
    trained model (weights rounded to float32) and the per-epoch losses.
    """
    if lr <= 0:
        raise ParameterError(f"learning rate must be positive, got {lr}")
    if epochs < 1:
        raise ParameterError("need at least one epoch")
    if isinstance(dataset, (str, Path)):
        images, labels = load_dataset_folder(dataset)
    else:
        images, labels = dataset
        images = np.asarray(images, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ParameterError("dataset is empty")
    num_classes = int(labels.max()) + 1
    if labels.min() < 0:
        raise ParameterError("negative class label in dataset")
    rng = np.random.default_rng(seed)
    model = TinyCnn.build(images.shape[1:], num_classes, conv_channels, seed=seed)

    params = [l for l in model.layers if hasattr(l, "w")]
    m_state = [(np.zeros_like(l.w), np.zeros_like(l.b)) for l in params]
    v_state = [(np.zeros_like(l.w), np.zeros_like(l.b)) for l in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0

    n = images.shape[0]
    history: list[float] = []
    for epoch in range(epochs):
        epoch_lr = lr / (1 + lr_decay * epoch)
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb, yb = images[idx], labels[idx]
            probs = model.forward_batch(xb)
            picked = np.clip(probs[np.arange(len(idx)), yb], 1e-12, None)
            # d(mean CE)/d(probs): -1/p on the true class
            grad_probs = np.zeros_like(probs)
            grad_probs[np.arange(len(idx)), yb] = -1.0 / (picked * len(idx))
            model.backward_batch(grad_probs)
            step += 1
            for k, layer in enumerate(params):
                for i, slot in enumerate(("w", "b")):
                    g = getattr(layer, f"grad_{slot}")
                    m = m_state[k][i]
                    v = v_state[k][i]
                    m *= beta1
                    m += (1 - beta1) * g
                    v *= beta2
                    v += (1 - beta2) * g * g
                    mhat = m / (1 - beta1**step)
                    vhat = v / (1 - beta2**step)
                    getattr(layer, slot)[...] -= epoch_lr * mhat / (np.sqrt(vhat) + eps)
        probs = model.forward_batch(images)
        picked = np.clip(probs[np.arange(n), labels], 1e-12, None)
        history.append(float(-np.log(picked).mean()))
    model.round_weights_to_f32()
    return model, history
