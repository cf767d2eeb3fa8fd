"""Minimal reverse-mode neural-network core.

Just enough machinery to train small convolutional classifiers, regress on
logits, and compute exact input gradients for attack generation.  Everything
is float64 numpy; layers expose forward with a cache and backward from that
cache so recorded activations can also come from an analog execution path.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class TrainingError(RuntimeError):
    """Loss went non-finite during optimization."""

    def __init__(self, message, epoch):
        super().__init__(message)
        self.epoch = epoch


@dataclass
class Tensor:
    """Parameter buffer with an optional same-shape gradient."""

    data: np.ndarray
    grad: Optional[np.ndarray] = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    @property
    def shape(self):
        return self.data.shape


def _fan_in_uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def im2col(x, kh, kw, stride=1, pad=0):
    """(N, C, H, W) -> patches (N, P, C*kh*kw) with P = oh*ow."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    patches = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, c * kh * kw)
    return patches, (oh, ow)


def col2im(dpatches, x_shape, kh, kw, stride=1, pad=0):
    """Adjoint of im2col: scatter-add patch gradients back to the image."""
    n, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    dxp = np.zeros((n, c, hp, wp))
    dp = dpatches.reshape(n, oh, ow, c, kh, kw)
    for a in range(kh):
        for b in range(kw):
            dxp[:, :, a:a + stride * oh:stride, b:b + stride * ow:stride] += \
                dp[:, :, :, :, a, b].transpose(0, 3, 1, 2)
    if pad:
        return dxp[:, :, pad:-pad, pad:-pad]
    return dxp


class Layer:
    def params(self) -> List[Tensor]:
        return []

    def init_params(self, rng):
        pass

    def out_shape(self, in_shape):
        raise NotImplementedError

    def forward(self, x):
        """Returns (output, cache)."""
        raise NotImplementedError

    def backward(self, dout, cache):
        """Returns dx; accumulates parameter gradients."""
        raise NotImplementedError

    def config(self) -> dict:
        return {}


class Linear(Layer):
    def __init__(self, in_features, out_features):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(np.zeros((out_features, in_features)))
        self.bias = Tensor(np.zeros(out_features))

    def params(self):
        return [self.weight, self.bias]

    def init_params(self, rng):
        self.weight.data = _fan_in_uniform(
            rng, (self.out_features, self.in_features), self.in_features)
        self.bias.data = _fan_in_uniform(
            rng, (self.out_features,), self.in_features)

    def out_shape(self, in_shape):
        if in_shape != (self.in_features,):
            raise ValueError(f"linear expects ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def forward(self, x):
        return x @ self.weight.data.T + self.bias.data, x

    def backward(self, dout, cache):
        x = cache
        if self.weight.grad is not None:
            self.weight.grad += dout.T @ x
            self.bias.grad += dout.sum(axis=0)
        return dout @ self.weight.data

    def config(self):
        return {"kind": "linear", "in_features": self.in_features,
                "out_features": self.out_features}


class Conv2d(Layer):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, pad=0):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.pad = pad
        k = kernel_size
        self.weight = Tensor(np.zeros((out_channels, in_channels, k, k)))
        self.bias = Tensor(np.zeros(out_channels))

    def params(self):
        return [self.weight, self.bias]

    def init_params(self, rng):
        k = self.kernel_size
        fan_in = self.in_channels * k * k
        self.weight.data = _fan_in_uniform(
            rng, (self.out_channels, self.in_channels, k, k), fan_in)
        self.bias.data = _fan_in_uniform(rng, (self.out_channels,), fan_in)

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise ValueError(f"conv expects {self.in_channels} channels, got {c}")
        k, s, p = self.kernel_size, self.stride, self.pad
        oh = (h + 2 * p - k) // s + 1
        ow = (w + 2 * p - k) // s + 1
        if oh < 1 or ow < 1:
            raise ValueError("conv output collapses to zero size")
        return (self.out_channels, oh, ow)

    def forward(self, x):
        k = self.kernel_size
        patches, (oh, ow) = im2col(x, k, k, self.stride, self.pad)
        wmat = self.weight.data.reshape(self.out_channels, -1)
        out = patches @ wmat.T + self.bias.data
        out = out.transpose(0, 2, 1).reshape(x.shape[0], self.out_channels, oh, ow)
        return out, (x.shape, patches)

    def backward(self, dout, cache):
        x_shape, patches = cache
        n = dout.shape[0]
        dmat = dout.reshape(n, self.out_channels, -1).transpose(0, 2, 1)
        wmat = self.weight.data.reshape(self.out_channels, -1)
        if self.weight.grad is not None:
            dw = np.einsum("npo,npk->ok", dmat, patches)
            self.weight.grad += dw.reshape(self.weight.data.shape)
            self.bias.grad += dmat.sum(axis=(0, 1))
        dpatches = dmat @ wmat
        k = self.kernel_size
        return col2im(dpatches, x_shape, k, k, self.stride, self.pad)

    def config(self):
        return {"kind": "conv2d", "in_channels": self.in_channels,
                "out_channels": self.out_channels,
                "kernel_size": self.kernel_size,
                "stride": self.stride, "pad": self.pad}


class ReLU(Layer):
    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        return np.maximum(x, 0.0), x

    def backward(self, dout, cache):
        return dout * (cache > 0)

    def config(self):
        return {"kind": "relu"}


class AvgPool2d(Layer):
    def __init__(self, kernel_size):
        self.kernel_size = kernel_size

    def out_shape(self, in_shape):
        c, h, w = in_shape
        k = self.kernel_size
        if h % k or w % k:
            raise ValueError(f"avgpool {k} does not divide ({h}, {w})")
        return (c, h // k, w // k)

    def forward(self, x):
        n, c, h, w = x.shape
        k = self.kernel_size
        out = x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
        return out, x.shape

    def backward(self, dout, cache):
        n, c, h, w = cache
        k = self.kernel_size
        d = np.repeat(np.repeat(dout, k, axis=2), k, axis=3)
        return d / (k * k)

    def config(self):
        return {"kind": "avgpool", "kernel_size": self.kernel_size}


class Flatten(Layer):
    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, cache):
        return dout.reshape(cache)

    def config(self):
        return {"kind": "flatten"}


class Residual(Layer):
    """y = x + f(x) over an inner layer stack with matching shapes."""

    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)

    def params(self):
        return [p for l in self.layers for p in l.params()]

    def init_params(self, rng):
        for l in self.layers:
            l.init_params(rng)

    def out_shape(self, in_shape):
        shape = in_shape
        for l in self.layers:
            shape = l.out_shape(shape)
        if shape != in_shape:
            raise ValueError("residual branch must preserve shape")
        return in_shape

    def forward(self, x):
        caches = []
        y = x
        for l in self.layers:
            y, cache = l.forward(y)
            caches.append(cache)
        return x + y, caches

    def backward(self, dout, cache):
        d = dout
        for l, c in zip(reversed(self.layers), reversed(cache)):
            d = l.backward(d, c)
        return dout + d

    def config(self):
        return {"kind": "residual", "layers": [l.config() for l in self.layers]}


def layer_from_config(cfg: dict) -> Layer:
    kind = cfg["kind"]
    if kind == "linear":
        return Linear(cfg["in_features"], cfg["out_features"])
    if kind == "conv2d":
        return Conv2d(cfg["in_channels"], cfg["out_channels"],
                      cfg["kernel_size"], cfg["stride"], cfg["pad"])
    if kind == "relu":
        return ReLU()
    if kind == "avgpool":
        return AvgPool2d(cfg["kernel_size"])
    if kind == "flatten":
        return Flatten()
    if kind == "residual":
        return Residual([layer_from_config(c) for c in cfg["layers"]])
    raise ValueError(f"unknown layer kind {kind!r}")


class Network:
    """An ordered layer stack with a declared input shape."""

    def __init__(self, input_shape, layers: Sequence[Layer], seed=None):
        self.input_shape = tuple(input_shape)
        self.layers = list(layers)
        shape = self.input_shape
        for l in self.layers:
            shape = l.out_shape(shape)
        self.output_shape = shape
        if seed is not None:
            self.init_params(seed)

    def init_params(self, seed):
        rng = np.random.default_rng(seed)
        for l in self.layers:
            l.init_params(rng)

    def params(self) -> List[Tensor]:
        return [p for l in self.layers for p in l.params()]

    def zero_grads(self):
        for p in self.params():
            p.zero_grad()

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ValueError(
                f"expected input shape (N, {self.input_shape}), got {x.shape}")
        return x

    def forward(self, x):
        x = self._check_input(x)
        for l in self.layers:
            x, _ = l.forward(x)
        return x

    def forward_trace(self, x):
        """Forward pass keeping every layer cache for a later backward."""
        x = self._check_input(x)
        caches = []
        for l in self.layers:
            x, cache = l.forward(x)
            caches.append(cache)
        return x, caches

    def backward(self, dout, caches):
        for l, c in zip(reversed(self.layers), reversed(caches)):
            dout = l.backward(dout, c)
        return dout

    def config(self) -> dict:
        return {"input_shape": list(self.input_shape),
                "layers": [l.config() for l in self.layers]}

    @classmethod
    def from_config(cls, cfg: dict) -> "Network":
        return cls(tuple(cfg["input_shape"]),
                   [layer_from_config(c) for c in cfg["layers"]])

    def __call__(self, x):
        return self.forward(x)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, y):
    """Mean cross-entropy over the batch via log-sum-exp; returns
    (loss, dloss/dlogits)."""
    y = np.asarray(y)
    n, k = logits.shape
    if np.any(y < 0) or np.any(y >= k):
        raise ValueError("label out of range")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(n), y]))
    p = softmax(logits)
    p[np.arange(n), y] -= 1.0
    return loss, p / n


def loss_and_input_grad(net: Network, x, y):
    """Cross-entropy loss and exact reverse-mode gradient w.r.t. the input."""
    logits, caches = net.forward_trace(x)
    loss, dlogits = softmax_cross_entropy(logits, y)
    grad_x = net.backward(dlogits, caches)
    return loss, grad_x


def _sgd_step(net, lr):
    for p in net.params():
        p.data -= lr * p.grad


def _minibatches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_classifier(net: Network, dataset: dict, epochs: int, lr: float = 0.05,
                     seed: int = 0, batch_size: int = 64):
    """Plain SGD on softmax cross-entropy.  Deterministic under the seed.

    Returns a history dict with per-epoch train loss and test accuracy.
    """
    x_train = np.asarray(dataset["x_train"], float)
    y_train = np.asarray(dataset["y_train"])
    rng = np.random.default_rng(seed)
    history = {"train_loss": [], "test_accuracy": []}
    for epoch in range(epochs):
        losses = []
        for idx in _minibatches(len(x_train), batch_size, rng):
            net.zero_grads()
            logits, caches = net.forward_trace(x_train[idx])
            loss, dlogits = softmax_cross_entropy(logits, y_train[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"loss became {loss} at epoch {epoch}", epoch)
            net.backward(dlogits, caches)
            _sgd_step(net, lr)
            losses.append(loss)
        history["train_loss"].append(float(np.mean(losses)))
        if "x_test" in dataset:
            history["test_accuracy"].append(
                evaluate_accuracy(net.forward, {"x": dataset["x_test"],
                                                "y": dataset["y_test"]}))
    return history


def train_logit_regressor(net: Network, x, target_logits, epochs: int,
                          lr: float = 0.05, seed: int = 0, batch_size: int = 64):
    """SGD on mean-squared error against target logits (surrogate fitting)."""
    x = np.asarray(x, float)
    t = np.asarray(target_logits, float)
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        losses = []
        for idx in _minibatches(len(x), batch_size, rng):
            net.zero_grads()
            logits, caches = net.forward_trace(x[idx])
            diff = logits - t[idx]
            loss = float(np.mean(diff * diff))
            if not np.isfinite(loss):
                raise TrainingError(f"loss became {loss} at epoch {epoch}", epoch)
            net.backward(2.0 * diff / diff.size, caches)
            _sgd_step(net, lr)
            losses.append(loss)
        history.append(float(np.mean(losses)))
    return history


def evaluate_accuracy(executor, dataset: dict, batch_size: int = 256) -> float:
    """Fraction of correctly classified samples; `executor` maps a batch of
    inputs to logits (digital net or analog pipeline alike)."""
    x = np.asarray(dataset["x"], float)
    y = np.asarray(dataset["y"])
    if len(x) == 0:
        raise ValueError("empty dataset")
    correct = 0
    for start in range(0, len(x), batch_size):
        logits = executor(x[start:start + batch_size])
        correct += int(np.sum(np.argmax(logits, axis=1) == y[start:start + batch_size]))
    return correct / len(x)


CHECKPOINT_FORMAT = "nvmsim-model-v1"


def save_checkpoint(net: Network, path):
    """Versioned container: architecture JSON + exact float64 parameters."""
    arrays = {f"param_{i}": p.data for i, p in enumerate(net.params())}
    np.savez(path, __meta__=np.frombuffer(
        json.dumps({"format": CHECKPOINT_FORMAT,
                    "config": net.config()}).encode(), dtype=np.uint8),
             **arrays)


def load_checkpoint(path) -> Network:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unrecognized checkpoint format {meta.get('format')!r}")
        net = Network.from_config(meta["config"])
        for i, p in enumerate(net.params()):
            arr = data[f"param_{i}"]
            if arr.shape != p.data.shape:
                raise ValueError("checkpoint parameter shape mismatch")
            p.data = arr.astype(np.float64)
    return net


def toy_cnn(input_shape=(1, 16, 16), num_classes=10, seed=0) -> Network:
    """Desk-scale 2-conv + 2-linear classifier (~30k parameters)."""
    c, h, w = input_shape
    layers = [
        Conv2d(c, 8, 3), ReLU(), AvgPool2d(2),
        Conv2d(8, 16, 3), ReLU(), Flatten(),
    ]
    h1 = (h - 2) // 2 - 2
    w1 = (w - 2) // 2 - 2
    layers += [Linear(16 * h1 * w1, 64), ReLU(), Linear(64, num_classes)]
    return Network(input_shape, layers, seed=seed)


# ---------------------------------------------------------------------------
# Datasets


def make_pattern_dataset(n_train=3000, n_test=600, image_size=16,
                         num_classes=10, noise=0.15, seed=0) -> dict:
    """Synthetic pattern-class task: one smooth random template per class
    plus per-sample Gaussian noise, clipped to [0, 1]."""
    rng = np.random.default_rng(seed)
    templates = []
    for _ in range(num_classes):
        field_ = rng.normal(size=(image_size, image_size))
        # Cheap smoothing: two passes of 3x3 box blur with edge padding.
        for _ in range(2):
            p = np.pad(field_, 1, mode="edge")
            field_ = sum(p[a:a + image_size, b:b + image_size]
                         for a in range(3) for b in range(3)) / 9.0
        lo, hi = field_.min(), field_.max()
        templates.append(0.25 + 0.5 * (field_ - lo) / (hi - lo))
    templates = np.stack(templates)

    def draw(n):
        y = rng.integers(0, num_classes, size=n)
        x = templates[y] + noise * rng.normal(size=(n, image_size, image_size))
        return np.clip(x, 0.0, 1.0)[:, None, :, :], y

    x_train, y_train = draw(n_train)
    x_test, y_test = draw(n_test)
    return {"x_train": x_train, "y_train": y_train,
            "x_test": x_test, "y_test": y_test}


# IDX file format (big-endian magic + dims), as used for digit datasets.
_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: np.dtype(">i2"),
               0x0C: np.dtype(">i4"), 0x0D: np.dtype(">f4"),
               0x0E: np.dtype(">f8")}


def load_idx(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if len(magic) != 4 or magic[0] != 0 or magic[1] != 0:
            raise ValueError(f"{path}: not an IDX file")
        dtype = _IDX_DTYPES.get(magic[2])
        if dtype is None:
            raise ValueError(f"{path}: unknown IDX element type 0x{magic[2]:02x}")
        ndim = magic[3]
        dims = struct.unpack(f">{ndim}I", f.read(4 * ndim))
        data = np.frombuffer(f.read(), dtype=dtype)
    if data.size != int(np.prod(dims)):
        raise ValueError(f"{path}: truncated IDX payload")
    return data.reshape(dims)


def save_idx(path, array: np.ndarray):
    array = np.ascontiguousarray(array)
    code = {np.dtype(np.uint8): 0x08, np.dtype(np.int8): 0x09}.get(array.dtype)
    if code is None:
        raise ValueError(f"unsupported IDX dtype {array.dtype}")
    with open(path, "wb") as f:
        f.write(bytes([0, 0, code, array.ndim]))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def load_idx_dataset(images_train, labels_train, images_test, labels_test) -> dict:
    """Image/label IDX file quadruple -> dataset dict with pixels in [0, 1]."""
    def prep(img_path, lbl_path):
        x = load_idx(img_path).astype(np.float64) / 255.0
        if x.ndim == 3:
            x = x[:, None, :, :]
        y = load_idx(lbl_path).astype(np.int64)
        if len(x) != len(y):
            raise ValueError("image/label counts differ")
        return x, y

    x_train, y_train = prep(images_train, labels_train)
    x_test, y_test = prep(images_test, labels_test)
    return {"x_train": x_train, "y_train": y_train,
            "x_test": x_test, "y_test": y_test}
