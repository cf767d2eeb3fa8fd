"""Learned crossbar model: a two-layer perceptron trained on nodal-solver
data that predicts non-ideal column currents from (V, G).

The net is bound to a single geometry.  Raw features are the voltage vector,
the flattened conductance matrix, and the ideal column currents (itself a
function of V and G); the perceptron predicts the non-ideality correction on
top of the ideal currents.  Features and targets are standardized with
per-feature statistics recorded in the net.  Training is plain seeded
mini-batch gradient descent, so identical seeds give identical nets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import circuit as cz
from .circuit import (CrossbarGeometry, DeviceModel, ShapeError)
from .nn import TrainingError


DEFAULT_HIDDEN = 256
DEFAULT_EPOCHS = 50
DEFAULT_LR = 1e-2
DEFAULT_BATCH = 64
DEFAULT_SAMPLES = 20_000


@dataclass
class CircuitDataset:
    """Solver-generated (V, G) -> current samples for one geometry."""

    geometry: CrossbarGeometry
    device: DeviceModel
    v: np.ndarray          # (n, R) volts
    g: np.ndarray          # (n, R, C) siemens
    targets: np.ndarray    # (n, C) ampere, from the nodal solver
    seed: int

    def __len__(self):
        return len(self.v)

    def split(self, val_fraction=0.1):
        """Deterministic tail split: the last fraction is validation."""
        n_val = max(1, int(len(self) * val_fraction))
        n_train = len(self) - n_val
        return (self.v[:n_train], self.g[:n_train], self.targets[:n_train]), \
               (self.v[n_train:], self.g[n_train:], self.targets[n_train:])


def generate_dataset(geometry: CrossbarGeometry, device: DeviceModel,
                     n_samples: int, seed: int = 0) -> CircuitDataset:
    """Sample (V, G) as during inference and label with the nodal solver."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    vs, gs, ts = [], [], []
    for v, g in cz.sample_nf_inputs(geometry, device, n_samples, seed):
        vs.append(v)
        gs.append(g.g)
        ts.append(cz.solve_nonideal(v, g, geometry, device).column_currents)
    return CircuitDataset(geometry, device, np.stack(vs), np.stack(gs),
                          np.stack(ts), seed)


@dataclass
class SurrogateNet:
    """Two dense layers with a rectifier between, plus normalization stats.

    Predicted current = ideal current + denormalized perceptron output.
    """

    geometry: CrossbarGeometry
    device: DeviceModel
    w1: np.ndarray  # (hidden, in)
    b1: np.ndarray
    w2: np.ndarray  # (C, hidden)
    b2: np.ndarray
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray
    train_stats: dict = field(default_factory=dict)

    @property
    def input_dim(self):
        return self.w1.shape[1]

    @property
    def hidden_dim(self):
        return self.w1.shape[0]

    def current_scale(self) -> float:
        return self.geometry.rows * self.geometry.v_max * self.device.g_on


def _raw_features(geometry, device, v, g):
    """(v, flat g, ideal currents), each normalized to order one."""
    R, C = geometry.rows, geometry.cols
    v = np.atleast_2d(np.asarray(v, float))
    if v.shape[1] != R:
        raise ShapeError(f"expected voltages of length {R}, got {v.shape}")
    g = np.asarray(g, float)
    if g.ndim == 2:
        g = np.broadcast_to(g, (v.shape[0],) + g.shape)
    if g.shape[1:] != (R, C):
        raise ShapeError(f"expected conductances ({R}, {C}), got {g.shape[1:]}")
    scale = R * geometry.v_max * device.g_on
    ideal = np.einsum("ni,nij->nj", v, g)
    feats = np.concatenate([v / geometry.v_max,
                            g.reshape(len(g), -1) / device.g_on,
                            ideal / scale], axis=1)
    return feats, ideal


def _mlp_forward(params, x):
    w1, b1, w2, b2 = params
    h = np.maximum(x @ w1.T + b1, 0.0)
    return h @ w2.T + b2, h


def predict(net: SurrogateNet, v, g) -> np.ndarray:
    """Denormalized current estimates; v may be a single vector or a batch."""
    single = np.asarray(v).ndim == 1
    feats, ideal = _raw_features(net.geometry, net.device, v, g)
    x = (feats - net.x_mean) / net.x_std
    out, _ = _mlp_forward((net.w1, net.b1, net.w2, net.b2), x)
    pred = ideal + (out * net.y_std + net.y_mean) * net.current_scale()
    return pred[0] if single else pred


def make_fast_predictor(net: SurrogateNet, g):
    """Specialize predict() to a fixed conductance matrix.

    The flattened-G block of the first layer is constant for fixed G, so it
    folds into the hidden bias; what remains is a small affine map of
    (v, ideal currents) per query — much cheaper for backend use where the
    same programmed crossbar answers many MVMs.
    """
    geometry, device = net.geometry, net.device
    R, C = geometry.rows, geometry.cols
    g = np.asarray(g, float)
    if g.shape != (R, C):
        raise ShapeError(f"expected conductances ({R}, {C}), got {g.shape}")
    scale = R * geometry.v_max * device.g_on
    w1s = net.w1 / net.x_std            # fold feature standardization
    b1 = net.b1 - w1s @ net.x_mean
    w_v = w1s[:, :R] / geometry.v_max
    w_g = w1s[:, R:R + R * C] / device.g_on
    w_i = w1s[:, R + R * C:] / scale
    b1 = b1 + w_g @ g.ravel()

    def fast(v):
        v = np.atleast_2d(np.asarray(v, float))
        if v.shape[1] != R:
            raise ShapeError(f"expected voltages of length {R}, got {v.shape}")
        ideal = v @ g
        h = np.maximum(v @ w_v.T + ideal @ w_i.T + b1, 0.0)
        out = h @ net.w2.T + net.b2
        return ideal + (out * net.y_std + net.y_mean) * scale

    return fast


def mean_relative_error(pred, target) -> float:
    """Per-sample L1 error over L1 target magnitude, averaged over samples
    with nonzero targets."""
    pred = np.atleast_2d(pred)
    target = np.atleast_2d(target)
    norms = np.abs(target).sum(axis=1)
    keep = norms > 0
    if not np.any(keep):
        return 0.0
    errs = np.abs(pred - target).sum(axis=1)[keep] / norms[keep]
    return float(np.mean(errs))


def train_surrogate(dataset: CircuitDataset, hidden_dim: int = DEFAULT_HIDDEN,
                    epochs: int = DEFAULT_EPOCHS, lr: float = DEFAULT_LR,
                    seed: int = 0, batch_size: int = DEFAULT_BATCH,
                    val_fraction: float = 0.1) -> SurrogateNet:
    """Mini-batch gradient descent on MSE over standardized residual
    currents (non-ideal minus ideal)."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if hidden_dim < 1:
        raise ValueError("hidden_dim must be >= 1")
    geometry, device = dataset.geometry, dataset.device
    R, C = geometry.rows, geometry.cols
    (v_tr, g_tr, t_tr), (v_va, g_va, t_va) = dataset.split(val_fraction)

    feats, ideal = _raw_features(geometry, device, v_tr, g_tr)
    scale = R * geometry.v_max * device.g_on
    resid = (t_tr - ideal) / scale
    x_mean = feats.mean(axis=0)
    x_std = feats.std(axis=0) + 1e-12
    y_mean = resid.mean(axis=0)
    y_std = resid.std(axis=0) + 1e-12
    x_tr = (feats - x_mean) / x_std
    y_tr = (resid - y_mean) / y_std

    rng = np.random.default_rng(seed)
    input_dim = x_tr.shape[1]
    w1 = rng.uniform(-1, 1, (hidden_dim, input_dim)) / np.sqrt(input_dim)
    b1 = np.zeros(hidden_dim)
    w2 = rng.uniform(-1, 1, (C, hidden_dim)) / np.sqrt(hidden_dim)
    b2 = np.zeros(C)
    params = [w1, b1, w2, b2]

    shuffle_rng = np.random.default_rng(seed + 1)
    n = len(x_tr)
    for epoch in range(epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            xb, yb = x_tr[idx], y_tr[idx]
            out, h = _mlp_forward(params, xb)
            diff = out - yb
            loss = np.mean(diff * diff)
            if not np.isfinite(loss):
                raise TrainingError(f"loss became {loss} at epoch {epoch}",
                                    epoch)
            dout = 2.0 * diff / diff.size
            dw2 = dout.T @ h
            db2 = dout.sum(axis=0)
            dh = (dout @ params[2]) * (h > 0)
            dw1 = dh.T @ xb
            db1 = dh.sum(axis=0)
            params[0] -= lr * dw1
            params[1] -= lr * db1
            params[2] -= lr * dw2
            params[3] -= lr * db2

    net = SurrogateNet(geometry, device, *params,
                       x_mean=x_mean, x_std=x_std,
                       y_mean=y_mean, y_std=y_std)
    train_mre = mean_relative_error(predict(net, v_tr, g_tr), t_tr)
    val_mre = mean_relative_error(predict(net, v_va, g_va), t_va)
    net.train_stats = {"epochs": epochs, "hidden_dim": hidden_dim, "lr": lr,
                       "seed": seed, "n_train": n, "n_val": len(v_va),
                       "train_mre": train_mre, "val_mre": val_mre}
    return net


CHECKPOINT_FORMAT = "nvmsim-surrogate-v1"


def save_surrogate(net: SurrogateNet, path):
    """Versioned self-describing checkpoint; round-trips exactly."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "geometry": {"rows": net.geometry.rows, "cols": net.geometry.cols,
                     "r_source": net.geometry.r_source,
                     "r_sink": net.geometry.r_sink,
                     "r_wire": net.geometry.r_wire,
                     "v_max": net.geometry.v_max},
        "device": {"r_on": net.device.r_on, "r_off": net.device.r_off,
                   "levels": net.device.levels,
                   "nonlinearity": None if net.device.nonlinearity is None
                   else {"kind": net.device.nonlinearity.kind,
                         "beta": net.device.nonlinearity.beta}},
        "train_stats": net.train_stats,
    }
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(),
                                          dtype=np.uint8),
             w1=net.w1, b1=net.b1, w2=net.w2, b2=net.b2,
             x_mean=net.x_mean, x_std=net.x_std,
             y_mean=net.y_mean, y_std=net.y_std)


def load_surrogate(path) -> SurrogateNet:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unrecognized surrogate format {meta.get('format')!r}")
        geo = meta["geometry"]
        dev = meta["device"]
        nl = dev.get("nonlinearity")
        nonlinearity = None if nl is None else cz.Nonlinearity(nl["kind"],
                                                               nl["beta"])
        return SurrogateNet(
            CrossbarGeometry(geo["rows"], geo["cols"], geo["r_source"],
                             geo["r_sink"], geo["r_wire"], geo["v_max"]),
            DeviceModel(dev["r_on"], dev["r_off"], dev["levels"],
                        nonlinearity),
            data["w1"].copy(), data["b1"].copy(),
            data["w2"].copy(), data["b2"].copy(),
            data["x_mean"].copy(), data["x_std"].copy(),
            data["y_mean"].copy(), data["y_std"].copy(),
            meta["train_stats"])
