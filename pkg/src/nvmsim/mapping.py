"""Lowering of network layers onto crossbar tiles.

Pipeline per conv/linear layer: symmetric weight quantization, sign split
into differential positive/negative parts, base-2^slice_bits digit slicing,
tiling to the crossbar geometry, and affine digit-to-conductance mapping.
Inputs are quantized per sample and streamed as low-bit planes; shift-and-add
over (tile, slice, stream) reconstructs the integer MVM exactly under an
ideal backend, while circuit and surrogate backends inject the modeled
analog non-idealities.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import circuit as cz
from . import nn
from .circuit import (ConductanceMatrix, CrossbarGeometry, DeviceModel,
                      ShapeError, effective_matrix)


@dataclass(frozen=True)
class QuantConfig:
    input_bits: int = 8
    weight_bits: int = 8
    stream_bits: int = 1
    slice_bits: int = 2

    def __post_init__(self):
        if min(self.input_bits, self.weight_bits,
               self.stream_bits, self.slice_bits) < 1:
            raise ValueError("bit widths must be >= 1")
        if self.input_bits % self.stream_bits:
            raise ValueError("input_bits must be divisible by stream_bits")
        if self.weight_bits % self.slice_bits:
            raise ValueError("weight_bits must be divisible by slice_bits")

    @property
    def n_streams(self) -> int:
        return self.input_bits // self.stream_bits

    @property
    def n_slices(self) -> int:
        return self.weight_bits // self.slice_bits

    @property
    def stream_base(self) -> int:
        return 1 << self.stream_bits

    @property
    def slice_base(self) -> int:
        return 1 << self.slice_bits

    def check_device(self, device: DeviceModel):
        if self.slice_base > device.levels:
            raise ValueError(
                f"{self.slice_base} slice levels exceed {device.levels} "
                "device levels")


def quantize_weights(w, qc: QuantConfig):
    """Symmetric per-tensor quantization to signed weight_bits integers.

    Returns (int weights, scale) with dequantization w ~ q * scale.  An
    all-zero tensor gets scale 1 by convention.
    """
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    qmax = (1 << (qc.weight_bits - 1)) - 1
    wmax = np.max(np.abs(w))
    scale = wmax / qmax if wmax > 0 else 1.0
    q = np.clip(np.round(w / scale), -qmax, qmax).astype(np.int64)
    return q, scale


def quantize_inputs(x, qc: QuantConfig):
    """Unsigned per-sample quantization of nonnegative activations.

    x has shape (N, K); each sample gets its own scale from its max value so
    results do not depend on how samples are batched.  Returns (q, scale[N]).
    """
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise ValueError("analog layer inputs must be nonnegative")
    qmax = (1 << qc.input_bits) - 1
    xmax = x.max(axis=-1)
    scale = np.where(xmax > 0, xmax / qmax, 1.0)
    q = np.round(x / scale[..., None]).astype(np.int64)
    return q, scale


def slice_weights(int_weights, qc: QuantConfig):
    """Split signed integers into nonnegative base-2^slice_bits digit
    matrices, least significant slice first.

    w = sum_s base^s * (pos[s] - neg[s]), digits in [0, 2^slice_bits - 1].
    """
    q = np.asarray(int_weights, dtype=np.int64)
    limit = 1 << (qc.weight_bits - 1)
    if np.any(q >= limit) or np.any(q <= -limit):
        raise ValueError(f"integer weights exceed {qc.weight_bits}-bit range")
    pos = np.maximum(q, 0)
    neg = np.maximum(-q, 0)
    base = qc.slice_base
    pos_slices, neg_slices = [], []
    for _ in range(qc.n_slices):
        pos_slices.append(pos % base)
        neg_slices.append(neg % base)
        pos //= base
        neg //= base
    return pos_slices, neg_slices


def stream_inputs(int_inputs, qc: QuantConfig):
    """Split unsigned integers into base-2^stream_bits planes, least
    significant first: sum_t (2^stream_bits)^t * stream[t] = input."""
    q = np.array(int_inputs, dtype=np.int64)  # copy: divided in place below
    if np.any(q < 0) or np.any(q >= (1 << qc.input_bits)):
        raise ValueError(f"integer inputs exceed {qc.input_bits}-bit range")
    base = qc.stream_base
    streams = []
    for _ in range(qc.n_streams):
        streams.append(q % base)
        q //= base
    return streams


@dataclass
class Tile:
    """One crossbar-sized block of a sliced digit matrix."""

    row_offset: int
    col_offset: int
    rows: int          # occupied rows (rest is padding at g_off)
    cols: int
    pos_digits: List[np.ndarray]   # per slice, geometry-sized, padded with 0
    neg_digits: List[np.ndarray]


def digit_to_conductance(digits, device: DeviceModel, qc: QuantConfig
                         ) -> ConductanceMatrix:
    """Affine map of digits onto the conductance grid: digit 0 -> 1/r_off,
    max digit -> 1/r_on."""
    qc.check_device(device)
    digits = np.asarray(digits)
    dmax = qc.slice_base - 1
    if np.any(digits < 0) or np.any(digits > dmax):
        raise ValueError("digit exceeds representable levels")
    step = (device.g_on - device.g_off) / dmax
    g = device.g_off + digits * step
    return ConductanceMatrix(g, device, check_grid=False)


def conductance_to_digits(g: ConductanceMatrix, qc: QuantConfig) -> np.ndarray:
    """Inverse of digit_to_conductance (read-back)."""
    device = g.device
    step = (device.g_on - device.g_off) / (qc.slice_base - 1)
    return np.round((g.g - device.g_off) / step).astype(np.int64)


def tile_digit_matrix(pos_slices, neg_slices, geometry: CrossbarGeometry
                      ) -> List[Tile]:
    """Partition sliced digit matrices (K, M) into geometry-sized tiles,
    zero-padding partial edge tiles (digit 0 == 1/r_off)."""
    K, M = pos_slices[0].shape
    R, C = geometry.rows, geometry.cols
    tiles = []
    for r0 in range(0, K, R):
        for c0 in range(0, M, C):
            rr = min(R, K - r0)
            cc = min(C, M - c0)
            pos = [np.zeros((R, C), dtype=np.int64) for _ in pos_slices]
            neg = [np.zeros((R, C), dtype=np.int64) for _ in neg_slices]
            for s, (ps, ns) in enumerate(zip(pos_slices, neg_slices)):
                pos[s][:rr, :cc] = ps[r0:r0 + rr, c0:c0 + cc]
                neg[s][:rr, :cc] = ns[r0:r0 + rr, c0:c0 + cc]
            tiles.append(Tile(r0, c0, rr, cc, pos, neg))
    return tiles


@dataclass
class SlicedLayer:
    """A linear/conv weight matrix lowered to tiles x slices of digits.

    The crossbar stores the (K, M) = (in, out) orientation so an input
    voltage vector of length K drives rows and column currents realize the
    MVM.  `weight_scale` dequantizes the reconstructed integers.
    """

    layer_id: str
    in_features: int
    out_features: int
    tiles: List[Tile]
    weight_scale: float
    qc: QuantConfig

    @classmethod
    def from_matrix(cls, layer_id, weights, qc: QuantConfig,
                    geometry: CrossbarGeometry) -> "SlicedLayer":
        """weights has shape (out, in); stored transposed on the crossbar."""
        w = np.asarray(weights, dtype=np.float64)
        q, scale = quantize_weights(w, qc)
        pos, neg = slice_weights(q.T, qc)
        tiles = tile_digit_matrix(pos, neg, geometry)
        return cls(layer_id, w.shape[1], w.shape[0], tiles, scale, qc)


class ExecBackend:
    """Maps one tile's digit matrices to stream-MVM operators.

    `digit_operators(tile, qc)` returns per-slice (pos, neg) callables
    taking a stream bit matrix (R, m) in digit units to partial outputs
    (C, m), also in digit units (the digit-0 baseline already removed)."""

    name = "base"

    def digit_operators(self, tile: Tile, qc: QuantConfig):
        raise NotImplementedError


class IdealDigital(ExecBackend):
    """Exact integer arithmetic; digit sums below 2^53 keep float64 exact."""

    name = "ideal-digital"

    def digit_operators(self, tile: Tile, qc: QuantConfig):
        ops = []
        for pos, neg in zip(tile.pos_digits, tile.neg_digits):
            pm = pos.astype(np.float64)
            nm = neg.astype(np.float64)
            ops.append((lambda v, m=pm: m.T @ v, lambda v, m=nm: m.T @ v))
        return ops


class CircuitNonIdeal(ExecBackend):
    """Nodal-analysis backend for linear devices.

    The mesh is linear in the drive, so each programmed crossbar reduces to
    an effective C x R current matrix; subtracting the all-g_off baseline
    matrix and rescaling by the conductance step expresses the operator
    directly in digit units.
    """

    def __init__(self, geometry: CrossbarGeometry, device: DeviceModel):
        if not device.is_linear:
            raise ValueError("CircuitNonIdeal backend requires linear devices")
        self.geometry = geometry
        self.device = device
        self.name = "circuit"
        self._baseline = None

    def _baseline_matrix(self):
        if self._baseline is None:
            g0 = np.full((self.geometry.rows, self.geometry.cols),
                         self.device.g_off)
            self._baseline = effective_matrix(g0, self.geometry)
        return self._baseline

    def digit_operators(self, tile: Tile, qc: QuantConfig):
        qc.check_device(self.device)
        base = self._baseline_matrix()
        step = (self.device.g_on - self.device.g_off) / (qc.slice_base - 1)
        ops = []
        for pos, neg in zip(tile.pos_digits, tile.neg_digits):
            ops.append(tuple(self._op(d, base, step) for d in (pos, neg)))
        return ops

    def _op(self, digits, base, step):
        g = self.device.g_off + digits * step
        # Currents scale linearly with drive voltage; the stream bits arrive
        # in digit units (v = bits * v_max), so folding v_max / (v_max * step)
        # leaves a pure digit-domain operator.
        m = (effective_matrix(g, self.geometry) - base) / step
        return lambda v, mm=m: mm @ v


class SurrogateBackend(ExecBackend):
    """Learned crossbar model as the MVM engine."""

    def __init__(self, net):
        from . import surrogate  # local import to avoid a cycle
        self.net = net
        self.geometry = net.geometry
        self.device = net.device
        self.name = "surrogate"
        self._specialize = surrogate.make_fast_predictor
        g0 = np.full((net.geometry.rows, net.geometry.cols),
                     net.device.g_off)
        self._base_predict = self._specialize(net, g0)

    def digit_operators(self, tile: Tile, qc: QuantConfig):
        qc.check_device(self.device)
        step = (self.device.g_on - self.device.g_off) / (qc.slice_base - 1)
        ops = []
        for pos, neg in zip(tile.pos_digits, tile.neg_digits):
            ops.append(tuple(self._op(d, step) for d in (pos, neg)))
        return ops

    def _op(self, digits, step):
        g = self.device.g_off + digits * step
        predict = self._specialize(self.net, g)
        base_predict = self._base_predict
        v_max = self.geometry.v_max

        def op(vbits):
            v = vbits.T.astype(float) * v_max  # (m, R)
            return ((predict(v) - base_predict(v)) / (v_max * step)).T

        return op


def _layer_matmul(sliced: SlicedLayer, x, backend: ExecBackend,
                  operators=None):
    """Analog MVM of a batch: x (N, K) nonnegative -> (N, M) dequantized.

    Accumulation order is fixed (tile, slice, stream ascending) so results
    do not depend on any outer parallelization.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != sliced.in_features:
        raise ShapeError(f"expected (N, {sliced.in_features}) input, "
                         f"got {x.shape}")
    qc = sliced.qc
    q, x_scale = quantize_inputs(x, qc)
    streams = stream_inputs(q, qc)
    if operators is None:
        operators = [backend.digit_operators(t, qc) for t in sliced.tiles]
    acc = np.zeros((x.shape[0], sliced.out_features))
    for tile, ops in zip(sliced.tiles, operators):
        cols = slice(tile.col_offset, tile.col_offset + tile.cols)
        rows = slice(tile.row_offset, tile.row_offset + tile.rows)
        for s, (op_pos, op_neg) in enumerate(ops):
            sw = float(qc.slice_base ** s)
            for t, plane in enumerate(streams):
                bits = np.zeros((len(tile.pos_digits[0]), x.shape[0]))
                bits[:tile.rows, :] = plane[:, rows].T
                part = op_pos(bits) - op_neg(bits)
                acc[:, cols] += (sw * float(qc.stream_base ** t)) * \
                    part[:tile.cols, :].T
    return acc * (sliced.weight_scale * x_scale[:, None]), acc


def execute_layer_analog(sliced: SlicedLayer, x, backend: ExecBackend,
                         return_predequant: bool = False):
    """Run one lowered layer through the selected MVM backend.

    With return_predequant, also returns the shift-and-add accumulator in
    integer (digit) units, before any scale is applied.
    """
    out, acc = _layer_matmul(sliced, x, backend)
    if return_predequant:
        return out, acc
    return out


def lower_network(net: nn.Network, qc: QuantConfig,
                  geometry: CrossbarGeometry) -> List[Optional[SlicedLayer]]:
    """SlicedLayer per conv/linear layer (None for digital-only layers)."""
    lowered = []
    for i, layer in enumerate(net.layers):
        if isinstance(layer, nn.Linear):
            lowered.append(SlicedLayer.from_matrix(
                f"layer{i}-linear", layer.weight.data, qc, geometry))
        elif isinstance(layer, nn.Conv2d):
            wmat = layer.weight.data.reshape(layer.out_channels, -1)
            lowered.append(SlicedLayer.from_matrix(
                f"layer{i}-conv", wmat, qc, geometry))
        elif isinstance(layer, nn.Residual):
            raise ValueError("residual blocks are not supported by the "
                             "analog mapping")
        else:
            lowered.append(None)
    return lowered


class AnalogExecutor:
    """Network inference with conv/linear layers on an analog MVM backend.

    Pre-lowers all layers and caches per-tile backend operators, then acts
    as a logits executor over input batches.  ReLU, pooling, reshapes, and
    bias addition run exactly in digital.
    """

    def __init__(self, net: nn.Network, qc: QuantConfig, backend: ExecBackend):
        self.net = net
        self.qc = qc
        self.backend = backend
        self.lowered = lower_network(net, qc, backend_geometry(backend))
        self._ops = [None if sl is None else
                     [backend.digit_operators(t, qc) for t in sl.tiles]
                     for sl in self.lowered]

    def forward_trace(self, x):
        """Logits plus per-layer (input, cache) records for HIL gradients."""
        x = np.asarray(x, dtype=np.float64)
        records = []
        for layer, sliced, ops in zip(self.net.layers, self.lowered, self._ops):
            if isinstance(layer, nn.Conv2d):
                k = layer.kernel_size
                patches, (oh, ow) = nn.im2col(x, k, k, layer.stride, layer.pad)
                n, p, kk = patches.shape
                out, _ = _layer_matmul(sliced, patches.reshape(n * p, kk),
                                       self.backend, ops)
                out = out.reshape(n, p, layer.out_channels) + layer.bias.data
                y = out.transpose(0, 2, 1).reshape(n, layer.out_channels, oh, ow)
                records.append((x, (x.shape, patches)))
            elif isinstance(layer, nn.Linear):
                out, _ = _layer_matmul(sliced, x, self.backend, ops)
                y = out + layer.bias.data
                records.append((x, x))
            else:
                y, cache = layer.forward(x)
                records.append((x, cache))
            x = y
        return x, records

    def __call__(self, x):
        logits, _ = self.forward_trace(x)
        return logits


def backend_geometry(backend: ExecBackend) -> CrossbarGeometry:
    geometry = getattr(backend, "geometry", None)
    if geometry is None:
        # Digital backend has no physical tile; use a generous default so
        # tiling stays coarse.
        return CrossbarGeometry(64, 64)
    return geometry


def execute_network_analog(net: nn.Network, x, backend: ExecBackend,
                           qc: QuantConfig):
    """Logits of `net` on `x` with analog conv/linear layers."""
    return AnalogExecutor(net, qc, backend)(x)


def mapping_report(net: nn.Network, qc: QuantConfig,
                   geometry: CrossbarGeometry) -> dict:
    """What a crossbar compiler would emit: per-layer tile counts and the
    slice/stream configuration."""
    lowered = lower_network(net, qc, geometry)
    layers = []
    total = 0
    for sl in lowered:
        if sl is None:
            continue
        n_tiles = len(sl.tiles)
        n_xbars = n_tiles * qc.n_slices * 2  # differential pair per slice
        total += n_xbars
        layers.append({
            "layer_id": sl.layer_id,
            "in_features": sl.in_features,
            "out_features": sl.out_features,
            "tiles": n_tiles,
            "crossbars": n_xbars,
        })
    return {
        "crossbar": {"rows": geometry.rows, "cols": geometry.cols},
        "quant": {"input_bits": qc.input_bits, "weight_bits": qc.weight_bits,
                  "stream_bits": qc.stream_bits, "slice_bits": qc.slice_bits,
                  "streams": qc.n_streams, "slices": qc.n_slices},
        "layers": layers,
        "total_crossbars": total,
    }


def write_mapping_report(report: dict, path):
    with open(path, "w") as f:
        json.dump(report, f, indent=2)
        f.write("\n")
