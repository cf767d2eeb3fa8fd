"""First-principles model of a single NVM crossbar tile.

The tile is treated as a resistive mesh: every cross-point contributes a
source-line node and a bit-line node joined by the programmed device, wire
segments join adjacent nodes along each line, drivers sit behind r_source at
the left edge of each row, and each column drains to ground through r_sink at
the bottom edge.  Solving the mesh by nodal analysis gives the non-ideal
column currents; with all parasitics at zero the mesh collapses to the ideal
dot product of Ohm's and Kirchhoff's laws.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu


class ShapeError(ValueError):
    """Input dimensions do not match the crossbar geometry."""


class SingularSystemError(RuntimeError):
    """The nodal system has a floating node group and cannot be solved."""


class ConvergenceError(RuntimeError):
    """Nonlinear device iteration failed to converge."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = list(trace)


class CalibrationError(RuntimeError):
    """Requested non-ideality factor is unreachable in the search bracket."""

    def __init__(self, message, achieved_range=None):
        super().__init__(message)
        self.achieved_range = achieved_range


class UndefinedNFError(ValueError):
    """No output element survives the NF magnitude threshold."""


NONLINEAR_TOL_V = 1e-8
NONLINEAR_MAX_ITERS = 100
LINEAR_RESIDUAL_TOL = 1e-10


@dataclass(frozen=True)
class Nonlinearity:
    """Exponential I-V device curve: I = G * V0 * sinh(beta*V/V0) / sinh(beta)."""

    kind: str = "exponential-iv"
    beta: float = 2.0

    def __post_init__(self):
        if self.kind not in ("linear", "exponential-iv"):
            raise ValueError(f"unknown nonlinearity kind {self.kind!r}")
        if self.beta <= 0:
            raise ValueError("beta must be positive")


@dataclass(frozen=True)
class DeviceModel:
    """Programmable resistive device: resistance range and level count."""

    r_on: float
    r_off: float
    levels: int = 4
    nonlinearity: Optional[Nonlinearity] = None

    def __post_init__(self):
        if not (self.r_off > self.r_on > 0):
            raise ValueError("need r_off > r_on > 0")
        if self.levels < 2:
            raise ValueError("need at least 2 conductance levels")

    @property
    def g_on(self) -> float:
        return 1.0 / self.r_on

    @property
    def g_off(self) -> float:
        return 1.0 / self.r_off

    @property
    def is_linear(self) -> bool:
        return self.nonlinearity is None or self.nonlinearity.kind == "linear"

    def level_grid(self) -> np.ndarray:
        """All programmable conductance values, ascending."""
        k = np.arange(self.levels)
        return self.g_off + k * (self.g_on - self.g_off) / (self.levels - 1)


@dataclass(frozen=True)
class CrossbarGeometry:
    """Tile dimensions plus the peripheral/parasitic resistances."""

    rows: int
    cols: int
    r_source: float = 0.0
    r_sink: float = 0.0
    r_wire: float = 0.0
    v_max: float = 1.0

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("rows and cols must be >= 1")
        for name in ("r_source", "r_sink", "r_wire"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.v_max <= 0:
            raise ValueError("v_max must be positive")


class ConductanceMatrix:
    """Programmed device states of one tile, in siemens.

    Entries must lie within [g_off, g_on] and on the device's discrete level
    grid (1e-12 relative tolerance).
    """

    def __init__(self, g, device: DeviceModel, check_grid: bool = True):
        g = np.asarray(g, dtype=np.float64)
        if g.ndim != 2:
            raise ShapeError("conductance matrix must be 2-D")
        lo, hi = device.g_off, device.g_on
        if np.any(g < lo * (1 - 1e-9)) or np.any(g > hi * (1 + 1e-9)):
            raise ValueError("conductance outside [1/r_off, 1/r_on]")
        if check_grid:
            step = (hi - lo) / (device.levels - 1)
            k = (g - lo) / step
            if np.max(np.abs(k - np.round(k))) * step > 1e-12 * hi:
                raise ValueError("conductance off the discrete level grid")
        self.g = g
        self.device = device

    @classmethod
    def from_levels(cls, k, device: DeviceModel) -> "ConductanceMatrix":
        """Build from integer level indices in [0, levels)."""
        k = np.asarray(k)
        if np.any(k < 0) or np.any(k >= device.levels):
            raise ValueError("level index out of range")
        step = (device.g_on - device.g_off) / (device.levels - 1)
        return cls(device.g_off + k * step, device)

    @property
    def shape(self):
        return self.g.shape


def _as_voltage_vector(v, rows) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (rows,):
        raise ShapeError(f"expected voltage vector of length {rows}, got {v.shape}")
    return v


def _device_conductances(g) -> np.ndarray:
    if isinstance(g, ConductanceMatrix):
        return g.g
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2:
        raise ShapeError("conductance matrix must be 2-D")
    return g


def ideal_mvm(v, g) -> np.ndarray:
    """Ideal crossbar dot product: out[j] = sum_i v[i] * g[i][j]."""
    gm = _device_conductances(g)
    v = _as_voltage_vector(v, gm.shape[0])
    return v @ gm


class _UnionFind:
    def __init__(self, n):
        self.parent = np.arange(n)

    def find(self, a):
        p = self.parent
        while p[a] != a:
            p[a] = p[p[a]]
            a = p[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[ra] = rb


class _MeshStructure:
    """Assembled mesh for one (G, geometry) pair, independent of the drive.

    Node ids: source-line node s(i,j) = i*C + j, bit-line node
    b(i,j) = R*C + i*C + j, driver node d(i) = 2*R*C + i, ground = 2*R*C + R.
    Zero-resistance edges merge nodes (union-find); free merged groups become
    unknowns.  Fixed group voltages are linear in the driver vector v, so the
    right-hand side is exposed as a sparse matrix K with rhs = K @ v.
    """

    def __init__(self, gm: np.ndarray, geometry: CrossbarGeometry):
        R, C = gm.shape
        if (R, C) != (geometry.rows, geometry.cols):
            raise ShapeError(f"conductance shape {gm.shape} != geometry "
                             f"({geometry.rows}, {geometry.cols})")
        self.gm = gm
        self.geometry = geometry
        n_mesh = 2 * R * C
        n_nodes = n_mesh + R + 1
        ground = n_nodes - 1
        s = np.arange(R * C).reshape(R, C)
        b = s + R * C
        d = n_mesh + np.arange(R)

        cond_edges = []
        short_edges = []

        def add_resistor(a, bb, r):
            a = np.asarray(a).ravel()
            bb = np.asarray(bb).ravel()
            if r == 0.0:
                short_edges.append((a, bb))
            else:
                cond_edges.append((a, bb, np.full(a.shape, 1.0 / r)))

        nz = gm.ravel() > 0
        cond_edges.append((s.ravel()[nz], b.ravel()[nz], gm.ravel()[nz]))
        if C > 1:
            add_resistor(s[:, :-1], s[:, 1:], geometry.r_wire)
        if R > 1:
            add_resistor(b[:-1, :], b[1:, :], geometry.r_wire)
        add_resistor(d, s[:, 0], geometry.r_source)
        add_resistor(b[R - 1, :], np.full(C, ground), geometry.r_sink)

        uf = _UnionFind(n_nodes)
        for a, bb in short_edges:
            for x, y in zip(a, bb):
                uf.union(x, y)
        rep = np.array([uf.find(i) for i in range(n_nodes)])

        # Which driver (or ground) pins each merged group, if any.
        pin_driver = np.full(n_nodes, -1, dtype=np.int64)   # driver row index
        pin_ground = np.zeros(n_nodes, dtype=bool)
        self.conflicts = []  # (row_a, row_b) drivers merged together
        self.grounded_rows = []  # drivers merged with ground
        for i in range(R):
            r = rep[d[i]]
            if pin_driver[r] >= 0:
                self.conflicts.append((pin_driver[r], i))
            pin_driver[r] = i
        rg = rep[ground]
        pin_ground[rg] = True
        if pin_driver[rg] >= 0:
            self.grounded_rows.append(pin_driver[rg])

        is_fixed = (pin_driver >= 0) | pin_ground
        free_index = np.full(n_nodes, -1, dtype=np.int64)
        free_nodes = np.flatnonzero((rep == np.arange(n_nodes)) & ~is_fixed)
        free_index[free_nodes] = np.arange(free_nodes.size)
        n_free = free_nodes.size

        a_rows, a_cols, a_vals = [], [], []
        k_rows, k_cols, k_vals = [], [], []
        for a, bb, gg in cond_edges:
            ra, rb = rep[a], rep[bb]
            keep = ra != rb
            ra, rb, gg = ra[keep], rb[keep], gg[keep]
            fa, fb = free_index[ra], free_index[rb]
            both = (fa >= 0) & (fb >= 0)
            a_rows += [fa[both], fb[both], fa[both], fb[both]]
            a_cols += [fa[both], fb[both], fb[both], fa[both]]
            a_vals += [gg[both], gg[both], -gg[both], -gg[both]]
            for fi, other in ((fa, rb), (fb, ra)):
                m = (fi >= 0) & (free_index[other] < 0)
                a_rows.append(fi[m]); a_cols.append(fi[m]); a_vals.append(gg[m])
                # Fixed neighbor at a driver voltage contributes g * v[row]
                # to the rhs; grounded neighbors contribute nothing.
                drv = pin_driver[other[m]]
                dm = drv >= 0
                k_rows.append(fi[m][dm]); k_cols.append(drv[dm])
                k_vals.append(gg[m][dm])

        if n_free:
            A = sp.coo_matrix(
                (np.concatenate(a_vals),
                 (np.concatenate(a_rows), np.concatenate(a_cols))),
                shape=(n_free, n_free)).tocsr()
            if np.any(A.diagonal() == 0.0):
                raise SingularSystemError(
                    "floating node group with no conductance path")
        else:
            A = sp.csr_matrix((0, 0))
        if k_rows:
            K = sp.coo_matrix(
                (np.concatenate(k_vals),
                 (np.concatenate(k_rows), np.concatenate(k_cols))),
                shape=(n_free, R)).tocsr()
        else:
            K = sp.csr_matrix((n_free, R))

        self.matrix = A
        self.rhs_map = K
        self.rep = rep
        self.free_index = free_index
        self.pin_driver = pin_driver
        self.pin_ground = pin_ground
        self.n_free = n_free
        self._lu = None

    def check_drive(self, v: np.ndarray):
        for a, b in self.conflicts:
            if v[a] != v[b]:
                raise SingularSystemError(
                    f"rows {a} and {b} shorted together with different drives")
        for a in self.grounded_rows:
            if v[a] != 0.0:
                raise SingularSystemError(f"row {a} driver shorted to ground")

    def solve_free(self, rhs: np.ndarray):
        """Solve A x = rhs (rhs may have multiple columns)."""
        if self.n_free == 0:
            return np.zeros(rhs.shape), 0.0
        if self._lu is None:
            try:
                self._lu = splu(self.matrix.tocsc())
            except RuntimeError as exc:
                raise SingularSystemError(str(exc)) from exc
        x = self._lu.solve(rhs)
        if not np.all(np.isfinite(x)):
            raise SingularSystemError("singular nodal system")
        bnorm = np.linalg.norm(rhs)
        residual = 0.0
        if bnorm > 0:
            residual = float(
                np.linalg.norm(self.matrix @ x - rhs) / bnorm)
        return x, residual

    def node_voltages(self, v: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Voltages of all 2*R*C mesh nodes (columns of v/x may be batched)."""
        R, C = self.gm.shape
        rep = self.rep[:2 * R * C]
        fi = self.free_index[rep]
        drv = self.pin_driver[rep]
        volts = np.zeros((2 * R * C,) + v.shape[1:])
        m = fi >= 0
        volts[m] = x[fi[m]]
        m = drv >= 0
        volts[m] = v[drv[m]]
        return volts

    def solve(self, v: np.ndarray):
        """Node voltages and currents for driver vector(s) v (R,) or (R, m)."""
        v = np.asarray(v, dtype=np.float64)
        self.check_drive(v.reshape(len(v), -1)[:, 0] if v.ndim > 1 else v)
        rhs = self.rhs_map @ v
        x, residual = self.solve_free(rhs)
        volts = self.node_voltages(v, x)
        R, C = self.gm.shape
        vs = volts[:R * C].reshape((R, C) + v.shape[1:])
        vb = volts[R * C:].reshape((R, C) + v.shape[1:])
        dev_i = self.gm.reshape(R, C, *([1] * (v.ndim - 1))) * (vs - vb)
        col = dev_i.sum(axis=0)
        if self.geometry.r_source > 0:
            drv = (v - vs[:, 0]) / self.geometry.r_source
        else:
            drv = dev_i.sum(axis=1)
        return volts, col, drv, residual


def build_nodal_system(v, g, geometry: CrossbarGeometry,
                       device: Optional[DeviceModel] = None):
    """Assemble the conductance-stamped nodal system for one tile.

    Returns (matrix, rhs, structure): a symmetric positive definite sparse
    matrix over the free mesh-node groups (ordered by node id) and its
    right-hand side for the given drive.
    """
    gm = _device_conductances(g)
    v = _as_voltage_vector(v, gm.shape[0])
    structure = _MeshStructure(gm, geometry)
    structure.check_drive(v)
    return structure.matrix, structure.rhs_map @ v, structure


@dataclass
class NodalSolution:
    """Solved operating point of one tile."""

    column_currents: np.ndarray
    node_voltages: np.ndarray  # [s(0,0)..s(R-1,C-1), b(0,0)..b(R-1,C-1)]
    driver_currents: np.ndarray
    iterations: int
    residual: float


def solve_nonideal(v, g, geometry: CrossbarGeometry,
                   device: Optional[DeviceModel] = None) -> NodalSolution:
    """Non-ideal MVM of one tile by nodal analysis.

    Linear devices need a single solve; exponential-IV devices iterate a
    fixed point on the effective device conductance G(V_device), tolerance
    1e-8 V on device voltages, at most 100 iterations.
    """
    gm = _device_conductances(g)
    if isinstance(g, ConductanceMatrix) and device is None:
        device = g.device
    v = _as_voltage_vector(v, gm.shape[0])
    if np.any(v < 0) or np.any(v > geometry.v_max * (1 + 1e-12)):
        raise ValueError(f"input voltages must lie in [0, {geometry.v_max}]")

    if device is None or device.is_linear:
        mesh = _MeshStructure(gm, geometry)
        volts, col, drv, residual = mesh.solve(v)
        return NodalSolution(col, volts, drv, iterations=1, residual=residual)

    beta = device.nonlinearity.beta
    v0 = geometry.v_max

    def eff_conductance(vd):
        # I/V with the small-voltage limit beta/sinh(beta) * G.
        small = np.abs(vd) < 1e-12
        safe = np.where(small, 1.0, vd)
        ratio = v0 * np.sinh(beta * safe / v0) / (safe * np.sinh(beta))
        return gm * np.where(small, beta / np.sinh(beta), ratio)

    g_eff = gm * (beta / np.sinh(beta))
    vd_prev = None
    trace = []
    for it in range(1, NONLINEAR_MAX_ITERS + 1):
        mesh = _MeshStructure(g_eff, geometry)
        volts, _, drv, residual = mesh.solve(v)
        R, C = gm.shape
        vd = (volts[:R * C] - volts[R * C:]).reshape(R, C)
        if vd_prev is not None:
            dv = float(np.max(np.abs(vd - vd_prev)))
            trace.append(dv)
            if dv <= NONLINEAR_TOL_V:
                dev_i = gm * v0 * np.sinh(beta * vd / v0) / np.sinh(beta)
                col = dev_i.sum(axis=0)
                if geometry.r_source <= 0:
                    drv = dev_i.sum(axis=1)
                return NodalSolution(col, volts, drv, iterations=it,
                                     residual=residual)
        vd_prev = vd
        g_eff = eff_conductance(vd)
    raise ConvergenceError(
        f"device iteration did not converge in {NONLINEAR_MAX_ITERS} steps",
        trace)


def effective_matrix(g, geometry: CrossbarGeometry) -> np.ndarray:
    """C x R matrix M with column_currents = M @ v for linear devices.

    The mesh is a linear resistive network, so the full non-ideal MVM is a
    matrix multiply; M is recovered by one factorization and R unit-vector
    solves (superposition).
    """
    gm = _device_conductances(g)
    mesh = _MeshStructure(gm, geometry)
    _, col, _, _ = mesh.solve(np.eye(gm.shape[0]))
    return col


def nonideality_factor(pairs, threshold: Optional[float] = None) -> float:
    """Average relative shortfall of non-ideal vs ideal output currents.

    NF = mean over elements with |ideal| > threshold of
    (ideal - nonideal) / ideal.  With threshold None, elements with
    |ideal| <= 1e-3 * max|ideal| in the batch are excluded (keeps the
    average away from near-zero ideal outputs).
    """
    ideals, nonideals = [], []
    for ideal, nonideal in pairs:
        ideal = np.asarray(ideal, float).ravel()
        nonideal = np.asarray(nonideal, float).ravel()
        if ideal.shape != nonideal.shape:
            raise ShapeError("ideal/nonideal vectors differ in length")
        ideals.append(ideal)
        nonideals.append(nonideal)
    if not ideals:
        raise UndefinedNFError("empty batch")
    ideal = np.concatenate(ideals)
    nonideal = np.concatenate(nonideals)
    if threshold is None:
        threshold = 1e-3 * np.max(np.abs(ideal), initial=0.0)
    elif threshold < 0:
        raise ValueError("threshold must be >= 0")
    keep = np.abs(ideal) > threshold
    if not np.any(keep):
        raise UndefinedNFError("no element survives the magnitude threshold")
    return float(np.mean((ideal[keep] - nonideal[keep]) / ideal[keep]))


def sample_nf_inputs(geometry: CrossbarGeometry, device: DeviceModel,
                     n_samples: int, seed: int, v_levels: int = 2):
    """Random (V, G) pairs matching how MVMs look during inference: V uniform
    over the stream voltage levels, G uniform over the device level grid."""
    rng = np.random.default_rng(seed)
    vgrid = np.linspace(0.0, geometry.v_max, v_levels)
    for _ in range(n_samples):
        v = rng.choice(vgrid, size=geometry.rows)
        k = rng.integers(0, device.levels, size=(geometry.rows, geometry.cols))
        yield v, ConductanceMatrix.from_levels(k, device)


def measure_nf(geometry: CrossbarGeometry, device: DeviceModel,
               n_samples: int = 200, seed: int = 0) -> float:
    """NF of a geometry measured over random sampled MVMs."""
    pairs = []
    for v, g in sample_nf_inputs(geometry, device, n_samples, seed):
        ideal = ideal_mvm(v, g)
        nonideal = solve_nonideal(v, g, geometry, device).column_currents
        pairs.append((ideal, nonideal))
    return nonideality_factor(pairs)


DEFAULT_R_SOURCE = 200.0
DEFAULT_R_SINK = 200.0


def calibrate_geometry(target_nf: float, rows: int, cols: int,
                       device: DeviceModel, r_source: float = DEFAULT_R_SOURCE,
                       r_sink: float = DEFAULT_R_SINK, v_max: float = 1.0,
                       n_samples: int = 200, seed: int = 0,
                       tol: float = 0.01, max_r_wire: float = 1e6
                       ) -> CrossbarGeometry:
    """Pick r_wire by bisection so the measured NF hits target_nf +- tol.

    The device/wire parameters behind the published NF values are not
    available, so the wire resistance is inverted from the target instead.
    """
    if not (0.0 <= target_nf < 0.5):
        raise ValueError("target_nf must lie in [0, 0.5)")

    def geom(r_wire):
        return CrossbarGeometry(rows, cols, r_source=r_source, r_sink=r_sink,
                                r_wire=r_wire, v_max=v_max)

    if target_nf == 0.0:
        return geom(0.0)

    def nf_at(r_wire):
        return measure_nf(geom(r_wire), device, n_samples, seed)

    lo, hi = 0.0, 1e-3
    nf_lo = nf_at(lo)
    if nf_lo > target_nf + tol:
        raise CalibrationError(
            f"NF already {nf_lo:.4f} at r_wire=0", achieved_range=(nf_lo, None))
    nf_hi = nf_at(hi)
    while nf_hi < target_nf and hi < max_r_wire:
        hi *= 4.0
        nf_hi = nf_at(hi)
    if nf_hi < target_nf - tol:
        raise CalibrationError(
            f"target NF {target_nf} unreachable; achieved [{nf_lo:.4f}, "
            f"{nf_hi:.4f}] for r_wire in [0, {hi:g}]",
            achieved_range=(nf_lo, nf_hi))
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        nf_mid = nf_at(mid)
        if abs(nf_mid - target_nf) <= 0.5 * tol:
            return geom(mid)
        if nf_mid < target_nf:
            lo = mid
        else:
            hi = mid
    return geom(0.5 * (lo + hi))


# Named crossbar variants: (rows, cols, r_on, target NF).
PRESETS = {
    "64x64_300k": dict(rows=64, cols=64, r_on=300e3, target_nf=0.07),
    "32x32_100k": dict(rows=32, cols=32, r_on=100e3, target_nf=0.14),
    "64x64_100k": dict(rows=64, cols=64, r_on=100e3, target_nf=0.26),
}
DEFAULT_ON_OFF_RATIO = 10.0


def preset_device(name: str, levels: int = 4) -> DeviceModel:
    p = PRESETS[name]
    return DeviceModel(r_on=p["r_on"], r_off=p["r_on"] * DEFAULT_ON_OFF_RATIO,
                       levels=levels)


@dataclass
class CrossbarModel:
    """A fully described crossbar variant: geometry + device, serializable."""

    name: str
    geometry: CrossbarGeometry
    device: DeviceModel

    def to_dict(self) -> dict:
        nl = self.device.nonlinearity
        return {
            "format": "nvmsim-crossbar-v1",
            "name": self.name,
            "rows": self.geometry.rows,
            "cols": self.geometry.cols,
            "r_source": self.geometry.r_source,
            "r_sink": self.geometry.r_sink,
            "r_wire": self.geometry.r_wire,
            "v_max": self.geometry.v_max,
            "r_on": self.device.r_on,
            "r_off": self.device.r_off,
            "levels": self.device.levels,
            "nonlinearity": None if nl is None else
                {"kind": nl.kind, "beta": nl.beta},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CrossbarModel":
        if d.get("format") != "nvmsim-crossbar-v1":
            raise ValueError(f"unrecognized crossbar file format {d.get('format')!r}")
        nl = d.get("nonlinearity")
        return cls(
            name=d["name"],
            geometry=CrossbarGeometry(d["rows"], d["cols"], d["r_source"],
                                      d["r_sink"], d["r_wire"], d["v_max"]),
            device=DeviceModel(d["r_on"], d["r_off"], d["levels"],
                               None if nl is None else
                               Nonlinearity(nl["kind"], nl["beta"])),
        )

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "CrossbarModel":
        with open(path) as f:
            return cls.from_dict(json.load(f))
