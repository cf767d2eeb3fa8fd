import numpy as np
import pytest

from nvmsim import circuit as cz


DEV = cz.DeviceModel(r_on=100e3, r_off=1e6, levels=4)


def random_cm(rng, rows, cols, device=DEV):
    k = rng.integers(0, device.levels, size=(rows, cols))
    return cz.ConductanceMatrix.from_levels(k, device)


# ---------------------------------------------------------------- types

def test_device_model_validation():
    with pytest.raises(ValueError):
        cz.DeviceModel(r_on=1e6, r_off=1e5)
    with pytest.raises(ValueError):
        cz.DeviceModel(r_on=1e5, r_off=1e6, levels=1)
    grid = DEV.level_grid()
    assert grid[0] == pytest.approx(1e-6)
    assert grid[-1] == pytest.approx(1e-5)
    assert np.all(np.diff(grid) > 0)


def test_geometry_validation():
    with pytest.raises(ValueError):
        cz.CrossbarGeometry(0, 4)
    with pytest.raises(ValueError):
        cz.CrossbarGeometry(4, 4, r_wire=-1.0)


def test_conductance_grid_enforced():
    g = np.full((2, 2), DEV.g_off)
    cz.ConductanceMatrix(g, DEV)  # ok
    with pytest.raises(ValueError):
        cz.ConductanceMatrix(g * 1.5, DEV)  # off the 4-level grid
    with pytest.raises(ValueError):
        cz.ConductanceMatrix(np.full((2, 2), DEV.g_on * 2), DEV)
    with pytest.raises(cz.ShapeError):
        cz.ConductanceMatrix(np.zeros(4), DEV)


# ------------------------------------------------------------- ideal_mvm

def test_ideal_mvm_zero_input():
    rng = np.random.default_rng(0)
    g = random_cm(rng, 5, 3)
    assert np.all(cz.ideal_mvm(np.zeros(5), g) == 0.0)


def test_ideal_mvm_ohms_law_1x1():
    g = np.array([[1.0 / 300e3]])
    out = cz.ideal_mvm([0.5], g)
    assert out[0] == pytest.approx(1.6667e-6, rel=1e-4)


def test_ideal_mvm_matches_direct_sum():
    rng = np.random.default_rng(1)
    g = random_cm(rng, 4, 4)
    v = rng.random(4)
    out = cz.ideal_mvm(v, g)
    ref = np.array([sum(v[i] * g.g[i][j] for i in range(4)) for j in range(4)])
    assert np.allclose(out, ref, rtol=1e-12)


def test_ideal_mvm_shape_error():
    rng = np.random.default_rng(2)
    with pytest.raises(cz.ShapeError):
        cz.ideal_mvm(np.zeros(3), random_cm(rng, 4, 4))


# ----------------------------------------------------- nodal system/solve

def test_1x1_no_parasitics_device_sees_full_drive():
    geo = cz.CrossbarGeometry(1, 1)
    sol = cz.solve_nonideal([0.7], np.array([[DEV.g_on]]), geo)
    vs, vb = sol.node_voltages[0], sol.node_voltages[1]
    assert vs - vb == pytest.approx(0.7, abs=1e-12)
    assert sol.column_currents[0] == pytest.approx(0.7 * DEV.g_on, rel=1e-12)


def test_system_matrix_symmetric():
    rng = np.random.default_rng(3)
    geo = cz.CrossbarGeometry(3, 4, r_source=1e3, r_sink=1e3, r_wire=100.0)
    g = random_cm(rng, 3, 4)
    A, rhs, _ = cz.build_nodal_system(rng.random(3), g, geo)
    assert (A != A.T).nnz == 0
    assert A.shape == (2 * 3 * 4, 2 * 3 * 4)


def _hand_2x2_currents(v, g_dev, r_source, r_sink, r_wire):
    """Dense 8-unknown nodal solve of the 2x2 tile, assembled by hand.

    Unknown order: s00 s01 s10 s11 b00 b01 b10 b11.
    """
    gs, gk, gw = 1.0 / r_source, 1.0 / r_sink, 1.0 / r_wire
    A = np.zeros((8, 8))
    rhs = np.zeros(8)

    def stamp(a, b, g):
        A[a, a] += g
        A[b, b] += g
        A[a, b] -= g
        A[b, a] -= g

    # devices s(i,j) -- b(i,j)
    for i in range(2):
        for j in range(2):
            stamp(i * 2 + j, 4 + i * 2 + j, g_dev[i][j])
    # source-line wires s(i,0) -- s(i,1)
    stamp(0, 1, gw)
    stamp(2, 3, gw)
    # bit-line wires b(0,j) -- b(1,j)
    stamp(4, 6, gw)
    stamp(5, 7, gw)
    # drivers behind r_source into s(i,0)
    A[0, 0] += gs
    rhs[0] += gs * v[0]
    A[2, 2] += gs
    rhs[2] += gs * v[1]
    # sinks from b(1,j) to ground
    A[6, 6] += gk
    A[7, 7] += gk
    x = np.linalg.solve(A, rhs)
    vs = x[:4].reshape(2, 2)
    vb = x[4:].reshape(2, 2)
    return (np.asarray(g_dev) * (vs - vb)).sum(axis=0)


def test_2x2_matches_hand_oracle():
    g = np.full((2, 2), 1.0 / 100e3)
    v = [0.5, 0.5]
    geo = cz.CrossbarGeometry(2, 2, r_source=1e3, r_sink=1e3, r_wire=100.0)
    ref = _hand_2x2_currents(v, g, 1e3, 1e3, 100.0)
    sol = cz.solve_nonideal(v, g, geo)
    assert np.allclose(sol.column_currents, ref, rtol=1e-9)
    assert sol.iterations == 1
    assert sol.residual <= cz.LINEAR_RESIDUAL_TOL


def test_2x2_hand_oracle_random_conductances():
    rng = np.random.default_rng(4)
    geo = cz.CrossbarGeometry(2, 2, r_source=500.0, r_sink=2e3, r_wire=50.0)
    for _ in range(10):
        g = random_cm(rng, 2, 2)
        v = rng.random(2)
        ref = _hand_2x2_currents(v, g.g, 500.0, 2e3, 50.0)
        sol = cz.solve_nonideal(v, g, geo)
        assert np.allclose(sol.column_currents, ref, rtol=1e-9)


def test_ideal_limit():
    rng = np.random.default_rng(5)
    geo = cz.CrossbarGeometry(8, 8)
    for _ in range(20):
        g = random_cm(rng, 8, 8)
        v = rng.random(8)
        sol = cz.solve_nonideal(v, g, geo)
        ideal = cz.ideal_mvm(v, g)
        assert np.allclose(sol.column_currents, ideal, rtol=1e-9)


def test_attenuation_and_conservation():
    rng = np.random.default_rng(6)
    geo = cz.CrossbarGeometry(6, 5, r_source=1e3, r_sink=1e3, r_wire=200.0)
    for _ in range(100):
        g = random_cm(rng, 6, 5)
        v = rng.random(6)
        sol = cz.solve_nonideal(v, g, geo)
        ideal = cz.ideal_mvm(v, g)
        assert np.all(sol.column_currents >= -1e-15)
        assert np.all(sol.column_currents <= ideal * (1 + 1e-9) + 1e-15)
        # current out of the drivers equals current into ground
        total_in = sol.driver_currents.sum()
        total_out = sol.column_currents.sum()
        assert total_out == pytest.approx(total_in, rel=1e-9)


def test_mesh_linearity_in_drive():
    rng = np.random.default_rng(7)
    geo = cz.CrossbarGeometry(4, 4, r_source=1e3, r_sink=500.0, r_wire=100.0)
    g = random_cm(rng, 4, 4)
    v = rng.random(4) * 0.5
    base = cz.solve_nonideal(v, g, geo).column_currents
    scaled = cz.solve_nonideal(1.7 * v, g, geo).column_currents
    assert np.allclose(scaled, 1.7 * base, rtol=1e-10)


def test_effective_matrix_agrees_with_solver():
    rng = np.random.default_rng(8)
    geo = cz.CrossbarGeometry(5, 6, r_source=800.0, r_sink=300.0, r_wire=75.0)
    g = random_cm(rng, 5, 6)
    M = cz.effective_matrix(g, geo)
    assert M.shape == (6, 5)
    for _ in range(5):
        v = rng.random(5)
        assert np.allclose(M @ v,
                           cz.solve_nonideal(v, g, geo).column_currents,
                           rtol=1e-9)


def test_voltage_range_enforced():
    geo = cz.CrossbarGeometry(2, 2)
    g = np.full((2, 2), DEV.g_on)
    with pytest.raises(ValueError):
        cz.solve_nonideal([0.5, 1.5], g, geo)
    with pytest.raises(ValueError):
        cz.solve_nonideal([-0.1, 0.5], g, geo)


def test_singular_system_error():
    geo = cz.CrossbarGeometry(2, 2, r_source=1e3, r_sink=1e3, r_wire=100.0)
    g = np.full((2, 2), 1e-5)
    _, _, structure = cz.build_nodal_system(np.zeros(2), g, geo)
    import scipy.sparse as sp
    structure.matrix = sp.csr_matrix(np.zeros((structure.n_free,) * 2))
    structure._lu = None
    with pytest.raises(cz.SingularSystemError):
        structure.solve_free(np.ones(structure.n_free))


# ------------------------------------------------------- nonlinear devices

NL_DEV = cz.DeviceModel(100e3, 1e6, 4, cz.Nonlinearity(beta=2.0))


def test_nonlinear_full_scale_equals_linear():
    # at V = v_max the sinh curve passes through the linear point, so binary
    # full-swing inputs with no parasitics reproduce the ideal MVM
    geo = cz.CrossbarGeometry(4, 4)
    rng = np.random.default_rng(9)
    g = random_cm(rng, 4, 4, NL_DEV)
    v = np.array([1.0, 0.0, 1.0, 1.0])
    sol = cz.solve_nonideal(v, g, geo, NL_DEV)
    assert np.allclose(sol.column_currents, cz.ideal_mvm(v, g), rtol=1e-7)
    assert sol.iterations >= 1


def test_nonlinear_midscale_below_linear():
    geo = cz.CrossbarGeometry(3, 3)
    rng = np.random.default_rng(10)
    g = random_cm(rng, 3, 3, NL_DEV)
    v = np.full(3, 0.5)
    sol = cz.solve_nonideal(v, g, geo, NL_DEV)
    # sinh(beta/2)/sinh(beta) < 1/2: sub-linear at half scale
    assert np.all(sol.column_currents < cz.ideal_mvm(v, g))


def test_nonlinear_convergence_error(monkeypatch):
    monkeypatch.setattr(cz, "NONLINEAR_MAX_ITERS", 2)
    geo = cz.CrossbarGeometry(3, 3, r_source=1e3, r_sink=1e3, r_wire=100.0)
    rng = np.random.default_rng(11)
    g = random_cm(rng, 3, 3, NL_DEV)
    with pytest.raises(cz.ConvergenceError) as err:
        cz.solve_nonideal(np.full(3, 0.5), g, geo, NL_DEV)
    assert len(err.value.trace) >= 1


# ------------------------------------------------------------------- NF

def test_nf_zero_when_equal():
    pairs = [(np.ones(4), np.ones(4))]
    assert cz.nonideality_factor(pairs) == 0.0


def test_nf_arithmetic_example():
    pairs = [(np.array([1.0, 2.0]), np.array([0.9, 1.6]))]
    assert cz.nonideality_factor(pairs) == pytest.approx(0.15)


def test_nf_threshold_excludes_small_ideals():
    pairs = [(np.array([1.0, 1e-9]), np.array([0.9, 5e-10]))]
    assert cz.nonideality_factor(pairs) == pytest.approx(0.1)
    with pytest.raises(cz.UndefinedNFError):
        cz.nonideality_factor(pairs, threshold=10.0)
    with pytest.raises(cz.UndefinedNFError):
        cz.nonideality_factor([])


def test_nf_monotone_in_size_and_r_on():
    geo32 = cz.CrossbarGeometry(32, 32, 200.0, 200.0, 5.0)
    geo64 = cz.CrossbarGeometry(64, 64, 200.0, 200.0, 5.0)
    dev_100k = cz.preset_device("32x32_100k")
    dev_300k = cz.preset_device("64x64_300k")
    nf_small = cz.measure_nf(geo32, dev_100k, n_samples=40)
    nf_large = cz.measure_nf(geo64, dev_100k, n_samples=40)
    nf_large_300k = cz.measure_nf(geo64, dev_300k, n_samples=40)
    assert nf_large > nf_small
    assert nf_large > nf_large_300k


# ------------------------------------------------------------ calibration

def test_calibrate_zero_target():
    geo = cz.calibrate_geometry(0.0, 16, 16, DEV)
    assert geo.r_wire == 0.0


def test_calibrate_monotone_r_wire():
    r_wires = []
    for target in (0.05, 0.10, 0.15):
        geo = cz.calibrate_geometry(target, 16, 16, DEV, n_samples=40)
        nf = cz.measure_nf(geo, DEV, n_samples=40)
        assert abs(nf - target) <= 0.01
        r_wires.append(geo.r_wire)
    assert r_wires[0] < r_wires[1] < r_wires[2]


def test_calibrate_unreachable_target():
    with pytest.raises(cz.CalibrationError) as err:
        cz.calibrate_geometry(0.45, 4, 4, DEV, r_source=0.0, r_sink=0.0,
                              n_samples=10, max_r_wire=1e-3)
    assert err.value.achieved_range is not None


def test_calibrate_rejects_bad_target():
    with pytest.raises(ValueError):
        cz.calibrate_geometry(0.6, 8, 8, DEV)


# ----------------------------------------------------- presets and files

def test_preset_device_parameters():
    dev = cz.preset_device("64x64_300k")
    assert dev.r_on == 300e3
    assert dev.r_off == 3e6
    with pytest.raises(KeyError):
        cz.preset_device("128x128_50k")


def test_crossbar_model_roundtrip(tmp_path):
    model = cz.CrossbarModel(
        "32x32_100k",
        cz.CrossbarGeometry(32, 32, 200.0, 200.0, 6.25),
        cz.DeviceModel(100e3, 1e6, 4, cz.Nonlinearity(beta=3.0)))
    path = tmp_path / "xbar.json"
    model.save(path)
    back = cz.CrossbarModel.load(path)
    assert back == model


def test_crossbar_model_rejects_unknown_format(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"format": "something-else"}')
    with pytest.raises(ValueError):
        cz.CrossbarModel.load(path)
