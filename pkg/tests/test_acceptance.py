"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line with the measured numbers.  The
slow shared artifacts (calibrated presets, the nonlinear-device surrogate
backend, the trained toy classifier) are module-scoped fixtures; their
build time is charged to the criteria that consume them.
"""

import os
import time

import numpy as np
import pytest

from nvmsim import attacks, circuit as cz, cli, mapping, nn, surrogate as sg

from test_circuit import _hand_2x2_currents, random_cm
from test_nn import finite_diff_input_grad, rel_err


QC = mapping.QuantConfig()


def report(criterion, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    print(line)
    assert ok, line


def cnn5(num_classes=10, seed=0):
    layers = [nn.Conv2d(1, 8, 3), nn.ReLU(), nn.Conv2d(8, 8, 3), nn.ReLU(),
              nn.AvgPool2d(2), nn.Conv2d(8, 16, 3), nn.ReLU(), nn.Flatten(),
              nn.Linear(16 * 4 * 4, 64), nn.ReLU(),
              nn.Linear(64, num_classes)]
    return nn.Network((1, 16, 16), layers, seed=seed)


def train_toy(seed):
    ds = nn.make_pattern_dataset(n_train=3000, n_test=400, noise=0.25,
                                 seed=seed)
    net = cnn5(seed=seed)
    nn.train_classifier(net, ds, epochs=16, lr=0.1, seed=seed)
    return net, ds


# ------------------------------------------------------- shared artifacts

@pytest.fixture(scope="module")
def calibrated_presets():
    """Linear Table-style presets calibrated to their target NF."""
    out = {}
    for name in ("64x64_300k", "32x32_100k", "64x64_100k"):
        t0 = time.time()
        p = cz.PRESETS[name]
        dev = cz.preset_device(name)
        geo = cz.calibrate_geometry(p["target_nf"], p["rows"], p["cols"],
                                    dev, n_samples=50)
        nf = cz.measure_nf(geo, dev, n_samples=50, seed=1)
        out[name] = {"geometry": geo, "device": dev, "nf": nf,
                     "seconds": time.time() - t0}
    return out


@pytest.fixture(scope="module")
def nl_backend():
    """Exponential-IV 64x64 crossbar calibrated to NF 0.26, executed
    through a surrogate trained on nonlinear nodal-solver data."""
    t0 = time.time()
    dev = cz.DeviceModel(100e3, 1e6, 4, cz.Nonlinearity(beta=6.0))
    geo = cz.calibrate_geometry(0.26, 64, 64, dev, r_source=50.0,
                                r_sink=250.0, n_samples=40)
    ds = sg.generate_dataset(geo, dev, 1000, seed=0)
    net = sg.train_surrogate(ds, epochs=50, seed=0)
    return {"geometry": geo, "device": dev, "surrogate": net,
            "seconds": time.time() - t0}


@pytest.fixture(scope="module")
def toy():
    t0 = time.time()
    net, ds = train_toy(seed=0)
    return {"net": net, "dataset": ds, "seconds": time.time() - t0}


# ------------------------------------------------------------- criteria

def test_criterion_1_ideal_limit_equivalence():
    t0 = time.time()
    rng = np.random.default_rng(0)
    worst = 0.0
    for name in ("64x64_300k", "32x32_100k", "64x64_100k"):
        p = cz.PRESETS[name]
        dev = cz.preset_device(name)
        geo = cz.CrossbarGeometry(p["rows"], p["cols"])  # zero parasitics
        for _ in range(100):
            g = random_cm(rng, p["rows"], p["cols"], dev)
            v = rng.random(p["rows"])
            out = cz.solve_nonideal(v, g, geo, dev).column_currents
            ideal = cz.ideal_mvm(v, g)
            worst = max(worst, np.max(np.abs(out - ideal) / np.abs(ideal)))
    dt = time.time() - t0
    report(1, worst <= 1e-9 and dt < 30,
           f"max relative deviation {worst:.2e} over 300 instances "
           f"in {dt:.1f}s")


def test_criterion_2_circuit_oracle():
    rng = np.random.default_rng(1)
    geo = cz.CrossbarGeometry(2, 2, r_source=700.0, r_sink=1.5e3,
                              r_wire=80.0)
    worst = 0.0
    for _ in range(20):
        g = random_cm(rng, 2, 2)
        v = rng.random(2)
        ref = _hand_2x2_currents(v, g.g, 700.0, 1.5e3, 80.0)
        sol = cz.solve_nonideal(v, g, geo)
        worst = max(worst, np.max(np.abs(sol.column_currents - ref)
                                  / np.abs(ref)))
    geo = cz.CrossbarGeometry(6, 5, r_source=1e3, r_sink=1e3, r_wire=200.0)
    worst_cons = 0.0
    for _ in range(100):
        g = random_cm(rng, 6, 5)
        sol = cz.solve_nonideal(rng.random(6), g, geo)
        total_in = sol.driver_currents.sum()
        total_out = sol.column_currents.sum()
        worst_cons = max(worst_cons, abs(total_out - total_in) / total_in)
    report(2, worst <= 1e-9 and worst_cons <= 1e-9,
           f"2x2 hand-oracle deviation {worst:.2e}, conservation "
           f"residual {worst_cons:.2e} over 100 instances")


def test_criterion_3_preset_calibration(calibrated_presets):
    cp = calibrated_presets
    nf = {name: cp[name]["nf"] for name in cp}
    dt = sum(cp[name]["seconds"] for name in cp)
    ok = (abs(nf["64x64_300k"] - 0.07) <= 0.01
          and nf["64x64_100k"] > nf["32x32_100k"] > nf["64x64_300k"]
          and 0.06 <= nf["32x32_100k"] <= 0.22
          and 0.18 <= nf["64x64_100k"] <= 0.34
          and dt < 600)
    report(3, ok,
           f"NF 64x64_300k={nf['64x64_300k']:.3f} "
           f"32x32_100k={nf['32x32_100k']:.3f} "
           f"64x64_100k={nf['64x64_100k']:.3f} in {dt:.0f}s")


def test_criterion_4_bit_slicing_exactness():
    rng = np.random.default_rng(2)
    geo = cz.CrossbarGeometry(16, 16)
    backend = mapping.IdealDigital()
    exact = True
    for _ in range(200):
        w = rng.standard_normal((rng.integers(2, 24), rng.integers(2, 40)))
        sliced = mapping.SlicedLayer.from_matrix("t", w, QC, geo)
        x = rng.random((2, w.shape[1]))
        _, acc = mapping.execute_layer_analog(sliced, x, backend,
                                              return_predequant=True)
        q, _ = mapping.quantize_weights(w, QC)
        xq, _ = mapping.quantize_inputs(x, QC)
        exact = exact and np.array_equal(acc, (xq @ q.T).astype(float))
    report(4, exact, "200 random layers reconstruct the integer MVM "
                     "exactly before dequantization")


def test_criterion_5_gradient_fidelity(toy):
    rng = np.random.default_rng(3)
    cases = [(nn.Linear(6, 4), (6,)),
             (nn.Conv2d(2, 3, 3), (2, 6, 6)),
             (nn.Conv2d(2, 3, 3, stride=2, pad=1), (2, 7, 7)),
             (nn.ReLU(), (3, 4, 4)),
             (nn.AvgPool2d(2), (2, 4, 4)),
             (nn.Flatten(), (2, 3, 3)),
             (nn.Residual([nn.Conv2d(2, 2, 3, pad=1), nn.ReLU()]),
              (2, 5, 5))]
    worst = 0.0
    for layer, shape in cases:
        layer.init_params(rng)
        x = rng.standard_normal((2,) + shape)
        w = rng.standard_normal(layer.out_shape(shape))
        out, cache = layer.forward(x)
        for p in layer.params():
            p.zero_grad()
        dx = layer.backward(np.broadcast_to(w, out.shape).copy(), cache)
        fd = finite_diff_input_grad(
            lambda xv: float(np.sum(layer.forward(xv)[0] * w)), x)
        worst = max(worst, rel_err(dx, fd))

    net, ds = toy["net"], toy["dataset"]
    x, y = ds["x_test"][:4], ds["y_test"][:4]
    hil = attacks.hil_gradient(net, QC, mapping.IdealDigital(), x, y)
    dig = nn.loss_and_input_grad(net, x, y)[1]
    cos = float(np.sum(hil * dig)
                / (np.linalg.norm(hil) * np.linalg.norm(dig)))
    report(5, worst <= 1e-4 and cos > 0.99 and rel_err(hil, dig) <= 0.3,
           f"max layer-gradient deviation {worst:.2e}; zero-parasitic HIL "
           f"vs digital gradient cosine {cos:.4f}")


def test_criterion_6_surrogate_fidelity(calibrated_presets):
    mres, times = {}, {}
    for name, cp in calibrated_presets.items():
        ds = sg.generate_dataset(cp["geometry"], cp["device"], 1500, seed=0)
        t0 = time.time()
        net = sg.train_surrogate(ds, epochs=50, seed=0)
        times[name] = time.time() - t0
        mres[name] = net.train_stats["val_mre"]
    ok = all(m <= 0.05 for m in mres.values()) and \
        all(t < 600 for t in times.values())
    report(6, ok, "held-out MRE " +
           " ".join(f"{k}={v:.3f}" for k, v in mres.items()) +
           f"; max training time {max(times.values()):.0f}s")


def test_criterion_7_robustness_gap(nl_backend, toy):
    t0 = time.time()
    net, ds = toy["net"], toy["dataset"]
    test = {"x": ds["x_test"][:100], "y": ds["y_test"][:100]}
    executor = mapping.AnalogExecutor(
        net, QC, mapping.SurrogateBackend(nl_backend["surrogate"]))

    clean_d = nn.evaluate_accuracy(net.forward, test)
    clean_a = nn.evaluate_accuracy(executor, test)
    grad = lambda x, y: nn.loss_and_input_grad(net, x, y)[1]

    pgd_eps, pgd_d, pgd_a = None, None, None
    for eps in (12 / 255, 14 / 255, 16 / 255):
        cfg = attacks.AttackConfig(epsilon=eps, iters=30, seed=0)
        exs = attacks.pgd_attack(grad, test["x"], test["y"], cfg,
                                 predict_fn=net.forward)
        adv = np.stack([e.x_star for e in exs])
        d = nn.evaluate_accuracy(net.forward, {"x": adv, "y": test["y"]})
        if d < 0.20:
            pgd_eps, pgd_d = eps, d
            pgd_a = nn.evaluate_accuracy(executor,
                                         {"x": adv, "y": test["y"]})
            break

    sq_eps = 12 / 255
    exs = attacks.square_attack(net.forward, test["x"], test["y"], sq_eps,
                                max_queries=1000, seed=0)
    adv = np.stack([e.x_star for e in exs])
    sq_d = nn.evaluate_accuracy(net.forward, {"x": adv, "y": test["y"]})
    sq_a = nn.evaluate_accuracy(executor, {"x": adv, "y": test["y"]})

    dt = time.time() - t0 + nl_backend["seconds"] + toy["seconds"]
    ok = (clean_d >= 0.95
          and clean_d - clean_a <= 0.10
          and pgd_eps is not None and pgd_a >= pgd_d + 0.05
          and clean_d - sq_d >= 0.50 and sq_a >= sq_d + 0.10
          and dt < 3600)
    report(7, ok,
           f"clean digital={clean_d:.2f} analog={clean_a:.2f}; PGD at "
           f"eps={pgd_eps and round(pgd_eps * 255)}/255 digital={pgd_d} "
           f"analog={pgd_a} (gap {pgd_a - pgd_d:+.2f}); Square at 12/255 "
           f"digital={sq_d:.2f} analog={sq_a:.2f} (gap {sq_a - sq_d:+.2f}); "
           f"{dt:.0f}s total")


def test_criterion_8_adaptive_closure(nl_backend, toy, calibrated_presets):
    eps = 14 / 255
    mismatch = mapping.CircuitNonIdeal(
        calibrated_presets["32x32_100k"]["geometry"],
        calibrated_presets["32x32_100k"]["device"])
    results = []
    for seed in (0, 1, 2):
        if seed == 0:
            net, ds = toy["net"], toy["dataset"]
        else:
            net, ds = train_toy(seed)
        test = {"x": ds["x_test"][:50], "y": ds["y_test"][:50]}
        target = mapping.AnalogExecutor(
            net, QC, mapping.SurrogateBackend(nl_backend["surrogate"]))
        cfg = attacks.AttackConfig(epsilon=eps, iters=30, seed=seed)

        def adv_acc(grad_fn, predict_fn):
            exs = attacks.pgd_attack(grad_fn, test["x"], test["y"], cfg,
                                     predict_fn=predict_fn)
            adv = np.stack([e.x_star for e in exs])
            return nn.evaluate_accuracy(target, {"x": adv, "y": test["y"]})

        grad = lambda x, y: nn.loss_and_input_grad(net, x, y)[1]
        nonadaptive = adv_acc(grad, net.forward)
        matched = adv_acc(
            attacks.hil_grad_fn(net, QC,
                                mapping.SurrogateBackend(
                                    nl_backend["surrogate"])), target)
        mm_exec = mapping.AnalogExecutor(net, QC, mismatch)
        mismatched = adv_acc(attacks.hil_grad_fn(net, QC, mismatch), mm_exec)
        results.append((nonadaptive, matched, mismatched))

    ok = all(m <= na + 0.02 and mm >= m - 0.02
             for na, m, mm in results)
    detail = " ".join(
        f"seed{idx}:(nonadaptive={na:.2f},matched={m:.2f},"
        f"mismatched={mm:.2f})"
        for idx, (na, m, mm) in enumerate(results))
    report(8, ok, detail)


def test_criterion_9_determinism(tmp_path):
    cfg_text = """\
[dataset]
n_train = 64
n_test = 16

[model]
arch = toy_cnn
epochs = 2
lr = 0.1

[crossbar]
target = 32x32_100k
calibration_samples = 10

[attack]
scenarios = white_box, square_bb
epsilons = 0.05
n_eval = 8
iters = 5
queries = 20
"""
    cfg = tmp_path / "experiment.ini"
    cfg.write_text(cfg_text)
    outputs = []
    for out in ("out_a", "out_b"):
        out_dir = str(tmp_path / out)
        for command in ("calibrate", "train", "attack", "report"):
            assert cli.main([command, "--config", str(cfg), "--seed", "7",
                             "--out", out_dir]) == 0
        with open(os.path.join(out_dir, "results.csv"), "rb") as f:
            outputs.append(f.read())
    report(9, outputs[0] == outputs[1] and len(outputs[0]) > 0,
           f"two full pipeline runs produced byte-identical results.csv "
           f"({len(outputs[0])} bytes)")
