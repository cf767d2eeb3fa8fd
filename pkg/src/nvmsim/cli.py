"""Experiment harness: calibrate -> train -> train-surrogate -> attack ->
report, driven by an INI config.

Every stage reads files produced by earlier stages from the output
directory, so the pipeline is resumable; equal config + seed reproduces
byte-identical CSVs.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import os
import sys
import time

import numpy as np

from . import attacks, circuit as cz, mapping, nn, surrogate as sg


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config

def parse_fraction(s: str) -> float:
    if "/" in s:
        num, den = s.split("/")
        return float(num) / float(den)
    return float(s)


class ExperimentConfig:
    """Validated view over the INI file.  All validation happens here,
    before any compute stage starts."""

    def __init__(self, parser: configparser.ConfigParser, base_dir: str,
                 text: str):
        self.cp = parser
        self.base_dir = base_dir
        self.hash = hashlib.sha256(text.encode()).hexdigest()
        self._validate()

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as f:
            text = f.read()
        parser = configparser.ConfigParser()
        parser.read_string(text)
        return cls(parser, os.path.dirname(os.path.abspath(path)), text)

    def _validate(self):
        cp = self.cp
        ds = cp["dataset"] if cp.has_section("dataset") else {}
        kind = ds.get("kind", "synthetic")
        if kind not in ("synthetic", "idx"):
            raise ConfigError(f"unknown dataset kind {kind!r}")
        if kind == "idx":
            for key in ("images_train", "labels_train", "images_test",
                        "labels_test"):
                p = ds.get(key)
                if p is None:
                    raise ConfigError(f"idx dataset needs dataset.{key}")
                if not os.path.exists(self.path(p)):
                    raise ConfigError(f"dataset path missing: {self.path(p)}")
        for name in self.presets():
            if name != "digital" and name not in cz.PRESETS:
                raise ConfigError(f"unknown crossbar preset {name!r}")
        for eps in self.epsilons():
            if not (0.0 < eps <= 1.0):
                raise ConfigError(f"epsilon {eps} outside (0, 1]")
        for scen in self.scenarios():
            attacks.scenario(scen, attacker_crossbar="32x32_100k")

    def path(self, rel: str) -> str:
        return os.path.normpath(os.path.join(self.base_dir, rel))

    def presets(self):
        names = set()
        if self.cp.has_section("crossbar"):
            sec = self.cp["crossbar"]
            for key in ("target", "attacker"):
                if sec.get(key) and sec.get(key) != "digital":
                    names.add(sec.get(key))
            for extra in sec.get("calibrate", "").split(","):
                if extra.strip():
                    names.add(extra.strip())
        return sorted(names) or sorted(cz.PRESETS)

    def epsilons(self):
        if not self.cp.has_section("attack"):
            return []
        raw = self.cp["attack"].get("epsilons", "")
        return [parse_fraction(tok.strip())
                for tok in raw.split(",") if tok.strip()]

    def scenarios(self):
        if not self.cp.has_section("attack"):
            return []
        raw = self.cp["attack"].get("scenarios", "")
        return [tok.strip() for tok in raw.split(",") if tok.strip()]

    def get(self, section, key, fallback=None):
        if self.cp.has_section(section):
            return self.cp[section].get(key, fallback)
        return fallback

    def getint(self, section, key, fallback):
        return int(self.get(section, key, fallback))

    def getfloat(self, section, key, fallback):
        return float(self.get(section, key, fallback))


# -------------------------------------------------------------- manifest

class RunManifest:
    def __init__(self, cfg_hash: str, seed: int):
        self.data = {"config_hash": cfg_hash, "seed": seed,
                     "stages": {}, "files": []}
        self._t0 = time.time()

    def stage(self, name: str, seconds: float):
        self.data["stages"][name] = round(seconds, 3)

    def add_file(self, path: str):
        self.data["files"].append(os.path.basename(path))

    def write(self, out_dir: str):
        self.data["wall_clock_total"] = round(time.time() - self._t0, 3)
        path = os.path.join(out_dir, "manifest.json")
        tmp = path + ".tmp"
        with open(tmp, "w") as f:
            json.dump(self.data, f, indent=2, sort_keys=True)
            f.write("\n")
        os.replace(tmp, path)
        return path


# ----------------------------------------------------------- dataset/model

def build_dataset(cfg: ExperimentConfig, seed: int) -> dict:
    kind = cfg.get("dataset", "kind", "synthetic")
    if kind == "idx":
        return nn.load_idx_dataset(
            cfg.path(cfg.get("dataset", "images_train")),
            cfg.path(cfg.get("dataset", "labels_train")),
            cfg.path(cfg.get("dataset", "images_test")),
            cfg.path(cfg.get("dataset", "labels_test")))
    return nn.make_pattern_dataset(
        n_train=cfg.getint("dataset", "n_train", 3000),
        n_test=cfg.getint("dataset", "n_test", 400),
        image_size=cfg.getint("dataset", "image_size", 16),
        num_classes=cfg.getint("dataset", "num_classes", 10),
        noise=cfg.getfloat("dataset", "noise", 0.15),
        seed=seed)


def build_model(cfg: ExperimentConfig, input_shape, num_classes, seed):
    arch = cfg.get("model", "arch", "toy_cnn")
    if arch == "toy_cnn":
        return nn.toy_cnn(input_shape, num_classes, seed=seed)
    if arch == "cnn5":
        layers = [nn.Conv2d(input_shape[0], 8, 3), nn.ReLU(),
                  nn.Conv2d(8, 8, 3), nn.ReLU(), nn.AvgPool2d(2),
                  nn.Conv2d(8, 16, 3), nn.ReLU(), nn.Flatten()]
        shape = input_shape
        for l in layers:
            shape = l.out_shape(shape)
        layers += [nn.Linear(shape[0], 64), nn.ReLU(),
                   nn.Linear(64, num_classes)]
        return nn.Network(input_shape, layers, seed=seed)
    raise ConfigError(f"unknown model arch {arch!r}")


def quant_config(cfg: ExperimentConfig) -> mapping.QuantConfig:
    return mapping.QuantConfig(
        input_bits=cfg.getint("quant", "input_bits", 8),
        weight_bits=cfg.getint("quant", "weight_bits", 8),
        stream_bits=cfg.getint("quant", "stream_bits", 1),
        slice_bits=cfg.getint("quant", "slice_bits", 2))


def experiment_device(cfg: ExperimentConfig, preset: str) -> cz.DeviceModel:
    """Preset device, optionally with the exponential-IV curve enabled."""
    beta = cfg.get("crossbar", "nonlinear_beta")
    dev = cz.preset_device(preset)
    if beta is None:
        return dev
    return cz.DeviceModel(dev.r_on, dev.r_off, dev.levels,
                          cz.Nonlinearity(beta=float(beta)))


def crossbar_model_path(out_dir: str, preset: str) -> str:
    return os.path.join(out_dir, f"crossbar_{preset}.json")


def load_backend(cfg: ExperimentConfig, out_dir: str, preset: str
                 ) -> mapping.ExecBackend:
    """Execution backend for a calibrated preset: nodal-analysis for linear
    devices, the trained surrogate for nonlinear ones."""
    model = cz.CrossbarModel.load(crossbar_model_path(out_dir, preset))
    if model.device.is_linear:
        return mapping.CircuitNonIdeal(model.geometry, model.device)
    sur_path = os.path.join(out_dir, f"surrogate_{preset}.npz")
    if not os.path.exists(sur_path):
        raise ConfigError(f"nonlinear preset {preset} needs a trained "
                          f"surrogate at {sur_path} (run train-surrogate)")
    return mapping.SurrogateBackend(sg.load_surrogate(sur_path))


# -------------------------------------------------------------- commands

def cmd_calibrate(cfg: ExperimentConfig, seed: int, out_dir: str,
                  manifest: RunManifest):
    n_samples = cfg.getint("crossbar", "calibration_samples", 100)
    r_line = cfg.getfloat("crossbar", "r_source", cz.DEFAULT_R_SOURCE)
    for preset in cfg.presets():
        t0 = time.time()
        p = cz.PRESETS[preset]
        dev = experiment_device(cfg, preset)
        geo = cz.calibrate_geometry(p["target_nf"], p["rows"], p["cols"],
                                    dev, r_source=r_line, r_sink=r_line,
                                    n_samples=n_samples, seed=seed)
        model = cz.CrossbarModel(preset, geo, dev)
        path = crossbar_model_path(out_dir, preset)
        model.save(path)
        manifest.add_file(path)
        nf = cz.measure_nf(geo, dev, n_samples=n_samples, seed=seed + 1)
        manifest.stage(f"calibrate.{preset}", time.time() - t0)
        print(f"{preset}: r_wire={geo.r_wire:.4g} nf={nf:.4f}")


def cmd_train(cfg: ExperimentConfig, seed: int, out_dir: str,
              manifest: RunManifest):
    t0 = time.time()
    ds = build_dataset(cfg, seed)
    input_shape = tuple(ds["x_train"].shape[1:])
    num_classes = int(ds["y_train"].max()) + 1
    net = build_model(cfg, input_shape, num_classes, seed)
    history = nn.train_classifier(
        net, ds, epochs=cfg.getint("model", "epochs", 16),
        lr=cfg.getfloat("model", "lr", 0.1),
        seed=seed, batch_size=cfg.getint("model", "batch_size", 64))
    path = os.path.join(out_dir, "model.npz")
    nn.save_checkpoint(net, path)
    manifest.add_file(path)
    hist_path = os.path.join(out_dir, "train_history.json")
    with open(hist_path, "w") as f:
        json.dump(history, f, indent=2)
        f.write("\n")
    manifest.add_file(hist_path)
    manifest.stage("train", time.time() - t0)
    for epoch, acc in enumerate(history["test_accuracy"]):
        print(f"epoch {epoch}: loss={history['train_loss'][epoch]:.4f} "
              f"test_acc={acc:.4f}")


def cmd_train_surrogate(cfg: ExperimentConfig, seed: int, out_dir: str,
                        manifest: RunManifest):
    for preset in cfg.presets():
        t0 = time.time()
        model = cz.CrossbarModel.load(crossbar_model_path(out_dir, preset))
        ds = sg.generate_dataset(
            model.geometry, model.device,
            cfg.getint("surrogate", "samples", 2000), seed=seed)
        net = sg.train_surrogate(
            ds, hidden_dim=cfg.getint("surrogate", "hidden", 256),
            epochs=cfg.getint("surrogate", "epochs", 50),
            lr=cfg.getfloat("surrogate", "lr", sg.DEFAULT_LR), seed=seed)
        path = os.path.join(out_dir, f"surrogate_{preset}.npz")
        sg.save_surrogate(net, path)
        manifest.add_file(path)
        manifest.stage(f"train-surrogate.{preset}", time.time() - t0)
        print(f"{preset}: val_mre={net.train_stats['val_mre']:.4f}")


RESULT_COLUMNS = ["scenario", "attack", "epsilon", "iters_or_queries",
                  "target_backend", "attacker_backend", "clean_acc",
                  "adv_acc", "delta", "seed"]

SCENARIO_ATTACKS = {
    "white_box": "pgd",
    "ensemble_bb": "pgd",
    "square_bb": "square",
    "adaptive_white_box": "pgd",
    "adaptive_ensemble_bb": "pgd",
    "adaptive_square": "square",
}


def cmd_attack(cfg: ExperimentConfig, seed: int, out_dir: str,
               manifest: RunManifest):
    t0 = time.time()
    scen_names = cfg.scenarios()
    if not scen_names:
        raise ConfigError("attack.scenarios is empty")
    epsilons = cfg.epsilons()
    if not epsilons:
        raise ConfigError("attack.epsilons is empty")

    ds = build_dataset(cfg, seed)
    n_eval = cfg.getint("attack", "n_eval", 200)
    test = {"x": ds["x_test"][:n_eval], "y": ds["y_test"][:n_eval]}
    net = nn.load_checkpoint(os.path.join(out_dir, "model.npz"))
    qc = quant_config(cfg)
    iters = cfg.getint("attack", "iters", 30)
    queries = cfg.getint("attack", "queries", 1000)
    adaptive_queries = cfg.getint("attack", "adaptive_queries", 30)

    target_name = cfg.get("crossbar", "target", "digital")
    attacker_name = cfg.get("crossbar", "attacker")
    targets = {"digital": net.forward}
    backends = {}
    if target_name != "digital":
        backends[target_name] = load_backend(cfg, out_dir, target_name)
        targets[target_name] = mapping.AnalogExecutor(
            net, qc, backends[target_name])
    if attacker_name and attacker_name not in backends:
        backends[attacker_name] = load_backend(cfg, out_dir, attacker_name)

    rows = []
    adv_archive = {}
    for scen_name in scen_names:
        attack_kind = SCENARIO_ATTACKS[scen_name]
        adaptive = scen_name.startswith("adaptive")
        if adaptive and not attacker_name:
            raise ConfigError(f"scenario {scen_name} needs crossbar.attacker")
        scen = attacks.scenario(
            scen_name, attacker_crossbar=attacker_name if adaptive else None)
        for eps in epsilons:
            acfg = attacks.AttackConfig(epsilon=eps, iters=iters, seed=seed)
            budget = adaptive_queries if (adaptive and
                                          attack_kind == "square") else queries
            for tname, executor in sorted(targets.items()):
                report = attacks.run_scenario(
                    scen, attack_kind, executor, test, acfg, net=net, qc=qc,
                    attacker_backend=backends.get(attacker_name)
                    if adaptive else None,
                    max_queries=budget)
                rows.append({
                    "scenario": scen_name, "attack": attack_kind,
                    "epsilon": f"{eps:.8f}",
                    "iters_or_queries": report["iters_or_queries"],
                    "target_backend": tname,
                    "attacker_backend": report["attacker_backend"],
                    "clean_acc": f"{report['clean_acc']:.4f}",
                    "adv_acc": f"{report['adv_acc']:.4f}",
                    "delta": f"{report['delta']:.4f}",
                    "seed": seed,
                })
                key = f"{scen_name}_{eps:.8f}_{tname}"
                adv_archive[key] = np.stack(
                    [e.x_star for e in report["examples"]])
                print(f"{scen_name} eps={eps:.4f} target={tname}: "
                      f"clean={report['clean_acc']:.3f} "
                      f"adv={report['adv_acc']:.3f}")

    csv_path = os.path.join(out_dir, "results.csv")
    write_results_csv(csv_path, rows)
    manifest.add_file(csv_path)
    archive_path = os.path.join(out_dir, "adversarial.npz")
    np.savez(archive_path, **adv_archive)
    manifest.add_file(archive_path)
    manifest.stage("attack", time.time() - t0)


def write_results_csv(path: str, rows):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=RESULT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    with open(path, "w", newline="") as f:
        f.write(buf.getvalue())


def read_results_csv(path: str):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def cmd_report(cfg: ExperimentConfig, seed: int, out_dir: str,
               manifest: RunManifest):
    t0 = time.time()
    rows = read_results_csv(os.path.join(out_dir, "results.csv"))
    if not rows:
        raise ConfigError("results.csv is empty")
    baseline = {}
    for r in rows:
        if r["target_backend"] == "digital":
            baseline[(r["scenario"], r["epsilon"])] = float(r["adv_acc"])

    gain_rows = []
    for r in rows:
        if r["target_backend"] == "digital":
            continue
        key = (r["scenario"], r["epsilon"])
        if key not in baseline:
            raise ConfigError(f"missing digital baseline row for {key}")
        gain_rows.append({
            "scenario": r["scenario"], "epsilon": r["epsilon"],
            "target_backend": r["target_backend"],
            "adv_acc": r["adv_acc"],
            "digital_adv_acc": f"{baseline[key]:.4f}",
            "gain": f"{float(r['adv_acc']) - baseline[key]:.4f}",
        })
    gain_path = os.path.join(out_dir, "gain_curves.csv")
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["scenario", "epsilon",
                                             "target_backend", "adv_acc",
                                             "digital_adv_acc", "gain"],
                            lineterminator="\n")
    writer.writeheader()
    for r in gain_rows:
        writer.writerow(r)
    with open(gain_path, "w", newline="") as f:
        f.write(buf.getvalue())
    manifest.add_file(gain_path)

    # accuracy-vs-epsilon curves, epsilon order as given in the results
    curve_path = os.path.join(out_dir, "accuracy_vs_epsilon.csv")
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["scenario", "target_backend",
                                             "epsilon", "clean_acc",
                                             "adv_acc"],
                            lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: r[k] for k in ("scenario", "target_backend",
                                           "epsilon", "clean_acc",
                                           "adv_acc")})
    with open(curve_path, "w", newline="") as f:
        f.write(buf.getvalue())
    manifest.add_file(curve_path)
    manifest.stage("report", time.time() - t0)
    print(f"wrote {gain_path} and {curve_path}")


COMMANDS = {
    "calibrate": cmd_calibrate,
    "train": cmd_train,
    "train-surrogate": cmd_train_surrogate,
    "attack": cmd_attack,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="nvmsim",
        description="crossbar simulator and adversarial-attack harness")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="out")
    args = parser.parse_args(argv)

    try:
        cfg = ExperimentConfig.load(args.config)
        os.makedirs(args.out, exist_ok=True)
        manifest = RunManifest(cfg.hash, args.seed)
        COMMANDS[args.command](cfg, args.seed, args.out, manifest)
        manifest.write(args.out)
    except ConfigError as e:
        json.dump({"category": "config-error", "message": str(e)},
                  sys.stderr)
        sys.stderr.write("\n")
        return 2
    except Exception as e:  # solver/training failures and the like
        json.dump({"category": type(e).__name__, "message": str(e)},
                  sys.stderr)
        sys.stderr.write("\n")
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
