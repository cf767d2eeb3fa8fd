"""Adversarial attack suite: l-inf PGD, Square Attack, ensemble black-box
surrogates, and the hardware-in-loop gradient, each driven by a threat
scenario describing what the attacker knows.

Executors are plain callables mapping an input batch to logits, so the same
attack code runs against the digital net, the nodal-analysis backend, or the
learned surrogate.  Attacks on distinct images are independent; per-image
RNG streams are derived from (seed, image index) so results do not depend on
batching or evaluation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import mapping, nn


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    alpha: Optional[float] = None   # defaults to epsilon / 4
    iters: int = 30
    norm: str = "linf"
    seed: int = 0

    def __post_init__(self):
        if self.alpha is None:
            object.__setattr__(self, "alpha", self.epsilon / 4.0)
        if not (0.0 <= self.alpha <= self.epsilon <= 1.0):
            raise ValueError(
                f"need 0 <= alpha ({self.alpha}) <= epsilon "
                f"({self.epsilon}) <= 1")
        if self.iters < 0:
            raise ValueError("iters must be >= 0")
        if self.norm != "linf":
            raise ValueError(f"unsupported norm {self.norm!r}")


@dataclass(frozen=True)
class ThreatScenario:
    """One row of the attacker-knowledge matrix.

    Non-adaptive attackers see the digital model (weights and/or logits);
    adaptive attackers run their own crossbar model, which may not match the
    target hardware.
    """

    name: str
    knows_weights: bool = False
    digital_logits: bool = False
    digital_activations: bool = False
    attacker_crossbar: Optional[str] = None
    analog_logits: bool = False
    analog_activations: bool = False

    def __post_init__(self):
        if (self.analog_logits or self.analog_activations) and \
                self.attacker_crossbar is None:
            raise ValueError(f"scenario {self.name!r} is adaptive and needs "
                             "an attacker crossbar preset")

    @property
    def adaptive(self) -> bool:
        return self.attacker_crossbar is not None


def scenario(name: str, attacker_crossbar: Optional[str] = None
             ) -> ThreatScenario:
    """Named threat-matrix rows."""
    rows = {
        "white_box": dict(knows_weights=True, digital_logits=True,
                          digital_activations=True),
        "ensemble_bb": dict(digital_logits=True),
        "square_bb": dict(digital_logits=True),
        "adaptive_white_box": dict(knows_weights=True, analog_logits=True,
                                   analog_activations=True),
        "adaptive_ensemble_bb": dict(analog_logits=True),
        "adaptive_square": dict(analog_logits=True),
    }
    if name not in rows:
        raise ValueError(f"unknown scenario {name!r}; "
                         f"choose from {sorted(rows)}")
    return ThreatScenario(name, attacker_crossbar=attacker_crossbar,
                          **rows[name])


@dataclass
class AdvExample:
    x_star: np.ndarray
    y: int
    query_count: int
    success: bool


def _check_budget(x_star, x, epsilon):
    if np.max(np.abs(x_star - x)) > epsilon + 1e-9:
        raise AssertionError("adversarial example escaped the epsilon ball")
    if x_star.min() < 0 or x_star.max() > 1:
        raise AssertionError("adversarial example escaped the pixel box")


def pgd_attack(grad_fn: Callable, x, y, cfg: AttackConfig,
               predict_fn: Optional[Callable] = None):
    """Projected gradient-sign ascent on the attacker's loss.

    `grad_fn(x, y)` returns d loss / d x for a batch.  `x` may be a single
    image or a batch; the return mirrors that (AdvExample or list).

    When `predict_fn` (batch -> logits of the model the attacker can query)
    is given, each image stops at its first misclassified iterate instead of
    continuing to maximize the loss — the attack goal is a decision flip,
    and later iterates only push deeper into the same wrong region.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3 or (x.ndim == 1)
    xb = x[None] if single else x
    yb = np.atleast_1d(np.asarray(y))
    if xb.min() < 0 or xb.max() > 1:
        raise ValueError("inputs must lie in [0, 1]")
    adv = xb.copy()
    steps = np.full(len(adv), cfg.iters)
    if predict_fn is not None:
        active = np.argmax(predict_fn(adv), axis=1) == yb
        steps[~active] = 0
    else:
        active = np.ones(len(adv), dtype=bool)
    for it in range(cfg.iters):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        g = grad_fn(adv[idx], yb[idx])
        stepped = adv[idx] + cfg.alpha * np.sign(g)
        stepped = np.clip(stepped, xb[idx] - cfg.epsilon, xb[idx] + cfg.epsilon)
        adv[idx] = np.clip(stepped, 0.0, 1.0)
        if predict_fn is not None:
            flipped = np.argmax(predict_fn(adv[idx]), axis=1) != yb[idx]
            steps[idx[flipped]] = it + 1
            active[idx[flipped]] = False
    out = []
    for i in range(len(adv)):
        _check_budget(adv[i], xb[i], cfg.epsilon)
        out.append(AdvExample(adv[i], int(yb[i]), int(steps[i]), False))
    return out[0] if single else out


def margin_loss(logits, y):
    """Attack objective: best wrong logit minus true logit.  Positive means
    misclassified; Square Attack accepts only strict increases."""
    logits = np.atleast_2d(logits)
    y = np.atleast_1d(y)
    n = len(logits)
    true = logits[np.arange(n), y]
    rest = logits.copy()
    rest[np.arange(n), y] = -np.inf
    return rest.max(axis=1) - true


def _square_side(w, h, queries_done, max_queries):
    p = 0.1
    frac = queries_done / max_queries if max_queries else 1.0
    for knee in (0.05, 0.2, 0.5):
        if frac >= knee:
            p /= 2.0
    return max(1, math.ceil(math.sqrt(p * w * h)))


def square_attack(query_executor: Callable, x, y, epsilon: float,
                  max_queries: int, seed: int = 0):
    """Randomized search over square patches, accepting only strict
    increases of the margin loss; stops at misclassification or budget.

    Uses logits only.  Batched over images internally; each image draws
    from its own (seed, index) RNG stream.
    """
    if max_queries < 0:
        raise ValueError("max_queries must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    xb = x[None] if single else x
    yb = np.atleast_1d(np.asarray(y))
    n, c, hh, ww = xb.shape

    clean_loss = margin_loss(query_executor(xb), yb)   # not counted
    adv = xb.copy()
    best = clean_loss.copy()
    queries = np.zeros(n, dtype=int)
    done = best > 0           # already misclassified
    rngs = [np.random.default_rng([seed, i]) for i in range(n)]

    if max_queries > 0:
        # vertical epsilon-stripe initialization, one query
        active = np.flatnonzero(~done)
        if len(active):
            init = adv[active].copy()
            for k, i in enumerate(active):
                stripes = rngs[i].choice([-1.0, 1.0], size=(c, 1, ww))
                init[k] = np.clip(xb[i] + epsilon * stripes, 0.0, 1.0)
            loss = margin_loss(query_executor(init), yb[active])
            queries[active] += 1
            gain = loss > best[active]
            adv[active[gain]] = init[gain]
            best[active] = np.maximum(best[active], loss)
            done[active] |= best[active] > 0

    while True:
        active = np.flatnonzero(~done & (queries < max_queries))
        if len(active) == 0:
            break
        trial = adv[active].copy()
        for k, i in enumerate(active):
            side = _square_side(ww, hh, queries[i], max_queries)
            rng = rngs[i]
            r = rng.integers(0, hh - side + 1)
            col = rng.integers(0, ww - side + 1)
            signs = rng.choice([-1.0, 1.0], size=(c, 1, 1))
            patch = np.clip(xb[i, :, r:r + side, col:col + side]
                            + epsilon * signs, 0.0, 1.0)
            trial[k, :, r:r + side, col:col + side] = patch
        loss = margin_loss(query_executor(trial), yb[active])
        queries[active] += 1
        gain = loss > best[active]
        adv[active[gain]] = trial[gain]
        best[active] = np.maximum(best[active], loss)
        done[active] |= best[active] > 0

    out = []
    for i in range(n):
        _check_budget(adv[i], xb[i], epsilon)
        out.append(AdvExample(adv[i], int(yb[i]), int(queries[i]),
                              bool(best[i] > 0)))
    return out[0] if single else out


def build_synthetic_dataset(query_executor: Callable, probe_inputs):
    """Label probe images with the executor's logits (the black-box
    attacker's training set)."""
    x = np.asarray(probe_inputs, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("probe set is empty")
    logits = []
    for start in range(0, len(x), 256):
        logits.append(np.asarray(query_executor(x[start:start + 256])))
    return x, np.concatenate(logits, axis=0)


def default_surrogate_archs(input_shape, num_classes) -> List[nn.Network]:
    """Three convnets of increasing capacity (untrained)."""
    c = input_shape[0]
    small = [nn.Conv2d(c, 4, 3), nn.ReLU(), nn.AvgPool2d(2), nn.Flatten()]
    small.append(nn.Linear(_flat_dim(input_shape, small), num_classes))
    medium = [nn.Conv2d(c, 8, 3), nn.ReLU(), nn.AvgPool2d(2),
              nn.Conv2d(8, 8, 3), nn.ReLU(), nn.Flatten()]
    medium.append(nn.Linear(_flat_dim(input_shape, medium), num_classes))
    large = [nn.Conv2d(c, 8, 3), nn.ReLU(), nn.AvgPool2d(2),
             nn.Conv2d(8, 16, 3), nn.ReLU(), nn.Flatten()]
    large += [nn.Linear(_flat_dim(input_shape, large), 64), nn.ReLU(),
              nn.Linear(64, num_classes)]
    return [nn.Network(input_shape, small),
            nn.Network(input_shape, medium),
            nn.Network(input_shape, large)]


def _flat_dim(input_shape, layers):
    shape = input_shape
    for l in layers:
        shape = l.out_shape(shape)
    return shape[0]


def train_surrogate_ensemble(synthetic, archs=None, seed: int = 0,
                             epochs: int = 20, lr: float = 0.05
                             ) -> List[nn.Network]:
    """Fit each member to the target logits by MSE regression."""
    x, logits = synthetic
    if archs is None:
        archs = default_surrogate_archs(tuple(x.shape[1:]), logits.shape[1])
    members = []
    for k, net in enumerate(archs):
        net.init_params(seed + k)
        nn.train_logit_regressor(net, x, logits, epochs, lr=lr, seed=seed + k)
        members.append(net)
    return members


def ensemble_gradient(ensemble: Sequence[nn.Network], x, y):
    """Input gradient of cross-entropy on the uniform average of member
    logits (order-independent by symmetry)."""
    x = np.asarray(x, dtype=np.float64)
    traces = [net.forward_trace(x) for net in ensemble]
    avg = np.mean([logits for logits, _ in traces], axis=0)
    _, dlogits = nn.softmax_cross_entropy(avg, np.atleast_1d(y))
    grad = np.zeros_like(x)
    for net, (_, caches) in zip(ensemble, traces):
        net.zero_grads()
        grad += net.backward(dlogits / len(ensemble), caches)
    return grad


def hil_gradient(net: nn.Network, qc: mapping.QuantConfig,
                 backend: mapping.ExecBackend, x, y, executor=None):
    """Hardware-in-loop input gradient: the forward pass runs on the analog
    backend recording every layer input, the backward applies each layer's
    ideal derivative at those recorded activations (straight-through
    treatment of the non-ideal MVM)."""
    if executor is None:
        executor = mapping.AnalogExecutor(net, qc, backend)
    logits, records = executor.forward_trace(np.asarray(x, dtype=np.float64))
    _, dlogits = nn.softmax_cross_entropy(logits, np.atleast_1d(y))
    net.zero_grads()
    return net.backward(dlogits, [cache for _, cache in records])


def hil_grad_fn(net: nn.Network, qc: mapping.QuantConfig,
                backend: mapping.ExecBackend) -> Callable:
    """Closure over a pre-lowered executor, for use inside PGD loops."""
    executor = mapping.AnalogExecutor(net, qc, backend)
    return lambda x, y: hil_gradient(net, qc, backend, x, y, executor)


def run_scenario(scen: ThreatScenario, attack: str, target_executor: Callable,
                 dataset: dict, cfg: AttackConfig, *, net: nn.Network,
                 qc: Optional[mapping.QuantConfig] = None,
                 attacker_backend: Optional[mapping.ExecBackend] = None,
                 ensemble: Optional[Sequence[nn.Network]] = None,
                 max_queries: int = 1000) -> dict:
    """Generate adversarial examples under the scenario's knowledge and
    evaluate them all on the target executor.

    `attack` is "pgd" or "square".  Adaptive scenarios attack through
    `attacker_backend` (their own crossbar model); non-adaptive ones see
    only the digital model.
    """
    x = np.asarray(dataset["x"], dtype=np.float64)
    y = np.asarray(dataset["y"])
    if scen.adaptive and attacker_backend is None:
        raise ValueError("adaptive scenario needs attacker_backend")

    if attack == "pgd":
        if scen.adaptive:
            if qc is None:
                raise ValueError("adaptive PGD needs a quant config")
            executor = mapping.AnalogExecutor(net, qc, attacker_backend)
            grad_fn = lambda xb, yb: hil_gradient(net, qc, attacker_backend,
                                                  xb, yb, executor)
            predict_fn = executor
        else:
            predict_fn = net.forward
            if scen.knows_weights:
                grad_fn = lambda xb, yb: nn.loss_and_input_grad(net, xb,
                                                                yb)[1]
            else:
                if ensemble is None:
                    synthetic = build_synthetic_dataset(net.forward, x)
                    ensemble = train_surrogate_ensemble(synthetic,
                                                        seed=cfg.seed)
                grad_fn = lambda xb, yb: ensemble_gradient(ensemble, xb, yb)
        examples = pgd_attack(grad_fn, x, y, cfg, predict_fn=predict_fn)
        budget = cfg.iters
    elif attack == "square":
        if scen.adaptive:
            if qc is None:
                raise ValueError("adaptive Square needs a quant config")
            query = mapping.AnalogExecutor(net, qc, attacker_backend)
        else:
            query = net.forward
        examples = square_attack(query, x, y, cfg.epsilon, max_queries,
                                 cfg.seed)
        budget = max_queries
    else:
        raise ValueError(f"unknown attack {attack!r}")

    adv = np.stack([e.x_star for e in examples])
    clean_acc = nn.evaluate_accuracy(target_executor, dataset)
    adv_acc = nn.evaluate_accuracy(target_executor, {"x": adv, "y": y})
    preds = []
    for start in range(0, len(adv), 256):
        preds.append(np.argmax(target_executor(adv[start:start + 256]),
                               axis=1))
    preds = np.concatenate(preds)
    for e, p in zip(examples, preds):
        e.success = bool(p != e.y)
    return {
        "scenario": scen.name,
        "attack": attack,
        "epsilon": cfg.epsilon,
        "iters_or_queries": budget,
        "attacker_backend": scen.attacker_crossbar or "digital",
        "clean_acc": clean_acc,
        "adv_acc": adv_acc,
        "delta": clean_acc - adv_acc,
        "seed": cfg.seed,
        "examples": examples,
    }
