"""Weight fine-tuning algorithms that trade accuracy against group fairness.

Four methods share one contract: they receive a trained network, the
validation split, and an objective spec, and return the (weights,
threshold) snapshot with the best validation objective seen, plus a trace
of every evaluation.  The unmodified network is always evaluated first, so
no method can return something worse than its input on validation.

Fine-tuning gradients (the two adversarial methods) run the network in
evaluation mode: dropout stays off and batch-norm statistics stay frozen,
so gradients are deterministic and critic/actor updates touch exactly the
parameters they own.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import blackbox, metrics
from .data import DataSet
from .errors import DegenerateValidationError, MinibatchError, UndefinedPerformanceError, UndefinedRateError
from .metrics import BiasMeasure, EvalReport, ObjectiveSpec
from .network import Adam, DenseStack, FlatWeights, Network, bce_from_logits, get_flat, get_layer_flat, set_flat, set_layer_flat, sigmoid


@dataclass
class DebiasResult:
    """Fine-tuned weights, the matching decision threshold, and the trail."""

    method: str
    weights: FlatWeights
    threshold: float
    valid_report: EvalReport
    trace: list[dict]
    test_report: EvalReport | None = None

    def apply_to(self, net: Network) -> Network:
        """Network with these weights installed (buffers from ``net``)."""
        return set_flat(net, self.weights.values)

    def to_dict(self) -> dict:
        d = {
            "method": self.method,
            "threshold": self.threshold,
            "valid": self.valid_report.to_dict(),
            "trace": self.trace,
        }
        if self.test_report is not None:
            d["test"] = self.test_report.to_dict()
        return d


@dataclass(frozen=True)
class RandomPerturbConfig:
    iterations: int = 100
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.noise_std <= 0:
            raise ValueError("noise_std must be positive")


@dataclass(frozen=True)
class LayerwiseConfig:
    per_layer_budget: int = 50
    n_init: int | None = None
    relative_halfwidth: float = 0.5
    absolute_halfwidth: float = 0.1
    acquisition: blackbox.AcquisitionSpec = field(default_factory=blackbox.AcquisitionSpec)
    gbrt: blackbox.GBRTConfig = field(default_factory=blackbox.GBRTConfig)
    seed: int = 0


@dataclass(frozen=True)
class AdversarialConfig:
    """Critic-guided fine-tuning parameters.

    ``delta`` (margin inside the bias budget) defaults to epsilon / 2; the
    loss multiplier is max(1, lam * (|bias estimate| - epsilon + delta) + 1).
    The batch size is fixed for a run because the critic's input width is
    batch_size * representation width.
    """

    lam: float = 30.0
    delta: float | None = None
    n_outer: int = 50
    critic_steps: int = 30
    actor_steps: int = 10
    batch_size: int = 64
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    critic_hidden: tuple[int, ...] = (64, 64)
    retry_cap: int = 100
    seed: int = 0

    def resolve_delta(self, epsilon: float) -> float:
        delta = epsilon / 2.0 if self.delta is None else self.delta
        if not 0.0 <= delta < epsilon:
            raise ValueError(f"delta must lie in [0, epsilon); got {delta} vs {epsilon}")
        return delta


@dataclass(frozen=True)
class ProtectedAdversaryConfig:
    """Fine-tuning against a critic that predicts the protected attribute.

    The actor follows the projected update: task gradient, minus its
    projection onto the critic-loss gradient, minus alpha times the
    critic-loss gradient.  The actor learning rate defaults to a tenth of
    the usual training rate.
    """

    alpha: float = 1.0
    n_outer: int = 50
    critic_steps: int = 30
    actor_steps: int = 10
    batch_size: int = 64
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    critic_hidden: tuple[int, ...] = (32,)
    retry_cap: int = 100
    seed: int = 0


def loss_multiplier(bias_estimate: float, lam: float, epsilon: float, delta: float) -> float:
    """max(1, lam * (|bias estimate| - epsilon + delta) + 1); always >= 1."""
    return max(1.0, lam * (abs(bias_estimate) - epsilon + delta) + 1.0)


def projected_update(g_task: np.ndarray, g_adv: np.ndarray, alpha: float) -> np.ndarray:
    """Task gradient minus its projection onto the adversary gradient minus
    alpha times the adversary gradient; falls back to the plain task
    gradient when the adversary carries no signal."""
    norm_sq = float(g_adv @ g_adv)
    if norm_sq <= 1e-24:
        return g_task
    return g_task - (float(g_task @ g_adv) / norm_sq) * g_adv - alpha * g_adv


def _evaluate_candidate(spec: ObjectiveSpec, valid: DataSet, scores: np.ndarray):
    tau, phi = metrics.select_threshold(spec, valid.labels, scores, valid.protected)
    report = metrics.evaluate(spec, valid.labels, scores, valid.protected, tau)
    return tau, phi, report


def _trace_entry(iteration: int, report: EvalReport, **extra) -> dict:
    entry = {
        "iteration": iteration,
        "objective": report.objective,
        "bias": report.bias_value,
        "performance": report.performance,
        "threshold": report.threshold,
    }
    entry.update(extra)
    return entry


def _baseline_eval(net: Network, valid: DataSet, spec: ObjectiveSpec):
    try:
        scores = net.forward(valid.features)
        return _evaluate_candidate(spec, valid, scores)
    except (UndefinedRateError, UndefinedPerformanceError) as exc:
        raise DegenerateValidationError(
            f"validation split cannot support objective: {exc}"
        ) from exc


# ---------------------------------------------------------------------------
# Random perturbation
# ---------------------------------------------------------------------------

def random_perturbation(net: Network, valid: DataSet, spec: ObjectiveSpec,
                        cfg: RandomPerturbConfig = RandomPerturbConfig()) -> DebiasResult:
    """Multiplicative Gaussian search around the trained weights.

    Every iteration perturbs the original weights (not the incumbent) with
    N(1, noise_std) factors, reselects the decision threshold on the
    validation split, and keeps the best objective seen.  Iteration 0
    evaluates the unperturbed network, so the result never regresses.
    """
    flat0 = get_flat(net)
    tau, phi, report = _baseline_eval(net, valid, spec)
    best = {"values": flat0.values.copy(), "tau": tau, "phi": phi, "report": report}
    trace = [_trace_entry(0, report)]

    rng = np.random.default_rng(cfg.seed)
    for it in range(1, cfg.iterations + 1):
        factors = rng.normal(1.0, cfg.noise_std, size=flat0.values.size)
        candidate = set_flat(net, flat0.values * factors)
        scores = candidate.forward(valid.features)
        tau, phi, report = _evaluate_candidate(spec, valid, scores)
        trace.append(_trace_entry(it, report))
        if phi > best["phi"]:
            best = {"values": flat0.values * factors, "tau": tau, "phi": phi, "report": report}

    return DebiasResult(
        method="random",
        weights=FlatWeights(best["values"], flat0.layout),
        threshold=best["tau"],
        valid_report=best["report"],
        trace=trace,
    )


# ---------------------------------------------------------------------------
# Layer-wise optimization
# ---------------------------------------------------------------------------

def layerwise_optimization(net: Network, valid: DataSet, spec: ObjectiveSpec,
                           cfg: LayerwiseConfig = LayerwiseConfig(),
                           optimizer=blackbox.minimize) -> DebiasResult:
    """Black-box search over one layer's weights at a time.

    Each layer (dense weights plus its batch-norm scale/shift) is optimized
    independently with the others frozen at their trained values; the
    objective for a candidate layer vector is the validation objective
    after threshold selection, negated for the minimizer.  The single best
    (layer, weights, threshold) replacement wins.  The original layer
    vector seeds each layer's search, so the result never regresses.
    """
    flat0 = get_flat(net)
    tau, phi, report = _baseline_eval(net, valid, spec)
    best = {
        "values": flat0.values.copy(), "tau": tau, "phi": phi,
        "report": report, "layer": None,
    }
    trace = [_trace_entry(0, report, layer=None)]
    counter = [0]
    rng = np.random.default_rng(cfg.seed)

    for layer in range(net.n_layers):
        center = get_layer_flat(net, layer)
        space = blackbox.SearchSpace(
            center,
            relative_halfwidth=cfg.relative_halfwidth,
            absolute_halfwidth=cfg.absolute_halfwidth,
        )

        def objective_fn(w, _layer=layer):
            candidate = set_layer_flat(net, _layer, w)
            scores = candidate.forward(valid.features)
            tau_c, phi_c, report_c = _evaluate_candidate(spec, valid, scores)
            counter[0] += 1
            trace.append(_trace_entry(counter[0], report_c, layer=_layer))
            return -phi_c

        result = optimizer(
            objective_fn, space, budget=cfg.per_layer_budget, n_init=cfg.n_init,
            acq=cfg.acquisition, seed=int(rng.integers(2 ** 63)), gbrt=cfg.gbrt,
            initial_points=[center],
        )
        layer_phi = -result.best_value
        if layer_phi > best["phi"]:
            candidate = set_layer_flat(net, layer, result.best_point)
            scores = candidate.forward(valid.features)
            tau_c, phi_c, report_c = _evaluate_candidate(spec, valid, scores)
            best = {
                "values": get_flat(candidate).values, "tau": tau_c, "phi": phi_c,
                "report": report_c, "layer": layer,
            }

    return DebiasResult(
        method="layerwise",
        weights=FlatWeights(best["values"], flat0.layout),
        threshold=best["tau"],
        valid_report=best["report"],
        trace=trace,
    )


# ---------------------------------------------------------------------------
# Shared adversarial machinery
# ---------------------------------------------------------------------------

def _bias_cells_ok(measure: BiasMeasure, y: np.ndarray, a: np.ndarray) -> bool:
    """True when the minibatch supports computing the bias measure."""
    if not (np.any(a == 0) and np.any(a == 1)):
        return False
    if measure in (BiasMeasure.EOD, BiasMeasure.AOD):
        if not (np.any((a == 0) & (y == 1)) and np.any((a == 1) & (y == 1))):
            return False
    if measure is BiasMeasure.AOD:
        if not (np.any((a == 0) & (y == 0)) and np.any((a == 1) & (y == 0))):
            return False
    return True


def _sample_minibatch(rng, valid: DataSet, batch_size: int, retry_cap: int,
                      check) -> np.ndarray:
    """Sample row indices with replacement until ``check`` accepts them."""
    for _ in range(retry_cap):
        idx = rng.integers(0, valid.n, size=batch_size)
        if check(valid.labels[idx], valid.protected[idx]):
            return idx
    raise MinibatchError(
        f"no acceptable minibatch of size {batch_size} in {retry_cap} draws"
    )


def _flatten_grads(net: Network, grads) -> np.ndarray:
    return np.concatenate([g.ravel() for g in net.grad_arrays(grads)])


def _unflatten_like(vec: np.ndarray, params: list[np.ndarray]) -> list[np.ndarray]:
    out = []
    offset = 0
    for p in params:
        out.append(vec[offset:offset + p.size].reshape(p.shape))
        offset += p.size
    return out


def _snapshot_loop(method: str, net: Network, valid: DataSet, spec: ObjectiveSpec,
                   n_outer: int, outer_step) -> DebiasResult:
    """Run ``outer_step`` n_outer times, tracking the best validation snapshot."""
    work = net.copy()
    tau, phi, report = _baseline_eval(work, valid, spec)
    layout = get_flat(work).layout
    best = {
        "values": get_flat(work).values, "tau": tau, "phi": phi, "report": report,
    }
    trace = [_trace_entry(0, report)]

    for it in range(1, n_outer + 1):
        outer_step(work)
        scores = work.forward(valid.features)
        tau, phi, report = _evaluate_candidate(spec, valid, scores)
        trace.append(_trace_entry(it, report))
        if phi > best["phi"]:
            best = {
                "values": get_flat(work).values, "tau": tau, "phi": phi, "report": report,
            }

    return DebiasResult(
        method=method,
        weights=FlatWeights(best["values"], layout),
        threshold=best["tau"],
        valid_report=best["report"],
        trace=trace,
    )


# ---------------------------------------------------------------------------
# Adversarial fine-tuning (critic predicts minibatch bias)
# ---------------------------------------------------------------------------

def adversarial_finetune(net: Network, valid: DataSet, spec: ObjectiveSpec,
                         cfg: AdversarialConfig = AdversarialConfig()) -> DebiasResult:
    """Fine-tune against a critic that estimates minibatch bias.

    Outer iterations alternate (a) critic regression steps toward the true
    bias of bootstrap minibatches, measured on hard 0.5-threshold
    predictions, and (b) actor steps on binary cross-entropy scaled by
    max(1, lam * (|critic estimate| - epsilon + delta) + 1), with gradients
    flowing through the representation into the (frozen) critic.  The
    threshold is reselected on the full validation split after every outer
    iteration and the best snapshot wins.
    """
    epsilon = spec.epsilon
    delta = cfg.resolve_delta(epsilon)
    rng = np.random.default_rng(cfg.seed)
    rep_dim = net.penultimate_dim
    critic = DenseStack(
        cfg.batch_size * rep_dim, cfg.critic_hidden, 1,
        seed=int(rng.integers(2 ** 63)),
    )
    adam_actor: dict[str, Adam] = {}
    adam_critic = Adam(critic.parameter_arrays(), lr=cfg.critic_lr)

    def check(y, a):
        return _bias_cells_ok(spec.measure, y, a)

    def outer_step(work: Network):
        if "actor" not in adam_actor:
            adam_actor["actor"] = Adam(work.parameter_arrays(), lr=cfg.actor_lr)

        for _ in range(cfg.critic_steps):
            idx = _sample_minibatch(rng, valid, cfg.batch_size, cfg.retry_cap, check)
            Xb = valid.features[idx]
            yb = valid.labels[idx]
            ab = valid.protected[idx]
            rep = work.penultimate(Xb)
            probs = work.forward_from_penultimate(rep)
            mu_bar = metrics.bias(spec.measure, yb, (probs > 0.5).astype(int), ab)
            out, caches = critic.forward(rep.reshape(1, -1))
            dout = np.array([[2.0 * (float(out[0, 0]) - mu_bar)]])
            grads, _ = critic.backward(dout, caches)
            adam_critic.step(critic.parameter_arrays(), grads)

        for _ in range(cfg.actor_steps):
            idx = rng.integers(0, valid.n, size=cfg.batch_size)
            Xb = valid.features[idx]
            yb = valid.labels[idx].astype(np.float64)
            rep, caches = work._hidden_forward(Xb, "eval")
            out_layer = work.weights[-1]
            z = (rep @ out_layer["W"] + out_layer["b"]).reshape(-1)
            probs = sigmoid(z)
            bce = bce_from_logits(z, yb)
            mu_hat_out, c_caches = critic.forward(rep.reshape(1, -1))
            mu_hat = float(mu_hat_out[0, 0])
            raw = cfg.lam * (abs(mu_hat) - epsilon + delta) + 1.0
            mult = max(1.0, raw)

            dz = (mult * (probs - yb) / len(yb)).reshape(-1, 1)
            grads, drep = work._final_backward(dz, rep)
            if raw > 1.0:
                dmu = bce * cfg.lam * np.sign(mu_hat)
                _, dflat = critic.backward(np.array([[dmu]]), c_caches)
                drep = drep + dflat.reshape(rep.shape)
            hidden_grads, _ = work._hidden_backward(drep, caches)
            for key in ("W", "b", "gamma", "beta"):
                for i in range(len(hidden_grads[key])):
                    grads[key][i] += hidden_grads[key][i]
            adam_actor["actor"].step(work.parameter_arrays(), work.grad_arrays(grads))

    return _snapshot_loop("adversarial", net, valid, spec, cfg.n_outer, outer_step)


# ---------------------------------------------------------------------------
# Repurposed protected-attribute adversary
# ---------------------------------------------------------------------------

def protected_attr_adversarial(net: Network, valid: DataSet, spec: ObjectiveSpec,
                               cfg: ProtectedAdversaryConfig = ProtectedAdversaryConfig()
                               ) -> DebiasResult:
    """Fine-tune against a critic that predicts the protected attribute.

    The critic maps each example's (predicted probability, label) pair to a
    protected-attribute logit and trains with binary cross-entropy.  Actor
    steps compose the task gradient with the critic-loss gradient via the
    projected update (see :class:`ProtectedAdversaryConfig`); when the
    critic carries no signal the step reduces to plain fine-tuning.
    """
    rng = np.random.default_rng(cfg.seed)
    critic = DenseStack(2, cfg.critic_hidden, 1, seed=int(rng.integers(2 ** 63)))
    adam_actor: dict[str, Adam] = {}
    adam_critic = Adam(critic.parameter_arrays(), lr=cfg.critic_lr)

    def check(y, a):
        return bool(np.any(a == 0) and np.any(a == 1))

    def outer_step(work: Network):
        if "actor" not in adam_actor:
            adam_actor["actor"] = Adam(work.parameter_arrays(), lr=cfg.actor_lr)
        params = work.parameter_arrays()

        for _ in range(cfg.critic_steps):
            idx = _sample_minibatch(rng, valid, cfg.batch_size, cfg.retry_cap, check)
            probs = work.forward(valid.features[idx])
            cin = np.column_stack([probs, valid.labels[idx].astype(np.float64)])
            logits_c, caches_c = critic.forward(cin)
            pc = sigmoid(logits_c.reshape(-1))
            dlogits = ((pc - valid.protected[idx]) / len(idx)).reshape(-1, 1)
            grads, _ = critic.backward(dlogits, caches_c)
            adam_critic.step(critic.parameter_arrays(), grads)

        for _ in range(cfg.actor_steps):
            idx = _sample_minibatch(rng, valid, cfg.batch_size, cfg.retry_cap, check)
            Xb = valid.features[idx]
            yb = valid.labels[idx].astype(np.float64)
            ab = valid.protected[idx].astype(np.float64)
            rep, caches = work._hidden_forward(Xb, "eval")
            out_layer = work.weights[-1]
            z = (rep @ out_layer["W"] + out_layer["b"]).reshape(-1)
            probs = sigmoid(z)

            # task gradient
            dz_task = ((probs - yb) / len(yb)).reshape(-1, 1)
            g_task_struct, drep = work._final_backward(dz_task, rep)
            hidden, _ = work._hidden_backward(drep, caches)
            _accumulate(g_task_struct, hidden)
            g_task = _flatten_grads(work, g_task_struct)

            # critic-loss gradient through the predictions (critic frozen)
            cin = np.column_stack([probs, yb])
            logits_c, caches_c = critic.forward(cin)
            pc = sigmoid(logits_c.reshape(-1))
            dlogits_c = ((pc - ab) / len(idx)).reshape(-1, 1)
            _, dcin = critic.backward(dlogits_c, caches_c)
            dz_adv = (dcin[:, 0] * probs * (1.0 - probs)).reshape(-1, 1)
            g_adv_struct, drep_adv = work._final_backward(dz_adv, rep)
            hidden_adv, _ = work._hidden_backward(drep_adv, caches)
            _accumulate(g_adv_struct, hidden_adv)
            g_adv = _flatten_grads(work, g_adv_struct)

            composed = projected_update(g_task, g_adv, cfg.alpha)
            adam_actor["actor"].step(params, _unflatten_like(composed, params))

    return _snapshot_loop("zhang", net, valid, spec, cfg.n_outer, outer_step)


def _accumulate(target, extra) -> None:
    for key in ("W", "b", "gamma", "beta"):
        for i in range(len(extra[key])):
            target[key][i] += extra[key][i]
