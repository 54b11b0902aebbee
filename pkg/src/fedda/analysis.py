"""Numerical probes of the momentum-deviation theory and the exact-reduction suite.

Everything here runs on small deterministic instances: momentum deviation
traces with growth-rate fits, the eigenvalue predictor for local-momentum
blow-up, the FedAvg drift bound, momentum decomposition, and the list of
reductions under which a federated rule must reproduce its centralized
counterpart.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import data as fdata
from .config import DataConfig, FederationConfig, ModelConfig
from .engine import Task, build_task, initial_params, run_centralized, run_round
from .errors import InvalidArgument, NonpositiveValueInWindow, NotQuadratic, WindowTooSmall
from .local import LocalRule, LocalState, step_decoupled
from .models import Batch, Logistic, Mlp, Quadratic, finite_diff_check
from .server import ServerState

NOISE_FLOOR = 1e-8
SATURATION_FRACTION = 0.1
MIN_WINDOW = 5
TRACE_COLUMNS = ("t", "d_m_local_max", "d_m_fedda", "d_w_local_max", "d_w_fedda", "bound")


def _require_quadratic(models) -> list[Quadratic]:
    models = list(models)
    if not models or not all(isinstance(m, Quadratic) for m in models):
        raise NotQuadratic("this probe needs quadratic client losses")
    return models


def _weighted(weights, vectors) -> np.ndarray:
    # v0 + sum w_i (v_i - v0): equal inputs come back bit-for-bit, so
    # identical clients give deviations of exactly zero
    base = vectors[0]
    total = np.zeros_like(base)
    for w, v in zip(weights, vectors):
        total += w * (v - base)
    return base + total


def default_deviation_init(dim: int) -> np.ndarray:
    """Start 10 units along the last axis, away from every pinned minimizer."""
    w = np.zeros(dim)
    w[-1] = 10.0
    return w


# -- deviation traces -------------------------------------------------------------

@dataclass(eq=False)
class DeviationTrace:
    """Per-step distances from the centralized SGDM trajectory; index t = 0..steps."""

    d_m_local: np.ndarray  # (steps + 1, M): ||m^i(t) - m(t)|| for naive local SGDM
    d_m_fedda: np.ndarray  # ||m_bar(t) - m(t)|| for the decoupled system
    d_w_local: np.ndarray  # (steps + 1, M): ||W^i(t) - W(t)||
    d_w_fedda: np.ndarray  # ||W_bar(t) - W(t)||
    scale: float  # ||W(0) - W*||, the saturation yardstick

    @property
    def d_m_local_max(self) -> np.ndarray:
        return self.d_m_local.max(axis=1)

    @property
    def d_w_local_max(self) -> np.ndarray:
        return self.d_w_local.max(axis=1)

    @property
    def steps(self) -> int:
        return len(self.d_m_fedda) - 1

    @property
    def degenerate(self) -> bool:
        return not np.any(self.d_m_local)


def deviation_experiment(federation: fdata.Federation, models: Sequence[Quadratic], beta: float,
                         lr: float, steps: int, full_batch: bool = True, init=None, alpha: float = 1.0,
                         batch_size: int = 1, seed: int = 0) -> DeviationTrace:
    """Run centralized SGDM, never-synced naive local SGDM and the decoupled
    FedDA system side by side from one shared start, recording deviations.

    With ``full_batch=False`` each client gradient is taken on a random
    ``batch_size`` subset; quadratic losses ignore the batch, so this only
    matters for models whose loss depends on the samples.
    """
    models = _require_quadratic(models)
    if steps < 1:
        raise InvalidArgument("steps must be >= 1")
    if not 0.0 <= beta < 1.0 or not lr > 0:
        raise InvalidArgument("need 0 <= beta < 1 and lr > 0")
    if len(models) != federation.num_clients:
        raise InvalidArgument("one model per client required")
    weights = federation.weights
    dim = models[0].dim
    W0 = default_deviation_init(dim) if init is None else np.array(init, dtype=np.float64)
    rng = np.random.default_rng(seed)

    def batch(i):
        c = federation[i]
        if full_batch:
            return c.full_batch()
        return fdata.sample_batch(c, min(batch_size, c.n_samples), rng)

    M = len(models)
    W, m = W0.copy(), np.zeros(dim)
    Wl, ml = [W0.copy() for _ in range(M)], [np.zeros(dim) for _ in range(M)]
    Wd, md = [W0.copy() for _ in range(M)], [np.zeros(dim) for _ in range(M)]
    Wbar = W0.copy()
    d_ml, d_wl = np.zeros((steps + 1, M)), np.zeros((steps + 1, M))
    d_mf, d_wf = np.zeros(steps + 1), np.zeros(steps + 1)
    for t in range(1, steps + 1):
        batches = [batch(i) for i in range(M)]
        g = _weighted(weights, [mod.grad(W, b) for mod, b in zip(models, batches)])
        m = beta * m + (1.0 - beta) * g
        W = W - lr * m
        for i, (mod, b) in enumerate(zip(models, batches)):
            gl = mod.grad(Wl[i], b)
            ml[i] = beta * ml[i] + (1.0 - beta) * gl
            Wl[i] = Wl[i] - lr * ml[i]
            gd = mod.grad(Wd[i], b)
            Wd[i] = Wd[i] - lr * gd
            md[i] = beta * md[i] + (1.0 - beta) * gd
        mbar = _weighted(weights, md)
        Wbar = Wbar - alpha * lr * mbar
        d_ml[t] = [np.linalg.norm(x - m) for x in ml]
        d_wl[t] = [np.linalg.norm(x - W) for x in Wl]
        d_mf[t] = np.linalg.norm(mbar - m)
        d_wf[t] = np.linalg.norm(Wbar - W)
    W_star = fdata.quadratic_global_minimizer(federation, models)
    return DeviationTrace(d_ml, d_mf, d_wl, d_wf, float(np.linalg.norm(W0 - W_star)))


def pinned_deviation_trace(steps: int = 500, beta: float = 0.9, lr: float = 0.01, init=None) -> DeviationTrace:
    fed, models = fdata.pinned_quadratic_pair()
    return deviation_experiment(fed, models, beta, lr, steps, init=init)


def write_trace_csv(path, trace: DeviationTrace, bound: Sequence[float] | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        dl, dwl = trace.d_m_local_max, trace.d_w_local_max
        for t in range(trace.steps + 1):
            b = "" if bound is None else repr(float(bound[t]))
            w.writerow([t, repr(float(dl[t])), repr(float(trace.d_m_fedda[t])),
                        repr(float(dwl[t])), repr(float(trace.d_w_fedda[t])), b])


# -- growth fits ------------------------------------------------------------------

def select_window(series, scale: float, floor: float = NOISE_FLOOR,
                  fraction: float = SATURATION_FRACTION) -> tuple[int, int]:
    """Pre-saturation window ``[t0, t1]`` of a deviation series.

    ``t0`` is the first step above ``floor``. ``t1`` is the last step before the
    series exceeds ``fraction * scale``, and never past the first local maximum
    after ``t0``: a deviation that has started to shrink is no longer growing,
    whatever its size.
    """
    d = np.asarray(series, dtype=np.float64)
    above = np.nonzero(d > floor)[0]
    if above.size == 0:
        raise NonpositiveValueInWindow("series never rises above the noise floor")
    t0 = int(above[0])
    t1 = t0
    limit = fraction * scale
    while t1 + 1 < len(d) and d[t1 + 1] <= limit and d[t1 + 1] > d[t1]:
        t1 += 1
    return t0, t1


@dataclass(frozen=True)
class GrowthFit:
    t0: int
    t1: int
    rate: float  # lambda in d ~ exp(lambda t)
    r2_exp: float
    exponent: float  # p in d ~ t^p
    r2_power: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _line_fit(x, y) -> tuple[float, float]:
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), r2


def fit_growth(series, window: tuple[int, int]) -> GrowthFit:
    """Least-squares fits of ``log d`` against ``t`` and against ``log t``."""
    t0, t1 = int(window[0]), int(window[1])
    if t0 < 1:
        raise InvalidArgument("window must start at t >= 1")
    if t1 - t0 + 1 < MIN_WINDOW:
        raise WindowTooSmall(f"window [{t0}, {t1}] has fewer than {MIN_WINDOW} points")
    d = np.asarray(series, dtype=np.float64)
    if t1 >= len(d):
        raise InvalidArgument(f"window end {t1} is past the series end {len(d) - 1}")
    y = d[t0:t1 + 1]
    if np.any(y <= 0):
        raise NonpositiveValueInWindow(f"series has non-positive values in [{t0}, {t1}]")
    t = np.arange(t0, t1 + 1, dtype=np.float64)
    logy = np.log(y)
    rate, r2e = _line_fit(t, logy)
    p, r2p = _line_fit(np.log(t), logy)
    return GrowthFit(t0, t1, rate, r2e, p, r2p)


# -- theory constants -------------------------------------------------------------

@dataclass(frozen=True)
class TheoryConstants:
    lipschitz: float  # L_g
    lambda_plus: float


def lambda_plus(L: float, beta: float, lr: float) -> float:
    """``(-(1-beta) + sqrt((1-beta)^2 + 4 (1-beta) L)) / (2 lr)``.

    This is the top eigenvalue of ``[[-(1-beta)/lr, (1-beta) L/lr], [1, 0]]``
    only when ``lr = 1``; for other step sizes that matrix's top eigenvalue
    is ``lambda_plus(L * lr, beta, lr)``.
    """
    a = 1.0 - beta
    return (-a + np.sqrt(a * a + 4.0 * a * L)) / (2.0 * lr)


def theory_constants(models: Sequence[Quadratic], beta: float, lr: float) -> TheoryConstants:
    """Gradient Lipschitz constant of the clients and the growth rate it predicts."""
    models = _require_quadratic(models)
    if not 0.0 <= beta <= 1.0 or not lr > 0:
        raise InvalidArgument("need 0 <= beta <= 1 and lr > 0")
    L = max(float(np.linalg.eigvalsh(m.A)[-1]) for m in models)
    L = max(L, 0.0)
    return TheoryConstants(L, float(lambda_plus(L, beta, lr)))


# -- FedAvg drift -----------------------------------------------------------------

@dataclass(eq=False)
class DriftProbe:
    drift: np.ndarray  # ||W(t) - W_bar(t)||, t = 0..T
    bound: np.ndarray  # 2 sup ||grad L^i|| t lr
    sup_grad: float

    @property
    def holds(self) -> bool:
        return bool(np.all(self.drift <= self.bound))


def fedavg_drift_probe(federation: fdata.Federation, models, lr: float, T: int, init=None) -> DriftProbe:
    """Full-batch local GD without syncing vs centralized GD on the pooled loss.

    The sup of the client gradient norms is taken over every point visited
    by either trajectory.
    """
    models = list(models)
    if T < 1 or not lr > 0:
        raise InvalidArgument("need T >= 1 and lr > 0")
    weights = federation.weights
    dim = models[0].dim
    W0 = np.zeros(dim) if init is None else np.array(init, dtype=np.float64)
    batches = [c.full_batch() for c in federation]
    W = W0.copy()
    Wl = [W0.copy() for _ in models]
    drift = np.zeros(T + 1)
    sup = 0.0
    for t in range(1, T + 1):
        g_central = [m.grad(W, b) for m, b in zip(models, batches)]
        g_local = [m.grad(w, b) for m, w, b in zip(models, Wl, batches)]
        sup = max(sup, *(np.linalg.norm(g) for g in g_central + g_local))
        W = W - lr * _weighted(weights, g_central)
        Wl = [w - lr * g for w, g in zip(Wl, g_local)]
        drift[t] = np.linalg.norm(W - _weighted(weights, Wl))
    sup = max(sup, *(np.linalg.norm(m.grad(W, b)) for m, b in zip(models, batches)),
              *(np.linalg.norm(m.grad(w, b)) for m, w, b in zip(models, Wl, batches)))
    bound = 2.0 * sup * lr * np.arange(T + 1)
    return DriftProbe(drift, bound, float(sup))


# -- momentum decomposition ---------------------------------------------------------

def momentum_decomposition_error(M: int, T: int, seed: int, dim: int = 5, beta: float = 0.9,
                                 lr: float = 0.05) -> float:
    """Max gap between the aggregated decoupled momenta and the single recursion
    driven by the aggregated per-step gradients, over all T steps.

    Also checks the aggregated momentum sum against the sum of the recursion.
    """
    rng = np.random.default_rng(seed)
    counts = rng.integers(1, 50, size=M)
    fed, models = fdata.generate_quadratic_federation(M, dim, 1.0, seed, counts)
    weights = fed.weights
    W0 = rng.standard_normal(dim)
    m0 = rng.standard_normal(dim)
    rule = LocalRule(lr=lr, beta=beta)
    states = [LocalState.start(W0, m0) for _ in range(M)]
    m_rec = m0.copy()
    P_rec = np.zeros(dim)
    err = 0.0
    for _ in range(T):
        grads = [mod.grad(s.params, c.full_batch()) for mod, s, c in zip(models, states, fed)]
        m_rec = beta * m_rec + (1.0 - beta) * _weighted(weights, grads)
        P_rec = P_rec + m_rec
        states = [step_decoupled(s, mod, c, c.n_samples, rule, rng) for s, mod, c in zip(states, models, fed)]
        err = max(err, float(np.max(np.abs(_weighted(weights, [s.momentum for s in states]) - m_rec))))
    err = max(err, float(np.max(np.abs(_weighted(weights, [s.momentum_sum for s in states]) - P_rec))))
    return err


# -- exact reductions ---------------------------------------------------------------

@dataclass(frozen=True)
class CheckResult:
    name: str
    deviation: float
    tolerance: float  # 0.0 means bitwise
    passed: bool
    detail: str = ""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def federated_trajectory(config: FederationConfig, task: Task | None = None, init=None):
    """Parameters, momenta, second moments and losses after every round."""
    config.validate()
    task = task or build_task(config)
    state = ServerState.initial(initial_params(config, task) if init is None else init)
    Ws, ms, vs, losses = [state.params], [state.momentum], [state.second_moment], []
    for _ in range(config.rounds):
        state, row = run_round(config, state, task)
        Ws.append(state.params)
        ms.append(state.momentum)
        vs.append(state.second_moment)
        losses.append(row.loss)
    return np.array(Ws), np.array(ms), np.array(vs), np.array(losses)


PINNED_INIT = (0.5, 2.0)


def _pinned_config(algorithm: str, rounds: int, lr: float, **kw) -> FederationConfig:
    return FederationConfig(algorithm=algorithm, rounds=rounds, local_steps=1, lr=lr,
                            data=DataConfig(kind="pinned_quadratic"), **kw).validate()


def _gap(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def _bitwise(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def _tolerance_case(name, fed_traj, central, tol, fields=("params", "momentum", "second_moment")):
    arrays = {"params": (fed_traj[0], central.params),
              "momentum": (fed_traj[1], central.momentum),
              "second_moment": (fed_traj[2], central.second_moment)}
    dev = max(_gap(*arrays[f]) for f in fields)
    return CheckResult(name, dev, tol, bool(dev < tol))


def _hetero_logistic(algorithm: str, **kw) -> FederationConfig:
    """Small non-IID logistic task with partial participation and mini-batches,
    so the bitwise cases exercise sampling and the rng streams."""
    base = dict(algorithm=algorithm, rounds=15, clients_per_round=3, local_steps=5, batch_size=8,
                lr=0.1, seed=3,
                data=DataConfig(kind="synthetic", clients=6, n=300, dim=5, classes=3,
                                partition="dirichlet", alpha=0.3),
                model=ModelConfig(kind="logistic"))
    base.update(kw)
    return FederationConfig(**base).validate()


def equivalence_suite(perturb_lr: float = 0.0) -> list[CheckResult]:
    """Every reduction under which a federated rule must match its reference.

    ``perturb_lr`` scales the learning rate of the reference run by
    ``1 + perturb_lr``; any non-zero value must make the suite fail.
    """
    k = 1.0 + perturb_lr
    out = []
    fed, models = fdata.pinned_quadratic_pair()
    task = Task(fed, models)
    init = np.array(PINNED_INIT)

    lr = 0.1
    traj = federated_trajectory(_pinned_config("fedavg", 200, lr), task, init)
    ref = run_centralized("gd", task, 200, lr * k, init=init)
    out.append(_tolerance_case("fedavg_T1_equals_gd", traj, ref, 1e-12, ("params",)))

    traj = federated_trajectory(_pinned_config("fedda_sgdm", 100, lr, beta1=0.9), task, init)
    ref = run_centralized("sgdm", task, 100, lr * k, beta1=0.9, init=init)
    out.append(_tolerance_case("fedda_sgdm_T1_equals_sgdm", traj, ref, 1e-9, ("params", "momentum")))

    traj = federated_trajectory(_pinned_config("fedda_adam", 100, lr, beta1=0.9, beta2=0.99, eps=0.1), task, init)
    ref = run_centralized("adam", task, 100, lr * k, beta1=0.9, beta2=0.99, eps=0.1, init=init)
    out.append(_tolerance_case("fedda_adam_T1_equals_adam", traj, ref, 1e-9))

    traj = federated_trajectory(_pinned_config("fedda_adagrad", 100, lr, beta1=0.9, eps=0.1), task, init)
    ref = run_centralized("adagrad", task, 100, lr * k, eps=0.1, init=init)
    out.append(_tolerance_case("fedda_adagrad_T1_equals_adagrad", traj, ref, 1e-9, ("params", "second_moment")))

    def bitwise_case(name, cfg_a, cfg_b):
        a = federated_trajectory(cfg_a)
        b = federated_trajectory(cfg_b)
        same = _bitwise((a[0], a[3]), (b[0], b[3]))
        return CheckResult(name, _gap(a[0], b[0]), 0.0, same)

    lg = 0.1 * k
    out.append(bitwise_case("fedda_sgdm_beta0_equals_fedavg",
                            _hetero_logistic("fedda_sgdm", beta1=0.0),
                            _hetero_logistic("fedavg", lr=lg)))
    out.append(bitwise_case("fedprox_mu0_equals_fedda_sgdm",
                            _hetero_logistic("fedda_prox", mu=0.0),
                            _hetero_logistic("fedda_sgdm", lr=lg)))
    out.append(bitwise_case("fedopt_sgdm_beta0_equals_fedavg",
                            _hetero_logistic("fedopt_sgdm", beta1=0.0, server_lr=1.0),
                            _hetero_logistic("fedavg", lr=lg)))
    return out


def gradient_checks(triples: int = 100, tol: float = 1e-5) -> list[CheckResult]:
    """Finite-difference checks at seeded random (model, point, batch) triples."""
    out = []
    for kind in ("quadratic", "logistic", "mlp"):
        worst = 0.0
        for seed in range(triples):
            model, params, batch = random_gradient_case(kind, seed)
            worst = max(worst, finite_diff_check(model, params, batch))
        out.append(CheckResult(f"finite_diff_{kind}", worst, tol, bool(worst < tol)))
    return out


def random_gradient_case(kind: str, seed: int):
    rng = np.random.default_rng([seed, 17])
    d = int(rng.integers(2, 6))
    n = int(rng.integers(1, 12))
    if kind == "quadratic":
        B = rng.standard_normal((d, d))
        model = Quadratic(B @ B.T, rng.standard_normal(d))
        batch = Batch(np.zeros((n, 0)), np.zeros(n), np.arange(n))
    else:
        classes = int(rng.integers(2, 5))
        X = rng.standard_normal((n, d))
        y = rng.integers(0, classes, size=n)
        batch = Batch(X, y, np.arange(n))
        if kind == "logistic":
            model = Logistic(d, classes)
        else:
            model = Mlp((d, int(rng.integers(2, 6)), classes))
    params = rng.uniform(-1.0, 1.0, size=model.dim)
    return model, params, batch


def run_all_checks(perturb_lr: float = 0.0) -> list[CheckResult]:
    results = equivalence_suite(perturb_lr)
    worst = max(momentum_decomposition_error(M, T, seed)
                for seed in range(3) for M, T in ((1, 1), (5, 10), (20, 50)))
    results.append(CheckResult("momentum_decomposition", worst, 1e-10, worst < 1e-10))
    results.extend(gradient_checks())
    return results
