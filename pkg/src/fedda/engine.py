"""Round orchestration, centralized reference trainers, metrics and checkpoints."""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from . import data as fdata
from .config import FederationConfig
from .errors import InvalidArgument
from .local import NAIVE_SGDM, PROX_DECOUPLED, SGD_DECOUPLED, ClientReport, LocalRule, run_local_round
from .models import Logistic, Mlp, Model, Quadratic
from .optimizers import make_optimizer
from .server import (
    ServerState,
    aggregate,
    global_update_fedavg,
    global_update_fedda_adagrad,
    global_update_fedda_adam,
    global_update_fedda_sgdm,
    global_update_fedopt,
    global_update_naive_sgdm,
    run_restart_local,
)

# Domain-separation tags for the seed sequences.
_SAMPLING_STREAM = 1
_CLIENT_STREAM = 2
_INIT_STREAM = 3
_CENTRAL_STREAM = 4

METRICS_COLUMNS = ("round", "phase", "loss", "accuracy", "grad_norm", "wall_ms")
CHECKPOINT_FORMAT = "fedda-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(eq=False)
class Task:
    """A federation plus the loss oracle each client trains on."""

    federation: fdata.Federation
    models: list[Model]
    test: fdata.Dataset | None = None

    @property
    def dim(self) -> int:
        return self.models[0].dim

    @property
    def is_classification(self) -> bool:
        return isinstance(self.models[0], (Logistic, Mlp))


def build_task(config: FederationConfig) -> Task:
    d, m = config.data, config.model
    seed = config.data_seed
    if d.kind == "pinned_quadratic":
        fed, models = fdata.pinned_quadratic_pair(d.samples_per_client)
        return Task(fed, models)
    if d.kind == "quadratic":
        fed, models = fdata.generate_quadratic_federation(
            d.clients, d.dim, d.heterogeneity, seed, d.samples_per_client
        )
        return Task(fed, models)
    if d.kind == "synthetic":
        raw = fdata.generate_synthetic_classification(d.n, d.dim, d.classes, seed, d.separation)
    else:
        raw = fdata.load_csv(d.path, target_column=d.target, header=d.header)
        if raw.n_classes is None:
            raise InvalidArgument("csv targets must be integer class labels")
    train, test = fdata.train_test_split(raw, d.test_fraction, seed)
    spec = fdata.PartitionSpec(d.partition, d.alpha, d.min_fraction, seed)
    fed = fdata.partition(train, d.clients, spec)
    n_features = raw.features.shape[1]
    n_classes = max(raw.n_classes, 2)
    if m.kind == "logistic":
        model: Model = Logistic(n_features, n_classes)
    else:
        model = Mlp((n_features, *m.hidden, n_classes))
    return Task(fed, [model] * fed.num_clients, test)


def initial_params(config: FederationConfig, task: Task) -> np.ndarray:
    model = task.models[0]
    scale = config.model.init_scale
    if scale is None:
        scale = 0.0 if isinstance(model, Logistic) else 1.0
    rng = np.random.default_rng([config.seed, _INIT_STREAM])
    return model.init_params(rng, scale)


# -- pooled objective -----------------------------------------------------------

def global_loss(task: Task, params) -> float:
    """Exact pooled loss ``sum_i (N_i/N) L^i(W)``."""
    fed = task.federation
    return float(sum(w * m.loss(params, c.full_batch()) for w, m, c in zip(fed.weights, task.models, fed)))


def global_grad(task: Task, params) -> np.ndarray:
    fed = task.federation
    total = np.zeros(task.dim)
    for w, m, c in zip(fed.weights, task.models, fed):
        total += w * m.grad(params, c.full_batch())
    return total


def pooled_stochastic_grad(task: Task, params, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Gradient of the mean loss over ``batch_size`` samples drawn from the pooled data."""
    fed = task.federation
    N = fed.n_total
    if batch_size >= N:
        return global_grad(task, params)
    picks = np.sort(rng.choice(N, size=batch_size, replace=False))
    offsets = np.cumsum([0] + [c.n_samples for c in fed])
    total = np.zeros(task.dim)
    for i, (m, c) in enumerate(zip(task.models, fed)):
        local = picks[(picks >= offsets[i]) & (picks < offsets[i + 1])] - offsets[i]
        if local.size:
            total += (local.size / batch_size) * m.grad(params, c.batch(local))
    return total


def accuracy(task: Task, params) -> float | None:
    if not task.is_classification:
        return None
    ds = task.test
    if ds is None:
        fed = task.federation
        X = np.vstack([c.features for c in fed])
        y = np.concatenate([c.targets for c in fed])
    else:
        X, y = ds.features, ds.targets
    return float(np.mean(task.models[0].predict(params, X) == y))


# -- rounds ---------------------------------------------------------------------

def sample_clients(M: int, K: int, round: int, seed: int) -> list[int]:
    """K distinct client ids, uniform over K-subsets, fixed by ``(seed, round)``."""
    if not 1 <= K <= M:
        raise InvalidArgument(f"need 1 <= K <= M, got K={K}, M={M}")
    if K == M:
        return list(range(M))
    rng = np.random.default_rng([seed, _SAMPLING_STREAM, round])
    return sorted(int(i) for i in rng.choice(M, size=K, replace=False))


def client_rng(seed: int, round: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, _CLIENT_STREAM, round, client_id])


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    phase: str
    loss: float
    accuracy: float | None
    grad_norm: float
    wall_ms: float


def _local_rule(config: FederationConfig) -> LocalRule:
    if config.algorithm == "naive_sgdm":
        return LocalRule(NAIVE_SGDM, config.lr, config.beta1)
    if config.algorithm == "fedda_prox":
        return LocalRule(PROX_DECOUPLED, config.lr, config.beta1, config.mu)
    return LocalRule(SGD_DECOUPLED, config.lr, config.beta1)


def _client_work(config, state, task, T, full_batch, E):
    rule = _local_rule(config)
    fedlocal = config.algorithm.startswith("fedlocal_")

    def work(cid: int) -> ClientReport:
        client = task.federation[cid]
        b = client.n_samples if full_batch or config.batch_size is None else min(config.batch_size, client.n_samples)
        rng = client_rng(config.seed, E, cid)
        if fedlocal:
            return run_restart_local(state.params, task.models[cid], client, T, config.algorithm[9:],
                                     config.lr, b, rng, config.beta1, config.beta2, config.eps)
        return run_local_round(state.params, state.momentum, task.models[cid], client, T, rule, b, rng)

    return work


def server_update(config: FederationConfig, state: ServerState, reports: Sequence[ClientReport]) -> ServerState:
    alg = config.algorithm
    if alg in ("fedda_sgdm", "fedda_prox", "fedda_adam", "fedda_adagrad"):
        P = aggregate(reports, "momentum_sum")
        m_new = aggregate(reports, "momentum")
        if alg == "fedda_adam":
            return global_update_fedda_adam(state, P, m_new, config.lr, config.server_lr,
                                            config.beta1, config.beta2, config.eps)
        if alg == "fedda_adagrad":
            return global_update_fedda_adagrad(state, P, m_new, config.lr, config.server_lr,
                                               config.beta1, config.eps)
        return global_update_fedda_sgdm(state, P, m_new, config.lr, config.server_lr)
    if alg == "naive_sgdm":
        return global_update_naive_sgdm(state, reports, config.lr)
    if alg.startswith("fedopt_"):
        return global_update_fedopt(state, reports, alg[7:], config.server_lr, config.lr,
                                    config.beta1, config.beta2, config.eps)
    return global_update_fedavg(state, reports, config.lr)


def run_round(config: FederationConfig, state: ServerState, task: Task,
              executor: ThreadPoolExecutor | None = None) -> tuple[ServerState, RoundMetrics]:
    """Sample, train locally, aggregate, update, then measure the new global model."""
    t0 = time.perf_counter()
    E = state.round
    start = config.stabilization_start
    stabilizing = start is not None and E >= start
    M = task.federation.num_clients
    if stabilizing:
        s = config.stabilization
        K = M if s.full_participation else config.participants
        T, full_batch = s.local_steps, s.full_batch
    else:
        K, T, full_batch = config.participants, config.local_steps, config.batch_size is None
    ids = sample_clients(M, K, E, config.seed)
    work = _client_work(config, state, task, T, full_batch, E)
    if executor is None:
        reports = [work(i) for i in ids]
    else:
        reports = list(executor.map(work, ids))
    new_state = server_update(config, state, reports)
    g = global_grad(task, new_state.params)
    metrics = RoundMetrics(
        round=E,
        phase="stabilization" if stabilizing else "normal",
        loss=global_loss(task, new_state.params),
        accuracy=accuracy(task, new_state.params),
        grad_norm=float(np.linalg.norm(g)),
        wall_ms=(time.perf_counter() - t0) * 1e3,
    )
    return new_state, metrics


@dataclass
class ExperimentResult:
    metrics: list[RoundMetrics]
    state: ServerState
    task: Task


def run_experiment(config: FederationConfig, task: Task | None = None,
                   on_round: Callable[[RoundMetrics], None] | None = None,
                   init=None) -> ExperimentResult:
    """Run ``config.rounds`` rounds. ``on_round`` sees each metrics row as soon
    as it exists, so a sink keeps partial results if a later round fails."""
    config.validate()
    task = task or build_task(config)
    state = ServerState.initial(initial_params(config, task) if init is None else init)
    rows: list[RoundMetrics] = []
    executor = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        for _ in range(config.rounds):
            state, row = run_round(config, state, task, executor)
            rows.append(row)
            if on_round is not None:
                on_round(row)
    finally:
        if executor is not None:
            executor.shutdown()
    return ExperimentResult(rows, state, task)


# -- centralized references -------------------------------------------------------

@dataclass
class Trajectory:
    params: np.ndarray  # (steps + 1, d)
    momentum: np.ndarray
    second_moment: np.ndarray


def run_centralized(optimizer: str, task: Task, steps: int, lr: float, beta1: float = 0.9,
                    beta2: float = 0.99, eps: float = 0.1, batch_size: int | None = None,
                    seed: int = 0, init=None) -> Trajectory:
    """GD/SGD/SGDM/Adam/AdaGrad on the pooled objective, recording every step.

    ``gd`` always uses the full pooled gradient; the others use it when
    ``batch_size`` is None.
    """
    if steps < 1:
        raise InvalidArgument("steps must be >= 1")
    d = task.dim
    w = np.zeros(d) if init is None else np.array(init, dtype=np.float64)
    opt = make_optimizer(optimizer, d, lr, beta1, beta2, eps)
    rng = np.random.default_rng([seed, _CENTRAL_STREAM])
    Ws, ms, vs = [w.copy()], [opt.m.copy()], [opt.v.copy()]
    for _ in range(steps):
        if optimizer == "gd" or batch_size is None:
            g = global_grad(task, w)
        else:
            g = pooled_stochastic_grad(task, w, batch_size, rng)
        w = opt.step(w, g)
        Ws.append(w.copy())
        ms.append(opt.m.copy())
        vs.append(opt.v.copy())
    return Trajectory(np.array(Ws), np.array(ms), np.array(vs))


def centralized_optimum(task: Task, init=None) -> tuple[np.ndarray, float]:
    """Minimize the pooled loss with L-BFGS; returns ``(W*, loss(W*))``."""
    x0 = np.zeros(task.dim) if init is None else np.array(init, dtype=np.float64)
    res = minimize(lambda w: global_loss(task, w), x0, jac=lambda w: global_grad(task, w),
                   method="L-BFGS-B", options={"gtol": 1e-10, "maxiter": 10000})
    return res.x, float(res.fun)


def quadratic_task(federation: fdata.Federation, models: Sequence[Quadratic]) -> Task:
    return Task(federation, list(models))


# -- files ------------------------------------------------------------------------

def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def metrics_row(row: RoundMetrics, timing: bool) -> list[str]:
    return [str(row.round), row.phase, _fmt(row.loss), _fmt(row.accuracy), _fmt(row.grad_norm),
            _fmt(row.wall_ms) if timing else ""]


class MetricsWriter:
    """Streams metrics rows to CSV, flushing after every row."""

    def __init__(self, path, timing: bool = False):
        self.timing = timing
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(METRICS_COLUMNS)
        self._fh.flush()

    def __call__(self, row: RoundMetrics) -> None:
        self._w.writerow(metrics_row(row, self.timing))
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_metrics(rows: Sequence[RoundMetrics], path, timing: bool = False) -> None:
    with MetricsWriter(path, timing) as sink:
        for r in rows:
            sink(r)


def save_checkpoint(path, state: ServerState, config: FederationConfig | None = None) -> None:
    """JSON checkpoint; float lists use shortest round-trip repr so reloads are exact."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "round": state.round,
        "config_hash": None if config is None else config.hash(),
        "params": state.params.tolist(),
        "momentum": state.momentum.tolist(),
        "second_moment": state.second_moment.tolist(),
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_checkpoint(path) -> tuple[ServerState, str | None]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise InvalidArgument(f"{path} is not a version-{CHECKPOINT_VERSION} fedda checkpoint")
    state = ServerState(
        params=np.array(doc["params"], dtype=np.float64),
        momentum=np.array(doc["momentum"], dtype=np.float64),
        second_moment=np.array(doc["second_moment"], dtype=np.float64),
        round=int(doc["round"]),
    )
    return state, doc["config_hash"]
