"""Server-side aggregation and global update rules.

FedDA rules consume the aggregated momentum sum ``P`` and the aggregated final
local momentum. Baselines (FedAvg, naive local SGDM, FedOpt, FedLocal-restart)
consume the clients' accumulated step vectors. Every update returns a new
``ServerState``; nothing here mutates its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import ClientDataset, sample_batch
from .errors import DegenerateBeta, DimensionMismatch, EmptyReportSet, InvalidArgument, NonFiniteState
from .local import ClientReport
from .models import Model, as_params
from .optimizers import make_optimizer


@dataclass(frozen=True, eq=False)
class ServerState:
    params: np.ndarray  # W
    momentum: np.ndarray  # m
    second_moment: np.ndarray  # V, elementwise >= 0
    round: int = 0

    @classmethod
    def initial(cls, params) -> "ServerState":
        w = as_params(params).copy()
        return cls(w, np.zeros_like(w), np.zeros_like(w), 0)

    @property
    def dim(self) -> int:
        return self.params.shape[0]


def _finite(state: ServerState) -> ServerState:
    for name in ("params", "momentum", "second_moment"):
        if not np.all(np.isfinite(getattr(state, name))):
            raise NonFiniteState(f"non-finite {name} after round {state.round}")
    return state


def _same_dim(*vectors: np.ndarray) -> None:
    d = vectors[0].shape
    for v in vectors[1:]:
        if v.shape != d:
            raise DimensionMismatch(f"vector shapes {d} and {v.shape} differ")


def aggregate(reports: Sequence[ClientReport], field: str) -> np.ndarray:
    """Sample-count weighted mean of ``field`` over ``reports``.

    Summation runs in ascending ``client_id`` order so the result does not
    depend on the order in which workers finished.
    """
    if not reports:
        raise EmptyReportSet("no client reports to aggregate")
    ordered = sorted(reports, key=lambda r: r.client_id)
    vectors = [np.asarray(getattr(r, field), dtype=np.float64) for r in ordered]
    _same_dim(*vectors)
    counts = np.array([r.n_samples for r in ordered], dtype=np.float64)
    weights = counts / counts.sum()
    total = np.zeros_like(vectors[0])
    for w, v in zip(weights, vectors):
        total += w * v
    return total


def reconstruct_global_gradient(P, m_prev, beta1: float) -> np.ndarray:
    """Invert ``P = beta1 m_prev + (1 - beta1) G`` for the effective gradient ``G``."""
    if beta1 == 1.0:
        raise DegenerateBeta("beta1 = 1 makes the global gradient unrecoverable")
    if not 0.0 <= beta1 < 1.0:
        raise InvalidArgument("beta1 must lie in [0, 1)")
    P, m_prev = np.asarray(P, dtype=np.float64), np.asarray(m_prev, dtype=np.float64)
    _same_dim(P, m_prev)
    return (P - beta1 * m_prev) / (1.0 - beta1)


def global_update_fedda_sgdm(state: ServerState, P, m_new, lr: float, alpha: float) -> ServerState:
    P, m_new = as_params(P), as_params(m_new)
    _same_dim(state.params, P, m_new)
    return _finite(ServerState(
        params=state.params - (alpha * lr) * P,
        momentum=m_new.copy(),
        second_moment=state.second_moment,
        round=state.round + 1,
    ))


def global_update_fedda_adam(state: ServerState, P, m_new, lr: float, alpha: float,
                             beta1: float, beta2: float, eps: float) -> ServerState:
    """Server Adam driven by the reconstructed gradient.

    Bias corrections use exponent ``E + 1`` and the step divides by the
    bias-corrected second moment.
    """
    P, m_new = as_params(P), as_params(m_new)
    _same_dim(state.params, P, m_new)
    G = reconstruct_global_gradient(P, state.momentum, beta1)
    k = state.round + 1
    m_hat = (beta1 * state.momentum + (1.0 - beta1) * G) / (1.0 - beta1**k)
    V = beta2 * state.second_moment + (1.0 - beta2) * G * G
    V_hat = V / (1.0 - beta2**k)
    return _finite(ServerState(
        params=state.params - (alpha * lr) * (m_hat / (np.sqrt(V_hat) + eps)),
        momentum=m_new.copy(),
        second_moment=V,
        round=k,
    ))


def global_update_fedda_adagrad(state: ServerState, P, m_new, lr: float, alpha: float,
                                beta1: float, eps: float) -> ServerState:
    P, m_new = as_params(P), as_params(m_new)
    _same_dim(state.params, P, m_new)
    G = reconstruct_global_gradient(P, state.momentum, beta1)
    V = state.second_moment + G * G
    return _finite(ServerState(
        params=state.params - (alpha * lr) * (G / (np.sqrt(V) + eps)),
        momentum=m_new.copy(),
        second_moment=V,
        round=state.round + 1,
    ))


def averaged_params(state: ServerState, reports: Sequence[ClientReport], lr: float) -> np.ndarray:
    """``sum_i w_i W^i(T)``, formed as ``W(E) - lr * sum_i w_i S^i``.

    ``S^i`` is client i's summed step vector, so ``W^i(T) = W(E) - lr S^i``.
    Computing the average this way keeps it bit-identical to the FedDA update
    whenever the two agree algebraically.
    """
    return state.params - lr * aggregate(reports, "step_sum")


def global_update_fedavg(state: ServerState, reports: Sequence[ClientReport], lr: float) -> ServerState:
    return _finite(ServerState(
        params=averaged_params(state, reports, lr),
        momentum=state.momentum,
        second_moment=state.second_moment,
        round=state.round + 1,
    ))


def global_update_naive_sgdm(state: ServerState, reports: Sequence[ClientReport], lr: float) -> ServerState:
    """Average both the local weights and the local momenta."""
    return _finite(ServerState(
        params=averaged_params(state, reports, lr),
        momentum=aggregate(reports, "momentum"),
        second_moment=state.second_moment,
        round=state.round + 1,
    ))


def global_update_fedopt(state: ServerState, reports: Sequence[ClientReport], inner: str,
                         server_lr: float, lr: float, beta1: float = 0.9, beta2: float = 0.99,
                         eps: float = 0.1) -> ServerState:
    """One server-optimizer step on the pseudo-gradient ``W(E) - avg W^i(T)``.

    Server momentum lives in ``state.momentum`` and the second moment in
    ``state.second_moment``; Adam's step counter is the round index ``E + 1``.
    """
    delta = lr * aggregate(reports, "step_sum")
    opt = make_optimizer(inner, state.dim, server_lr, beta1, beta2, eps)
    opt.m, opt.v, opt.t = state.momentum.copy(), state.second_moment.copy(), state.round
    new_params = opt.step(state.params, delta)
    return _finite(ServerState(new_params, opt.m, opt.v, state.round + 1))


def run_restart_local(params, model: Model, client: ClientDataset, T: int, inner: str, lr: float,
                      batch_size: int, rng: np.random.Generator, beta1: float = 0.9,
                      beta2: float = 0.99, eps: float = 0.1) -> ClientReport:
    """Local adaptive optimizer whose state is zeroed at the start of every round."""
    if inner not in ("sgdm", "adam"):
        raise InvalidArgument(f"FedLocal inner rule must be sgdm or adam, got {inner!r}")
    w = as_params(params).copy()
    opt = make_optimizer(inner, w.shape[0], lr, beta1, beta2, eps)
    step_sum = np.zeros_like(w)
    momentum_sum = np.zeros_like(w)
    for _ in range(T):
        g = model.grad(w, sample_batch(client, batch_size, rng))
        d = opt.direction(g)
        w = w - lr * d
        step_sum = step_sum + d
        momentum_sum = momentum_sum + opt.m
    return ClientReport(client.client_id, client.n_samples, momentum_sum, opt.m.copy(), w, step_sum)


def fedlocal_restart_round(state: ServerState, models: Sequence[Model], clients: Sequence[ClientDataset],
                           inner: str, T: int, lr: float, batch_size: int | None = None,
                           rngs: Sequence[np.random.Generator] | None = None, **hyper) -> ServerState:
    """Whole FedLocal round run serially: restart local optimizers, then average weights.

    ``batch_size=None`` means each client uses its full batch.
    """
    reports = []
    for k, (model, client) in enumerate(zip(models, clients)):
        rng = rngs[k] if rngs is not None else np.random.default_rng(client.client_id)
        b = client.n_samples if batch_size is None else min(batch_size, client.n_samples)
        reports.append(run_restart_local(state.params, model, client, T, inner, lr, b, rng, **hyper))
    return global_update_fedavg(state, reports, lr)
