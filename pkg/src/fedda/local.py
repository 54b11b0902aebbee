"""Client-side update rules run for T iterations per round.

The decoupled rules move the local weights with the raw gradient only and
carry the global momentum alongside, summing it into ``momentum_sum`` for the
server. ``NaiveSgdm`` is the coupled baseline that steps with its own
momentum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ClientDataset, sample_batch
from .errors import InvalidArgument, InvalidIterationCount
from .models import Model, as_params

SGD_DECOUPLED = "sgd_decoupled"
NAIVE_SGDM = "naive_sgdm"
PROX_DECOUPLED = "prox_decoupled"


@dataclass(frozen=True, eq=False)
class LocalState:
    params: np.ndarray
    momentum: np.ndarray
    momentum_sum: np.ndarray
    step_sum: np.ndarray  # sum of the vectors v_t in W(t+1) = W(t) - lr * v_t
    t: int = 0

    @classmethod
    def start(cls, params, momentum) -> "LocalState":
        w = as_params(params).copy()
        m = as_params(momentum, w.shape[0]).copy()
        return cls(w, m, np.zeros_like(w), np.zeros_like(w), 0)


@dataclass(frozen=True)
class LocalRule:
    kind: str = SGD_DECOUPLED
    lr: float = 0.1
    beta: float = 0.9
    mu: float = 0.0

    def __post_init__(self):
        if self.kind not in (SGD_DECOUPLED, NAIVE_SGDM, PROX_DECOUPLED):
            raise InvalidArgument(f"unknown local rule {self.kind!r}")
        if not 0.0 <= self.beta < 1.0:
            raise InvalidArgument("beta must lie in [0, 1)")
        if not self.lr > 0:
            raise InvalidArgument("lr must be positive")
        if not self.mu >= 0:
            raise InvalidArgument("mu must be non-negative")


@dataclass(frozen=True, eq=False)
class ClientReport:
    client_id: int
    n_samples: int
    momentum_sum: np.ndarray  # P^i
    momentum: np.ndarray  # m^i(T)
    params: np.ndarray  # W^i(T)
    step_sum: np.ndarray


def _gradient(state, model, client, batch_size, rng):
    return model.grad(state.params, sample_batch(client, batch_size, rng))


def _advance(state: LocalState, g: np.ndarray, rule: LocalRule) -> LocalState:
    m = rule.beta * state.momentum + (1.0 - rule.beta) * g
    return LocalState(
        params=state.params - rule.lr * g,
        momentum=m,
        momentum_sum=state.momentum_sum + m,
        step_sum=state.step_sum + g,
        t=state.t + 1,
    )


def step_decoupled(state: LocalState, model: Model, client: ClientDataset, batch_size: int,
                   rule: LocalRule, rng: np.random.Generator) -> LocalState:
    """One decoupled step: the weights never see the momentum."""
    return _advance(state, _gradient(state, model, client, batch_size, rng), rule)


def step_naive_sgdm(state: LocalState, model: Model, client: ClientDataset, batch_size: int,
                    rule: LocalRule, rng: np.random.Generator) -> LocalState:
    """Plain local SGDM: ``W <- W - lr * m(new)``."""
    g = _gradient(state, model, client, batch_size, rng)
    m = rule.beta * state.momentum + (1.0 - rule.beta) * g
    return LocalState(
        params=state.params - rule.lr * m,
        momentum=m,
        momentum_sum=state.momentum_sum + m,
        step_sum=state.step_sum + m,
        t=state.t + 1,
    )


def step_prox(state: LocalState, model: Model, client: ClientDataset, batch_size: int,
              rule: LocalRule, anchor: np.ndarray, rng: np.random.Generator) -> LocalState:
    """Decoupled step on ``g + mu (W - anchor)``, used in both updates."""
    g = _gradient(state, model, client, batch_size, rng)
    if rule.mu != 0.0:
        g = g + rule.mu * (state.params - anchor)
    return _advance(state, g, rule)


def run_local_round(params, momentum, model: Model, client: ClientDataset, T: int,
                    rule: LocalRule, batch_size: int, rng: np.random.Generator) -> ClientReport:
    """Run ``T`` local steps from the round-start snapshot ``(params, momentum)``.

    ``params`` doubles as the proximal anchor for ``prox_decoupled``.
    """
    if T < 1:
        raise InvalidIterationCount(f"T must be >= 1, got {T}")
    state = LocalState.start(params, momentum)
    anchor = state.params.copy()
    for _ in range(T):
        if rule.kind == SGD_DECOUPLED:
            state = step_decoupled(state, model, client, batch_size, rule, rng)
        elif rule.kind == NAIVE_SGDM:
            state = step_naive_sgdm(state, model, client, batch_size, rule, rng)
        else:
            state = step_prox(state, model, client, batch_size, rule, anchor, rng)
    return ClientReport(
        client_id=client.client_id,
        n_samples=client.n_samples,
        momentum_sum=state.momentum_sum,
        momentum=state.momentum,
        params=state.params,
        step_sum=state.step_sum,
    )

