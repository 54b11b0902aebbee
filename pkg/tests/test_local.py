import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedda import data as fdata
from fedda.errors import InvalidArgument, InvalidIterationCount
from fedda.local import (
    NAIVE_SGDM,
    PROX_DECOUPLED,
    LocalRule,
    LocalState,
    run_local_round,
    step_decoupled,
    step_naive_sgdm,
    step_prox,
)
from fedda.models import Model, Quadratic, as_params


class ConstantGrad(Model):
    """Loss whose gradient is a fixed vector everywhere."""

    def __init__(self, g):
        self.g = as_params(g)
        self.dim = self.g.shape[0]

    def _loss_grad(self, w, batch, need_grad):
        return float(self.g @ w), self.g.copy()


def client(n=4, d=2):
    return fdata._quadratic_clients([n], d)[0]


def rng():
    return np.random.default_rng(0)


def test_one_decoupled_step_arithmetic():
    s = LocalState.start([0.0, 0.0], [0.0, 0.0])
    s = step_decoupled(s, ConstantGrad([1.0, 0.0]), client(), 4, LocalRule(lr=0.1, beta=0.9), rng())
    np.testing.assert_allclose(s.params, [-0.1, 0.0], atol=1e-15)
    np.testing.assert_allclose(s.momentum, [0.1, 0.0], atol=1e-15)
    np.testing.assert_allclose(s.momentum_sum, [0.1, 0.0], atol=1e-15)


def test_zero_beta_momentum_sum_is_gradient_sum():
    # unrolled by hand: W(t+1) = W(t) - lr A (W(t) - c), P = sum of A (W(t) - c)
    A, c, lr = np.diag([2.0, 0.5]), np.array([1.0, -1.0]), 0.1
    q = Quadratic(A, c)
    W = np.array([3.0, 2.0])
    gsum = np.zeros(2)
    w = W.copy()
    for _ in range(3):
        g = A @ (w - c)
        gsum += g
        w = w - lr * g
    rep = run_local_round(W, np.zeros(2), q, client(), 3, LocalRule(lr=lr, beta=0.0), 4, rng())
    np.testing.assert_allclose(rep.momentum_sum, gsum, atol=1e-12)
    np.testing.assert_allclose(rep.params, W - lr * rep.momentum_sum, atol=1e-12)


def test_zero_gradient_freezes_weights_and_decays_momentum():
    m0 = np.array([1.0, -2.0])
    beta, T = 0.8, 6
    rep = run_local_round([1.0, 1.0], m0, ConstantGrad([0.0, 0.0]), client(), T,
                          LocalRule(lr=0.1, beta=beta), 4, rng())
    np.testing.assert_array_equal(rep.params, [1.0, 1.0])
    np.testing.assert_allclose(rep.momentum, beta**T * m0, atol=1e-15)
    np.testing.assert_allclose(rep.momentum_sum, m0 * sum(beta**s for s in range(1, T + 1)), atol=1e-14)


def test_naive_sgdm_reduces_to_decoupled_when_beta_zero():
    q = Quadratic(np.diag([1.0, 3.0]), [0.5, 0.5])
    a = run_local_round([2.0, 1.0], [0.3, 0.3], q, client(), 5, LocalRule(lr=0.05, beta=0.0), 4, rng())
    b = run_local_round([2.0, 1.0], [0.3, 0.3], q, client(), 5,
                        LocalRule(NAIVE_SGDM, lr=0.05, beta=0.0), 4, rng())
    np.testing.assert_array_equal(a.params, b.params)


def test_naive_momentum_tends_to_constant_gradient():
    s = LocalState.start([0.0, 0.0], [0.0, 0.0])
    rule = LocalRule(NAIVE_SGDM, lr=0.1, beta=0.9)
    for _ in range(300):
        s = step_naive_sgdm(s, ConstantGrad([1.0, 0.0]), client(), 4, rule, rng())
    np.testing.assert_allclose(s.momentum, [1.0, 0.0], atol=1e-12)


def test_naive_first_step_is_damped_by_one_minus_beta():
    s0 = LocalState.start([0.0, 0.0], [0.0, 0.0])
    g = ConstantGrad([1.0, 0.0])
    naive = step_naive_sgdm(s0, g, client(), 4, LocalRule(NAIVE_SGDM, lr=0.1, beta=0.9), rng())
    dec = step_decoupled(s0, g, client(), 4, LocalRule(lr=0.1, beta=0.9), rng())
    assert abs(naive.params[0] - (-0.1 * 0.1)) < 1e-15
    assert dec.params[0] == -0.1


def test_prox_zero_mu_is_bitwise_decoupled():
    q = Quadratic(np.diag([1.0, 2.0]), [1.0, 0.0])
    a = run_local_round([0.0, 3.0], [0.1, 0.2], q, client(), 7, LocalRule(lr=0.1, beta=0.9), 4, rng())
    b = run_local_round([0.0, 3.0], [0.1, 0.2], q, client(), 7,
                        LocalRule(PROX_DECOUPLED, lr=0.1, beta=0.9, mu=0.0), 4, rng())
    for f in ("params", "momentum", "momentum_sum", "step_sum"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))


def test_pure_proximal_pull():
    s = LocalState.start([1.0, 0.0], [0.0, 0.0])
    s = step_prox(s, ConstantGrad([0.0, 0.0]), client(), 4, LocalRule(PROX_DECOUPLED, lr=0.1, beta=0.9, mu=1.0),
                  np.zeros(2), rng())
    np.testing.assert_allclose(s.params, [0.9, 0.0], atol=1e-15)


def test_large_mu_keeps_client_near_anchor():
    q = Quadratic(np.eye(2), [5.0, 5.0])
    W = np.zeros(2)
    free = run_local_round(W, W, q, client(), 20, LocalRule(lr=0.1, beta=0.9), 4, rng())
    held = run_local_round(W, W, q, client(), 20, LocalRule(PROX_DECOUPLED, lr=0.1, beta=0.9, mu=5.0), 4, rng())
    assert np.linalg.norm(held.params - W) < np.linalg.norm(free.params - W)


def test_T1_full_batch_momentum_sum():
    q = Quadratic(np.diag([2.0, 1.0]), [1.0, 1.0])
    W, m = np.array([0.0, 2.0]), np.array([0.5, -0.5])
    rep = run_local_round(W, m, q, client(), 1, LocalRule(lr=0.1, beta=0.9), 4, rng())
    np.testing.assert_allclose(rep.momentum_sum, 0.9 * m + 0.1 * q.grad(W, client().full_batch()), atol=1e-15)


def test_zero_iterations_rejected():
    with pytest.raises(InvalidIterationCount):
        run_local_round([0.0, 0.0], [0.0, 0.0], ConstantGrad([1.0, 0.0]), client(), 0, LocalRule(), 4, rng())


def test_rule_validation():
    with pytest.raises(InvalidArgument):
        LocalRule(beta=1.0)
    with pytest.raises(InvalidArgument):
        LocalRule("adam")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 30))
def test_weights_ignore_initial_momentum(seed, T):
    r = np.random.default_rng(seed)
    B = r.standard_normal((3, 3))
    q = Quadratic(B @ B.T / 3, r.standard_normal(3))
    W = r.standard_normal(3)
    a = run_local_round(W, r.standard_normal(3), q, client(d=3), T, LocalRule(lr=0.05, beta=0.9), 4, rng())
    b = run_local_round(W, r.standard_normal(3), q, client(d=3), T, LocalRule(lr=0.05, beta=0.9), 4, rng())
    np.testing.assert_array_equal(a.params, b.params)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 40))
def test_momentum_matches_closed_form_sum(seed, T):
    r = np.random.default_rng(seed)
    beta, lr = 0.9, 0.05
    B = r.standard_normal((3, 3))
    q = Quadratic(B @ B.T / 3, r.standard_normal(3))
    s = LocalState.start(r.standard_normal(3), r.standard_normal(3))
    m0 = s.momentum.copy()
    grads, ms = [], []
    for _ in range(T):
        grads.append(q.grad(s.params, client(d=3).full_batch()))
        s = step_decoupled(s, q, client(d=3), 4, LocalRule(lr=lr, beta=beta), rng())
        ms.append(s.momentum)
    direct = beta**T * m0 + (1 - beta) * sum(beta ** (T - 1 - k) * g for k, g in enumerate(grads))
    np.testing.assert_allclose(s.momentum, direct, atol=1e-10, rtol=0)
    np.testing.assert_allclose(s.momentum_sum, np.sum(ms, axis=0), atol=1e-12, rtol=0)
