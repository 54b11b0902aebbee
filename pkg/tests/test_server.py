import numpy as np
import pytest

from fedda import data as fdata
from fedda.errors import DegenerateBeta, DimensionMismatch, EmptyReportSet, InvalidArgument, NonFiniteState
from fedda.local import ClientReport, LocalRule, run_local_round
from fedda.models import Quadratic
from fedda.server import (
    ServerState,
    aggregate,
    fedlocal_restart_round,
    global_update_fedavg,
    global_update_fedda_adagrad,
    global_update_fedda_adam,
    global_update_fedda_sgdm,
    global_update_fedopt,
    reconstruct_global_gradient,
    run_restart_local,
)


def report(cid, n, vec=None, **kw):
    v = np.asarray(vec if vec is not None else [0.0, 0.0], dtype=float)
    fields = dict(momentum_sum=v, momentum=v, params=v, step_sum=v)
    fields.update({k: np.asarray(x, dtype=float) for k, x in kw.items()})
    return ClientReport(cid, n, **fields)


def state(w=(0.0, 0.0), m=None, v=None, E=0):
    w = np.asarray(w, dtype=float)
    return ServerState(w, np.zeros_like(w) if m is None else np.asarray(m, float),
                       np.zeros_like(w) if v is None else np.asarray(v, float), E)


def test_weighted_mean():
    np.testing.assert_array_equal(aggregate([report(0, 1, [0, 0]), report(1, 3, [4, 4])], "params"), [3.0, 3.0])


def test_single_client_passes_through():
    np.testing.assert_array_equal(aggregate([report(0, 7, [1.5, -2.0])], "params"), [1.5, -2.0])


def test_equal_counts_give_arithmetic_mean():
    reps = [report(i, 5, [float(i), 2.0 * i]) for i in range(4)]
    np.testing.assert_allclose(aggregate(reps, "params"), [1.5, 3.0], atol=1e-15)


def test_aggregation_ignores_report_order():
    rng = np.random.default_rng(0)
    reps = [report(i, int(rng.integers(1, 9)), rng.standard_normal(2)) for i in range(6)]
    a = aggregate(reps, "params")
    b = aggregate(list(reversed(reps)), "params")
    np.testing.assert_array_equal(a, b)


def test_aggregate_errors():
    with pytest.raises(EmptyReportSet):
        aggregate([], "params")
    with pytest.raises(DimensionMismatch):
        aggregate([report(0, 1, [0, 0]), report(1, 1, [0, 0, 0])], "params")


def test_fedda_sgdm_arithmetic():
    s = global_update_fedda_sgdm(state([1, 1]), [2, 2], [0.5, 0.5], lr=0.1, alpha=1.0)
    np.testing.assert_allclose(s.params, [0.8, 0.8], atol=1e-15)
    np.testing.assert_array_equal(s.momentum, [0.5, 0.5])
    assert s.round == 1


def test_zero_momentum_sum_leaves_weights():
    s = global_update_fedda_sgdm(state([1, 2], E=4), [0, 0], [0, 0], lr=0.1, alpha=1.0)
    np.testing.assert_array_equal(s.params, [1.0, 2.0])
    assert s.round == 5


def test_reconstruction_arithmetic():
    np.testing.assert_allclose(reconstruct_global_gradient([0.1, 0.0], [0.0, 0.0], 0.9), [1.0, 0.0], atol=1e-15)


def test_reconstruction_rejects_beta_one():
    with pytest.raises(DegenerateBeta):
        reconstruct_global_gradient([1.0], [0.0], 1.0)
    with pytest.raises(InvalidArgument):
        reconstruct_global_gradient([1.0], [0.0], 1.5)


def test_reconstruction_T1_recovers_full_gradient():
    q = Quadratic(np.diag([2.0, 1.0]), [1.0, -1.0])
    c = fdata._quadratic_clients([3], 2)[0]
    W, m = np.array([0.3, 0.7]), np.array([0.2, -0.4])
    rep = run_local_round(W, m, q, c, 1, LocalRule(lr=0.1, beta=0.9), 3, np.random.default_rng(0))
    np.testing.assert_allclose(reconstruct_global_gradient(rep.momentum_sum, m, 0.9),
                               q.grad(W, c.full_batch()), atol=1e-14)


def test_reconstruction_T3_matches_symbolic_unroll():
    # P = sum_{s=1..3} [beta^s m + (1-beta) sum_{k<s} beta^(s-1-k) g_k]
    #   = (b + b^2 + b^3) m + (1-b) [(1 + b + b^2) g0 + (1 + b) g1 + g2]
    # G = (P - b m)/(1-b) = (b^2 + b^3)/(1-b) m + (1 + b + b^2) g0 + (1 + b) g1 + g2
    b, lr = 0.9, 0.1
    A, c_ = np.diag([1.5, 0.5]), np.array([1.0, 2.0])
    q = Quadratic(A, c_)
    cl = fdata._quadratic_clients([2], 2)[0]
    W0, m = np.array([-1.0, 0.5]), np.array([0.3, 0.1])
    g0 = A @ (W0 - c_)
    W1 = W0 - lr * g0
    g1 = A @ (W1 - c_)
    W2 = W1 - lr * g1
    g2 = A @ (W2 - c_)
    expected = (b**2 + b**3) / (1 - b) * m + (1 + b + b**2) * g0 + (1 + b) * g1 + g2
    rep = run_local_round(W0, m, q, cl, 3, LocalRule(lr=lr, beta=b), 2, np.random.default_rng(0))
    np.testing.assert_allclose(reconstruct_global_gradient(rep.momentum_sum, m, b), expected, atol=1e-12)


def test_first_adam_step():
    # G = (1, 0), m = V = 0: m_hat = G, V_hat = G^2, step = 0.1 * 1 / (1 + 0.1)
    P = [0.1, 0.0]  # (1 - beta1) * G with m(E) = 0
    s = global_update_fedda_adam(state(), P, [0.1, 0.0], lr=0.1, alpha=1.0, beta1=0.9, beta2=0.99, eps=0.1)
    np.testing.assert_allclose(s.params, [-0.1 / 1.1, 0.0], atol=1e-15)
    assert abs(s.params[0] + 0.0909090909090909) < 1e-15


def test_adam_at_stationary_point_stays():
    s = global_update_fedda_adam(state([2.0, -1.0]), [0, 0], [0, 0], 0.1, 1.0, 0.9, 0.99, 0.1)
    np.testing.assert_array_equal(s.params, [2.0, -1.0])


def test_adagrad_arithmetic():
    P = [0.3, 0.0]  # G = (3, 0) with beta1 = 0.9 and m(E) = 0
    s = global_update_fedda_adagrad(state(), P, [0, 0], lr=1.0, alpha=1.0, beta1=0.9, eps=1.0)
    np.testing.assert_allclose(s.params, [-0.75, 0.0], atol=1e-15)


def test_adagrad_accumulator_never_shrinks():
    rng = np.random.default_rng(1)
    s = state([0.0, 0.0, 0.0])
    for _ in range(20):
        prev = s.second_moment
        m_new = rng.standard_normal(3)
        s = global_update_fedda_adagrad(s, rng.standard_normal(3), m_new, 0.1, 1.0, 0.9, 0.1)
        assert np.all(s.second_moment >= prev)


def test_fedavg_of_identical_models():
    w = np.array([0.25, -3.0])
    W = np.array([1.0, 1.0])
    reps = [report(i, i + 1, step_sum=(W - w) / 0.1, params=w) for i in range(3)]
    s = global_update_fedavg(state(W), reps, lr=0.1)
    np.testing.assert_allclose(s.params, w, atol=1e-14)


def test_fedopt_with_no_movement_keeps_weights():
    s = global_update_fedopt(state([1.0, 2.0]), [report(0, 3), report(1, 5)], "sgdm", server_lr=1.0, lr=0.1)
    np.testing.assert_array_equal(s.params, [1.0, 2.0])


def test_updates_do_not_mutate_inputs():
    s0 = state([1.0, 1.0], m=[0.1, 0.1], v=[0.2, 0.2], E=2)
    snap = [s0.params.copy(), s0.momentum.copy(), s0.second_moment.copy()]
    P, m = np.array([0.5, 0.5]), np.array([0.3, 0.3])
    global_update_fedda_adam(s0, P, m, 0.1, 1.0, 0.9, 0.99, 0.1)
    global_update_fedda_adagrad(s0, P, m, 0.1, 1.0, 0.9, 0.1)
    global_update_fedda_sgdm(s0, P, m, 0.1, 1.0)
    global_update_fedopt(s0, [report(0, 1, [1.0, 1.0])], "adam", 0.1, 0.1)
    for a, b in zip(snap, (s0.params, s0.momentum, s0.second_moment)):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(P, [0.5, 0.5])


def test_non_finite_update_raises():
    with pytest.raises(NonFiniteState):
        global_update_fedda_sgdm(state([1.0]), [np.inf], [0.0], 0.1, 1.0)


def test_fedlocal_single_step_is_damped_fedavg():
    fed, models = fdata.pinned_quadratic_pair()
    s0 = state([0.4, 2.0])
    beta, lr = 0.9, 0.1
    s = fedlocal_restart_round(s0, models, fed.clients, "sgdm", T=1, lr=lr, beta1=beta)
    g = sum(w * m.grad(s0.params, c.full_batch()) for w, m, c in zip(fed.weights, models, fed))
    np.testing.assert_allclose(s.params, s0.params - lr * (1 - beta) * g, atol=1e-15)


def test_fedlocal_adam_first_step_is_bounded_by_lr():
    q = Quadratic(np.eye(3), [10.0, -10.0, 0.5])
    c = fdata._quadratic_clients([4], 3)[0]
    rep = run_restart_local(np.zeros(3), q, c, 1, "adam", 0.05, 4, np.random.default_rng(0))
    g = q.grad(np.zeros(3), c.full_batch())
    np.testing.assert_allclose(rep.params, -0.05 * g / (np.abs(g) + 0.1), atol=1e-15)
    assert np.all(np.abs(rep.params) < 0.05)


def test_fedlocal_restarts_ignore_server_momentum():
    fed, models = fdata.pinned_quadratic_pair()
    a = fedlocal_restart_round(state([1.0, 1.0]), models, fed.clients, "adam", 3, 0.1)
    b = fedlocal_restart_round(state([1.0, 1.0], m=[5.0, 5.0], v=[9.0, 9.0]), models, fed.clients, "adam", 3, 0.1)
    np.testing.assert_array_equal(a.params, b.params)


def test_fedlocal_rejects_unknown_inner_rule():
    fed, models = fdata.pinned_quadratic_pair()
    with pytest.raises(InvalidArgument):
        run_restart_local(np.zeros(2), models[0], fed[0], 1, "adagrad", 0.1, 10, np.random.default_rng(0))
