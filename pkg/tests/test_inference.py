import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import (
    brute_force_code,
    dense_marginal,
    expected_loglik_mc,
    lambda_posterior_moments,
    marginal_by_quadrature,
)

from bpdc.checks import random_bank, random_instance
from bpdc.errors import DomainError, InvalidPriorError, NumericError, RefusalError
from bpdc.inference import (
    ActiveMask,
    BetaPosteriorBank,
    CodeScorer,
    ScalePosterior,
    SparseCode,
    code_objective,
    exhaustive_sparse_code,
    expected_log_prior,
    expected_loglik,
    greedy_sparse_code,
    learning_rate,
    m_step_theta,
    marginal_loglik,
    prune_factors,
    theta_gradient,
    update_q_lambda,
    update_q_pi,
)
from bpdc.mathcore import Rng, log_gaussian_diag
from bpdc.model import HyperParams, ModelState, decode
from bpdc.network import AdamState, MultiplexerNet


def hp(D=4, sigma2=1.0, c=1.0, K=2, **kw):
    return HyperParams(K=K, M=2, D=D, sigma2=sigma2, c=c, **kw)


# -- q(lambda) ----------------------------------------------------------------


def test_q_lambda_prior_when_f_zero():
    q = update_q_lambda([1.0, -2.0], [0.0, 0.0], hp(D=2, c=3.0))
    assert q.var == pytest.approx(3.0) and q.mean == 0.0


def test_q_lambda_worked_example():
    q = update_q_lambda([2.0, 5.0], [1.0, 0.0], hp(D=2))
    mean, var = lambda_posterior_moments([2.0, 5.0], [1.0, 0.0], 1.0, 1.0)
    assert abs(mean - 1.0) <= 1e-6 and abs(var - 0.5) <= 1e-6
    assert q.var == pytest.approx(0.5, abs=1e-15)
    assert q.mean == pytest.approx(1.0, abs=1e-15)


def test_q_lambda_flat_prior_gives_least_squares_scale():
    r = Rng(4)
    x, f = r.normal(6), r.normal(6)
    q = update_q_lambda(x, f, hp(D=6, c=1e15, sigma2=2.0))
    assert q.mean == pytest.approx((f @ x) / (f @ f), rel=1e-6)


def test_q_lambda_variance_bounded_by_prior():
    r = Rng(5)
    for i in range(20):
        c = float(0.1 + 10 * r.uniform())
        q = update_q_lambda(r.normal(3), r.normal(3), hp(D=3, c=c))
        assert 0 < q.var <= c


def test_q_lambda_non_finite():
    with pytest.raises(NumericError):
        update_q_lambda([np.nan, 0.0], [1.0, 0.0], hp(D=2))


def test_posterior_mean_is_vertex_of_expected_loglik():
    # E_q[ln p] as a function of q.mean is a concave quadratic; with the prior term
    # -mean^2/(2c) added its vertex is the conjugate posterior mean
    r = Rng(6)
    x, f = r.normal(5), r.normal(5)
    h = hp(D=5, sigma2=0.7, c=2.0)
    q = update_q_lambda(x, f, h)

    def obj(m):
        return expected_loglik(x, f, ScalePosterior(m, q.var), h) - 0.5 * m * m / h.c

    a, b, c0 = np.polyfit([q.mean - 1, q.mean, q.mean + 1], [obj(q.mean - 1), obj(q.mean), obj(q.mean + 1)], 2)
    assert -b / (2 * a) == pytest.approx(q.mean, rel=1e-9)


# -- q(pi) --------------------------------------------------------------------


def test_q_pi_full_batch_worked_example():
    h = hp(K=2, alpha=1.0, gamma=1.0)
    Z = np.array([[1, 0], [1, 1], [1, 0], [1, 0]])
    bank = update_q_pi(BetaPosteriorBank.prior(h), Z, N=4, eta=1.0, hyper=h)
    assert bank.a[0] == pytest.approx(4.5) and bank.b[0] == pytest.approx(0.5)


def test_q_pi_zero_step_is_identity():
    h = hp(K=3)
    bank = BetaPosteriorBank(np.array([1.0, 2.0, 3.0]), np.array([4.0, 5.0, 6.0]))
    new = update_q_pi(bank, np.ones((2, 3)), N=10, eta=0.0, hyper=h)
    np.testing.assert_array_equal(new.a, bank.a)
    np.testing.assert_array_equal(new.b, bank.b)


def test_q_pi_all_zero_codes():
    h = hp(K=4, alpha=2.0, gamma=1.0)
    new = update_q_pi(BetaPosteriorBank.prior(h), np.zeros((5, 4)), N=50, eta=1.0, hyper=h)
    np.testing.assert_allclose(new.a, h.prior_a)
    np.testing.assert_allclose(new.b, h.prior_b + 50)


def test_q_pi_errors():
    with pytest.raises(InvalidPriorError):
        update_q_pi(BetaPosteriorBank(np.ones(2), np.ones(2)), np.zeros((1, 2)), 1, 0.5, hp(K=2, gamma=2.0))
    with pytest.raises(DomainError):
        update_q_pi(BetaPosteriorBank(np.ones(2), np.ones(2)), np.zeros((1, 2)), 1, 1.5, hp(K=2))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.01, 1.0))
def test_q_pi_stays_positive(seed, eta):
    h = hp(K=5, gamma=2.0)
    r = Rng(seed)
    bank = BetaPosteriorBank.prior(h)
    for _ in range(3):
        bank = update_q_pi(bank, r.bernoulli(np.full((4, 5), 0.5)), 40, eta, h)
    assert np.all(bank.a > 0) and np.all(bank.b > 0)
    assert np.all((bank.expected_pi() > 0) & (bank.expected_pi() < 1))


def test_learning_rate_schedule():
    etas = [learning_rate(t, 100.0, 0.6) for t in range(1, 1000)]
    assert all(e > 0 for e in etas)
    assert all(b < a for a, b in zip(etas, etas[1:]))
    assert learning_rate(1, 0.0, 0.7) == 1.0


# -- marginal and expected likelihood -------------------------------------------


def test_marginal_with_zero_f_is_plain_gaussian():
    r = Rng(1)
    x = r.normal(5)
    h = hp(D=5, sigma2=1.7, c=4.0)
    assert marginal_loglik(x, np.zeros(5), h) == pytest.approx(log_gaussian_diag(x, np.zeros(5), 1.7), rel=1e-14)


def test_marginal_dense_example():
    r = Rng(2)
    x, f = r.normal(3), r.normal(3)
    h = hp(D=3, sigma2=2.0, c=5.0)
    assert marginal_loglik(x, f, h) == pytest.approx(dense_marginal(x, f, 2.0, 5.0), rel=1e-10)


def test_marginal_scaling_symmetry():
    r = Rng(3)
    x, f = r.normal(6), r.normal(6)
    a = marginal_loglik(x, f, hp(D=6, sigma2=0.8, c=2.0))
    b = marginal_loglik(x, 3 * f, hp(D=6, sigma2=0.8, c=2.0 / 9))
    assert a == pytest.approx(b, rel=1e-10)


def test_marginal_matches_quadrature():
    r = Rng(7)
    for i in range(10):
        D = 1 + i % 8
        x, f = r.normal(D), r.normal(D)
        s2, c = 0.3 + r.uniform(), 0.5 + 3 * r.uniform()
        val = marginal_loglik(x, f, hp(D=D, sigma2=s2, c=c))
        assert val == pytest.approx(marginal_by_quadrature(x, f, s2, c), rel=1e-6)


def test_expected_loglik_point_mass():
    r = Rng(4)
    x, f = r.normal(4), r.normal(4)
    h = hp(D=4, sigma2=0.5)
    assert expected_loglik(x, f, ScalePosterior(1.3, 0.0), h) == pytest.approx(
        log_gaussian_diag(x, 1.3 * f, 0.5), rel=1e-14)


def test_expected_loglik_independent_of_q_when_f_zero():
    x = Rng(5).normal(4)
    h = hp(D=4)
    a = expected_loglik(x, np.zeros(4), ScalePosterior(3.0, 2.0), h)
    b = expected_loglik(x, np.zeros(4), ScalePosterior(-1.0, 0.1), h)
    assert a == b


def test_expected_loglik_monte_carlo():
    r = Rng(6)
    x, f = r.normal(4), r.normal(4)
    q = ScalePosterior(0.7, 0.4)
    est, se = expected_loglik_mc(x, f, q.mean, q.var, 0.9, seed=1)
    assert abs(expected_loglik(x, f, q, hp(D=4, sigma2=0.9)) - est) <= 3 * se


# -- expected log prior ---------------------------------------------------------


def test_expected_log_prior_uniform_bank():
    K = 5
    bank = BetaPosteriorBank(np.ones(K), np.ones(K))
    mask = ActiveMask.all(K)
    assert expected_log_prior(np.zeros(K), bank, mask) == pytest.approx(-K, abs=1e-12)
    assert expected_log_prior([1, 0, 1, 1, 0], bank, mask) == pytest.approx(-K, abs=1e-12)


def test_expected_log_prior_single_factor():
    bank = BetaPosteriorBank(np.array([3.0]), np.array([1.0]))
    assert expected_log_prior([1], bank, ActiveMask.all(1)) == pytest.approx(-1 / 3, abs=1e-12)


def test_expected_log_prior_ignores_pruned():
    bank = BetaPosteriorBank(np.array([3.0, 1.0]), np.array([1.0, 1.0]))
    mask = ActiveMask(np.array([True, False]))
    assert expected_log_prior([1, 1], bank, mask) == pytest.approx(-1 / 3, abs=1e-12)


# -- sparse coding ----------------------------------------------------------------


def test_code_scorer_matches_scalar_objective():
    r = Rng(3)
    model = random_instance(r, 6, 5, 9)
    bank = random_bank(r.substream(1), 6)
    mask = ActiveMask(np.array([True, True, False, True, True, True]))
    x = r.substream(2).normal(9)
    scorer = CodeScorer(model, bank, mask)
    Z = r.substream(3).bernoulli(np.full((10, 6), 0.5)).astype(float)
    fast = scorer.score(Z, scorer.prepare(x))
    slow = [code_objective(x, z, model, bank, mask) for z in Z]
    np.testing.assert_allclose(fast, slow, rtol=1e-12)


def test_greedy_returns_empty_code_under_vanishing_prior():
    K = 8
    r = Rng(21)
    model = random_instance(r, K, 5, 12)
    bank = BetaPosteriorBank(np.full(K, 1e-6), np.full(K, 1e6))
    mask = ActiveMask.all(K)
    for i in range(5):
        x = 0.1 * r.substream(i).normal(12)
        code = greedy_sparse_code(x, model, bank, mask)
        assert code.active_set == []
        best_z, _ = brute_force_code(x, model, bank, mask)
        assert not np.any(best_z)


def test_greedy_finds_planted_bit_first():
    K, D = 6, 20
    r = Rng(8)
    h = HyperParams(K=K, M=8, D=D, sigma2=0.01, c=1e15)
    model = ModelState.initialize(h, r, hidden=(10,))
    for w in model.net.weights:
        w *= 4.0
    bank = BetaPosteriorBank(np.full(K, 1.0), np.full(K, 1.0))
    mask = ActiveMask.all(K)
    j = 3
    e = np.zeros(K)
    e[j] = 1
    x = 50.0 * decode(model, e)
    per_candidate = [code_objective(x, np.eye(K)[k], model, bank, mask) for k in range(K)]
    assert int(np.argmax(per_candidate)) == j
    code = greedy_sparse_code(x, model, bank, mask)
    assert code.order[0] == j and j in code.active_set


def test_greedy_monotone_and_bounded_by_exhaustive():
    K = 8
    for i in range(40):
        r = Rng(300 + i)
        model = random_instance(r, K, 6, 10)
        bank = random_bank(r.substream(1), K)
        mask = ActiveMask.all(K)
        x = r.substream(2).normal(10)
        g = greedy_sparse_code(x, model, bank, mask)
        e = exhaustive_sparse_code(x, model, bank, mask)
        assert g.score <= e.score
        assert all(b > a for a, b in zip(g.trace, g.trace[1:]))
        assert g.score == pytest.approx(code_objective(x, g.z, model, bank, mask), rel=1e-12)


def test_greedy_respects_L_max_and_mask():
    K = 6
    r = Rng(9)
    h = HyperParams(K=K, M=5, D=10, sigma2=0.01, c=1e15, L_max=2)
    model = ModelState.initialize(h, r, hidden=(7,))
    bank = BetaPosteriorBank(np.full(K, 5.0), np.full(K, 1.0))
    mask = ActiveMask(np.array([True, False, True, True, False, True]))
    for i in range(20):
        code = greedy_sparse_code(r.substream(i).normal(10) * 5, model, bank, mask)
        assert len(code.active_set) <= 2
        assert code.z[1] == 0 and code.z[4] == 0
        assert code.active_set == sorted(code.order)


def test_exhaustive_single_bit():
    h = HyperParams(K=1, M=3, D=4, gamma=0.5, sigma2=0.5, c=2.0)
    model = ModelState.initialize(h, Rng(1), hidden=(3,))
    bank = BetaPosteriorBank(np.array([0.7]), np.array([0.4]))
    mask = ActiveMask.all(1)
    x = Rng(2).normal(4)
    s0 = code_objective(x, [0.0], model, bank, mask)
    s1 = code_objective(x, [1.0], model, bank, mask)
    code = exhaustive_sparse_code(x, model, bank, mask)
    assert code.z[0] == int(s1 > s0)
    assert code.score == pytest.approx(max(s0, s1), rel=1e-12)


def test_exhaustive_matches_brute_force():
    K = 6
    for i in range(50):
        r = Rng(500 + i)
        model = random_instance(r, K, 4, 7)
        bank = random_bank(r.substream(1), K)
        mask = ActiveMask(r.substream(3).uniform(K) > 0.2)
        x = r.substream(2).normal(7)
        best_z, best_s = brute_force_code(x, model, bank, mask)
        code = exhaustive_sparse_code(x, model, bank, mask)
        assert code.score == pytest.approx(best_s, rel=1e-12)
        np.testing.assert_array_equal(code.z, best_z)


def test_exhaustive_ties_pick_lexicographically_smallest():
    # zero network and dictionary: every code has the same likelihood; a flat bank makes all priors equal
    h = HyperParams(K=3, M=2, D=2, sigma2=1.0, c=1.0)
    model = ModelState(np.zeros((2, 2)), MultiplexerNet.zeros([3, 2]), h)
    bank = BetaPosteriorBank(np.ones(3), np.ones(3))
    code = exhaustive_sparse_code(np.ones(2), model, bank, ActiveMask.all(3))
    assert code.active_set == []


def test_exhaustive_refuses_large_problems():
    h = HyperParams(K=12, M=2, D=2)
    model = ModelState.initialize(h, Rng(0), hidden=(2,))
    bank = BetaPosteriorBank.prior(h)
    with pytest.raises(RefusalError):
        exhaustive_sparse_code(np.zeros(2), model, bank, ActiveMask.all(12), K_limit=10)
    with pytest.raises(RefusalError):
        exhaustive_sparse_code(np.zeros(2), model, bank, ActiveMask.all(12), K_limit=21)


# -- M-step -------------------------------------------------------------------------


def _objective(model, X, Z, means, variances):
    return sum(expected_loglik(X[:, n], decode(model, Z[n]), ScalePosterior(means[n], variances[n]), model.hyper)
               for n in range(X.shape[1]))


def _fd(model, params, X, Z, means, variances, h=1e-6):
    out = []
    for p in params:
        g = np.zeros_like(p)
        for j in np.ndindex(p.shape):
            old = p[j]
            p[j] = old + h
            up = _objective(model, X, Z, means, variances)
            p[j] = old - h
            down = _objective(model, X, Z, means, variances)
            p[j] = old
            g[j] = (up - down) / (2 * h)
        out.append(g)
    return out


def test_m_step_at_optimum_leaves_parameters():
    r = Rng(1)
    model = random_instance(r, 3, 4, 5)
    Z = r.bernoulli(np.full((4, 3), 0.5)).astype(float)
    lam = r.normal(4)
    X = (lam[:, None] * decode(model, Z)).T
    codes = [SparseCode(z.astype(np.int8), list(np.flatnonzero(z)), 0.0) for z in Z]
    qs = [ScalePosterior(float(m), 0.0) for m in lam]
    grads = theta_gradient(X, Z, lam, np.zeros(4), model)
    assert np.max(np.abs(grads[0])) <= 1e-12
    before = [p.copy() for p in model.params()]
    adam = AdamState.for_params(model.params())
    m_step_theta(X, codes, qs, model, adam)
    for b, a in zip(before, model.params()):
        np.testing.assert_allclose(a, b, atol=1e-9)


def test_dictionary_gradient_with_frozen_net():
    r = Rng(2)
    model = random_instance(r, 3, 4, 6)
    X = r.substream(1).normal((6, 1))
    Z = np.array([[1.0, 0.0, 1.0]])
    means, variances = np.array([0.8]), np.array([0.3])
    g = theta_gradient(X, Z, means, variances, model)[0]
    num = _fd(model, [model.phi], X, Z, means, variances)[0]
    assert np.max(np.abs(g - num)) <= 1e-5 * np.max(np.abs(num))


def test_full_theta_gradient_matches_finite_differences():
    r = Rng(3)
    model = random_instance(r, 3, 4, 5)
    X = r.substream(1).normal((5, 3))
    Z = r.substream(2).bernoulli(np.full((3, 3), 0.5)).astype(float)
    means, variances = r.substream(3).normal(3), 0.2 + r.substream(4).uniform(3)
    grads = theta_gradient(X, Z, means, variances, model)
    nums = _fd(model, model.params(), X, Z, means, variances)
    for g, n in zip(grads, nums):
        assert np.max(np.abs(g - n)) <= 1e-4 * max(np.max(np.abs(n)), 1e-8)


def test_m_step_improves_objective_and_projects():
    r = Rng(4)
    h = HyperParams(K=3, M=4, D=5, sigma2=0.5, c=4.0, nonneg_dict=True)
    model = ModelState.initialize(h, r, hidden=(5,))
    X = np.abs(r.substream(1).normal((5, 6)))
    Z = r.substream(2).bernoulli(np.full((6, 3), 0.5)).astype(float)
    codes = [SparseCode(z.astype(np.int8), list(np.flatnonzero(z)), 0.0) for z in Z]
    F = decode(model, Z)
    qs = [update_q_lambda(X[:, n], F[n], h) for n in range(6)]
    means = np.array([q.mean for q in qs])
    variances = np.array([q.var for q in qs])
    start = _objective(model, X, Z, means, variances)
    adam = AdamState.for_params(model.params(), stepsize=1e-2)
    for _ in range(20):
        m_step_theta(X, codes, qs, model, adam)
        assert np.all(model.phi >= 0)
    assert _objective(model, X, Z, means, variances) > start
    assert adam.t == 20


# -- pruning --------------------------------------------------------------------------


def test_prune_zero_threshold_keeps_mask():
    bank = BetaPosteriorBank(np.array([1e-9, 1.0]), np.array([1.0, 1.0]))
    mask = ActiveMask(np.array([True, False]))
    np.testing.assert_array_equal(prune_factors(bank, mask, 0.0).active, mask.active)


def test_prune_example_and_idempotence():
    bank = BetaPosteriorBank(np.array([1.0, 1.0]), np.array([1.0, 999.0]))
    once = prune_factors(bank, ActiveMask.all(2), 0.01)
    np.testing.assert_array_equal(once.active, [True, False])
    np.testing.assert_array_equal(prune_factors(bank, once, 0.01).active, once.active)


def test_prune_never_reactivates():
    mask = ActiveMask(np.array([False, True]))
    bank = BetaPosteriorBank(np.array([10.0, 10.0]), np.array([1.0, 1.0]))
    assert not prune_factors(bank, mask, 0.5).active[0]
