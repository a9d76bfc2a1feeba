"""Self-checks run by the ``gradcheck`` and ``oracle`` subcommands.

Each check draws random small instances from a seeded stream and compares a
fast path against a slow independent computation. Only numpy is required.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .inference import (
    ActiveMask,
    BetaPosteriorBank,
    ScalePosterior,
    exhaustive_sparse_code,
    expected_loglik,
    greedy_sparse_code,
    marginal_loglik,
    theta_gradient,
    update_q_lambda,
    update_q_pi,
)
from .mathcore import LOG_2PI, Rng
from .model import HyperParams, ModelState, decode


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def random_instance(rng: Rng, K: int, M: int, D: int, sigma2: float = 0.5, c: float = 4.0,
                    hidden=(5,)) -> ModelState:
    h = HyperParams(K=K, M=M, D=D, sigma2=sigma2, c=c)
    model = ModelState.initialize(h, rng, hidden=hidden)
    for w in model.net.weights:
        w *= 2.0
    for b in model.net.biases:
        b[:] = rng.normal(b.shape) * 0.3
    return model


def random_bank(rng: Rng, K: int) -> BetaPosteriorBank:
    return BetaPosteriorBank(0.1 + 3.0 * rng.uniform(K), 0.1 + 3.0 * rng.uniform(K))


def _theta_objective(model, X, Z, means, variances):
    total = 0.0
    for n in range(X.shape[1]):
        total += expected_loglik(X[:, n], decode(model, Z[n]), ScalePosterior(means[n], variances[n]), model.hyper)
    return total


def gradient_check(seed: int = 0, n_instances: int = 5, h: float = 1e-6, tol: float = 1e-4) -> CheckResult:
    """Central finite differences of the theta objective against the analytic gradient."""
    rng = Rng(seed)
    worst = 0.0
    for i in range(n_instances):
        r = rng.substream(i)
        K, M, D = 3, 4, 5
        model = random_instance(r, K, M, D)
        B = 3
        X = r.substream(10).normal((D, B))
        Z = r.substream(11).bernoulli(np.full((B, K), 0.5)).astype(np.float64)
        means = r.substream(12).normal(B)
        variances = 0.1 + r.substream(13).uniform(B)
        grads = theta_gradient(X, Z, means, variances, model)
        for p, g in zip(model.params(), grads):
            num = np.zeros_like(p)
            for j in np.ndindex(p.shape):
                old = p[j]
                p[j] = old + h
                up = _theta_objective(model, X, Z, means, variances)
                p[j] = old - h
                down = _theta_objective(model, X, Z, means, variances)
                p[j] = old
                num[j] = (up - down) / (2 * h)
            err = np.max(np.abs(num - g)) / max(np.max(np.abs(num)), 1e-8)
            worst = max(worst, err)
    return CheckResult("theta gradient vs finite differences", worst <= tol, f"max rel err {worst:.2e} (tol {tol:g})")


def greedy_vs_exhaustive(seed: int = 0, n_instances: int = 50, K: int = 8) -> CheckResult:
    rng = Rng(seed)
    hits, violations = 0, 0
    for i in range(n_instances):
        r = rng.substream(i)
        model = random_instance(r, K, 6, 10)
        bank = random_bank(r.substream(20), K)
        mask = ActiveMask.all(K)
        x = r.substream(21).normal(10)
        g = greedy_sparse_code(x, model, bank, mask)
        e = exhaustive_sparse_code(x, model, bank, mask)
        if g.score > e.score or any(b <= a for a, b in zip(g.trace, g.trace[1:])):
            violations += 1
        hits += g.score == e.score
    return CheckResult("greedy <= exhaustive, strictly increasing steps", violations == 0,
                       f"{violations} violations, optimum reached on {hits}/{n_instances}")


def q_pi_conjugacy(seed: int = 0, n_instances: int = 20) -> CheckResult:
    rng = Rng(seed)
    worst = 0.0
    for i in range(n_instances):
        r = rng.substream(i)
        K, N = 5, 12
        h = HyperParams(K=K, M=2, D=2)
        Z = r.bernoulli(np.full((N, K), 0.4))
        bank = update_q_pi(BetaPosteriorBank(r.uniform(K) + 0.5, r.uniform(K) + 0.5), Z, N, 1.0, h)
        worst = max(worst, np.max(np.abs(bank.a - (h.prior_a + Z.sum(0)))),
                    np.max(np.abs(bank.b - (h.prior_b + N - Z.sum(0)))))
    return CheckResult("q(pi) full-batch step equals conjugate posterior", worst <= 1e-12, f"max abs err {worst:.1e}")


def marginal_dense(seed: int = 0, n_instances: int = 20) -> CheckResult:
    rng = Rng(seed)
    worst = 0.0
    for i in range(n_instances):
        r = rng.substream(i)
        D = 6
        s2, c = 0.2 + r.uniform(), 0.5 + 5 * r.uniform()
        x, f = r.normal(D), r.normal(D)
        cov = s2 * np.eye(D) + c * np.outer(f, f)
        _, logdet = np.linalg.slogdet(cov)
        dense = -0.5 * (D * LOG_2PI + logdet + x @ np.linalg.solve(cov, x))
        fast = marginal_loglik(x, f, HyperParams(K=1, M=1, D=D, sigma2=s2, c=c, gamma=0.5))
        worst = max(worst, abs(fast - dense) / abs(dense))
    return CheckResult("marginal likelihood vs dense covariance", worst <= 1e-10, f"max rel err {worst:.1e}")


def q_lambda_quadrature(seed: int = 0, n_instances: int = 20) -> CheckResult:
    rng = Rng(seed)
    worst = 0.0
    for i in range(n_instances):
        r = rng.substream(i)
        D = 4
        s2, c = 0.2 + r.uniform(), 0.5 + 5 * r.uniform()
        x, f = r.normal(D), r.normal(D)
        h = HyperParams(K=1, M=1, D=D, sigma2=s2, c=c, gamma=0.5)
        q = update_q_lambda(x, f, h)
        # grid placed from the data alone: least-squares scale +- 12 likelihood widths
        centre, width = (f @ x) / (f @ f), 12.0 * np.sqrt(s2 / (f @ f))
        grid = np.linspace(centre - width, centre + width, 40001)
        resid = x[None, :] - grid[:, None] * f[None, :]
        logw = -0.5 * np.sum(resid ** 2, axis=1) / s2 - 0.5 * grid ** 2 / c
        w = np.exp(logw - logw.max())
        w /= w.sum()
        mean = w @ grid
        var = w @ (grid - mean) ** 2
        worst = max(worst, abs(mean - q.mean) / max(abs(q.mean), 1e-3), abs(var - q.var) / q.var)
    return CheckResult("q(lambda) vs grid integration", worst <= 1e-6, f"max rel err {worst:.1e}")


def oracle_suite(seed: int = 0, K: int = 8) -> list[CheckResult]:
    return [greedy_vs_exhaustive(seed, K=K), q_pi_conjugacy(seed), marginal_dense(seed), q_lambda_quadrature(seed)]

