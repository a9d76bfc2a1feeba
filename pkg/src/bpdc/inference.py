"""E-step posteriors, code-scoring objectives, sparse coding and the theta M-step.

Data batches are stored one datum per column, ``X_batch`` of shape (D, B),
matching the (D, N) layout of whole datasets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NumericError, RefusalError, ShapeError
from .mathcore import LOG_2PI, digamma
from .model import HyperParams, ModelState, decode, project_nonneg
from .network import AdamState, adam_step


@dataclass
class BetaPosteriorBank:
    a: np.ndarray
    b: np.ndarray

    @classmethod
    def prior(cls, hyper: HyperParams) -> BetaPosteriorBank:
        hyper.check_prior()
        return cls(np.full(hyper.K, hyper.prior_a), np.full(hyper.K, hyper.prior_b))

    def expected_pi(self) -> np.ndarray:
        return self.a / (self.a + self.b)

    def copy(self) -> BetaPosteriorBank:
        return BetaPosteriorBank(self.a.copy(), self.b.copy())


@dataclass(frozen=True)
class ScalePosterior:
    mean: float
    var: float


@dataclass
class ActiveMask:
    active: np.ndarray  # bool (K,)

    @classmethod
    def all(cls, K: int) -> ActiveMask:
        return cls(np.ones(K, dtype=bool))

    def copy(self) -> ActiveMask:
        return ActiveMask(self.active.copy())


@dataclass
class SparseCode:
    z: np.ndarray  # int8 (K,)
    active_set: list[int]
    score: float
    trace: list[float] = field(default_factory=list)  # accepted scores, starting with the empty code
    order: list[int] = field(default_factory=list)  # bits in the order they were added


# -- conjugate E-step ---------------------------------------------------------


def update_q_lambda(x, f, hyper: HyperParams) -> ScalePosterior:
    """Gaussian posterior over the per-datum scale given decoded mean direction f."""
    x = np.asarray(x, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(f))):
        raise NumericError("non-finite input to update_q_lambda")
    var = 1.0 / (1.0 / hyper.c + float(f @ f) / hyper.sigma2)
    return ScalePosterior(var * float(f @ x) / hyper.sigma2, var)


def q_lambda_batch(X, F, hyper: HyperParams) -> tuple[np.ndarray, np.ndarray]:
    """Column-wise update_q_lambda for X, F of shape (D, B); returns (means, vars)."""
    ftf = np.einsum("db,db->b", F, F)
    ftx = np.einsum("db,db->b", F, X)
    var = 1.0 / (1.0 / hyper.c + ftf / hyper.sigma2)
    return var * ftx / hyper.sigma2, var


def learning_rate(t: int, tau0: float, kappa: float) -> float:
    return (tau0 + t) ** (-kappa)


def update_q_pi(bank: BetaPosteriorBank, z_batch, N: int, eta: float, hyper: HyperParams) -> BetaPosteriorBank:
    """Natural-gradient step of the Beta posteriors toward rescaled minibatch counts.

    ``z_batch`` has one code per row, shape (|S|, K).
    """
    hyper.check_prior()
    if not 0.0 <= eta <= 1.0:
        raise DomainError(f"step eta must lie in [0, 1], got {eta}")
    Z = np.asarray(z_batch, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] != hyper.K or Z.shape[0] < 1:
        raise ShapeError(f"z_batch must have shape (|S|>=1, {hyper.K}), got {Z.shape}")
    scale = N / Z.shape[0]
    on = Z.sum(axis=0)
    a_target = hyper.prior_a + scale * on
    b_target = hyper.prior_b + scale * (Z.shape[0] - on)
    return BetaPosteriorBank((1.0 - eta) * bank.a + eta * a_target, (1.0 - eta) * bank.b + eta * b_target)


def prune_factors(bank: BetaPosteriorBank, mask: ActiveMask, threshold: float) -> ActiveMask:
    """Deactivate factors whose E[pi_k] fell below ``threshold``; never reactivates."""
    if not 0.0 <= threshold < 1.0:
        raise DomainError("threshold must lie in [0, 1)")
    return ActiveMask(mask.active & ~(bank.expected_pi() < threshold))


# -- objectives ---------------------------------------------------------------


def _marginal_from_stats(ftf, ftx, xtx, D: int, hyper: HyperParams):
    s2 = hyper.sigma2
    cinv = 1.0 / hyper.c
    return -0.5 * (D * (LOG_2PI + math.log(s2)) + np.log1p(ftf / (cinv * s2))
                   + xtx / s2 - ftx * ftx / (s2 * (cinv * s2 + ftf)))


def marginal_loglik(x, f, hyper: HyperParams) -> float:
    """ln N(x; 0, sigma2 I + c f f^T) through the rank-one determinant/inverse identities."""
    x = np.asarray(x, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    return float(_marginal_from_stats(f @ f, f @ x, x @ x, x.size, hyper))


def expected_loglik(x, f, q: ScalePosterior, hyper: HyperParams) -> float:
    """E_q(lambda)[ln N(x; lambda f, sigma2 I)]."""
    x = np.asarray(x, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    r = x - q.mean * f
    return float(-0.5 * (r @ r + q.var * (f @ f)) / hyper.sigma2 - 0.5 * x.size * (LOG_2PI + math.log(hyper.sigma2)))


def prior_log_weights(bank: BetaPosteriorBank) -> tuple[np.ndarray, np.ndarray]:
    """(E[ln pi_k], E[ln(1 - pi_k)]) under the Beta posteriors."""
    total = digamma(bank.a + bank.b)
    return digamma(bank.a) - total, digamma(bank.b) - total


def expected_log_prior(z, bank: BetaPosteriorBank, mask: ActiveMask) -> float:
    """E_q(pi)[ln p(z | pi)] summed over active factors; pruned factors contribute 0."""
    z = np.asarray(z, dtype=np.float64)
    on, off = prior_log_weights(bank)
    terms = z * on + (1.0 - z) * off
    return float(np.sum(terms[mask.active]))


def code_objective(x, z, model: ModelState, bank: BetaPosteriorBank, mask: ActiveMask) -> float:
    """Scale-marginalized score used to choose codes: ln p(x | z) + E[ln p(z | pi)]."""
    return marginal_loglik(x, decode(model, z), model.hyper) + expected_log_prior(z, bank, mask)


def theta_objective(x, z, q: ScalePosterior, model: ModelState, bank: BetaPosteriorBank, mask: ActiveMask) -> float:
    """Score with the scale under its posterior: E_q[ln p(x | z, lambda)] + E[ln p(z | pi)]."""
    return expected_loglik(x, decode(model, z), q, model.hyper) + expected_log_prior(z, bank, mask)


class CodeScorer:
    """Vectorized :func:`code_objective` for many candidate codes of one datum.

    Uses f^T f = xi^T (phi^T phi) xi and f^T x = xi^T (phi^T x) so the D-dimensional
    decode is never materialized.
    """

    def __init__(self, model: ModelState, bank: BetaPosteriorBank, mask: ActiveMask):
        self.model = model
        self.hyper = model.hyper
        self.mask = mask.active.copy()
        self.gram = model.phi.T @ model.phi
        on, off = prior_log_weights(bank)
        on = np.where(self.mask, on, 0.0)
        off = np.where(self.mask, off, 0.0)
        self.prior_slope = on - off
        self.prior_base = float(off.sum())

    def prepare(self, x) -> tuple[np.ndarray, float]:
        x = np.asarray(x, dtype=np.float64)
        return self.model.phi.T @ x, float(x @ x)

    def score(self, Z, prepared) -> np.ndarray:
        """Scores for codes Z of shape (C, K)."""
        phit_x, xtx = prepared
        xi = self.model.net.forward(Z)
        ftf = np.einsum("cm,cm->c", xi @ self.gram, xi)
        ftx = xi @ phit_x
        lik = _marginal_from_stats(ftf, ftx, xtx, self.hyper.D, self.hyper)
        return lik + Z @ self.prior_slope + self.prior_base

    def final_score(self, z, prepared) -> float:
        """Score of one code on its own. Batched matmuls may round a row differently
        depending on its neighbours; reporting this value makes equal codes score equally."""
        return float(self.score(np.asarray(z, dtype=np.float64)[None, :], prepared)[0])


def _make_code(z: np.ndarray, score: float, trace: list[float], order=None) -> SparseCode:
    active = [int(i) for i in np.flatnonzero(z)]
    return SparseCode(z.astype(np.int8), active, float(score), trace, active if order is None else order)


def greedy_sparse_code(x, model: ModelState, bank: BetaPosteriorBank, mask: ActiveMask,
                       scorer: CodeScorer | None = None) -> SparseCode:
    """Greedy forward selection of active bits.

    Starts from the empty code, scored like any other. Each round scores every
    remaining active factor added to the current set, takes the best (lowest
    index on ties) and keeps it only if the score strictly improves. Stops on
    the first rejection or when L_max bits are set.
    """
    scorer = scorer or CodeScorer(model, bank, mask)
    K = model.hyper.K
    prepared = scorer.prepare(x)
    z = np.zeros(K)
    current = float(scorer.score(z[None, :], prepared)[0])
    trace = [current]
    pool = np.flatnonzero(scorer.mask)
    order: list[int] = []
    while len(order) < model.hyper.L_max:
        cand = pool[z[pool] == 0]
        if cand.size == 0:
            break
        Z = np.repeat(z[None, :], cand.size, axis=0)
        Z[np.arange(cand.size), cand] = 1.0
        s = scorer.score(Z, prepared)
        best = int(np.argmax(s))
        if not s[best] > current:
            break
        z[cand[best]] = 1.0
        current = float(s[best])
        trace.append(current)
        order.append(int(cand[best]))
    return _make_code(z, scorer.final_score(z, prepared), trace, order)


def sparse_code_batch(X_batch, model: ModelState, bank: BetaPosteriorBank, mask: ActiveMask,
                      executor=None) -> list[SparseCode]:
    """Greedy codes for every column of ``X_batch``; optional executor maps over data."""
    scorer = CodeScorer(model, bank, mask)
    cols = [X_batch[:, n] for n in range(X_batch.shape[1])]
    if executor is None:
        return [greedy_sparse_code(x, model, bank, mask, scorer) for x in cols]
    return list(executor.map(lambda x: greedy_sparse_code(x, model, bank, mask, scorer), cols))


def exhaustive_sparse_code(x, model: ModelState, bank: BetaPosteriorBank, mask: ActiveMask,
                           K_limit: int = 20, chunk: int = 1 << 15) -> SparseCode:
    """Best code over all subsets of active factors with at most L_max bits.

    Ties go to the lexicographically smallest code vector.
    """
    if K_limit > 20:
        raise RefusalError("K_limit may not exceed 20")
    idx = np.flatnonzero(mask.active)
    if idx.size > K_limit:
        raise RefusalError(f"{idx.size} active factors exceed the exhaustive-search limit {K_limit}")
    K = model.hyper.K
    scorer = CodeScorer(model, bank, mask)
    prepared = scorer.prepare(x)
    patterns = (np.arange(1 << idx.size)[:, None] >> np.arange(idx.size)) & 1
    patterns = patterns[patterns.sum(axis=1) <= model.hyper.L_max]
    Z = np.zeros((patterns.shape[0], K))
    Z[:, idx] = patterns
    scores = np.concatenate([scorer.score(Z[i:i + chunk], prepared) for i in range(0, Z.shape[0], chunk)])
    top = np.flatnonzero(scores == scores.max())
    # lexsort uses its last key as primary: reverse columns so index 0 dominates
    best = top[np.lexsort(Z[top][:, ::-1].T)[0]]
    score = scorer.final_score(Z[best], prepared)
    return _make_code(Z[best], score, [score])


# -- M-step -------------------------------------------------------------------


def theta_gradient(X_batch, Z, means, variances, model: ModelState) -> list[np.ndarray]:
    """Gradient of sum_n expected_loglik w.r.t. model.params(), q(lambda) held fixed.

    ``X_batch`` is (D, B), ``Z`` is (B, K), ``means``/``variances`` have length B.
    """
    s2 = model.hyper.sigma2
    xi, cache = model.net.forward_with_cache(np.asarray(Z, dtype=np.float64).reshape(-1, model.hyper.K))
    F = model.phi @ xi.T  # (D, B)
    mu = np.asarray(means, dtype=np.float64)
    var = np.asarray(variances, dtype=np.float64)
    G = (mu * (X_batch - mu * F) - var * F) / s2  # d objective / d f_n, columns
    grad_phi = G @ xi
    grad_xi = (model.phi.T @ G).T
    return [grad_phi] + model.net.backward(cache, grad_xi)


def m_step_theta(X_batch, codes, q_lambdas, model: ModelState, adam: AdamState, diagnostic: str = ""):
    """One ADAM ascent step on sum_n E_q[ln p(x_n | theta, z_n, lambda_n)]."""
    Z = np.stack([c.z for c in codes]).astype(np.float64)
    means = np.array([q.mean for q in q_lambdas])
    variances = np.array([q.var for q in q_lambdas])
    grads = theta_gradient(X_batch, Z, means, variances, model)
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite theta gradient (batch size {Z.shape[0]}){': ' + diagnostic if diagnostic else ''}")
    adam_step(model.params(), [-g for g in grads], adam, diagnostic)
    project_nonneg(model)
    return model, adam
