"""Stochastic MAP-EM training loop."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError
from .inference import (
    ActiveMask,
    BetaPosteriorBank,
    ScalePosterior,
    learning_rate,
    m_step_theta,
    prior_log_weights,
    prune_factors,
    q_lambda_batch,
    sparse_code_batch,
    update_q_pi,
)
from .mathcore import LOG_2PI, Rng
from .model import ModelState
from .network import AdamState

log = logging.getLogger(__name__)

METRICS_HEADER = ("iter", "eta", "mse", "mean_card", "active_factors", "objective")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 200
    n_iters: int = 10000
    tau0: float = 100.0
    kappa: float = 0.6
    adam_stepsize: float = 1e-3
    seed: int = 0
    log_every: int = 10

    def __post_init__(self):
        if not 0.5 < self.kappa <= 1.0:
            raise ConfigError(f"kappa must lie in (0.5, 1], got {self.kappa}")
        if self.tau0 < 0:
            raise ConfigError("tau0 must be >= 0")
        if self.batch_size < 1 or self.n_iters < 0 or self.log_every < 1:
            raise ConfigError("batch_size and log_every must be >= 1, n_iters >= 0")
        if not self.adam_stepsize > 0:
            raise ConfigError("adam_stepsize must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")


@dataclass
class TrainState:
    """Everything needed to continue a run: parameters, posteriors, optimizer, counter."""

    model: ModelState
    bank: BetaPosteriorBank
    mask: ActiveMask
    adam: AdamState
    iteration: int = 0

    @classmethod
    def fresh(cls, model: ModelState, cfg: TrainConfig) -> TrainState:
        return cls(model, BetaPosteriorBank.prior(model.hyper), ActiveMask.all(model.hyper.K),
                   AdamState.for_params(model.params(), cfg.adam_stepsize))


@dataclass
class IterationInfo:
    """Per-iteration details handed to the ``callback`` of :func:`fit`."""

    iteration: int
    eta: float
    batch: np.ndarray
    codes: list
    mask_before: np.ndarray
    coding_seconds: float
    n_active: int


@dataclass
class FitResult:
    state: TrainState
    metrics: list[tuple] = field(default_factory=list)
    pi_trace: list[tuple[int, np.ndarray]] = field(default_factory=list)

    @property
    def model(self) -> ModelState:
        return self.state.model

    @property
    def bank(self) -> BetaPosteriorBank:
        return self.state.bank


def minibatch(seed: int, t: int, N: int, size: int) -> np.ndarray:
    """Batch indices for iteration t; depends only on (seed, t) so runs can resume."""
    return np.sort(Rng(seed, (t,)).choice(N, size))


def fit(X, model: ModelState, cfg: TrainConfig, state: TrainState | None = None,
        callback=None, workers: int = 1) -> FitResult:
    """Run iterations ``state.iteration + 1 .. cfg.n_iters`` on data X of shape (D, N).

    Passing a ``state`` (e.g. restored from a checkpoint) continues that run;
    otherwise ``model`` is trained in place from the prior. Metrics rows are
    recorded at iterations divisible by ``cfg.log_every``.
    """
    X = np.asarray(X, dtype=np.float64)
    hyper = model.hyper
    D, N = X.shape
    if D != hyper.D:
        raise ConfigError(f"data dimension {D} does not match model D={hyper.D}")
    if cfg.batch_size > N:
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds dataset size {N}")
    hyper.check_prior()
    state = state or TrainState.fresh(model, cfg)
    state.adam.stepsize = cfg.adam_stepsize
    result = FitResult(state)
    executor = ThreadPoolExecutor(workers) if workers > 1 else None
    prev_eta = np.inf
    const = 0.5 * D * (LOG_2PI + np.log(hyper.sigma2))
    try:
        for t in range(state.iteration + 1, cfg.n_iters + 1):
            eta = learning_rate(t, cfg.tau0, cfg.kappa)
            if not 0.0 < eta < prev_eta:
                raise NumericError(f"iteration {t}: learning rate {eta} is not positive and decreasing")
            prev_eta = eta
            idx = minibatch(cfg.seed, t, N, cfg.batch_size)
            Xb = X[:, idx]
            mask_before = state.mask.active.copy()

            tic = time.perf_counter()
            codes = sparse_code_batch(Xb, state.model, state.bank, state.mask, executor)
            coding_seconds = time.perf_counter() - tic

            Z = np.stack([c.z for c in codes]).astype(np.float64)
            F = state.model.phi @ state.model.net.forward(Z).T
            means, variances = q_lambda_batch(Xb, F, hyper)
            resid = Xb - means * F
            sq = np.einsum("db,db->b", resid, resid)
            if not np.all(np.isfinite(sq)):
                raise NumericError(f"iteration {t}: non-finite reconstruction")
            on, off = prior_log_weights(state.bank)
            prior = np.where(state.mask.active, Z * on + (1.0 - Z) * off, 0.0).sum(axis=1)
            objective = float(np.mean(-0.5 * (sq + variances * np.einsum("db,db->b", F, F)) / hyper.sigma2
                                      - const + prior))

            state.bank = update_q_pi(state.bank, Z, N, eta, hyper)
            qs = [ScalePosterior(m, v) for m, v in zip(means, variances)]
            m_step_theta(Xb, codes, qs, state.model, state.adam, diagnostic=f"iteration {t}")
            state.mask = prune_factors(state.bank, state.mask, hyper.prune_threshold)
            state.iteration = t

            if callback is not None:
                callback(IterationInfo(t, eta, idx, codes, mask_before, coding_seconds, int(mask_before.sum())))
            if t % cfg.log_every == 0:
                epi = state.bank.expected_pi()
                row = (t, eta, float(np.mean(sq) / D), float(Z.sum(axis=1).mean()),
                       int(np.sum(epi > 0.01)), objective)
                result.metrics.append(row)
                result.pi_trace.append((t, epi.copy()))
                log.info("iter %d eta %.4g mse %.5g card %.2f active %d obj %.6g", *row)
    finally:
        if executor is not None:
            executor.shutdown()
    return result


def format_metrics_row(row) -> str:
    t, eta, mse, card, active, obj = row
    return f"{t},{eta!r},{mse!r},{card!r},{active},{obj!r}"


def write_metrics_csv(path, rows, append: bool = False):
    with open(path, "a" if append else "w") as fh:
        if not append:
            fh.write(",".join(METRICS_HEADER) + "\n")
        for row in rows:
            fh.write(format_metrics_row(row) + "\n")
