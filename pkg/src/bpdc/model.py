"""Generative model: hyperparameters, dictionary, decoding and ancestral sampling."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DomainError, InvalidPriorError, ShapeError
from .mathcore import Rng
from .network import MultiplexerNet


@dataclass(frozen=True)
class HyperParams:
    alpha: float = 1.0
    gamma: float = 1.0
    sigma2: float = 100.0
    c: float = 1e15
    K: int = 75
    M: int = 256
    D: int = 784
    L_max: int | None = None  # None means no cap (= K)
    prune_threshold: float = 1e-3
    nonneg_dict: bool = False

    def __post_init__(self):
        if self.L_max is None:
            object.__setattr__(self, "L_max", self.K)
        for name in ("alpha", "gamma", "sigma2", "c"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise DomainError(f"{name} must be a positive finite number, got {v}")
        for name in ("K", "M", "D"):
            if int(getattr(self, name)) < 1:
                raise DomainError(f"{name} must be >= 1")
        if not 1 <= self.L_max <= self.K:
            raise DomainError(f"L_max must lie in [1, K={self.K}], got {self.L_max}")
        if not 0.0 <= self.prune_threshold < 1.0:
            raise DomainError("prune_threshold must lie in [0, 1)")

    @property
    def prior_a(self) -> float:
        return self.alpha * self.gamma / self.K

    @property
    def prior_b(self) -> float:
        return self.alpha * (1.0 - self.gamma / self.K)

    def check_prior(self):
        if not self.gamma < self.K:
            raise InvalidPriorError(f"Beta prior needs gamma < K (gamma={self.gamma}, K={self.K})")

    def with_(self, **kw) -> HyperParams:
        return replace(self, **kw)


@dataclass
class ModelState:
    phi: np.ndarray  # (D, M)
    net: MultiplexerNet
    hyper: HyperParams

    def __post_init__(self):
        h = self.hyper
        if self.phi.shape != (h.D, h.M):
            raise ShapeError(f"phi has shape {self.phi.shape}, expected ({h.D}, {h.M})")
        if self.net.n_in != h.K or self.net.n_out != h.M:
            raise ShapeError(f"network maps {self.net.n_in} -> {self.net.n_out}, expected {h.K} -> {h.M}")

    @classmethod
    def initialize(cls, hyper: HyperParams, rng: Rng, hidden=(100, 100), activation: str = "tanh") -> ModelState:
        """Random dictionary ~ N(0, 1/D) and a freshly initialized network."""
        net = MultiplexerNet.initialize([hyper.K, *hidden, hyper.M], rng.substream(1), activation)
        phi = rng.substream(2).normal((hyper.D, hyper.M)) / np.sqrt(hyper.D)
        model = cls(phi, net, hyper)
        return project_nonneg(model)

    def copy(self) -> ModelState:
        return ModelState(self.phi.copy(), self.net.copy(), self.hyper)

    def params(self) -> list[np.ndarray]:
        """theta in optimizer order: dictionary first, then the network."""
        return [self.phi] + self.net.params()


def decode(model: ModelState, z) -> np.ndarray:
    """f = phi @ E[xi] for one code (K,) -> (D,) or a batch (B, K) -> (B, D)."""
    xi = model.net.forward(z)
    return xi @ model.phi.T


def project_nonneg(model: ModelState) -> ModelState:
    """Clamp dictionary entries at zero when the non-negative variant is on (in place)."""
    if model.hyper.nonneg_dict:
        np.maximum(model.phi, 0.0, out=model.phi)
    return model


@dataclass
class SampledData:
    X: np.ndarray  # (D, n)
    Z: np.ndarray  # (K, n) binary
    lam: np.ndarray  # (n,)
    pi: np.ndarray  # (K,)


def sample_dataset(model: ModelState, n: int, rng: Rng, c_sample: float = 1.0,
                   pi=None, dirichlet_scale: float | None = None) -> SampledData:
    """Ancestral sampling from the generative model.

    ``pi`` overrides the Beta draw of the feature probabilities. ``xi`` is taken
    at its mean unless ``dirichlet_scale`` is given, in which case
    xi ~ Dirichlet(scale * E[xi] + 1e-8).
    """
    h = model.hyper
    h.check_prior()
    if n < 1:
        raise DomainError("n must be >= 1")
    if pi is None:
        pi = rng.substream(0).beta(h.prior_a, h.prior_b, size=h.K)
    else:
        pi = np.asarray(pi, dtype=np.float64)
        if pi.shape != (h.K,):
            raise ShapeError(f"pi must have length K={h.K}")
    Z = rng.substream(1).bernoulli(np.broadcast_to(pi, (n, h.K)))
    xi = model.net.forward(Z)
    if dirichlet_scale is not None:
        r = rng.substream(4)
        xi = np.stack([r.dirichlet(dirichlet_scale * row + 1e-8) for row in xi])
    lam = rng.substream(2).normal(n) * np.sqrt(c_sample)
    mean = lam[:, None] * (xi @ model.phi.T)
    X = mean + rng.substream(3).normal(mean.shape) * np.sqrt(h.sigma2)
    return SampledData(X.T.copy(), Z.T.copy(), lam, pi)
