"""Deep generative factor analysis with a finite beta-Bernoulli process prior,
trained by stochastic MAP-EM with greedy binary sparse coding."""

from .errors import (
    BPDCError,
    ConfigError,
    DomainError,
    FormatError,
    IncompatibleVersionError,
    InvalidPriorError,
    NumericError,
    RefusalError,
    ShapeError,
    StateError,
)
from .inference import (
    ActiveMask,
    BetaPosteriorBank,
    ScalePosterior,
    SparseCode,
    code_objective,
    exhaustive_sparse_code,
    expected_log_prior,
    expected_loglik,
    greedy_sparse_code,
    m_step_theta,
    marginal_loglik,
    prune_factors,
    theta_gradient,
    theta_objective,
    update_q_lambda,
    update_q_pi,
)
from .mathcore import Rng, digamma, log_gaussian_diag, softmax
from .model import HyperParams, ModelState, decode, project_nonneg, sample_dataset
from .network import AdamState, MultiplexerNet, adam_step
from .training import TrainConfig, TrainState, fit

__version__ = "0.1.0"
