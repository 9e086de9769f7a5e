"""Kendall's-tau ranking loss for logit distillation, with a desk-scale harness."""
from .errors import (
    CheckpointError,
    ConfigError,
    OracleError,
    ShapeError,
    StaleCacheError,
    SweepError,
    TrainingError,
)
from .losses import (
    KendallBreakdown,
    LossWeights,
    RankingConfig,
    RankingForm,
    Subset,
    SubsetKind,
    ce_gradient,
    combined_gradient,
    combined_loss,
    cross_entropy_loss,
    diff_kendall_tau,
    gradient_profile,
    kendall_tau_exact,
    kl_gradient,
    kl_loss,
    ranking_gradient,
    ranking_loss,
)
from .numeric import finite_difference_gradient, softmax_with_temperature, zscore_normalize

__version__ = "0.1.0"
