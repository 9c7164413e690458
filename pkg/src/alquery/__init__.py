"""Batch-mode active-learning query engine.

Selects samples to annotate by combining Monte-Carlo predictive variance
with a latent-space representativeness score, and simulates full
active-learning runs on desk-scale pools.
"""

from alquery.bsq import (
    DiagGaussian,
    bsq_log_ratio,
    bsq_scores,
    erf_tail_likelihood,
    fit_diag_gaussian,
    gaussian_product,
    mmd,
    select_bsq,
)
from alquery.errors import (
    AlqueryError,
    ConfigurationError,
    DataError,
    FormatError,
    InsufficientDataError,
    NumericError,
    ShapeError,
    StateError,
)
from alquery.pool import (
    AnnotationState,
    HoldoutSplit,
    QueryBatch,
    SamplePool,
    annotate,
    create_pool,
    split_holdout,
)

__version__ = "0.1.0"

__all__ = [
    "AlqueryError",
    "AnnotationState",
    "ConfigurationError",
    "DataError",
    "DiagGaussian",
    "FormatError",
    "HoldoutSplit",
    "InsufficientDataError",
    "NumericError",
    "QueryBatch",
    "SamplePool",
    "ShapeError",
    "StateError",
    "annotate",
    "bsq_log_ratio",
    "bsq_scores",
    "create_pool",
    "erf_tail_likelihood",
    "fit_diag_gaussian",
    "gaussian_product",
    "mmd",
    "select_bsq",
    "split_holdout",
]
