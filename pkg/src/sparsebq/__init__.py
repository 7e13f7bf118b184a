"""Post-process Bayesian inference with a sparse GP surrogate.

Recycles existing log-density evaluations into a sparse variational GP,
refines the surrogate with a small budget of actively selected evaluations,
and returns a mixture-of-Gaussians posterior with an ELBO estimate of the
log marginal likelihood.
"""

from .dataset import (
    Dataset,
    Evaluation,
    IngestError,
    NoiseShapeConfig,
    TrimConfig,
    apply_noise_shaping,
    ingest,
    shape_noise,
    trim,
)
from .kernel import KernelHyperparams, default_hyperparams, log_hyperprior
from ._linalg import ConditioningError

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "Evaluation",
    "IngestError",
    "NoiseShapeConfig",
    "TrimConfig",
    "apply_noise_shaping",
    "ingest",
    "shape_noise",
    "trim",
    "KernelHyperparams",
    "default_hyperparams",
    "log_hyperprior",
    "ConditioningError",
    "__version__",
]
