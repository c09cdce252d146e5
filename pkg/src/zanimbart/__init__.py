"""Zero-inflated count-compositional regression with BART forests."""

__version__ = "0.1.0"

from .distributions import (ZanimLnParams, ZanimParams, marginal_moments, sample_zanim,  # noqa: E402
                            sample_zanim_ln, zanim_logpmf, zanim_pmf)
from .sampler import ModelConfig, PosteriorDraws, predict, run_mcmc  # noqa: E402
from .estimator import ZanimBART  # noqa: E402

__all__ = ["ZanimParams", "ZanimLnParams", "marginal_moments", "sample_zanim",
           "sample_zanim_ln", "zanim_logpmf", "zanim_pmf", "ModelConfig", "PosteriorDraws",
           "predict", "run_mcmc", "ZanimBART", "__version__"]
