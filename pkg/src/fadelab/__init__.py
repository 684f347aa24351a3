"""fadelab: few-layer deep-ensemble Bayesian refinement and adversarial detection."""

__version__ = "0.1.0"
