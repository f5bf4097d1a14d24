"""Marginal-likelihood empirical Bayes and hierarchical Bayes for nonparametric models."""

__version__ = "0.1.0"

from .errors import ConfigError, NumericalError, ParameterError  # noqa: E402

__all__ = ["ConfigError", "NumericalError", "ParameterError", "__version__"]
