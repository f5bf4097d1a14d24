"""Exception types shared across the package."""


class ParameterError(ValueError):
    """Invalid model, prior or solver parameter."""


class NumericalError(RuntimeError):
    """A numerical routine failed to produce a trustworthy value."""


class ConfigError(ValueError):
    """Malformed experiment configuration."""
