"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible; message names the offending axes."""


class InvariantError(ValueError):
    """A value-level invariant was violated (non-finite data, negative variance, ...)."""


class GraphError(ValueError):
    """A model graph is malformed or an input does not fit it."""


class StateError(RuntimeError):
    """An operation was called in the wrong lifecycle state."""


class FusionError(RuntimeError):
    """A slot cannot be folded into any upstream layer."""


class FormatError(ValueError):
    """A serialized artifact (checkpoint, dataset file, config) is malformed."""


class ConfigError(ValueError):
    """A run configuration is invalid or contains unknown keys."""
