"""Exception hierarchy shared by every module."""


class RopeDistillError(Exception):
    """Base class for all package errors."""


class DimensionError(RopeDistillError, ValueError):
    """Shapes or lengths do not agree."""


class ContractError(RopeDistillError, ValueError):
    """A precondition on an argument or call sequence was violated."""


class InputError(RopeDistillError, ValueError):
    """Token ids or sequence lengths are outside what the model accepts."""


class NumericError(RopeDistillError, FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""


class GenerationError(RopeDistillError, RuntimeError):
    """A synthetic instance could not be laid out under its configuration."""


class EvaluationError(RopeDistillError, RuntimeError):
    """An evaluation could not be aggregated (e.g. an empty depth bin)."""


class ConfigError(RopeDistillError, ValueError):
    """A run configuration violates one or more invariants.

    ``violations`` lists every problem found, not just the first.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))
