"""Exception types shared across the package."""


class FormatError(ValueError):
    """A file does not conform to its declared on-disk format."""


class DataError(ValueError):
    """File parsed but the contents violate a data invariant."""


class TrainingError(RuntimeError):
    """Training hit a non-recoverable numerical problem."""


class EvaluationError(RuntimeError):
    """Evaluation inputs admit no meaningful metric."""
