"""Exception hierarchy shared across the package."""


class AtisrError(Exception):
    pass


class DimensionError(AtisrError, ValueError):
    """Tensor shapes do not fit the operation."""


class UsageError(AtisrError):
    """An API was called in a state where it cannot work."""


class OptimizerError(AtisrError):
    pass


class ConfigurationError(AtisrError, ValueError):
    """Hyperparameters or configs are inconsistent with each other."""


class DataError(AtisrError, ValueError):
    """Input data violates a precondition (token out of vocabulary, wrong length)."""


class IntegrityError(AtisrError):
    """On-disk artifacts are missing, truncated or inconsistent."""


class GenerationError(AtisrError):
    pass


class TrainingError(AtisrError):
    pass


class MetricError(AtisrError, ValueError):
    pass
