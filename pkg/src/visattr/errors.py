"""Exception and warning types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(RuntimeError):
    """An operation was called outside its documented contract."""


class UndefinedMetricError(ValueError):
    """A metric has no defined value for the given inputs (e.g. single-class AUC)."""


class ManifestError(ValueError):
    """A dataset manifest failed to parse or validate."""


class ConfigError(ValueError):
    """A run configuration failed validation."""


class NumericFailure(RuntimeError):
    """A non-finite value was produced where finite values are required."""


class DegeneracyWarning(UserWarning):
    """A degenerate input was handled by a documented fallback (epsilon norm, uniform histogram)."""


class TieWarning(UserWarning):
    """A ranking decision was resolved by the stable lowest-index tie rule."""
