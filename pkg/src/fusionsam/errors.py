"""Exception taxonomy shared by all fusionsam modules.

Each class maps to one CLI exit code: usage/config/contract/dimension
problems exit 1, data problems exit 2, numeric failures exit 3.
"""


class FusionSamError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(FusionSamError):
    """Shapes or axis arguments that cannot be reconciled."""


class ConfigError(FusionSamError):
    """Invalid configuration value or unknown configuration key."""


class ContractError(FusionSamError):
    """An API precondition was violated by the caller."""


class DataError(FusionSamError):
    """Dataset files or label contents violate the on-disk contract."""


class NumericError(FusionSamError):
    """NaN/Inf encountered where finite values are required."""
