"""Exception taxonomy shared across the package."""


class ReattnError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(ReattnError, ValueError):
    """Tensor shapes are incompatible; the message names both shapes."""


class ParameterError(ReattnError, ValueError):
    """A scalar argument is outside its documented range."""


class ConfigError(ReattnError, ValueError):
    """A model or experiment configuration violates an invariant."""


class ContractError(ReattnError, RuntimeError):
    """An API contract was violated (non-scalar loss, consumed tape, ...)."""


class DataError(ReattnError, ValueError):
    """A dataset or label is malformed."""


class NumericalError(ReattnError, ArithmeticError):
    """A NaN or Inf surfaced where finite values are required."""


class CheckInvalidError(ReattnError, RuntimeError):
    """A gradient check could not run, e.g. the function is nondeterministic."""


class ManifestError(ReattnError, ValueError):
    """A checkpoint manifest does not match its tensors or config."""


class SpecParseError(ReattnError, ValueError):
    """An experiment spec file is malformed; the message names the field."""
