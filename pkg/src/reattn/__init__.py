"""reattn: deep vision transformers with head-mixing re-attention,
attention-collapse diagnostics, and a desk-scale experiment CLI."""

from reattn.errors import (
    CheckInvalidError,
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    ManifestError,
    NumericalError,
    ParameterError,
    ReattnError,
    SpecParseError,
)
from reattn.tensor import Tensor, load_tensor, save_tensor
from reattn.tape import ComputationTape
from reattn.gradcheck import GradCheckReport, grad_check

__version__ = "0.1.0"

__all__ = [
    "CheckInvalidError",
    "ComputationTape",
    "ConfigError",
    "ContractError",
    "DataError",
    "DimensionError",
    "GradCheckReport",
    "ManifestError",
    "NumericalError",
    "ParameterError",
    "ReattnError",
    "SpecParseError",
    "Tensor",
    "grad_check",
    "load_tensor",
    "save_tensor",
]
