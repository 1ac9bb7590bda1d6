"""Multi-pivot simultaneous neural machine translation on a numpy autograd engine."""

__version__ = "0.1.0"

from .errors import (ConfigurationError, ContractError, LengthError, MultipivotError, ParseError,
                     SpecError, TrainingError)
from .model import ModelConfig, TransformerModel
from .vocab import Vocab, build_vocab

__all__ = [
    "ConfigurationError", "ContractError", "LengthError", "ModelConfig", "MultipivotError",
    "ParseError", "SpecError", "TrainingError", "TransformerModel", "Vocab", "build_vocab",
    "__version__",
]
