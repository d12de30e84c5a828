"""Teacher-student hidden-state distillation for a small attention TTS model.

Modules: :mod:`tensor` (reverse-mode autodiff), :mod:`dsp` (features and
Griffin-Lim), :mod:`data` (synthetic corpus), :mod:`model`, :mod:`distill`
(losses and training), :mod:`evaluation` and :mod:`cli`.
"""

from .config import ModelConfig, RunConfig, TrainConfig, load_config
from .errors import (ConfigError, ContractError, DimensionError, DistilltronError, DomainError,
                     InputError, ParseError, TrainingDiverged)

__version__ = "0.1.0"

__all__ = ["ModelConfig", "RunConfig", "TrainConfig", "load_config", "ConfigError",
           "ContractError", "DimensionError", "DistilltronError", "DomainError", "InputError",
           "ParseError", "TrainingDiverged", "__version__"]
