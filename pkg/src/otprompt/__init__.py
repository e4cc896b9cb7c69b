"""Few-shot temporal action localization with prompt ensembles aligned to
video features by entropic optimal transport."""

from .errors import (ConfigError, DataError, DegenerateError, NonFiniteError, OTPromptError, SchemaVersionError,
                     ShapeError, SinkhornUnderflowError)
from .model import STRATEGIES, ModelState, TrainConfig, load_model, predict, save_model

__version__ = "0.1.0"
