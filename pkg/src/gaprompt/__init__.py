"""Geometry-aware prompting for frozen point-cloud transformers, built on a
small numpy autodiff engine."""
from .config import RunConfig, full_scale_profile, toy_profile
from .errors import InvalidArgument, InvalidData, ParseError, TrainingDiverged

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "toy_profile", "full_scale_profile",
    "InvalidArgument", "InvalidData", "ParseError", "TrainingDiverged",
]
