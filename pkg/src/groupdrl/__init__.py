"""Group distributionally robust learning."""
__version__ = "0.1.0"

from .data import MixtureSpec, SourceGroup, TargetSample, ingest_source_csv, ingest_target_csv
from .estimator import DRLModel, FitConfig, fit_drl, fit_plugin_drl, load_model, save_model
from .learners import LearnerSpec
from .weights import UncertaintySet

__all__ = [
    "DRLModel",
    "FitConfig",
    "LearnerSpec",
    "MixtureSpec",
    "SourceGroup",
    "TargetSample",
    "UncertaintySet",
    "fit_drl",
    "fit_plugin_drl",
    "ingest_source_csv",
    "ingest_target_csv",
    "load_model",
    "save_model",
]
