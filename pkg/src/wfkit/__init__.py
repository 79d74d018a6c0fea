"""Website-fingerprinting toolkit: traces, defenses, IAT features and the WFCAT classifier."""
from .defenses import DefendedTrace, apply_defense, decay_shaper, front, overheads, tamaraw, undefended
from .features import IatConfig, iat_histogram, tam
from .model import ModelConfig, WfcatModel, build_wfcat
from .trace import DatasetManifest, Trace, load_trace, parse_trace, scan_dataset
from .train import make_folds, pr_curve, train

__version__ = "0.1.0"

__all__ = [
    "DatasetManifest", "DefendedTrace", "IatConfig", "ModelConfig", "Trace", "WfcatModel",
    "apply_defense", "build_wfcat", "decay_shaper", "front", "iat_histogram", "load_trace",
    "make_folds", "overheads", "parse_trace", "pr_curve", "scan_dataset", "tam", "tamaraw",
    "train", "undefended",
]
