"""shdoa: multi-source direction-of-arrival estimation from spherical-harmonic
modal coherence, with room simulation, a from-scratch CNN, and an experiment
harness."""

__version__ = "0.1.0"

from .doa import ClassGrids, DOAEstimate, estimate_doas
from .errors import ShdoaError
from .features import CoherenceFeatureExtractor, FeatureBlock
from .metrics import TrialRecord, angular_error, eta_acc, eta_adj
from .network import CoherenceClassifier, ModalCNN, load_model, save_model
from .room import ArrayConfig, RoomConfig, SourceSpec, default_array, synthesize_mixture
from .sphmath import Direction, ModeIndex

__all__ = [
    "ArrayConfig",
    "ClassGrids",
    "CoherenceClassifier",
    "CoherenceFeatureExtractor",
    "DOAEstimate",
    "Direction",
    "FeatureBlock",
    "ModalCNN",
    "ModeIndex",
    "RoomConfig",
    "ShdoaError",
    "SourceSpec",
    "TrialRecord",
    "angular_error",
    "default_array",
    "estimate_doas",
    "eta_acc",
    "eta_adj",
    "load_model",
    "save_model",
    "synthesize_mixture",
]
