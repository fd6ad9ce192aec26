"""Meta-learned test-time adaptation for live/spoof classification on synthetic domains."""

from .autodiff import GradMode, Tensor, grad
from .datagen import DomainBatch, DomainSpec, make_domains, sample_batch
from .losses import AblationMask, LossWeights
from .metatrain import MetaConfig, NumericalError, train
from .metrics import EvalReport, evaluate
from .model import ModelSpec, TrainedModel, load_model, save_model
from .nn import Hyperparams
from .protocol import VARIANTS, ProtocolConfig, ProtocolResult, run_protocol
from .ttadapt import AdaptConfig, AdaptReport, adapt, predict

__version__ = "0.1.0"

__all__ = [
    "AblationMask", "AdaptConfig", "AdaptReport", "DomainBatch", "DomainSpec", "EvalReport",
    "GradMode", "Hyperparams", "LossWeights", "MetaConfig", "ModelSpec", "NumericalError",
    "ProtocolConfig", "ProtocolResult", "Tensor", "TrainedModel", "VARIANTS", "adapt",
    "evaluate", "grad", "load_model", "make_domains", "predict", "run_protocol",
    "sample_batch", "save_model", "train",
]
