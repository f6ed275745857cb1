"""TCN-Mamba atrial fibrillation prediction on RR-interval tachograms, in numpy."""

from .model import ModelConfig, TcnMambaModel, build_model, load_checkpoint, reduced_config, save_checkpoint
from .tensor import Tensor, backward, grad_check, no_grad

__version__ = "0.1.0"

__all__ = ["ModelConfig", "TcnMambaModel", "Tensor", "backward", "build_model", "grad_check", "load_checkpoint",
           "no_grad", "reduced_config", "save_checkpoint"]
