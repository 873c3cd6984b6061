"""One-stage space-time video super-resolution on a from-scratch autodiff core."""

from .network import ModelConfig, ZoomingModel, charbonnier_loss, forward
from .tensor import ContractError, Tensor
from .train import TrainConfig, load_checkpoint, save_checkpoint, train_loop

__all__ = [
    "ContractError",
    "ModelConfig",
    "Tensor",
    "TrainConfig",
    "ZoomingModel",
    "charbonnier_loss",
    "forward",
    "load_checkpoint",
    "save_checkpoint",
    "train_loop",
]
__version__ = "0.1.0"
