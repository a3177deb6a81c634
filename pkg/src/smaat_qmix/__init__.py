"""Vector-quantized attention UNet for precipitation nowcasting."""

from .model import ModelConfig, NowcastUNet, build, count_parameters
from .tensor import Tensor, backward, no_grad
from .train import TrainConfig, train, evaluate

__all__ = [
    "ModelConfig",
    "NowcastUNet",
    "build",
    "count_parameters",
    "Tensor",
    "backward",
    "no_grad",
    "TrainConfig",
    "train",
    "evaluate",
]
