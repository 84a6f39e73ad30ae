"""Domain-adaptive facial landmark detection on a small numpy autodiff core."""
from .autodiff import Tensor, backward
from .netdef import ArchitectureSpec, ModelState, init_parameters
from .trainer import TrainConfig, train
from .evaluate import EvalReport, evaluate

__all__ = [
    "Tensor",
    "backward",
    "ArchitectureSpec",
    "ModelState",
    "init_parameters",
    "TrainConfig",
    "train",
    "EvalReport",
    "evaluate",
]
