"""Small dense autodiff: tensors, primitives, layers, Adam, gradient checks, checkpoints."""
from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import GradcheckReport, gradcheck
from .nn import BatchNorm1d, Block, Linear, Module
from .optim import Adam, optimizer_step
from .tensor import (
    ContractError,
    NumericError,
    ShapeError,
    Tensor,
    backward,
    evaluate,
)

__all__ = [
    "Adam", "BatchNorm1d", "Block", "ContractError", "GradcheckReport", "Linear", "Module",
    "NumericError", "ShapeError", "Tensor", "backward", "evaluate", "gradcheck",
    "load_checkpoint", "ops", "optimizer_step", "save_checkpoint",
]
