"""Small numpy autodiff core: tensors, a gradient tape, ops, layers, AdamW."""
from . import archive, ops
from .gradcheck import GradCheckReport, grad_check
from .nn import MLP, LayerNorm, Linear, Module, Parameter
from .ops import ShapeError, matmul, softmax
from .optim import AdamW
from .tensor import Tape, Tensor, active_tape, as_tensor, default_dtype, precision, record

__all__ = [
    "AdamW", "GradCheckReport", "LayerNorm", "Linear", "MLP", "Module", "Parameter",
    "ShapeError", "Tape", "Tensor", "active_tape", "archive", "as_tensor", "default_dtype",
    "grad_check", "matmul", "ops", "precision", "record", "softmax",
]
