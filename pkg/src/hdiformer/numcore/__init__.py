"""Dense tensors with tape-based reverse-mode differentiation."""
from . import ops
from .gradcheck import finite_diff_check, param_grad_check
from .nn import MLP, BatchNorm, Conv2d, LayerNorm, Linear, Module, trunc_normal
from .ops import (batch_norm, layer_norm, matmul, softmax_rows)
from .optim import ParamStore, adamw_step, step_lr
from .tensor import (Tape, Tensor, as_tensor, backward, get_dtype, get_precision,
                     grad_hook, no_record, precision, scope, set_precision)

__all__ = [
    "ops", "Tensor", "Tape", "as_tensor", "backward", "precision", "set_precision",
    "get_precision", "get_dtype", "scope", "no_record", "grad_hook",
    "matmul", "softmax_rows", "layer_norm", "batch_norm",
    "finite_diff_check", "param_grad_check",
    "Module", "Linear", "Conv2d", "LayerNorm", "BatchNorm", "MLP", "trunc_normal",
    "ParamStore", "adamw_step", "step_lr",
]
