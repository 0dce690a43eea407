"""Minimal dense tensor core with reverse-mode differentiation."""
from . import ops
from .conv import (
    ConvSpec,
    ConvSpecError,
    RunningStats,
    avg_pool,
    batch_norm,
    conv3d,
    conv_transpose3d,
    global_avg_pool,
    upsample_nearest,
)
from .gradcheck import GradCheckReport, grad_check
from .io import load_named, load_tensor, save_named, save_tensor
from .tensor import (
    AutodiffError,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    as_tensor,
    backward,
    count_macs,
    current_tape,
    finite_checks,
    is_grad_enabled,
    no_grad,
    record_op,
)

__all__ = [
    "AutodiffError", "ConvSpec", "ConvSpecError", "GradCheckReport", "NonFiniteError",
    "RunningStats", "ShapeError", "Tape", "Tensor", "as_tensor", "avg_pool", "backward",
    "batch_norm", "conv3d", "count_macs", "conv_transpose3d", "current_tape", "finite_checks",
    "global_avg_pool", "grad_check", "is_grad_enabled", "load_named", "load_tensor",
    "no_grad", "ops", "record_op", "save_named", "save_tensor", "upsample_nearest",
]
