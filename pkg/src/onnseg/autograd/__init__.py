from . import ops
from .gradcheck import GradCheckReport, ParamCheck, grad_check, relative_error
from .ops import BatchNormState
from .tensor import Tape, Tensor, active_tape, backward

__all__ = [
    "BatchNormState",
    "GradCheckReport",
    "ParamCheck",
    "Tape",
    "Tensor",
    "active_tape",
    "backward",
    "grad_check",
    "ops",
    "relative_error",
]
