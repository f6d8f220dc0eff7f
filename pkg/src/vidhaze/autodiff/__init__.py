from .tensor import Tape, TapeError, Tensor
from . import ops
from .gradcheck import (check_gradients, check_gradients_sampled,
                        finite_difference, max_relative_error)

__all__ = [
    "Tape",
    "TapeError",
    "Tensor",
    "ops",
    "check_gradients",
    "check_gradients_sampled",
    "finite_difference",
    "max_relative_error",
]
