"""Dense tensor with an explicit reverse-mode gradient tape.

The tape records one node per operator call (vector-Jacobian products are
operator-level, not elementwise). Forward evaluation without an active tape
is a plain numpy computation, which is what inference uses.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class TapeError(RuntimeError):
    """Raised when a backward pass is requested for an unconnected value."""


class Tensor:
    """A dense n-dimensional array of floats.

    Wraps a numpy array. Tensors are value-like: operators never mutate
    their inputs. Gradients live on the tape, not on the tensor.
    ``requires_grad=False`` marks constants; subgraphs built purely from
    constants are never recorded.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, dtype=None, requires_grad: bool = True):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"

    # Arithmetic sugar; dispatches to the taped operators.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops

        return ops.div(other, self)

    def __neg__(self):
        from . import ops

        return ops.neg(self)


class _Node:
    """One recorded operation: output tensor, inputs, and the VJP."""

    __slots__ = ("name", "out", "inputs", "vjp")

    def __init__(self, name: str, out: Tensor, inputs: Sequence[Tensor], vjp: Callable):
        self.name = name
        self.out = out
        self.inputs = tuple(inputs)
        self.vjp = vjp


_active = threading.local()


def _current_tape() -> Optional["Tape"]:
    return getattr(_active, "tape", None)


class Tape:
    """Records operations for one forward pass; replays them in reverse.

    A tape is owned by exactly one training step. Use as a context manager:

        with Tape() as t:
            loss = ...
        t.backward(loss)
        g = t.grad(param)
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._grads: dict[int, np.ndarray] = {}
        self._out_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        if _current_tape() is not None:
            raise TapeError("a tape is already active on this thread")
        _active.tape = self
        return self

    def __exit__(self, *exc):
        _active.tape = None
        return False

    def _record(self, node: _Node):
        self._nodes.append(node)
        self._out_ids.add(id(node.out))

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss: Tensor):
        """Accumulate gradients of a scalar loss w.r.t. every recorded input."""
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise TapeError("backward expects a scalar Tensor loss")
        if id(loss) not in self._out_ids:
            raise TapeError("loss is not connected to this tape")
        grads: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data)
        }
        for node in reversed(self._nodes):
            g_out = grads.get(id(node.out))
            if g_out is None:
                continue
            in_grads = node.vjp(g_out)
            for t, g in zip(node.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                if g.shape != t.data.shape:
                    raise TapeError(
                        f"vjp of {node.name} produced shape {g.shape} "
                        f"for input of shape {t.data.shape}"
                    )
                acc = grads.get(id(t))
                if acc is None:
                    grads[id(t)] = g.copy() if g.base is not None else g
                else:
                    acc += g
        self._grads = grads

    def grad(self, t: Tensor) -> Optional[np.ndarray]:
        """Gradient accumulated for ``t`` by the last backward(), or None."""
        return self._grads.get(id(t))


def record(name: str, out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Register an operation on the active tape, if any, and return its output.

    Propagates requires_grad; all-constant subgraphs are not recorded.
    """
    out.requires_grad = any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tape = _current_tape()
        if tape is not None:
            tape._record(_Node(name, out, inputs, vjp))
    return out


def ensure_finite(name: str, arr: np.ndarray):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name} produced non-finite values")


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    """Coerce a scalar/array/Tensor to a Tensor.

    Raw values become constant leaves (requires_grad=False); anything that
    should receive gradients must arrive as a Tensor already.
    """
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=False)
