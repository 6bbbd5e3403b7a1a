"""Tensor and tape for a small reverse-mode differentiation engine.

Operations record themselves on the innermost active :class:`Tape` when
at least one input requires a gradient.  Because a tape is appended to in
execution order it is already topologically sorted, so :func:`backward`
is a single reverse sweep.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from lapgsr.errors import ShapeError

DTYPE = np.float32

_ACTIVE_TAPES: list["Tape"] = []
_PRECISION: list[type] = [DTYPE]


class precision:
    """Temporarily change the dtype new tensors are created with.

    Only the finite-difference oracles use this (to evaluate forwards in
    float64); training and inference always run in float32.
    """

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype).type

    def __enter__(self):
        _PRECISION.append(self.dtype)
        return self

    def __exit__(self, *exc):
        _PRECISION.pop()


def current_dtype():
    return _PRECISION[-1]


class Tensor:
    """A float32 array that can take part in differentiation.

    Image tensors are laid out as (batch, channel, height, width).
    Parameters (biases) and losses use other ranks; nothing here insists
    on rank 4.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_PRECISION[-1])
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}",
                             expected=(), got=self.shape)
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}{flag})"

    # operator sugar; the functional forms live in ops.py
    def __add__(self, other):
        from lapgsr.autograd import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from lapgsr.autograd import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from lapgsr.autograd import ops
        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from lapgsr.autograd import ops
        return ops.scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(eq=False)
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    # requires_grad of each input when recorded; freezing is decided at forward time
    needs: tuple[bool, ...] = ()


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; it may be entered more than once, and
    nested tapes capture operations exclusively while they are innermost.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE_TAPES.pop()
        assert popped is self, "tapes must be exited in LIFO order"

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        for node in self.nodes:
            node.output._node = None
        self.nodes.clear()


def active_tape() -> Tape | None:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def record(op: str, output: Tensor, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Attach ``output`` to the active tape if any input needs a gradient."""
    if not any(t.requires_grad for t in inputs):
        return output
    tape = active_tape()
    if tape is None:
        # no tape: evaluation mode, nothing to differentiate through
        return output
    output.requires_grad = True
    node = _Node(op, tuple(inputs), output, vjp, tuple(t.requires_grad for t in inputs))
    output._node = node
    tape.nodes.append(node)
    return output


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every leaf that requires a gradient.

    Gradients accumulate into existing ``.grad`` buffers (call
    ``zero_grad`` between steps).  The tape is reset afterwards.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}",
                         expected=(), got=loss.shape)
    if loss._node is None or loss._node not in tape.nodes:
        raise ValueError("loss was not produced on this tape")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        for t, need, gi in zip(node.inputs, node.needs, node.vjp(g)):
            if gi is None or not need:
                continue
            gi = np.asarray(gi, dtype=t.data.dtype)
            if gi.shape != t.shape:
                raise ShapeError(f"gradient for {node.op} input has shape {gi.shape}, "
                                 f"expected {t.shape}", expected=t.shape, got=gi.shape)
            if t._node is None:
                t.grad = np.array(gi) if t.grad is None else t.grad + gi
            else:
                key = id(t)
                pending[key] = gi if key not in pending else pending[key] + gi
    tape.reset()


def dump_tensor(t: Tensor | np.ndarray, path) -> None:
    """Write a debug blob: ``SHAPE b c h w`` header line, then little-endian float32."""
    data = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f4")
    header = "SHAPE " + " ".join(str(d) for d in data.shape) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(data).tobytes())


def load_tensor_dump(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if not header or header[0] != "SHAPE":
            raise ValueError(f"{path}: missing SHAPE header")
        shape = tuple(int(v) for v in header[1:])
        payload = fh.read()
    count = len(payload) // struct.calcsize("<f")
    if count != int(np.prod(shape)):
        raise ValueError(f"{path}: header says {shape} but payload holds {count} floats")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(DTYPE)
