"""Central finite-difference oracles for checking analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from lapgsr.autograd.tensor import Tape, Tensor, backward, precision


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)`` (0 when both vanish)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def analytic_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray]) -> list[np.ndarray]:
    tensors = [Tensor(x, requires_grad=True) for x in inputs]
    with Tape() as tape:
        out = fn(*tensors)
    backward(out, tape)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def numeric_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
                      h: float = 1e-3) -> list[np.ndarray]:
    """Central differences, with the forward evaluated in float64."""
    base = [np.asarray(x, dtype=np.float64) for x in inputs]
    grads = []
    with precision(np.float64):
        for k, x in enumerate(base):
            g = np.zeros_like(x)
            flat = x.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = fn(*[Tensor(b) for b in base]).item()
                flat[i] = orig - h
                down = fn(*[Tensor(b) for b in base]).item()
                flat[i] = orig
                g.reshape(-1)[i] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
                    h: float = 1e-3) -> list[float]:
    """Relative error per input between analytic and finite-difference gradients."""
    analytic = analytic_gradients(fn, inputs)
    numeric = numeric_gradients(fn, inputs, h)
    return [relative_error(a, n) for a, n in zip(analytic, numeric)]


def numeric_param_gradient(loss_fn: Callable[[], Tensor], param: Tensor, index,
                           h: float = 1e-3) -> float:
    """Finite-difference derivative of ``loss_fn()`` w.r.t. one element of ``param``.

    The parameter is widened to float64 while probing and restored after.
    """
    orig = param.data
    try:
        with precision(np.float64):
            probe = orig.astype(np.float64)
            param.data = probe
            probe[index] += h
            up = loss_fn().item()
            probe[index] -= 2 * h
            down = loss_fn().item()
    finally:
        param.data = orig
    return (up - down) / (2 * h)
