"""Adam and parameter initialization."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from lapgsr.autograd.ops import LEAKY_SLOPE
from lapgsr.autograd.tensor import DTYPE, Tensor


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; same seed gives the same stream on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def kaiming_init(shape, rng: np.random.Generator, slope: float = LEAKY_SLOPE) -> Tensor:
    """Scaled normal weights with variance ``gain**2 / fan_in``.

    ``gain**2 = 2 / (1 + slope**2)`` is the leaky-ReLU correction.
    """
    shape = tuple(int(s) for s in shape)
    fan_in = int(np.prod(shape[1:]))
    std = np.sqrt(2.0 / ((1.0 + slope**2) * fan_in))
    return Tensor(rng.standard_normal(shape, dtype=np.float32) * DTYPE(std), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=True)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor], **hyper) -> "AdamState":
        state = cls(**hyper)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None],
              state: AdamState, lr: float) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update, in place.  Missing gradients count as zero."""
    state.t += 1
    b1, b2 = DTYPE(state.beta1), DTYPE(state.beta2)
    c1 = DTYPE(1.0 - state.beta1**state.t)
    c2 = DTYPE(1.0 - state.beta2**state.t)
    lr32, eps = DTYPE(lr), DTYPE(state.eps)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient for {name} has shape {g.shape}, "
                             f"parameter has {p.shape}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= lr32 * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state
