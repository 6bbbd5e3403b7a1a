"""Generator (three translation branches), patch discriminator, cost accounting.

The generator works on the modified pyramid of the guide:

* low branch: quarter resolution, gates the thermal input multiplicatively;
* mid branch: half resolution, fuses the upsampled low output with ``L2``;
* high branch: full resolution, fuses the upsampled mid output with ``L3``
  and adds ``L3`` back before the final tanh.

Every generator convolution is 3x3, stride 1, zero "same" padding.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields
from typing import Iterator

import numpy as np

from lapgsr.autograd import (
    Tensor,
    add,
    as_tensor,
    clamp,
    concat_channels,
    conv2d,
    instance_norm,
    kaiming_init,
    leaky_relu,
    mul,
    tanh_act,
    zeros_param,
)
from lapgsr.autograd.ops import LEAKY_SLOPE
from lapgsr.errors import NonFiniteError, ShapeError
from lapgsr.pyramid import PyramidLevels, TranslatedLayers, build_modified_pyramid, collapse_raw, up2

KERNEL = 3


@dataclass(frozen=True)
class GeneratorConfig:
    """Residual-block counts and channel widths of the three branches.

    ``width_stem`` is the output width of the low branch's entry conv (the
    one followed by instance norm); its second conv lifts to ``width_ltb``.
    """
    blocks_ltb: int = 2
    blocks_mtb: int = 3
    blocks_htb: int = 3
    width_ltb: int = 64
    width_mtb: int = 64
    width_htb: int = 12
    width_stem: int = 32
    channels: int = 1
    scale: int = 4

    def __post_init__(self):
        for name in ("blocks_ltb", "blocks_mtb", "blocks_htb"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        for name in ("width_ltb", "width_mtb", "width_htb", "width_stem"):
            if getattr(self, name) < self.channels:
                raise ValueError(f"{name}={getattr(self, name)} is narrower than {self.channels} channels")
        if self.scale != 4:
            raise ValueError(f"only 4x super-resolution is supported, got scale={self.scale}")

    @property
    def blocks(self) -> tuple[int, int, int]:
        return self.blocks_ltb, self.blocks_mtb, self.blocks_htb

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown generator config fields: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- layers

class Module:
    """Minimal parameter container; subclasses list children in ``_children``."""

    _children: tuple[str, ...] = ()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for child in self._children:
            obj = getattr(self, child)
            if isinstance(obj, Tensor):
                yield f"{prefix}{child}", obj
            elif isinstance(obj, list):
                for i, item in enumerate(obj):
                    yield from item.named_parameters(f"{prefix}{child}.{i}.")
            else:
                yield from obj.named_parameters(f"{prefix}{child}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.parameters().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ShapeError(f"parameter names differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            a = np.asarray(arrays[name], dtype=np.float32)
            if a.shape != p.shape:
                raise ShapeError(f"{name}: stored shape {a.shape} does not match {p.shape}",
                                 expected=p.shape, got=a.shape)
            p.data = a.copy()


class Conv(Module):
    _children = ("weight", "bias")

    def __init__(self, in_ch: int, out_ch: int, rng, kernel: int = KERNEL, stride: int = 1,
                 padding=None):
        self.weight = kaiming_init((out_ch, in_ch, kernel, kernel), rng)
        self.bias = zeros_param((out_ch,))
        self.stride = stride
        self.padding = (kernel - 1) // 2 if padding is None else padding

    def __call__(self, x) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ResidualBlock(Module):
    """conv -> leaky ReLU -> conv, plus identity skip."""

    _children = ("conv1", "conv2")

    def __init__(self, width: int, rng):
        self.conv1 = Conv(width, width, rng)
        self.conv2 = Conv(width, width, rng)

    def __call__(self, x) -> Tensor:
        return add(x, self.conv2(leaky_relu(self.conv1(x))))


class LowBranch(Module):
    _children = ("head", "stem", "blocks", "tail")

    def __init__(self, cfg: GeneratorConfig, rng):
        self.head = Conv(cfg.channels, cfg.width_stem, rng)
        self.stem = Conv(cfg.width_stem, cfg.width_ltb, rng)
        self.blocks = [ResidualBlock(cfg.width_ltb, rng) for _ in range(cfg.blocks_ltb)]
        self.tail = Conv(cfg.width_ltb, cfg.channels, rng)

    def __call__(self, l1) -> Tensor:
        h = leaky_relu(instance_norm(self.head(l1)))
        h = leaky_relu(self.stem(h))
        for block in self.blocks:
            h = block(h)
        # gate: no output nonlinearity on this branch
        return mul(self.tail(h), l1)


class FusionBranch(Module):
    """Shared shape of the mid and high branches: conv, leaky ReLU, blocks, conv."""

    _children = ("head", "blocks", "tail")

    def __init__(self, in_ch: int, width: int, n_blocks: int, out_ch: int, rng):
        self.head = Conv(in_ch, width, rng)
        self.blocks = [ResidualBlock(width, rng) for _ in range(n_blocks)]
        self.tail = Conv(width, out_ch, rng)

    def __call__(self, x) -> Tensor:
        h = leaky_relu(self.head(x))
        for block in self.blocks:
            h = block(h)
        return self.tail(h)


@dataclass
class GeneratorOutput:
    y: Tensor          # clamped to [0, 1]
    y_raw: Tensor      # unclamped collapse, used by the losses
    layers: TranslatedLayers
    pyramid: PyramidLevels


def _check_finite(t: Tensor, where: str) -> None:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"non-finite values in {where}", where=where)


class Generator(Module):
    _children = ("ltb", "mtb", "htb")

    def __init__(self, cfg: GeneratorConfig | None = None, rng: np.random.Generator | None = None):
        self.cfg = cfg or GeneratorConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        c = self.cfg.channels
        self.ltb = LowBranch(self.cfg, rng)
        self.mtb = FusionBranch(2 * c, self.cfg.width_mtb, self.cfg.blocks_mtb, c, rng)
        self.htb = FusionBranch(2 * c, self.cfg.width_htb, self.cfg.blocks_htb, c, rng)
        self._init_outputs()

    def _init_outputs(self) -> None:
        """Make a fresh generator reproduce plain bicubic upsampling of the thermal input.

        The low branch's gate opens fully (tail weights 0, bias 1) and the mid
        tail emits zeros.  The high branch is set to return ``-L3`` so that its
        ``+ L3`` skip cancels: two head channels carry ``+L3`` and ``-L3``, the
        residual blocks start as identities, and since
        ``lrelu(a) - lrelu(-a) = (1 + slope) * a`` the tail can recover ``-L3``
        exactly.  Training then only has to learn the guided correction.
        """
        for branch, bias in ((self.ltb, 1.0), (self.mtb, 0.0), (self.htb, 0.0)):
            branch.tail.weight.data[...] = 0
            branch.tail.bias.data[...] = bias
        c = self.cfg.channels
        if self.cfg.width_htb < 2 * c:
            return
        for block in self.htb.blocks:
            block.conv2.weight.data[...] = 0
        head, tail = self.htb.head.weight.data, self.htb.tail.weight.data
        gain = 1.0 / (1.0 + LEAKY_SLOPE)
        for k in range(c):
            head[k] = 0
            head[c + k] = 0
            head[k, c + k, 1, 1] = 1.0       # input channel c + k is L3
            head[c + k, c + k, 1, 1] = -1.0
            tail[k, k, 1, 1] = -gain
            tail[k, c + k, 1, 1] = gain

    def forward(self, guide_hr, thermal_lr) -> GeneratorOutput:
        guide_hr, thermal_lr = as_tensor(guide_hr), as_tensor(thermal_lr)
        for t, label in ((guide_hr, "guide"), (thermal_lr, "thermal input")):
            if t.ndim != 4 or t.shape[1] != self.cfg.channels:
                raise ShapeError(f"{label} must be (batch, {self.cfg.channels}, h, w), got {t.shape}",
                                 expected=self.cfg.channels, got=t.shape)
            _check_finite(t, label)
        pyr = build_modified_pyramid(guide_hr, thermal_lr)

        low = self.ltb(pyr.L1)
        _check_finite(low, "ltb")
        mid = tanh_act(self.mtb(concat_channels(up2(low), pyr.L2)))
        _check_finite(mid, "mtb")
        high = tanh_act(add(self.htb(concat_channels(up2(mid), pyr.L3)), pyr.L3))
        _check_finite(high, "htb")

        layers = TranslatedLayers(low=low, mid=mid, high=high)
        y_raw = collapse_raw(low, mid, high)
        return GeneratorOutput(y=clamp(y_raw, 0.0, 1.0), y_raw=y_raw, layers=layers, pyramid=pyr)

    __call__ = forward


class Discriminator(Module):
    """Patch critic: three stride-2 4x4 convs, then a 4x4 score conv; no sigmoid."""

    _children = ("down1", "down2", "down3", "score")
    MIN_EXTENT = 16

    def __init__(self, channels: int = 1, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(1)
        self.channels = channels
        self.down1 = Conv(channels, 32, rng, kernel=4, stride=2, padding=1)
        self.down2 = Conv(32, 64, rng, kernel=4, stride=2, padding=1)
        self.down3 = Conv(64, 128, rng, kernel=4, stride=2, padding=1)
        # 'same' output for an even kernel needs one extra row/col of padding after
        self.score = Conv(128, 1, rng, kernel=4, stride=1, padding=(1, 2, 1, 2))

    def forward(self, y) -> Tensor:
        y = as_tensor(y)
        if y.ndim != 4 or y.shape[1] != self.channels:
            raise ShapeError(f"discriminator expects (batch, {self.channels}, h, w), got {y.shape}",
                             expected=self.channels, got=y.shape)
        if min(y.shape[2:]) < self.MIN_EXTENT:
            raise ShapeError(f"discriminator input {y.shape[3]}x{y.shape[2]} is smaller than "
                             f"{self.MIN_EXTENT} px", expected=self.MIN_EXTENT, got=y.shape[2:])
        h = leaky_relu(self.down1(y))
        h = leaky_relu(instance_norm(self.down2(h)))
        h = leaky_relu(instance_norm(self.down3(h)))
        return self.score(h)

    __call__ = forward


@contextmanager
def frozen(module: Module):
    """Stop recording gradients for ``module``'s parameters inside the block."""
    params = list(module.parameters().values())
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield module
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag


# ---------------------------------------------------------------- accounting

def conv_params(in_ch: int, out_ch: int, kernel: int = KERNEL) -> int:
    return kernel * kernel * in_ch * out_ch + out_ch


def block_params(width: int) -> int:
    return 2 * conv_params(width, width)


def count_params(cfg: GeneratorConfig) -> int:
    """Generator weights plus biases, from closed forms (discriminator excluded)."""
    c = cfg.channels
    ltb = (conv_params(c, cfg.width_stem) + conv_params(cfg.width_stem, cfg.width_ltb)
           + cfg.blocks_ltb * block_params(cfg.width_ltb) + conv_params(cfg.width_ltb, c))
    mtb = (conv_params(2 * c, cfg.width_mtb) + cfg.blocks_mtb * block_params(cfg.width_mtb)
           + conv_params(cfg.width_mtb, c))
    htb = (conv_params(2 * c, cfg.width_htb) + cfg.blocks_htb * block_params(cfg.width_htb)
           + conv_params(cfg.width_htb, c))
    return ltb + mtb + htb


def _conv_flops(in_ch: int, out_ch: int, pixels: int) -> int:
    return 2 * KERNEL * KERNEL * in_ch * out_ch * pixels


def estimate_flops(cfg: GeneratorConfig, hr_extents: tuple[int, int]) -> float:
    """Generator GFLOPs for one image of ``hr_extents = (height, width)``.

    Counts only convolutions, a multiply-accumulate as 2 ops, each branch
    at its own resolution (low at HR/4, mid at HR/2, high at HR).  Bias
    adds, activations, normalization and resampling are left out.
    """
    h, w = hr_extents
    if h % 4 or w % 4:
        raise ShapeError(f"extents {w}x{h} must be divisible by 4", got=(h, w))
    c = cfg.channels
    lo, mid, hi = (h // 4) * (w // 4), (h // 2) * (w // 2), h * w
    total = (_conv_flops(c, cfg.width_stem, lo) + _conv_flops(cfg.width_stem, cfg.width_ltb, lo)
             + 2 * cfg.blocks_ltb * _conv_flops(cfg.width_ltb, cfg.width_ltb, lo)
             + _conv_flops(cfg.width_ltb, c, lo))
    total += (_conv_flops(2 * c, cfg.width_mtb, mid)
              + 2 * cfg.blocks_mtb * _conv_flops(cfg.width_mtb, cfg.width_mtb, mid)
              + _conv_flops(cfg.width_mtb, c, mid))
    total += (_conv_flops(2 * c, cfg.width_htb, hi)
              + 2 * cfg.blocks_htb * _conv_flops(cfg.width_htb, cfg.width_htb, hi)
              + _conv_flops(cfg.width_htb, c, hi))
    return total / 1e9


# Residual-block ablation on the 320x240 single-channel benchmark:
# (ltb, mtb, htb) -> (reported params, reported GFLOPs)
REPORTED_BLOCK_ABLATION = {
    (3, 2, 3): (398_000, 9.34),
    (3, 3, 3): (471_000, 12.18),
    (3, 4, 3): (546_000, 15.02),
    (3, 5, 3): (620_000, 17.86),
    (4, 3, 3): (546_000, 12.9),
    (5, 3, 3): (620_000, 13.6),
    (3, 3, 2): (469_000, 11.78),
    (3, 3, 4): (475_000, 12.58),
    (3, 3, 5): (477_000, 13.0),
    (2, 3, 3): (398_000, 5.74),
}
