"""Three-level Laplacian pyramid of the guide, with the thermal image as residual.

Naming: ``L3`` is the finest band (full resolution), ``L2`` the middle band
(half resolution) and ``L1`` the residual slot (quarter resolution).  In the
modified pyramid ``L1`` holds the low-resolution thermal image instead of
the guide's own low-pass residual.

All resampling goes through :func:`lapgsr.autograd.bicubic_resize`, the
same operator the generator uses to collapse its output.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lapgsr.autograd import Tensor, add, as_tensor, bicubic_resize, clamp, sub
from lapgsr.errors import ShapeError

LUMA = (0.299, 0.587, 0.114)


def up2(x) -> Tensor:
    return bicubic_resize(x, 2.0)


def down2(x) -> Tensor:
    return bicubic_resize(x, 0.5)


def grayscale(rgb) -> Tensor:
    """ITU-R 601 luma of a 3-channel image."""
    rgb = as_tensor(rgb)
    if rgb.ndim != 4 or rgb.shape[1] != 3:
        raise ShapeError(f"grayscale expects 3 channels, got shape {rgb.shape}",
                         expected=3, got=rgb.shape[1] if rgb.ndim == 4 else rgb.shape)
    r, g, b = (rgb.data[:, i:i + 1] for i in range(3))
    return Tensor(LUMA[0] * r + LUMA[1] * g + LUMA[2] * b)


@dataclass
class PyramidLevels:
    L3: Tensor
    L2: Tensor
    L1: Tensor

    @property
    def channels(self) -> int:
        return self.L3.shape[1]

    def as_list(self) -> list[Tensor]:
        return [self.L3, self.L2, self.L1]


@dataclass
class TranslatedLayers:
    """Generator branch outputs, coarse to fine."""
    low: Tensor
    mid: Tensor
    high: Tensor


def _check_hr(shape) -> None:
    h, w = shape[2:]
    if h % 4 or w % 4:
        raise ShapeError(f"image extents {w}x{h} must be divisible by 4", got=(h, w))


def decompose(image) -> tuple[Tensor, Tensor, Tensor]:
    """Plain Laplacian decomposition: ``(L3, L2, G2)`` with G2 the true residual."""
    g0 = as_tensor(image)
    _check_hr(g0.shape)
    g1 = down2(g0)
    g2 = down2(g1)
    return sub(g0, up2(g1)), sub(g1, up2(g2)), g2


def build_modified_pyramid(guide_hr, thermal_lr) -> PyramidLevels:
    """Bands of the guide, with the low-resolution thermal image as residual."""
    guide_hr, thermal_lr = as_tensor(guide_hr), as_tensor(thermal_lr)
    gh, gw = guide_hr.shape[2:]
    th, tw = thermal_lr.shape[2:]
    if (gh, gw) != (4 * th, 4 * tw):
        raise ShapeError(f"guide extents {gw}x{gh} must be exactly 4x the thermal extents {tw}x{th}",
                         expected=(4 * th, 4 * tw), got=(gh, gw))
    if guide_hr.shape[:2] != thermal_lr.shape[:2]:
        raise ShapeError(f"guide and thermal disagree on batch/channels: "
                         f"{guide_hr.shape[:2]} vs {thermal_lr.shape[:2]}",
                         expected=thermal_lr.shape[:2], got=guide_hr.shape[:2])
    l3, l2, _ = decompose(guide_hr)
    return PyramidLevels(L3=l3, L2=l2, L1=thermal_lr)


def collapse_raw(low, mid, high) -> Tensor:
    """Cascaded upsample-and-add: ``high + up2(mid + up2(low))``."""
    low, mid, high = as_tensor(low), as_tensor(mid), as_tensor(high)
    if (mid.shape[2] != 2 * low.shape[2] or mid.shape[3] != 2 * low.shape[3]
            or high.shape[2] != 2 * mid.shape[2] or high.shape[3] != 2 * mid.shape[3]):
        raise ShapeError(f"layer extents must double at each level, got "
                         f"{low.shape[2:]}, {mid.shape[2:]}, {high.shape[2:]}",
                         got=(low.shape, mid.shape, high.shape))
    return add(high, up2(add(mid, up2(low))))


def collapse(layers: TranslatedLayers) -> Tensor:
    """Collapse translated layers and clamp to the [0, 1] image range."""
    return clamp(collapse_raw(layers.low, layers.mid, layers.high), 0.0, 1.0)


def to_display(level: np.ndarray) -> np.ndarray:
    """Map a band to 8-bit for viewing, stretching its observed range to [0, 255].

    A flat band maps to mid-gray.  Display only; never fed to the model.
    """
    level = np.asarray(level, dtype=np.float64)
    lo, hi = level.min(), level.max()
    if hi - lo < 1e-12:
        return np.full(level.shape, 128, dtype=np.uint8)
    return np.round((level - lo) / (hi - lo) * 255).astype(np.uint8)
