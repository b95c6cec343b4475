"""Differentiable per-pixel warping: grid generation plus bilinear sampling.

Flows are stored in pixel units at their own pyramid scale (channel 0 =
horizontal displacement, channel 1 = vertical). Warping is backward: each
output pixel samples the source image at position + flow, with source
coordinates clamped to the border.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor

SCALE_FRACTIONS = (0.125, 0.25, 0.5, 1.0)


@dataclass
class FlowField:
    """Per-pixel displacement map (2,H,W) at one pyramid scale."""

    values: Tensor
    scale: float = 1.0

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[0] != 2:
            raise ValueError(
                f"flow must be shaped (2,H,W), got {self.values.shape}")


@dataclass
class FlowPyramid:
    """Four flows at 1/8, 1/4, 1/2 and full resolution, coarse to fine."""

    levels: list[FlowField] = field(default_factory=list)

    def __post_init__(self):
        if len(self.levels) != 4:
            raise ValueError(f"pyramid needs 4 levels, got {len(self.levels)}")
        for lo, hi in zip(self.levels, self.levels[1:]):
            a, b = lo.values.shape, hi.values.shape
            if (a[1] * 2, a[2] * 2) != (b[1], b[2]):
                raise ValueError(
                    f"pyramid levels must double in size: {a} then {b}")


@functools.lru_cache(maxsize=64)
def _grid_cache(h: int, w: int) -> np.ndarray:
    return kernels.make_grid_array(h, w)


def make_grid(h: int, w: int) -> Tensor:
    """Identity sampling coordinates (2,h,w): x indices, then y indices."""
    return Tensor(_grid_cache(h, w))


def sample_bilinear(image: Tensor, coords: Tensor) -> Tensor:
    """Bilinear sample of (C,H,W) image at absolute pixel coords (2,H',W')."""
    if image.ndim != 3:
        raise ValueError(f"sample: image must be rank 3, got {image.shape}")
    if coords.ndim != 3 or coords.shape[0] != 2:
        raise ValueError(f"sample: coords must be (2,H,W), got {coords.shape}")
    img, crd = image.data, coords.data
    out = kernels.sample_bilinear_forward(img, crd)

    def backward(g):
        return kernels.sample_bilinear_grads(img, crd, g)

    return ad.record("bilinear-sample", out, (image, coords), backward)


def warp_bilinear(image: Tensor, flow: FlowField) -> Tensor:
    """Backward-warp an image by a same-sized flow field."""
    f = flow.values
    if image.shape[-2:] != f.shape[-2:]:
        raise ValueError(
            f"warp: image {image.shape} and flow {f.shape} spatial sizes differ")
    h, w = image.shape[-2], image.shape[-1]
    return sample_bilinear(image, ad.add(make_grid(h, w), f))


def upsample_flow(flow: FlowField) -> FlowField:
    """Double the spatial size and the displacement units together."""
    up = ad.scale(ad.resize_bilinear(flow.values, 2.0), 2.0)
    return FlowField(up, scale=flow.scale * 2.0)
