"""Neural building blocks on top of the autodiff tape.

Each op exists in functional form (explicit weight tensors, used by the
gradient-check suite) and as a thin layer class owning the Params. Weights
use fan-in-scaled normal init; ConvLSTM forget gates start at +1; flow and
residual output layers can be zero-initialized by callers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Param, Tensor, lift

LEAKY_SLOPE = 0.2


def leaky(x: Tensor) -> Tensor:
    return ad.leaky_relu(x, LEAKY_SLOPE)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


# ---------------------------------------------------------------------------
# functional ops


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1,
           pad: int | None = None) -> Tensor:
    """Cross-correlation; w is (C_out, C_in, kh, kw), pad defaults to kh//2."""
    co, ci, kh, kw = w.shape
    if x.data.shape[-3] != ci:
        raise ValueError(
            f"conv2d: input has {x.data.shape[-3]} channels, weights expect {ci}")
    if pad is None:
        pad = kh // 2
    xd, wd, bd = x.data, w.data, b.data
    out, cols = kernels.conv2d_forward(xd, wd, bd, stride, pad)

    def backward(g):
        dx = kernels.conv2d_input_grad(g, wd, xd.shape, stride, pad)
        dw, db = kernels.conv2d_param_grads(cols, g, wd.shape)
        return dx, dw, db

    return ad.record("conv2d", out, (x, w, b), backward)


def deconv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 2,
             pad: int = 1) -> Tensor:
    """Transposed convolution; w is (C_in, C_out, kh, kw)."""
    ci = w.shape[0]
    if x.data.shape[-3] != ci:
        raise ValueError(
            f"deconv2d: input has {x.data.shape[-3]} channels, weights expect {ci}")
    xd, wd, bd = x.data, w.data, b.data
    out = kernels.deconv2d_forward(xd, wd, bd, stride, pad)

    def backward(g):
        dx = kernels.deconv2d_input_grad(g, wd, stride, pad)
        dw, db = kernels.deconv2d_param_grads(xd, g, wd.shape, stride, pad)
        return dx, dw, db

    return ad.record("deconv2d", out, (x, w, b), backward)


def bottleneck(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """1x1 channel-reduction conv."""
    return conv2d(x, w, b, stride=1, pad=0)


@dataclass
class BNState:
    """Running statistics; mutated only by train-mode forwards."""

    mean: np.ndarray
    var: np.ndarray
    initialized: bool = False
    momentum: float = 0.1
    eps: float = 1e-5


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BNState,
              training: bool) -> Tensor:
    """Per-channel normalization over the spatial (and batch) axes."""
    c = x.data.shape[-3]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError(
            f"batchnorm: gamma/beta must be ({c},), got {gamma.data.shape}/{beta.data.shape}")
    xd = x.data
    axes = tuple(i for i in range(xd.ndim) if i != xd.ndim - 3)
    bshape = [1] * xd.ndim
    bshape[xd.ndim - 3] = c
    if training:
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if not state.initialized:
            state.mean = mean.astype(np.float32)
            state.var = var.astype(np.float32)
            state.initialized = True
        else:
            m = state.momentum
            state.mean = ((1 - m) * state.mean + m * mean).astype(np.float32)
            state.var = ((1 - m) * state.var + m * var).astype(np.float32)
    else:
        if not state.initialized:
            raise RuntimeError(
                "batchnorm: eval mode before any training step (uninitialized stats)")
        mean = state.mean.astype(xd.dtype)
        var = state.var.astype(xd.dtype)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (xd - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
    n = xd.size // c
    gd = gamma.data

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        if training:
            gx = g * gd.reshape(bshape)
            dx = (inv_std.reshape(bshape) / n) * (
                n * gx
                - gx.sum(axis=axes).reshape(bshape)
                - xhat * (gx * xhat).sum(axis=axes).reshape(bshape))
        else:
            dx = g * (gd * inv_std).reshape(bshape)
        return dx.astype(g.dtype), dgamma, dbeta

    return ad.record("batchnorm", out, (x, gamma, beta), backward)


@dataclass
class ConvLSTMState:
    """Hidden/cell pair; shapes match (C_h, H', W')."""

    h: Tensor
    c: Tensor


def convlstm_step(x: Tensor, state: ConvLSTMState, w: Tensor,
                  b: Tensor) -> ConvLSTMState:
    """One ConvLSTM update: gates i,f,o,g from a 3x3 conv over concat(x,h)."""
    if x.data.shape[-2:] != state.h.data.shape[-2:]:
        raise ValueError(
            f"convlstm: input spatial {x.data.shape[-2:]} != state spatial "
            f"{state.h.data.shape[-2:]}")
    ch = state.h.data.shape[-3]
    z = conv2d(ad.concat_channels(x, state.h), w, b)
    i = ad.sigmoid(ad.slice_channels(z, 0, ch))
    f = ad.sigmoid(ad.slice_channels(z, ch, 2 * ch))
    o = ad.sigmoid(ad.slice_channels(z, 2 * ch, 3 * ch))
    g = ad.tanh(ad.slice_channels(z, 3 * ch, 4 * ch))
    c_new = ad.add(ad.multiply(f, state.c), ad.multiply(i, g))
    h_new = ad.multiply(o, ad.tanh(c_new))
    return ConvLSTMState(h_new, c_new)


def resblock(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor,
             b2: Tensor) -> Tensor:
    """conv -> leaky -> conv, added back onto the input."""
    return ad.add(x, conv2d(leaky(conv2d(x, w1, b1)), w2, b2))


def rdb(x: Tensor, layer_params: list[tuple[Tensor, Tensor]], fuse_w: Tensor,
        fuse_b: Tensor, res_scale: float = 0.1) -> Tensor:
    """Residual dense block: densely concatenated 3x3 convs, 1x1 fusion,
    scaled residual add."""
    feats = x
    for w, b in layer_params:
        feats = ad.concat_channels(feats, leaky(conv2d(feats, w, b)))
    fused = bottleneck(feats, fuse_w, fuse_b)
    return ad.add(x, ad.scale(fused, res_scale))


# ---------------------------------------------------------------------------
# layers


class Conv2d:
    def __init__(self, rng, in_ch, out_ch, k=3, stride=1, pad=None,
                 zero_init=False):
        shape = (out_ch, in_ch, k, k)
        self.weight = Param(np.zeros(shape, np.float32) if zero_init
                            else he_normal(rng, shape, in_ch * k * k))
        self.bias = Param(np.zeros(out_ch, np.float32))
        self.stride = stride
        self.pad = k // 2 if pad is None else pad

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, lift(self.weight), lift(self.bias), self.stride,
                      self.pad)

    def named_params(self, prefix: str) -> dict[str, Param]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class Deconv2d:
    def __init__(self, rng, in_ch, out_ch, k=4, stride=2, pad=1):
        shape = (in_ch, out_ch, k, k)
        self.weight = Param(he_normal(rng, shape, in_ch * k * k))
        self.bias = Param(np.zeros(out_ch, np.float32))
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return deconv2d(x, lift(self.weight), lift(self.bias), self.stride,
                        self.pad)

    def named_params(self, prefix: str) -> dict[str, Param]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class BatchNorm:
    def __init__(self, ch: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Param(np.ones(ch, np.float32))
        self.beta = Param(np.zeros(ch, np.float32))
        self.state = BNState(np.zeros(ch, np.float32), np.ones(ch, np.float32),
                             momentum=momentum, eps=eps)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batchnorm(x, lift(self.gamma), lift(self.beta), self.state,
                         training)

    def named_params(self, prefix: str) -> dict[str, Param]:
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}


class ConvLSTMCell:
    """3x3 ConvLSTM without peepholes; forget-gate bias starts at +1."""

    def __init__(self, rng, in_ch, hidden_ch, k=3):
        self.hidden_ch = hidden_ch
        self.gates = Conv2d(rng, in_ch + hidden_ch, 4 * hidden_ch, k)
        self.gates.bias.value[hidden_ch:2 * hidden_ch] = 1.0

    def __call__(self, x: Tensor, state: ConvLSTMState) -> ConvLSTMState:
        return convlstm_step(x, state, lift(self.gates.weight),
                             lift(self.gates.bias))

    def zero_state(self, h: int, w: int) -> ConvLSTMState:
        z = np.zeros((self.hidden_ch, h, w), np.float32)
        return ConvLSTMState(Tensor(z), Tensor(z.copy()))

    def named_params(self, prefix: str) -> dict[str, Param]:
        return self.gates.named_params(f"{prefix}.gates")


class ResBlock:
    def __init__(self, rng, ch):
        self.conv1 = Conv2d(rng, ch, ch, 3)
        self.conv2 = Conv2d(rng, ch, ch, 3)

    def __call__(self, x: Tensor) -> Tensor:
        return resblock(x, lift(self.conv1.weight), lift(self.conv1.bias),
                        lift(self.conv2.weight), lift(self.conv2.bias))

    def named_params(self, prefix: str) -> dict[str, Param]:
        return {**self.conv1.named_params(f"{prefix}.conv1"),
                **self.conv2.named_params(f"{prefix}.conv2")}


class RDB:
    def __init__(self, rng, ch, growth, layers, res_scale=0.1):
        self.convs = [Conv2d(rng, ch + i * growth, growth, 3)
                      for i in range(layers)]
        self.fuse = Conv2d(rng, ch + layers * growth, ch, 1, pad=0)
        self.res_scale = res_scale

    def __call__(self, x: Tensor) -> Tensor:
        pairs = [(lift(c.weight), lift(c.bias)) for c in self.convs]
        return rdb(x, pairs, lift(self.fuse.weight), lift(self.fuse.bias),
                   self.res_scale)

    def named_params(self, prefix: str) -> dict[str, Param]:
        out = {}
        for i, c in enumerate(self.convs):
            out.update(c.named_params(f"{prefix}.conv{i}"))
        out.update(self.fuse.named_params(f"{prefix}.fuse"))
        return out
