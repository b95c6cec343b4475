"""The four networks: recurrent video encoder/decoder, blurred-image
encoder, and the residual-dense deblurring net.

Desk-scale defaults (64x64, N=5, quarter widths) keep CPU training in the
minutes range; the paper-scale geometry (256x256, N=9, full widths) stays
available behind `ModelConfig.paper()`. All networks are fully
convolutional, so checkpointed weights run at any spatial size divisible
by 16.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Param, Tensor
from .nn import ConvLSTMState, leaky
from .warp import SCALE_FRACTIONS, FlowField, FlowPyramid, upsample_flow, warp_bilinear


@dataclass
class VideoSequence:
    """N sharp frames (3,H,W) in [0,1] with a well-defined central frame."""

    frames: list[np.ndarray]
    center_index: int = -1

    def __post_init__(self):
        if not self.frames:
            raise ValueError("video needs at least one frame")
        shape = self.frames[0].shape
        for f in self.frames[1:]:
            if f.shape != shape:
                raise ValueError(
                    f"all frames must share shape, got {shape} and {f.shape}")
        if self.center_index < 0:
            self.center_index = len(self.frames) // 2

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def center(self) -> np.ndarray:
        return self.frames[self.center_index]


@dataclass
class BlurPair:
    """Blurred observation with the sharp sequence it averages."""

    blurred: np.ndarray
    source: VideoSequence


@dataclass
class PredictionSet:
    """Per-step flow pyramids and the frames warped from the center frame.

    frames[n][j] is the step-n prediction at scale j (coarse to fine); it is
    always warp(center at scale j, flows[n].levels[j]), never a free
    variable.
    """

    flows: list[FlowPyramid]
    frames: list[list[Tensor]]


@dataclass
class ModelConfig:
    frames: int = 5
    image_size: int = 64
    base_channels: int = 4
    dm_channels: int = 16
    dm_rdbs_per_level: int = 2
    dm_growth: int = 16
    dm_rdb_layers: int = 4
    dm_res_scale: float = 0.1
    bie_dual_head: bool = False

    def __post_init__(self):
        if self.frames < 1 or self.frames % 2 == 0:
            raise ValueError(f"frame count must be odd, got {self.frames}")
        if self.image_size % 16:
            raise ValueError(
                f"image size must be divisible by 16, got {self.image_size}")
        if min(self.base_channels, self.dm_channels, self.dm_growth,
               self.dm_rdbs_per_level, self.dm_rdb_layers) < 1:
            raise ValueError("all channel/block counts must be positive")
        if self.dm_channels % 4:
            raise ValueError("dm_channels must be divisible by 4")

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def paper(cls, **kw) -> "ModelConfig":
        kw.setdefault("frames", 9)
        kw.setdefault("image_size", 256)
        kw.setdefault("base_channels", 16)
        kw.setdefault("dm_channels", 64)
        return cls(**kw)

    @property
    def hidden_channels(self) -> int:
        return 8 * self.base_channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class PyramidEncoder:
    """Four conv blocks (stride 1 then three stride-2 + resblock); returns
    the feature maps at full, 1/2, 1/4 and 1/8 resolution."""

    def __init__(self, rng, in_ch: int, base: int):
        self.block1 = nn.Conv2d(rng, in_ch, base, 3, stride=1)
        self.downs = []
        self.resblocks = []
        ch = base
        for _ in range(3):
            self.downs.append(nn.Conv2d(rng, ch, 2 * ch, 3, stride=2))
            self.resblocks.append(nn.ResBlock(rng, 2 * ch))
            ch *= 2

    def __call__(self, x: Tensor) -> list[Tensor]:
        feats = [leaky(self.block1(x))]
        for down, res in zip(self.downs, self.resblocks):
            feats.append(res(leaky(down(feats[-1]))))
        return feats

    def named_params(self, prefix: str) -> dict[str, Param]:
        out = self.block1.named_params(f"{prefix}.block1")
        for i, (d, r) in enumerate(zip(self.downs, self.resblocks)):
            out.update(d.named_params(f"{prefix}.down{i}"))
            out.update(r.named_params(f"{prefix}.res{i}"))
        return out


class RVE:
    """Recurrent video encoder: per-frame pyramid encoder into a ConvLSTM;
    the state after the last frame is the motion representation."""

    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        self.enc = PyramidEncoder(rng, 3, cfg.base_channels)
        self.cell = nn.ConvLSTMCell(rng, cfg.hidden_channels,
                                    cfg.hidden_channels)

    def __call__(self, video: VideoSequence) -> ConvLSTMState:
        h, w = video.frames[0].shape[-2:]
        if h % 8 or w % 8:
            raise ValueError(f"frame size {(h, w)} not divisible by 8")
        state = self.cell.zero_state(h // 8, w // 8)
        for frame in video.frames:
            feats = self.enc(Tensor(frame))
            state = self.cell(feats[-1], state)
        return state

    def named_params(self, prefix: str = "rve") -> dict[str, Param]:
        out = self.enc.named_params(f"{prefix}.enc")
        out.update(self.cell.named_params(f"{prefix}.cell"))
        return out


class RVD:
    """Recurrent video decoder: flow encoder -> ConvLSTM -> four-scale flow
    decoder with encoder skips; each scale's flow warps the center frame."""

    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        b = cfg.base_channels
        hid = cfg.hidden_channels
        self.fenc = PyramidEncoder(rng, 2, b)
        self.cell = nn.ConvLSTMCell(rng, hid, hid)
        self.dec1 = nn.Deconv2d(rng, hid, 4 * b)
        self.dec2 = nn.Deconv2d(rng, 8 * b + 2, 2 * b)
        self.dec3 = nn.Deconv2d(rng, 4 * b + 2, b)
        # flow heads start at zero so the untrained decoder is an identity warp
        self.flow0 = nn.Conv2d(rng, hid, 2, 3, zero_init=True)
        self.flow1 = nn.Conv2d(rng, 8 * b + 2, 2, 3, zero_init=True)
        self.flow2 = nn.Conv2d(rng, 4 * b + 2, 2, 3, zero_init=True)
        self.flow3 = nn.Conv2d(rng, 2 * b + 2, 2, 3, zero_init=True)

    def init_from_hidden(self, h: Tensor) -> ConvLSTMState:
        return ConvLSTMState(h, Tensor(np.zeros(h.shape, np.float32)))

    def center_pyramid(self, center: Tensor) -> list[Tensor]:
        levels = [center]
        for _ in range(3):
            levels.append(ad.resize_bilinear(levels[-1], 0.5))
        return levels[::-1]

    def rollout(self, init: ConvLSTMState, center: Tensor,
                steps: int) -> PredictionSet:
        h, w = center.shape[-2:]
        if h % 8 or w % 8:
            raise ValueError(f"center size {(h, w)} not divisible by 8")
        if init.h.shape[-2:] != (h // 8, w // 8):
            raise ValueError(
                f"init state spatial {init.h.shape[-2:]} does not match "
                f"center/8 {(h // 8, w // 8)}")
        centers = self.center_pyramid(center)
        state = init
        prev_flow = Tensor(np.zeros((2, h, w), np.float32))
        flows, frames = [], []
        for _ in range(steps):
            feats = self.fenc(prev_flow)
            state = self.cell(feats[-1], state)
            f1 = FlowField(self.flow0(state.h), SCALE_FRACTIONS[0])
            d1 = leaky(self.dec1(state.h))
            hyb1 = ad.concat_channels(d1, upsample_flow(f1).values, feats[2])
            f2 = FlowField(self.flow1(hyb1), SCALE_FRACTIONS[1])
            d2 = leaky(self.dec2(hyb1))
            hyb2 = ad.concat_channels(d2, upsample_flow(f2).values, feats[1])
            f3 = FlowField(self.flow2(hyb2), SCALE_FRACTIONS[2])
            d3 = leaky(self.dec3(hyb2))
            hyb3 = ad.concat_channels(d3, upsample_flow(f3).values, feats[0])
            f4 = FlowField(self.flow3(hyb3), SCALE_FRACTIONS[3])
            pyr = FlowPyramid([f1, f2, f3, f4])
            flows.append(pyr)
            frames.append([warp_bilinear(c, fl)
                           for c, fl in zip(centers, pyr.levels)])
            prev_flow = f4.values
        return PredictionSet(flows, frames)

    def named_params(self, prefix: str = "rvd") -> dict[str, Param]:
        out = self.fenc.named_params(f"{prefix}.fenc")
        out.update(self.cell.named_params(f"{prefix}.cell"))
        for name in ("dec1", "dec2", "dec3", "flow0", "flow1", "flow2",
                     "flow3"):
            out.update(getattr(self, name).named_params(f"{prefix}.{name}"))
        return out


BIE_KERNELS = (5, 3, 3, 3, 3, 3, 3)
BIE_STRIDES = (2, 2, 1, 2, 1, 1, 1)


class BIE:
    """Blurred-image encoder: 7 convs over concat(blurred, sharp center),
    batchnorm + leaky ReLU after all but the last, producing a decoder
    initialization state."""

    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        b = cfg.base_channels
        hid = cfg.hidden_channels
        widths = (2 * b, 4 * b, 4 * b, hid, hid, hid,
                  2 * hid if cfg.bie_dual_head else hid)
        self.convs = []
        self.norms = []
        in_ch = 6
        for i, (w, k, s) in enumerate(zip(widths, BIE_KERNELS, BIE_STRIDES)):
            self.convs.append(nn.Conv2d(rng, in_ch, w, k, stride=s))
            if i < len(widths) - 1:
                self.norms.append(nn.BatchNorm(w))
            in_ch = w

    def __call__(self, blurred: Tensor, sharp: Tensor,
                 training: bool = False) -> ConvLSTMState:
        if blurred.shape != sharp.shape:
            raise ValueError(
                f"bie: blurred {blurred.shape} and sharp {sharp.shape} differ")
        x = ad.concat_channels(blurred, sharp)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.norms):
                x = leaky(self.norms[i](x, training))
        hid = self.cfg.hidden_channels
        if self.cfg.bie_dual_head:
            return ConvLSTMState(ad.slice_channels(x, 0, hid),
                                 ad.slice_channels(x, hid, 2 * hid))
        return ConvLSTMState(x, Tensor(np.zeros(x.shape, np.float32)))

    def named_params(self, prefix: str = "bie") -> dict[str, Param]:
        out = {}
        for i, conv in enumerate(self.convs):
            out.update(conv.named_params(f"{prefix}.conv{i}"))
        for i, bn in enumerate(self.norms):
            out.update(bn.named_params(f"{prefix}.bn{i}"))
        return out

    def named_buffers(self, prefix: str = "bie") -> dict[str, np.ndarray]:
        out = {}
        for i, bn in enumerate(self.norms):
            out[f"{prefix}.bn{i}.mean"] = bn.state.mean
            out[f"{prefix}.bn{i}.var"] = bn.state.var
        return out

    def load_buffers(self, entries: dict[str, np.ndarray],
                     prefix: str = "bie", initialized: bool = True) -> None:
        for i, bn in enumerate(self.norms):
            bn.state.mean = entries[f"{prefix}.bn{i}.mean"].astype(np.float32).copy()
            bn.state.var = entries[f"{prefix}.bn{i}.var"].astype(np.float32).copy()
            bn.state.initialized = initialized


class DM:
    """Deblurring module: space-to-depth front end, RDB encoder over three
    scales, bottleneck+deconv decoder with projection skip merges, then
    depth-to-space and two reconstruction convs added onto the input."""

    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        c = cfg.dm_channels
        widths = (c, 2 * c, 4 * c, 8 * c)
        self.head = nn.Conv2d(rng, 12, c, 3)
        self.enc_rdbs = []
        self.downs = []
        for lvl in range(3):
            self.enc_rdbs.append([
                nn.RDB(rng, widths[lvl], cfg.dm_growth, cfg.dm_rdb_layers,
                       cfg.dm_res_scale)
                for _ in range(cfg.dm_rdbs_per_level)])
            self.downs.append(nn.Conv2d(rng, widths[lvl], widths[lvl + 1], 3,
                                        stride=2))
        self.bottlenecks = []
        self.ups = []
        self.projs = []
        for lvl in (2, 1, 0):
            cin, cout = widths[lvl + 1], widths[lvl]
            self.bottlenecks.append(nn.Conv2d(rng, cin, cin // 2, 1, pad=0))
            self.ups.append(nn.Deconv2d(rng, cin // 2, cout))
            self.projs.append(nn.Conv2d(rng, 2 * cout, cout, 1, pad=0))
        tail_ch = c // 4
        self.tail1 = nn.Conv2d(rng, tail_ch, tail_ch, 3)
        self.tail2 = nn.Conv2d(rng, tail_ch, 3, 3, zero_init=True)

    def __call__(self, blurred: Tensor) -> Tensor:
        h, w = blurred.shape[-2:]
        if h % 16 or w % 16:
            raise ValueError(f"input size {(h, w)} not divisible by 16")
        x = ad.space_to_depth(blurred, 2)
        x = leaky(self.head(x))
        skips = []
        for rdbs, down in zip(self.enc_rdbs, self.downs):
            for blk in rdbs:
                x = blk(x)
            skips.append(x)
            x = leaky(down(x))
        for bott, up, proj, skip in zip(self.bottlenecks, self.ups,
                                        self.projs, reversed(skips)):
            x = leaky(bott(x))
            x = leaky(up(x))
            x = leaky(proj(ad.concat_channels(x, skip)))
        x = ad.depth_to_space(x, 2)
        x = leaky(self.tail1(x))
        x = self.tail2(x)
        return ad.add(blurred, x)

    def infer(self, blurred: np.ndarray) -> np.ndarray:
        out = self(Tensor(blurred))
        return np.clip(out.data, 0.0, 1.0)

    def named_params(self, prefix: str = "dm") -> dict[str, Param]:
        out = self.head.named_params(f"{prefix}.head")
        for lvl, (rdbs, down) in enumerate(zip(self.enc_rdbs, self.downs)):
            for i, blk in enumerate(rdbs):
                out.update(blk.named_params(f"{prefix}.enc{lvl}.rdb{i}"))
            out.update(down.named_params(f"{prefix}.enc{lvl}.down"))
        for i, (b, u, p) in enumerate(zip(self.bottlenecks, self.ups,
                                          self.projs)):
            out.update(b.named_params(f"{prefix}.up{i}.bottleneck"))
            out.update(u.named_params(f"{prefix}.up{i}.deconv"))
            out.update(p.named_params(f"{prefix}.up{i}.proj"))
        out.update(self.tail1.named_params(f"{prefix}.tail1"))
        out.update(self.tail2.named_params(f"{prefix}.tail2"))
        return out


def param_count(params: dict[str, Param]) -> int:
    return sum(p.value.size for p in params.values())


def build_models(cfg: ModelConfig, seed: int) -> dict:
    """Deterministically construct all four networks from one seed."""
    rng = np.random.default_rng([seed, 0xB1A2])
    return {
        "rve": RVE(cfg, rng),
        "rvd": RVD(cfg, rng),
        "bie": BIE(cfg, rng),
        "dm": DM(cfg, rng),
    }
