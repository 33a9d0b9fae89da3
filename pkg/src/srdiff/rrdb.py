"""RRDB low-resolution encoder.

``sr_head`` is the full super-resolution network used for L1 pretraining;
``encode`` stops one layer short of it and returns the HR-sized feature map
that conditions the noise predictor.
"""

from __future__ import annotations

import math

import numpy as np

from .backend import (
    Conv2d,
    Module,
    ModuleList,
    Rng,
    ShapeError,
    Tensor,
    as_tensor,
    concat,
    leaky_relu,
    nearest_upsample_nhwc,
    to_nchw,
    to_nhwc,
)
from .config import EncoderConfig

RES_SCALE = 0.2
LRELU_SLOPE = 0.2


class DenseBlock(Module):
    def __init__(self, nf: int, gc: int, rng: Rng):
        super().__init__()
        self.convs = ModuleList(Conv2d(nf + i * gc, gc, 3, rng, gain=0.1) for i in range(4))
        self.conv_out = Conv2d(nf + 4 * gc, nf, 3, rng, gain=0.1)

    def forward(self, x: Tensor) -> Tensor:
        feats = [x]
        for conv in self.convs:
            feats.append(leaky_relu(conv(concat(feats, axis=-1)), LRELU_SLOPE))
        return x + self.conv_out(concat(feats, axis=-1)) * RES_SCALE


class RRDB(Module):
    def __init__(self, nf: int, gc: int, rng: Rng):
        super().__init__()
        self.rdb1 = DenseBlock(nf, gc, rng)
        self.rdb2 = DenseBlock(nf, gc, rng)
        self.rdb3 = DenseBlock(nf, gc, rng)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.rdb3(self.rdb2(self.rdb1(x))) * RES_SCALE


class LREncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: Rng):
        super().__init__()
        self.cfg = cfg
        nf, gc = cfg.feature_channels, cfg.growth_channels
        self.conv_first = Conv2d(3, nf, 3, rng)
        self.trunk = ModuleList(RRDB(nf, gc, rng) for _ in range(cfg.num_rrdb_blocks))
        self.trunk_conv = Conv2d(nf, nf, 3, rng)
        self.upconvs = ModuleList(Conv2d(nf, nf, 3, rng) for _ in range(int(math.log2(cfg.scale))))
        self.hr_conv = Conv2d(nf, nf, 3, rng)
        self.conv_last = Conv2d(nf, 3, 3, rng)
        self.encode_calls = 0

    def _features_nhwc(self, x_l) -> Tensor:
        x_l = as_tensor(x_l)
        if x_l.ndim != 4 or x_l.shape[1] != 3:
            raise ShapeError(f"LR input must be (N, 3, h, w), got {x_l.shape}")
        fea = self.conv_first(to_nhwc(x_l))
        trunk = fea
        for blk in self.trunk:
            trunk = blk(trunk)
        fea = fea + self.trunk_conv(trunk)
        for up in self.upconvs:
            fea = leaky_relu(up(nearest_upsample_nhwc(fea, 2)), LRELU_SLOPE)
        return leaky_relu(self.hr_conv(fea), LRELU_SLOPE)

    def features(self, x_l) -> Tensor:
        return to_nchw(self._features_nhwc(x_l))

    def encode(self, x_l, hr_size: tuple[int, int] | None = None) -> Tensor:
        """HR-resolution conditioning features, ``feature_channels`` wide."""
        x_l = as_tensor(x_l)
        if hr_size is not None:
            want = (x_l.shape[2] * self.cfg.scale, x_l.shape[3] * self.cfg.scale)
            if tuple(hr_size) != want:
                raise ShapeError(f"encoder scale {self.cfg.scale} maps {x_l.shape[2:]} to {want}, not {tuple(hr_size)}")
        self.encode_calls += 1
        return self.features(x_l)

    def sr_head(self, x_l) -> Tensor:
        return to_nchw(self.conv_last(self._features_nhwc(x_l)))

    forward = sr_head


def encode(x_l: np.ndarray, model: LREncoder) -> np.ndarray:
    """(3, h, w) -> (C, h*scale, w*scale) features."""
    return model.encode(Tensor(np.asarray(x_l)[None])).data[0]
