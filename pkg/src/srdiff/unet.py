"""Conditional U-Net noise predictor eps_theta(x_t, x_e, t)."""

from __future__ import annotations

import numpy as np

from .backend import (
    Conv2d,
    ConvTranspose2d,
    Dense,
    Module,
    ModuleList,
    Rng,
    ShapeError,
    Tensor,
    as_tensor,
    concat,
    mish,
    reshape,
    to_nchw,
    to_nhwc,
)
from .config import PredictorConfig


class DivisibilityError(ValueError):
    """Spatial size is not a multiple of 16."""


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding; slot 2i is sin(t w_i), slot 2i+1 is cos(t w_i), w_i = 10000^(-2i/dim).

    ``t`` may be a scalar (returns ``(dim,)``) or a 1-D array (returns ``(N, dim)``).
    """
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0):
        raise ValueError("timestep must be non-negative")
    freqs = 10000.0 ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    ang = t_arr[..., None] * freqs
    emb = np.empty(ang.shape[:-1] + (dim,), dtype=np.float64)
    emb[..., 0::2] = np.sin(ang)
    emb[..., 1::2] = np.cos(ang)
    return emb


class ResBlock(Module):
    """conv3x3-Mish, add projected time embedding, conv3x3-Mish, plus a (1x1) shortcut."""

    def __init__(self, cin: int, cout: int, temb_dim: int, rng: Rng):
        super().__init__()
        self.cin, self.cout = cin, cout
        self.conv1 = Conv2d(cin, cout, 3, rng)
        self.time_proj = Dense(temb_dim, cout, rng)
        self.conv2 = Conv2d(cout, cout, 3, rng)
        if cin != cout:
            self.shortcut = Conv2d(cin, cout, 1, rng)

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = mish(self.conv1(x))
        n = temb.shape[0]
        h = h + reshape(self.time_proj(temb), (n, 1, 1, self.cout))
        h = mish(self.conv2(h))
        skip = self.shortcut(x) if self.cin != self.cout else x
        return h + skip


class _Step(Module):
    def __init__(self, cins: list[int], cout: int, temb_dim: int, rng: Rng):
        super().__init__()
        self.blocks = ModuleList(ResBlock(ci, cout, temb_dim, rng) for ci in cins)

    def run(self, h: Tensor, temb: Tensor) -> Tensor:
        for blk in self.blocks:
            h = blk(h, temb)
        return h


class NoisePredictor(Module):
    """Takes and returns NCHW tensors; runs channels-last inside."""

    def __init__(self, cfg: PredictorConfig, rng: Rng):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        nrb = cfg.res_blocks_per_step
        tdim = 4 * c
        dims = [c] + [c * m for m in cfg.channel_mults]

        self.time_fc1 = Dense(cfg.time_embed_dim, tdim, rng)
        self.time_fc2 = Dense(tdim, tdim, rng)

        self.conv_in = Conv2d(3, c, 3, rng)
        self.cond_fuse = Conv2d(c + cfg.cond_channels, c, 1, rng)

        self.down = ModuleList()
        self.downsample = ModuleList()
        self.skip_channels: list[int] = []
        for i in range(4):
            cin, cout = dims[i], dims[i + 1]
            self.down.append(_Step([cin] + [cout] * (nrb - 1), cout, tdim, rng))
            self.downsample.append(Conv2d(cout, cout, 3, rng, stride=2, padding=1))
            self.skip_channels.append(cout)

        self.mid = _Step([dims[4]] * 2, dims[4], tdim, rng)

        self.upsample = ModuleList()
        self.up = ModuleList()
        cur = dims[4]
        for i in reversed(range(4)):
            skip = self.skip_channels[i]
            cout = dims[i]
            self.upsample.append(ConvTranspose2d(cur, cur, 4, rng, stride=2, padding=1))
            self.up.append(_Step([cur + skip] + [cout] * (nrb - 1), cout, tdim, rng))
            cur = cout

        self.conv_out = Conv2d(c, c, 3, rng)
        self.final = Conv2d(c, 3, 1, rng, zero=True)

    def forward(self, x_t, x_e, t) -> Tensor:
        x_t, x_e = as_tensor(x_t), as_tensor(x_e)
        if x_t.ndim != 4 or x_t.shape[1] != 3:
            raise ShapeError(f"x_t must be (N, 3, H, W), got {x_t.shape}")
        n, _, h, w = x_t.shape
        if h % 16 or w % 16:
            raise DivisibilityError(f"spatial size {h}x{w} is not divisible by 16")
        if x_e.shape != (n, self.cfg.cond_channels, h, w):
            raise ShapeError(
                f"misaligned condition features: expected {(n, self.cfg.cond_channels, h, w)}, got {x_e.shape}")
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))
        temb = Tensor(timestep_embedding(t, self.cfg.time_embed_dim))
        temb = mish(self.time_fc2(mish(self.time_fc1(temb))))

        hid = mish(self.conv_in(to_nhwc(x_t)))
        hid = self.cond_fuse(concat([hid, to_nhwc(x_e)], axis=-1))

        skips = []
        for step, ds in zip(self.down, self.downsample):
            hid = step.run(hid, temb)
            skips.append(hid)
            hid = ds(hid)
        hid = self.mid.run(hid, temb)
        for step, us in zip(self.up, self.upsample):
            hid = us(hid)
            hid = step.run(concat([hid, skips.pop()], axis=-1), temb)
        return to_nchw(self.final(mish(self.conv_out(hid))))

    def summary(self) -> list[tuple[str, tuple[int, ...], int]]:
        return [(name, p.shape, int(p.data.size)) for name, p in self.named_parameters()]


def predict(x_t: np.ndarray, x_e: np.ndarray, t: int, model: NoisePredictor) -> np.ndarray:
    """Single-image convenience wrapper: (3, H, W) in, (3, H, W) out."""
    out = model(Tensor(np.asarray(x_t)[None]), Tensor(np.asarray(x_e)[None]), np.array([t]))
    return out.data[0]
