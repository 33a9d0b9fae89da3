"""Reverse-chain sampling: super-resolution, diverse samples, content fusion
and latent interpolation.

Each request owns its randomness. The starting latent comes from stream
``LATENT`` of the request seed and the per-step noise z from stream ``Z``, so
changing how the start is formed never changes the z sequence.

With ``clip_x0`` (the default) every step first clips the x_0 implied by the
noise estimate to the range of the diffused quantity, then takes the usual
reverse step around it. The chain state x_t itself is never clamped. Without
the clip, the last cosine steps (beta up to 0.999) amplify any noise-estimate
error roughly 30-fold and an imperfect model diverges.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backend import Rng, Tensor, no_grad
from .checkpoint import ModelBundle
from .data import down, up
from .diffusion import clip_eps, q_sample, reverse_step
from .metrics import pixel_sigma, sigma_map
from .unet import DivisibilityError

LATENT = 0
Z = 1


@dataclass
class SampleResult:
    image: np.ndarray            # clamped SR output, CHW
    x0: np.ndarray               # chain output before adding up(x_L) and clamping
    trace: dict[int, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class Region:
    top: int
    left: int
    height: int
    width: int

    @classmethod
    def parse(cls, text: str) -> "Region":
        parts = text.split(",")
        if len(parts) != 4:
            raise ValueError(f"region must be 't,l,h,w', got {text!r}")
        try:
            vals = [int(p.strip()) for p in parts]
        except ValueError:
            raise ValueError(f"region must be four integers, got {text!r}") from None
        return cls(*vals)

    def check(self, h: int, w: int) -> None:
        if self.height <= 0 or self.width <= 0 or self.top < 0 or self.left < 0 \
                or self.top + self.height > h or self.left + self.width > w:
            raise ValueError(f"region {self} does not fit in a {h}x{w} image")

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return (slice(None), slice(self.top, self.top + self.height), slice(self.left, self.left + self.width))


def _check_lr(model: ModelBundle, x_l: np.ndarray) -> None:
    if x_l.ndim != 3 or x_l.shape[0] != 3:
        raise ValueError(f"LR image must be (3, h, w), got {x_l.shape}")
    h, w = x_l.shape[1] * model.scale, x_l.shape[2] * model.scale
    if h % 16 or w % 16:
        raise DivisibilityError(f"SR size {h}x{w} ({model.scale}x of {x_l.shape[1]}x{x_l.shape[2]}) is not divisible by 16")


def condition(model: ModelBundle, x_l: np.ndarray) -> np.ndarray:
    with no_grad():
        return model.encoder.encode(Tensor(x_l[None])).data


def x0_range(model: ModelBundle) -> tuple[float, float]:
    """Value range of what the model diffuses: residuals lie in [-1, 1], images in [0, 1]."""
    return (-1.0, 1.0) if model.train_cfg.residual_prediction else (0.0, 1.0)


def reverse_chain(model: ModelBundle, x_start: np.ndarray, x_e: np.ndarray, t_start: int,
                  z_rng: Rng, record_trace: bool = False,
                  clip_x0: bool = True) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Iterate reverse steps t_start..1 from ``x_start``; returns x_0 and an optional trace of x_t."""
    s = model.schedule
    lo, hi = x0_range(model)
    x = x_start.astype(np.float32)
    trace = {}
    with no_grad():
        for t in range(t_start, 0, -1):
            if record_trace:
                trace[t] = x.copy()
            eps_hat = model.predictor(Tensor(x[None]), Tensor(x_e), np.array([t])).data[0]
            if clip_x0:
                eps_hat = clip_eps(x, eps_hat, t, s, lo, hi)
            z = z_rng.normal(x.shape) if t > 1 else np.zeros_like(x)
            x = reverse_step(x, eps_hat, t, z, s)
    if record_trace:
        trace[0] = x.copy()
    return x, trace


def _finish(model: ModelBundle, x0: np.ndarray, up_l: np.ndarray) -> np.ndarray:
    out = x0 + up_l if model.train_cfg.residual_prediction else x0
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def super_resolve(model: ModelBundle, x_l: np.ndarray, seed: int, record_trace: bool = False,
                  clip_x0: bool = True) -> SampleResult:
    x_l = np.asarray(x_l, dtype=np.float32)
    _check_lr(model, x_l)
    x_e = condition(model, x_l)
    up_l = up(x_l, model.scale)
    x_T = Rng(seed, LATENT).normal(up_l.shape)
    x0, trace = reverse_chain(model, x_T, x_e, model.schedule.T, Rng(seed, Z), record_trace, clip_x0)
    return SampleResult(_finish(model, x0, up_l), x0, trace)


def sample_diverse(model: ModelBundle, x_l: np.ndarray, n: int, base_seed: int, clip_x0: bool = True):
    """``n`` samples with seeds base_seed..base_seed+n-1; returns (samples, sigma map, mean sigma)."""
    if n < 2:
        raise ValueError("sample_diverse needs n >= 2")
    samples = [super_resolve(model, x_l, base_seed + i, clip_x0=clip_x0).image for i in range(n)]
    return samples, sigma_map(samples), pixel_sigma(samples)


def content_fuse(model: ModelBundle, x_face: np.ndarray, x_eye: np.ndarray, region: Region,
                 t_bar: int, seed: int, clip_x0: bool = True) -> np.ndarray:
    """Paste ``region`` of x_eye into x_face, partially diffuse to t_bar, denoise, and paste the
    regenerated region back into the untouched face."""
    x_face = np.asarray(x_face, dtype=np.float32)
    x_eye = np.asarray(x_eye, dtype=np.float32)
    if x_face.shape != x_eye.shape:
        raise ValueError(f"face {x_face.shape} and eye source {x_eye.shape} differ in size")
    if not 0 <= t_bar <= model.schedule.T:
        raise ValueError(f"t_bar {t_bar} outside [0, {model.schedule.T}]")
    region.check(*x_face.shape[1:])
    sl = region.slices
    x_f = x_face.copy()
    x_f[sl] = x_eye[sl]
    if t_bar == 0:
        return x_f

    x_l = down(x_face, model.scale)
    _check_lr(model, x_l)
    up_l = up(x_l, model.scale)
    x0 = x_f - up_l if model.train_cfg.residual_prediction else x_f
    eps = Rng(seed, LATENT).normal(x0.shape)
    x_tbar = q_sample(x0, t_bar, eps, model.schedule)
    x0_hat, _ = reverse_chain(model, x_tbar, condition(model, x_l), t_bar, Rng(seed, Z), clip_x0=clip_x0)
    sr = _finish(model, x0_hat, up_l)
    out = x_face.copy()
    out[sl] = sr[sl]
    return out


def latent_interpolate(model: ModelBundle, x_l: np.ndarray, seed_a: int, seed_b: int, lam: float,
                       t_bar: int, z_seed: int | None = None, clip_x0: bool = True) -> np.ndarray:
    """Reverse chain from lam * x_a + (1 - lam) * x_b at step t_bar.

    The z sequence comes from ``z_seed`` (default ``seed_a``) and is the same
    for every lam, so a sweep varies only the starting latent.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda {lam} outside [0, 1]")
    if not 1 <= t_bar <= model.schedule.T:
        raise ValueError(f"t_bar {t_bar} outside [1, {model.schedule.T}]")
    x_l = np.asarray(x_l, dtype=np.float32)
    _check_lr(model, x_l)
    up_l = up(x_l, model.scale)
    xa = Rng(seed_a, LATENT).normal(up_l.shape)
    xb = Rng(seed_b, LATENT).normal(up_l.shape)
    lam32 = np.float32(lam)
    start = lam32 * xa + (np.float32(1) - lam32) * xb
    x0, _ = reverse_chain(model, start, condition(model, x_l), t_bar,
                          Rng(seed_a if z_seed is None else z_seed, Z), clip_x0=clip_x0)
    return _finish(model, x0, up_l)
