"""Image I/O, MATLAB-style bicubic resampling, LR/HR pair construction, residuals.

Images are float32 CHW arrays in [0, 1] with three RGB channels.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .backend import Rng

log = logging.getLogger(__name__)


class ImageError(ValueError):
    """Unreadable or malformed image file."""


# --- I/O ---------------------------------------------------------------------

def load_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (OSError, ValueError) as e:
        raise ImageError(f"cannot read image {path}: {e}") from e
    return np.clip(arr.transpose(2, 0, 1) / 255.0, 0.0, 1.0).astype(np.float32)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """[0,1] CHW float -> HWC uint8, rounding half away from zero."""
    v = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8).transpose(1, 2, 0)


def save_png(img: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


# --- bicubic -----------------------------------------------------------------

def cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel."""
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax <= 2, far, 0.0))


def resize_weights(in_len: int, out_len: int, antialias: bool) -> np.ndarray:
    """(out_len, in_len) interpolation matrix, MATLAB ``imresize`` conventions.

    Pixel centres are aligned (half-pixel offset), the kernel is stretched by
    1/scale when shrinking with antialiasing, each row is normalised to sum to
    one and out-of-range taps are clamped to the border pixel.
    """
    scale = out_len / in_len
    width = 4.0
    if antialias and scale < 1:
        width = 4.0 / scale
    x = np.arange(1, out_len + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(u - width / 2)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    dist = u[:, None] - idx
    if antialias and scale < 1:
        w = scale * cubic(dist * scale)
    else:
        w = cubic(dist)
    w = w / w.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 1, in_len).astype(np.int64) - 1
    mat = np.zeros((out_len, in_len), dtype=np.float64)
    rows = np.repeat(np.arange(out_len), taps)
    np.add.at(mat, (rows, idx.ravel()), w.ravel())
    return mat


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int, antialias: bool = True) -> np.ndarray:
    """Resize a CHW (or batched NCHW) image; output clamped to [0, 1]."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    img = np.asarray(img)
    h, w = img.shape[-2:]
    wh = resize_weights(h, out_h, antialias)
    ww = resize_weights(w, out_w, antialias)
    out = np.einsum("ih,...hw,jw->...ij", wh, img.astype(np.float64), ww, optimize=True)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def up(x_l: np.ndarray, scale: int) -> np.ndarray:
    """The bicubic upsampling used for residuals, sampling and metrics alike."""
    h, w = np.asarray(x_l).shape[-2:]
    return bicubic_resize(x_l, h * scale, w * scale, antialias=False)


def down(x_h: np.ndarray, scale: int) -> np.ndarray:
    h, w = np.asarray(x_h).shape[-2:]
    if h % scale or w % scale:
        raise ValueError(f"image {h}x{w} is not divisible by scale {scale}")
    return bicubic_resize(x_h, h // scale, w // scale, antialias=True)


def residual(x_h: np.ndarray, x_l: np.ndarray, scale: int) -> np.ndarray:
    """x_H - up(x_L)."""
    x_h, x_l = np.asarray(x_h), np.asarray(x_l)
    if x_h.shape[-2:] != (x_l.shape[-2] * scale, x_l.shape[-1] * scale) or x_h.shape[:-2] != x_l.shape[:-2]:
        raise ValueError(f"HR {x_h.shape} and LR {x_l.shape} are inconsistent with scale {scale}")
    return x_h - up(x_l, scale)


# --- pairs -------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    hr_path: str
    crop_y: int
    crop_x: int
    patch: int
    scale: int

    def line(self) -> str:
        return f"{self.hr_path}\t{self.crop_y}\t{self.crop_x}\t{self.patch}\t{self.scale}"

    @classmethod
    def parse(cls, line: str) -> "ManifestEntry":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 5:
            raise ValueError(f"bad manifest line: {line!r}")
        return cls(parts[0], int(parts[1]), int(parts[2]), int(parts[3]), int(parts[4]))


@dataclass
class PairSet:
    lr: np.ndarray  # (K, 3, patch/scale, patch/scale)
    hr: np.ndarray  # (K, 3, patch, patch)
    scale: int
    patch: int
    manifest: list[ManifestEntry] = field(default_factory=list)
    skipped: int = 0

    def __post_init__(self):
        if self.hr.shape[-2:] != (self.lr.shape[-2] * self.scale, self.lr.shape[-1] * self.scale):
            raise ValueError("HR dims must be scale x LR dims")
        self.lr.setflags(write=False)
        self.hr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.hr)

    def write_manifest(self, path) -> None:
        Path(path).write_text("".join(e.line() + "\n" for e in self.manifest))

    @classmethod
    def from_manifest(cls, path) -> "PairSet":
        entries = [ManifestEntry.parse(l) for l in Path(path).read_text().splitlines() if l.strip()]
        if not entries:
            raise ValueError(f"empty manifest {path}")
        hrs, lrs = [], []
        for e in entries:
            img = load_png(e.hr_path)
            hr = img[:, e.crop_y:e.crop_y + e.patch, e.crop_x:e.crop_x + e.patch]
            hrs.append(hr)
            lrs.append(down(hr, e.scale))
        return cls(np.stack(lrs), np.stack(hrs), entries[0].scale, entries[0].patch, entries)

    @classmethod
    def from_arrays(cls, hr: np.ndarray, scale: int) -> "PairSet":
        """Pairs from in-memory HR patches (K, 3, H, W) or a single (3, H, W)."""
        hr = np.asarray(hr, dtype=np.float32)
        if hr.ndim == 3:
            hr = hr[None]
        lr = np.stack([down(h, scale) for h in hr])
        return cls(lr, hr.copy(), scale, hr.shape[-1])


def list_images(d) -> list[Path]:
    return sorted(p for p in Path(d).iterdir() if p.suffix.lower() == ".png")


def make_pairs(hr_dir, scale: int, patch: int, rng: Rng | None = None, patches_per_image: int = 1) -> PairSet:
    """Crop HR patches and bicubic-downsample them.

    With ``rng`` the crop offsets are random (training); without, each image
    contributes its central patch (evaluation). Images smaller than the patch
    are skipped and counted.
    """
    if patch % 16 or patch % scale:
        raise ValueError(f"patch {patch} must be divisible by 16 and by scale {scale}")
    files = list_images(hr_dir)
    hrs, lrs, entries = [], [], []
    skipped = 0
    for f in files:
        img = load_png(f)
        _, h, w = img.shape
        if h < patch or w < patch:
            skipped += 1
            continue
        for _ in range(patches_per_image if rng is not None else 1):
            if rng is None:
                y, x = (h - patch) // 2, (w - patch) // 2
            else:
                y = int(rng.integers(0, h - patch + 1))
                x = int(rng.integers(0, w - patch + 1))
            hr = img[:, y:y + patch, x:x + patch]
            hrs.append(hr)
            lrs.append(down(hr, scale))
            entries.append(ManifestEntry(str(f), y, x, patch, scale))
    if skipped:
        log.warning("skipped %d image(s) smaller than %dx%d", skipped, patch, patch)
    if not hrs:
        raise ImageError(f"no usable images in {hr_dir}")
    return PairSet(np.stack(lrs), np.stack(hrs), scale, patch, entries, skipped)
