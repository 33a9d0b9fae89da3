"""PSNR, SSIM, LR-PSNR and pixel standard deviation, plus corpus reports.

All metrics take [0, 1] CHW float images and compute in float64.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import bicubic_resize, load_png, list_images


def _pair(a, b, what: str) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{what}: dimension mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10 log10(1 / MSE) over all channels and pixels; ``inf`` for identical images."""
    a, b = _pair(a, b, "psnr")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    tmp = sliding_window_view(img, k, axis=-2) @ g
    return sliding_window_view(tmp, k, axis=-1) @ g


def ssim(a, b, win: int = 11, sigma: float = 1.5, data_range: float = 1.0) -> float:
    """Mean local SSIM (Gaussian window, valid region), averaged over channels."""
    a, b = _pair(a, b, "ssim")
    if a.shape[-1] < win or a.shape[-2] < win:
        raise ValueError(f"ssim needs images of at least {win}x{win}, got {a.shape[-2]}x{a.shape[-1]}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    g = gaussian_window(win, sigma)
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a ** 2
    sbb = _filter_valid(b * b, g) - mu_b ** 2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    per_channel = (num / den).reshape(a.shape[0], -1).mean(axis=1)
    return float(per_channel.mean())


def lr_psnr(sr, x_l, scale: int) -> float:
    """PSNR between the bicubic-downsampled SR image and the LR input."""
    sr, x_l = np.asarray(sr), np.asarray(x_l)
    if sr.shape[-2:] != (x_l.shape[-2] * scale, x_l.shape[-1] * scale):
        raise ValueError(f"lr_psnr: SR {sr.shape} is not {scale}x LR {x_l.shape}")
    return psnr(bicubic_resize(sr, x_l.shape[-2], x_l.shape[-1], antialias=True), x_l)


def sigma_map(samples) -> np.ndarray:
    """Per-pixel population std across samples, on the 0-255 scale."""
    stack = np.stack([np.asarray(s, dtype=np.float64) for s in samples]) * 255.0
    if stack.shape[0] < 2:
        raise ValueError("pixel sigma needs at least 2 samples")
    return stack.std(axis=0)


def pixel_sigma(samples) -> float:
    samples = list(samples)
    if len(samples) < 2:
        raise ValueError("pixel sigma needs at least 2 samples")
    shapes = {np.shape(s) for s in samples}
    if len(shapes) != 1:
        raise ValueError(f"samples differ in shape: {sorted(shapes)}")
    return float(sigma_map(samples).mean())


# --- reports -----------------------------------------------------------------

REPORT_SCHEMA = {
    "type": "object",
    "required": ["images", "mean", "count", "unmatched", "config"],
    "properties": {
        "images": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "psnr", "ssim"],
                "properties": {
                    "name": {"type": "string"},
                    "psnr": {"type": ["number", "string"]},
                    "ssim": {"type": "number", "minimum": -1, "maximum": 1},
                    "lr_psnr": {"type": ["number", "string", "null"]},
                },
            },
        },
        "mean": {
            "type": "object",
            "required": ["psnr", "ssim"],
            "properties": {
                "psnr": {"type": ["number", "string"]},
                "ssim": {"type": "number"},
                "lr_psnr": {"type": ["number", "string", "null"]},
                "sigma": {"type": ["number", "null"]},
            },
        },
        "count": {"type": "integer", "minimum": 0},
        "unmatched": {"type": "array", "items": {"type": "string"}},
        "config": {"type": "object"},
    },
}


def _num(v):
    """JSON cannot carry inf; it is written as the string "inf"."""
    if v is None:
        return None
    return "inf" if math.isinf(v) else v


@dataclass
class ImageMetrics:
    name: str
    psnr: float
    ssim: float
    lr_psnr: float | None = None


@dataclass
class MetricsReport:
    images: list[ImageMetrics] = field(default_factory=list)
    sigma: float | None = None
    unmatched: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.images)

    def mean(self, key: str) -> float | None:
        vals = [getattr(m, key) for m in self.images]
        if not vals or any(v is None for v in vals):
            return None
        return float(np.mean(vals))

    def to_json(self) -> dict:
        return {
            "images": [{k: _num(v) if k != "name" else v for k, v in asdict(m).items()} for m in self.images],
            "mean": {
                "psnr": _num(self.mean("psnr")),
                "ssim": self.mean("ssim"),
                "lr_psnr": _num(self.mean("lr_psnr")),
                "sigma": self.sigma,
            },
            "count": self.count,
            "unmatched": self.unmatched,
            "config": self.config,
        }

    def to_tsv(self) -> str:
        def fmt(v):
            return "" if v is None else ("inf" if math.isinf(v) else f"{v:.4f}")

        lines = ["name\tpsnr\tssim\tlr_psnr"]
        lines += [f"{m.name}\t{fmt(m.psnr)}\t{fmt(m.ssim)}\t{fmt(m.lr_psnr)}" for m in self.images]
        lines.append(f"MEAN\t{fmt(self.mean('psnr'))}\t{fmt(self.mean('ssim'))}\t{fmt(self.mean('lr_psnr'))}")
        return "\n".join(lines) + "\n"

    def write(self, json_path) -> tuple[Path, Path]:
        json_path = Path(json_path)
        json_path.parent.mkdir(parents=True, exist_ok=True)
        json_path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        tsv_path = json_path.with_suffix(".tsv")
        tsv_path.write_text(self.to_tsv())
        return json_path, tsv_path


def evaluate_dirs(sr_dir, hr_dir, lr_dir=None, scale: int | None = None) -> MetricsReport:
    """Pair files by name across directories and score each SR image."""
    sr = {p.name: p for p in list_images(sr_dir)}
    hr = {p.name: p for p in list_images(hr_dir)}
    lr = {p.name: p for p in list_images(lr_dir)} if lr_dir else {}
    names = sorted(set(sr) & set(hr))
    if lr_dir:
        names = [n for n in names if n in lr]
    matched = set(names)
    unmatched = sorted((set(sr) | set(hr) | set(lr)) - matched)
    report = MetricsReport(unmatched=unmatched,
                           config={"sr_dir": str(sr_dir), "hr_dir": str(hr_dir),
                                   "lr_dir": str(lr_dir) if lr_dir else None, "scale": scale})
    for n in names:
        a, b = load_png(sr[n]), load_png(hr[n])
        lp = lr_psnr(a, load_png(lr[n]), scale) if lr_dir and scale else None
        report.images.append(ImageMetrics(n, psnr(a, b), ssim(a, b), lp))
    return report
