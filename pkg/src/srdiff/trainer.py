"""Encoder pretraining, the diffusion training loop and run bookkeeping."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .backend import Rng, Tensor, adam_step, backward, clip_grad_norm, no_grad
from .backend import abs as t_abs
from .backend import mean as t_mean
from .checkpoint import ModelBundle, load_checkpoint, save_checkpoint
from .data import PairSet, up
from .diffusion import q_sample

log = logging.getLogger(__name__)

# Rng streams derived from the run seed.
STREAM_PRETRAIN = 2
STREAM_TRAIN = 1

MAX_CONSECUTIVE_SKIPS = 10


class NumericAbort(FloatingPointError):
    """Training hit non-finite values it cannot recover from."""

    def __init__(self, msg: str, manifest_entries=()):
        super().__init__(msg)
        self.manifest_entries = list(manifest_entries)


@dataclass
class StepRecord:
    """What one diffusion step drew and diffused; handed to probes."""

    step: int
    idx: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    x0: np.ndarray
    x_t: np.ndarray
    x_e: np.ndarray
    loss: float


class Trainer:
    """Owns a ModelBundle's parameters for the duration of a run."""

    def __init__(self, bundle: ModelBundle, pairs: PairSet, out_dir=None,
                 probe: Callable[[StepRecord], None] | None = None):
        if pairs.scale != bundle.scale:
            raise ValueError(f"pairs have scale {pairs.scale}, model expects {bundle.scale}")
        self.bundle = bundle
        self.pairs = pairs
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.probe = probe
        state = bundle.rng_state or {}
        self.pretrain_rng = Rng.from_state(state["pretrain"]) if "pretrain" in state else Rng(self.cfg.seed, STREAM_PRETRAIN)
        self.train_rng = Rng.from_state(state["train"]) if "train" in state else Rng(self.cfg.seed, STREAM_TRAIN)
        self.consecutive_skips = 0
        self.skipped_total = 0
        self._up = up(pairs.lr, pairs.scale)
        self._feat_cache: dict[int, np.ndarray] = {}

    @property
    def cfg(self):
        return self.bundle.train_cfg

    # --- encoder pretraining --------------------------------------------------

    def pretrain_step(self) -> float:
        b = self.bundle
        enc = b.encoder
        enc.set_requires_grad(True)
        idx = self.pretrain_rng.integers(0, len(self.pairs), self.cfg.pretrain_batch_size)
        x_l = Tensor(self.pairs.lr[idx])
        x_h = Tensor(self.pairs.hr[idx])
        loss = t_mean(t_abs(enc.sr_head(x_l) - x_h))
        value = float(loss.data)
        if not math.isfinite(value):
            entries = [self.pairs.manifest[i] for i in idx] if self.pairs.manifest else idx.tolist()
            raise NumericAbort(f"non-finite pretraining loss at step {b.pretrain_step}", entries)
        backward(loss)
        params = list(enc.named_parameters())
        if self.cfg.grad_clip is not None:
            clip_grad_norm([p for _, p in params], self.cfg.grad_clip)
        adam_step(params, self.cfg.lr_at(b.pretrain_step))
        b.pretrain_step += 1
        return value

    def pretrain_encoder(self, steps: int | None = None, log_path=None) -> list[float]:
        """L1 pretraining of the encoder's SR head; returns the loss curve."""
        target = self.cfg.pretrain_steps if steps is None else self.bundle.pretrain_step + steps
        curve = []
        with _LossLog(log_path, self.bundle.pretrain_step) as out:
            while self.bundle.pretrain_step < target:
                lr = self.cfg.lr_at(self.bundle.pretrain_step)
                curve.append(self.pretrain_step())
                out.write(self.bundle.pretrain_step, curve[-1], lr)
        self._feat_cache.clear()
        return curve

    # --- diffusion training ---------------------------------------------------

    def _features(self, idx: np.ndarray) -> np.ndarray:
        """Encoder features for a batch, cached per pair while the encoder is frozen.

        Pairs are encoded one at a time: batched matmuls may round differently
        depending on batch composition, which would make a resumed run drift.
        """
        enc = self.bundle.encoder
        for i in sorted({int(i) for i in idx} - set(self._feat_cache)):
            with no_grad():
                self._feat_cache[i] = enc.encode(Tensor(self.pairs.lr[i:i + 1])).data[0]
        return np.stack([self._feat_cache[int(i)] for i in idx])

    def diffusion_target(self, idx: np.ndarray) -> np.ndarray:
        """x_0 for a batch: the residual, or x_H itself when residual prediction is off."""
        hr = self.pairs.hr[idx]
        if self.cfg.residual_prediction:
            return hr - self._up[idx]
        return hr.copy()

    def train_step(self) -> float | None:
        """One Adam step on the L1 noise loss; ``None`` if the step was skipped."""
        b, cfg = self.bundle, self.cfg
        n = cfg.batch_size
        idx = self.train_rng.integers(0, len(self.pairs), n)
        t = self.train_rng.integers(1, cfg.T + 1, n)
        x0 = self.diffusion_target(idx)
        eps = self.train_rng.normal(x0.shape)
        x_t = q_sample(x0, t, eps, b.schedule)

        frozen = cfg.freeze_encoder
        b.encoder.set_requires_grad(not frozen)
        if frozen:
            x_e = Tensor(self._features(idx))
        else:
            x_e = b.encoder.encode(Tensor(self.pairs.lr[idx]))
        pred = b.predictor(Tensor(x_t), x_e, t)
        loss = t_mean(t_abs(pred - Tensor(eps)))
        value = float(loss.data)
        step = b.step
        b.step += 1
        if self.probe is not None:
            self.probe(StepRecord(step, idx, t, eps, x0, x_t, x_e.data, value))

        if not math.isfinite(value):
            self.consecutive_skips += 1
            self.skipped_total += 1
            b.predictor.zero_grad()
            log.warning("step %d: non-finite loss, skipped (%d in a row)", step, self.consecutive_skips)
            if self.consecutive_skips >= MAX_CONSECUTIVE_SKIPS:
                raise NumericAbort(f"{MAX_CONSECUTIVE_SKIPS} consecutive non-finite losses, last at step {step}")
            return None
        self.consecutive_skips = 0

        backward(loss)
        params = list(b.predictor.named_parameters())
        if not frozen:
            params += list(b.encoder.named_parameters())
            self._feat_cache.clear()
        if cfg.grad_clip is not None:
            clip_grad_norm([p for _, p in params], cfg.grad_clip)
        adam_step(params, cfg.lr_at(step))
        return value

    # --- run ------------------------------------------------------------------

    def snapshot_rng(self) -> None:
        self.bundle.rng_state = {"pretrain": self.pretrain_rng.get_state(), "train": self.train_rng.get_state()}

    def save(self, path=None) -> Path:
        self.snapshot_rng()
        return save_checkpoint(self.bundle, path or self.out_dir / "checkpoint")

    def fit(self, total_steps: int | None = None) -> ModelBundle:
        """Pretrain (unless done already), then train up to ``total_steps``.

        Writes ``pretrain.tsv`` and ``loss.tsv`` (``step<TAB>loss<TAB>lr``),
        a checkpoint every ``checkpoint_every`` steps and at the end, and the
        wall time in ``run.json``. Ctrl-C saves a final checkpoint first.
        """
        if self.out_dir is None:
            raise ValueError("fit() needs an output directory")
        self.out_dir.mkdir(parents=True, exist_ok=True)
        cfg, b = self.cfg, self.bundle
        total = cfg.total_steps if total_steps is None else total_steps
        t0 = time.perf_counter()
        try:
            if b.pretrain_step < cfg.pretrain_steps:
                self.pretrain_encoder(log_path=self.out_dir / "pretrain.tsv")
                self.save()
            with _LossLog(self.out_dir / "loss.tsv", b.step) as out:
                while b.step < total:
                    lr = cfg.lr_at(b.step)
                    loss = self.train_step()
                    if b.step % cfg.log_every == 0 or b.step == total:
                        out.write(b.step, loss, lr)
                    if b.step % cfg.checkpoint_every == 0:
                        self.save()
        except KeyboardInterrupt:
            log.warning("interrupted at step %d; saving checkpoint", b.step)
            self.save()
            raise
        self.save()
        wall = time.perf_counter() - t0
        run = {"wall_time_s": round(wall, 3), "step": b.step, "pretrain_step": b.pretrain_step,
               "skipped_steps": self.skipped_total}
        (self.out_dir / "run.json").write_text(json.dumps(run, indent=1, sort_keys=True) + "\n")
        log.info("finished at step %d in %.1f s", b.step, wall)
        return b

    @classmethod
    def resume(cls, ckpt_dir, pairs: PairSet, out_dir=None, probe=None) -> "Trainer":
        return cls(load_checkpoint(ckpt_dir), pairs, out_dir, probe)


class _LossLog:
    """Appends ``step<TAB>loss<TAB>lr`` lines, dropping any lines past ``start``.

    Truncating on open keeps a resumed run's log identical to an
    uninterrupted one.
    """

    def __init__(self, path, start: int):
        self.path = Path(path) if path is not None else None
        self.start = start
        self.f = None

    def __enter__(self):
        if self.path is None:
            return self
        keep = []
        if self.path.exists() and self.start > 0:
            for line in self.path.read_text().splitlines(keepends=True):
                if line.split("\t", 1)[0].isdigit() and int(line.split("\t", 1)[0]) <= self.start:
                    keep.append(line)
        self.f = open(self.path, "w")
        self.f.writelines(keep)
        return self

    def write(self, step: int, loss: float | None, lr: float) -> None:
        if self.f is not None:
            loss_s = "nan" if loss is None else f"{loss:.8f}"
            self.f.write(f"{step}\t{loss_s}\t{lr:.6g}\n")
            self.f.flush()

    def __exit__(self, *exc):
        if self.f is not None:
            self.f.close()
        return False


def read_loss_log(path) -> list[tuple[int, float, float]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        s, l, r = line.split("\t")
        rows.append((int(s), float(l), float(r)))
    return rows
