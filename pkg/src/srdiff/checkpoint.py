"""Model bundle and the on-disk checkpoint format.

A checkpoint is a directory holding ``manifest.json`` (configs, schedule,
tensor names and shapes, step, rng state) and ``weights.bin``: little-endian
float32 tensors concatenated in manifest order. Optimizer moments follow the
weights when present, so training can resume exactly.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backend import Parameter, Rng
from .config import EncoderConfig, PredictorConfig, RunConfig, TrainConfig, from_dict
from .diffusion import Schedule, make_schedule
from .rrdb import LREncoder
from .unet import NoisePredictor

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
WEIGHTS = "weights.bin"
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


@dataclass
class ModelBundle:
    predictor: NoisePredictor
    encoder: LREncoder
    schedule: Schedule
    train_cfg: TrainConfig
    encoder_cfg: EncoderConfig
    predictor_cfg: PredictorConfig
    step: int = 0
    pretrain_step: int = 0
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)

    @property
    def scale(self) -> int:
        return self.encoder_cfg.scale

    def named_parameters(self):
        yield from (("predictor." + n, p) for n, p in self.predictor.named_parameters())
        yield from (("encoder." + n, p) for n, p in self.encoder.named_parameters())

    def num_parameters(self) -> int:
        return self.predictor.num_parameters() + self.encoder.num_parameters()


def build_model(train_cfg: TrainConfig, encoder_cfg: EncoderConfig, predictor_cfg: PredictorConfig,
                seed: int | None = None) -> ModelBundle:
    """Fresh bundle; weight init draws from stream 100 of the run seed."""
    if encoder_cfg.feature_channels != predictor_cfg.cond_channels:
        raise ValueError("predictor cond_channels must equal encoder feature_channels")
    rng = Rng(train_cfg.seed if seed is None else seed, stream=100)
    enc = LREncoder(encoder_cfg, rng)
    pred = NoisePredictor(predictor_cfg, rng)
    return ModelBundle(pred, enc, make_schedule(train_cfg.T, train_cfg.schedule),
                       train_cfg, encoder_cfg, predictor_cfg)


def build_from_run(cfg: RunConfig) -> ModelBundle:
    return build_model(cfg.train, cfg.encoder, cfg.predictor)


def _write_synced(path: Path, data: bytes) -> None:
    with open(path, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())


def _cfg_dict(cfg) -> dict:
    d = dict(vars(cfg))
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


def save_checkpoint(bundle: ModelBundle, path, with_optimizer: bool = True) -> Path:
    """Write ``bundle`` into directory ``path``.

    Both files are written to a sibling temp directory which is then renamed
    into place, so a crash leaves either the old or the new checkpoint.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    params = list(bundle.named_parameters())
    has_opt = with_optimizer and any(p.step_count for _, p in params)
    tensors = [{"name": n, "shape": list(p.shape)} for n, p in params]
    chunks = [np.ascontiguousarray(p.data, dtype=_LE_F32).tobytes() for _, p in params]
    if has_opt:
        for _, p in params:
            chunks.append(np.ascontiguousarray(p.adam_m, dtype=_LE_F32).tobytes())
            chunks.append(np.ascontiguousarray(p.adam_v, dtype=_LE_F32).tobytes())
    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "train": _cfg_dict(bundle.train_cfg),
        "encoder": _cfg_dict(bundle.encoder_cfg),
        "predictor": _cfg_dict(bundle.predictor_cfg),
        "schedule": {"kind": bundle.schedule.kind, "T": bundle.schedule.T},
        "step": bundle.step,
        "pretrain_step": bundle.pretrain_step,
        "rng_state": bundle.rng_state,
        "num_parameters": bundle.num_parameters(),
        "tensors": tensors,
        "optimizer": {"adam_steps": [p.step_count for _, p in params]} if has_opt else None,
        "weights_bytes": len(blob),
        "extra": bundle.extra,
    }
    tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=path.name + ".tmp-"))
    try:
        _write_synced(tmp / WEIGHTS, blob)
        _write_synced(tmp / MANIFEST, (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode())
        old = None
        if path.exists():
            old = path.with_name(tmp.name.replace(".tmp-", ".old-"))
            os.replace(path, old)
        os.replace(tmp, path)
        if old is not None:
            shutil.rmtree(old)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def read_manifest(path) -> dict:
    f = Path(path) / MANIFEST
    if not f.is_file():
        raise CheckpointError(f"no checkpoint manifest at {f}")
    try:
        return json.loads(f.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt manifest {f}: {e}") from e


def load_checkpoint(path) -> ModelBundle:
    path = Path(path)
    man = read_manifest(path)
    if man.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {man.get('format_version')!r}, this build reads {FORMAT_VERSION}")
    train = from_dict(TrainConfig, man["train"])
    enc = from_dict(EncoderConfig, man["encoder"])
    pred = from_dict(PredictorConfig, man["predictor"])
    if man["schedule"] != {"kind": train.schedule, "T": train.T}:
        raise CheckpointError(f"schedule {man['schedule']} disagrees with train config")
    bundle = build_model(train, enc, pred)
    params = dict(bundle.named_parameters())

    listed = [t["name"] for t in man["tensors"]]
    missing = sorted(set(params) - set(listed))
    unknown = sorted(set(listed) - set(params))
    if missing or unknown:
        raise CheckpointShapeError(f"tensor names disagree with configs: missing {missing[:5]}, unknown {unknown[:5]}")
    for t in man["tensors"]:
        want = params[t["name"]].shape
        if tuple(t["shape"]) != want:
            raise CheckpointShapeError(f"tensor {t['name']}: manifest shape {tuple(t['shape'])}, config implies {want}")

    blob = (path / WEIGHTS).read_bytes() if (path / WEIGHTS).is_file() else b""
    n_weights = sum(int(np.prod(t["shape"])) for t in man["tensors"])
    has_opt = man.get("optimizer") is not None
    expect = 4 * n_weights * (3 if has_opt else 1)
    if len(blob) < expect or man.get("weights_bytes", expect) != len(blob):
        raise CheckpointTruncatedError(f"{path / WEIGHTS}: {len(blob)} bytes, expected {expect}")
    if len(blob) != expect:
        raise CheckpointError(f"{path / WEIGHTS}: {len(blob)} bytes, expected {expect}")

    flat = np.frombuffer(blob, dtype=_LE_F32)
    off = 0

    def take(shape):
        nonlocal off
        n = int(np.prod(shape))
        arr = flat[off:off + n].reshape(shape).astype(np.float32)
        off += n
        return arr

    ordered: list[Parameter] = []
    for t in man["tensors"]:
        p = params[t["name"]]
        p.data = take(p.shape)
        ordered.append(p)
    if has_opt:
        for p, steps in zip(ordered, man["optimizer"]["adam_steps"]):
            p.adam_m = take(p.shape)
            p.adam_v = take(p.shape)
            p.step_count = int(steps)
    bundle.step = int(man["step"])
    bundle.pretrain_step = int(man.get("pretrain_step", 0))
    bundle.rng_state = man.get("rng_state")
    bundle.extra = man.get("extra") or {}
    return bundle
