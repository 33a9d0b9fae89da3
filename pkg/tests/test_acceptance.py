"""Acceptance criteria 1 to 11, one test each.

Every test records a PASS/FAIL line that conftest prints in the terminal
summary. Criteria 6 to 8 share one overfit training run (about 15 minutes on
one core) and criterion 10 trains two more models (under 2 hours); all four
are marked ``slow``, so ``-m "not slow"`` runs the rest in about a minute.
"""

import math
import os
import time
from contextlib import contextmanager
from dataclasses import replace

import numpy as np
import pytest

from helpers import ACCEPTANCE, fd_check
from srdiff.backend import (
    Conv2d,
    ConvTranspose2d,
    Dense,
    Parameter,
    Rng,
    Tensor,
    concat_channels,
    conv2d,
    conv2d_transpose,
    crop,
    default_dtype,
    dense,
    leaky_relu,
    mean,
    mish,
    nearest_upsample,
    square,
)
from srdiff.backend import abs as t_abs
from srdiff.backend import sum as t_sum
from srdiff.checkpoint import build_model, load_checkpoint, save_checkpoint
from srdiff.config import EncoderConfig, PredictorConfig, TrainConfig, face_config
from srdiff.data import PairSet, load_png, save_png, up
from srdiff.diffusion import Schedule, make_schedule, posterior_mean_var, q_sample, reverse_step
from srdiff.experiments import ABLATION_RUNS, SmokeConfig, pretrained_encoder, run_smoke, synthetic_hr
from srdiff.metrics import pixel_sigma, psnr, ssim
from srdiff.rrdb import LREncoder
from srdiff.sampler import LATENT, Z, Region, content_fuse, latent_interpolate, reverse_chain, super_resolve
from srdiff.trainer import Trainer
from srdiff.unet import NoisePredictor
from test_diffusion import posterior_by_integration
from test_metrics import ssim_reference


@contextmanager
def criterion(n, title, limit_s):
    """Time the body, check the runtime limit and record the outcome."""
    info = {"detail": ""}
    t0 = time.perf_counter()
    ok = False
    try:
        yield info
        secs = time.perf_counter() - t0
        assert secs < limit_s, f"took {secs:.1f} s, limit {limit_s} s"
        ok = True
    finally:
        secs = time.perf_counter() - t0
        ACCEPTANCE[n] = (ok, title, info["detail"], secs)
        print(f"{'PASS' if ok else 'FAIL'} criterion {n}: {title} ({secs:.1f} s) {info['detail']}")


SMOKE = SmokeConfig()


@pytest.fixture(scope="module")
def encoder_state():
    hr = synthetic_hr(SMOKE.hr_size, SMOKE.seed)
    return pretrained_encoder(SMOKE, PairSet.from_arrays(hr, SMOKE.scale))


@pytest.fixture(scope="module")
def smoke(encoder_state, tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    t0 = time.perf_counter()
    res, tr = run_smoke(SMOKE, out, encoder_state=encoder_state)
    # the shared pretraining counts toward this run's budget
    return res, tr, time.perf_counter() - t0 + encoder_state[3], out


# --- 1-3: diffusion analytics ---------------------------------------------------------

def test_01_schedule_analytics():
    with criterion(1, "schedule analytics", 1.0) as info:
        worst = 0.0
        for s in (make_schedule(100), make_schedule(100, "linear"), make_schedule(1000, "linear")):
            abar, v = 1.0, 0.0
            for t in range(s.T):
                abar *= 1 - s.beta[t]
                v = (1 - s.beta[t]) * v + s.beta[t]
                worst = max(worst, abs(abar - s.alpha_bar[t]), abs(v - (1 - s.alpha_bar[t])))
        bt2 = Schedule.from_betas(np.array([0.1, 0.2])).beta_tilde[1]
        info["detail"] = f"max recurrence error {worst:.1e}, beta_tilde_2 {bt2:.7f}"
        assert worst < 1e-9
        assert bt2 == pytest.approx(0.0714286, abs=1e-7)
        assert bt2 == pytest.approx(0.1 * 0.2 / 0.28, abs=1e-15)


def test_02_oracle_denoise_identity():
    with criterion(2, "oracle denoise identity", 1.0) as info:
        r = np.random.default_rng(2)
        worst = 0.0
        for i in range(100):
            s = make_schedule([5, 100, 1000][i % 3])
            x0 = r.standard_normal((3, 8, 8)).astype(np.float32)
            eps = r.standard_normal((3, 8, 8)).astype(np.float32)
            out = reverse_step(q_sample(x0, 1, eps, s), eps, 1, np.zeros_like(x0), s)
            worst = max(worst, float(np.max(np.abs(out - x0))))
        info["detail"] = f"max abs {worst:.1e}"
        assert worst < 1e-5


def test_03_posterior_integration():
    with criterion(3, "posterior vs numerical integration", 5.0) as info:
        s = Schedule.from_betas(np.array([0.1, 0.2]))
        worst = 0.0
        for x0, x2 in [(0.0, 1.0), (0.7, -0.4), (-1.3, 2.1), (2.0, 0.0)]:
            m_num, v_num = posterior_by_integration(x0, x2, 0.1, 0.2)
            m, v = posterior_mean_var(np.array(x2), np.array(x0), 2, s)
            worst = max(worst, abs(float(m) - m_num), abs(v - v_num))
        info["detail"] = f"max deviation {worst:.1e}"
        assert worst < 1e-3


# --- 4: gradients -------------------------------------------------------------------

def test_04_gradients():
    with criterion(4, "finite-difference gradients", 120.0) as info:
        rng = np.random.default_rng(4)
        worst = []
        with default_dtype(np.float64):
            p = lambda *shape: Parameter(rng.standard_normal(shape))
            a, b = p(3, 4), p(4)
            worst.append(fd_check(lambda: mean(mish(a * b + a - b)), [a, b]))
            x, y = p(2, 3, 6, 6), p(2, 2, 6, 6)
            worst.append(fd_check(lambda: mean(leaky_relu(x, 0.2) * x), [x]))
            worst.append(fd_check(lambda: t_sum(square(concat_channels([x, y]))), [x, y]))
            worst.append(fd_check(lambda: t_sum(mish(crop(nearest_upsample(x, 2), (slice(1, 5), slice(0, 7))))), [x]))
            worst.append(fd_check(lambda: mean(t_abs(x - 0.1)), [x]))
            xd, w, bd = p(5, 3), p(3, 4), p(4)
            worst.append(fd_check(lambda: t_sum(mish(dense(xd, w, bd))), [xd, w, bd]))
            for stride, pad, k in [(1, 1, 3), (2, 1, 3), (1, 0, 1)]:
                w, bc = p(4, 3, k, k), p(4)
                worst.append(fd_check(lambda: t_sum(mish(conv2d(x, w, bc, stride, pad))), [x, w, bc]))
            w, bt = p(3, 2, 4, 4), p(2)
            worst.append(fd_check(lambda: t_sum(mish(conv2d_transpose(x, w, bt, 2, 1))), [x, w, bt]))
            r = Rng(0)
            conv, tconv, lin = Conv2d(3, 4, 3, r, stride=2), ConvTranspose2d(4, 2, 4, r), Dense(2, 3, r)
            xn = p(1, 6, 6, 3)
            worst.append(fd_check(lambda: t_sum(mish(lin(tconv(mish(conv(xn)))[0, 0]))),
                                  [xn] + conv.parameters() + tconv.parameters() + lin.parameters()))

            unet = NoisePredictor(PredictorConfig(base_channels=8), Rng(0, 100))
            for q in unet.parameters():
                q.data[...] += rng.standard_normal(q.shape) * 0.05
            unet.final.weight.data[...] = rng.standard_normal(unet.final.weight.shape) * 0.3
            xu = Tensor(rng.standard_normal((1, 3, 16, 16)), requires_grad=True)
            e = Tensor(rng.standard_normal((1, 32, 16, 16)), requires_grad=True)
            tgt = Tensor(rng.standard_normal((1, 3, 16, 16)))
            worst.append(fd_check(lambda: mean(square(unet(xu, e, [17]) - tgt)),
                                  [xu, e] + unet.parameters(), h=1e-4, probes=4))

            enc = LREncoder(EncoderConfig(num_rrdb_blocks=2, scale=2), Rng(0, 100))
            for q in enc.parameters():
                q.data[...] += rng.standard_normal(q.shape) * 0.05
            xr = Tensor(rng.random((1, 3, 16, 16)), requires_grad=True)
            we = Tensor(rng.standard_normal((1, 32, 32, 32)))
            worst.append(fd_check(lambda: mean(enc.encode(xr) * we), [xr] + enc.parameters(), h=1e-5, probes=2))
            tgt = Tensor(rng.random((1, 3, 32, 32)))
            worst.append(fd_check(lambda: mean(square(enc.sr_head(xr) - tgt)), enc.parameters(), h=1e-5, probes=2))
        info["detail"] = f"worst relative error {max(worst):.1e} over {len(worst)} checks"


# --- 5: first loss ------------------------------------------------------------------

def test_05_first_loss(monkeypatch):
    from srdiff import trainer as trainer_mod
    with criterion(5, "first-loss sanity", 60.0) as info:
        monkeypatch.setattr(trainer_mod, "adam_step", lambda params, lr: None)
        tc = TrainConfig(T=100, batch_size=4, pretrain_steps=0, total_steps=50)
        b = build_model(tc, EncoderConfig(num_rrdb_blocks=1, scale=4), PredictorConfig(base_channels=8))
        pairs = PairSet.from_arrays(np.stack([synthetic_hr(32, s) for s in range(4)]), 4)
        tr = Trainer(b, pairs)
        first = float(np.mean([tr.train_step() for _ in range(50)]))
        info["detail"] = f"mean first loss {first:.4f}"
        assert first == pytest.approx(math.sqrt(2 / math.pi), abs=0.02)


# --- 6-8: the overfit model -------------------------------------------------------

@pytest.mark.slow
def test_06_overfit_smoke(smoke):
    res, _, secs, _ = smoke
    with criterion(6, "overfit smoke run", math.inf) as info:
        info["detail"] = (f"loss {res.initial_loss:.3f} -> {res.final_loss:.3f} (ratio {res.loss_ratio:.3f}), "
                          f"PSNR SR {res.psnr_sr:.2f} dB vs bicubic {res.psnr_bicubic:.2f} dB "
                          f"(gain {res.psnr_gain:+.2f}), wall {secs / 60:.1f} min")
        assert res.loss_ratio < 0.5
        assert res.psnr_gain >= 1.0
        assert secs < 30 * 60


@pytest.mark.slow
def test_07_determinism_and_diversity(smoke, tmp_path):
    _, tr, _, _ = smoke
    with criterion(7, "determinism and diversity", 60.0) as info:
        x_l = tr.pairs.lr[0]
        for name in ("a", "b"):
            save_png(super_resolve(tr.bundle, x_l, 42).image, tmp_path / f"{name}.png")
        same = (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
        sigma = pixel_sigma([super_resolve(tr.bundle, x_l, s).image for s in (42, 43)])
        info["detail"] = f"same-seed PNGs identical: {same}, sigma(s, s+1) {sigma:.3f}"
        assert same
        assert sigma > 0


@pytest.mark.slow
def test_08_manipulation_algebra(smoke, tmp_path):
    _, tr, _, _ = smoke
    m = tr.bundle
    with criterion(8, "manipulation algebra", 120.0) as info:
        face, eye = synthetic_hr(64, 0), synthetic_hr(64, 5)
        reg = Region(20, 12, 12, 40)
        paste = face.copy()
        paste[reg.slices] = eye[reg.slices]
        fused0 = content_fuse(m, face, eye, reg, 0, 1)
        assert np.array_equal(fused0, paste)

        x_l = tr.pairs.lr[0]
        x_e = m.encoder.encode(Tensor(x_l[None])).data

        def single(latent_seed):
            # z stream follows seed_a, as in a plain request with that seed
            x0, _ = reverse_chain(m, Rng(latent_seed, LATENT).normal((3, 64, 64)), x_e, 50, Rng(7, Z))
            return np.clip(x0 + up(x_l, SMOKE.scale), 0, 1)

        assert np.array_equal(latent_interpolate(m, x_l, 7, 8, 1.0, 50), single(7))
        assert np.array_equal(latent_interpolate(m, x_l, 7, 8, 0.0, 50), single(8))

        lams = (0.0, 0.4, 0.8, 1.0)
        for lam in lams:
            save_png(latent_interpolate(m, x_l, 7, 8, lam, 50), tmp_path / f"interp_{lam}.png")
        imgs = [load_png(tmp_path / f"interp_{lam}.png") for lam in lams]
        assert all(im.shape == (3, 64, 64) and np.isfinite(im).all() for im in imgs)
        for t_bar in (30, 50, 70):
            assert np.isfinite(content_fuse(m, face, eye, reg, t_bar, 1)).all()
        info["detail"] = f"paste exact, lambda endpoints exact, {len(imgs)} PNGs"


# --- 9: metrics ---------------------------------------------------------------------

def test_09_metrics_oracles():
    with criterion(9, "metrics oracles", 10.0) as info:
        r = np.random.default_rng(9)
        a8 = r.integers(10, 240, (3, 40, 100))
        d = np.full(a8.size, 2)
        d[:6006] = 3
        b8 = a8 + r.permutation(d).reshape(a8.shape)
        assert np.mean((a8 - b8) ** 2.0) == 6.5025
        p = psnr(a8 / 255, b8 / 255)
        a, b = r.random((2, 3, 48, 40))
        b = np.clip(a + 0.1 * b - 0.05, 0, 1)
        ss, ref = ssim(a, b), ssim_reference(a, b)
        # images live in [0, 1]; sigma is reported on the 8-bit scale
        sig = pixel_sigma([np.zeros((3, 2, 2)), np.full((3, 2, 2), 255) / 255])
        info["detail"] = f"PSNR {p:.4f} dB, SSIM {ss:.6f} vs ref {ref:.6f}, sigma {sig}"
        assert p == pytest.approx(40.0, abs=1e-3)
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
        assert abs(ss - ref) < 1e-4
        assert sig == 127.5


# --- 10: ablation -----------------------------------------------------------------

@pytest.mark.slow
def test_10_ablation(encoder_state):
    # the shared encoder pretraining counts toward the budget
    with criterion(10, "ablation plumbing", 2 * 3600.0 - encoder_state[3]) as info:
        parts = []
        for name, sc in ABLATION_RUNS.items():
            res, _ = run_smoke(sc, encoder_state=encoder_state)
            parts.append(f"{name}: ratio {res.loss_ratio:.3f}, PSNR {res.psnr_sr:.2f} dB, {res.seconds_train / 60:.0f} min")
            info["detail"] = "; ".join(parts)
            assert len(res.losses) == sc.steps and np.isfinite(res.losses).all()
            assert res.loss_ratio < 0.5, f"{name}: loss ratio {res.loss_ratio:.3f}"
            assert np.isfinite(res.psnr_sr)
            if sc.residual_prediction:
                assert res.diffused_residual and not res.diffused_hr
            else:
                assert res.diffused_hr and not res.diffused_residual
                assert (sc.T, sc.base_channels) == (100, 64)


# --- 11: checkpoints ----------------------------------------------------------------

def test_11_checkpoint_integrity(tmp_path):
    with criterion(11, "checkpoint integrity", 300.0) as info:
        def make():
            tc = TrainConfig(T=20, batch_size=2, pretrain_steps=5, pretrain_batch_size=1, total_steps=12,
                             checkpoint_every=6)
            b = build_model(tc, EncoderConfig(num_rrdb_blocks=1, scale=2), PredictorConfig(base_channels=8))
            return b, PairSet.from_arrays(np.stack([synthetic_hr(16, s) for s in range(3)]), 2)

        b, pairs = make()
        Trainer(b, pairs, tmp_path / "full").fit()
        save_checkpoint(load_checkpoint(tmp_path / "full" / "checkpoint"), tmp_path / "again")
        names = sorted(os.listdir(tmp_path / "again"))
        same = all((tmp_path / "full" / "checkpoint" / n).read_bytes() == (tmp_path / "again" / n).read_bytes()
                   for n in names)
        assert same and names == sorted(os.listdir(tmp_path / "full" / "checkpoint"))

        b, pairs = make()
        Trainer(b, pairs, tmp_path / "part").fit(total_steps=6)
        Trainer.resume(tmp_path / "part" / "checkpoint", pairs, tmp_path / "part").fit()
        resumed = (tmp_path / "part" / "loss.tsv").read_bytes() == (tmp_path / "full" / "loss.tsv").read_bytes()
        assert resumed

        n = build_model(*face_config()).num_parameters()
        info["detail"] = f"round trip identical, resume identical, face params {n:,}"
        assert abs(n - 12e6) <= 0.2 * 12e6
