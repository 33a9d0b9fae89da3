import hashlib
import json
import subprocess
import sys
import time

import jsonschema
import numpy as np
import pytest

from srdiff.checkpoint import build_model, load_checkpoint, save_checkpoint
from srdiff.cli import main
from srdiff.config import EncoderConfig, PredictorConfig, TrainConfig
from srdiff.data import down, load_png, save_png, to_uint8
from srdiff.experiments import synthetic_hr
from srdiff.metrics import REPORT_SCHEMA
from srdiff.sampler import super_resolve


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def toy_config(tmp, hr_dir, out="run", steps=200):
    cfg = {
        "train": {"T": 25, "batch_size": 4, "pretrain_steps": 50, "pretrain_batch_size": 2, "total_steps": steps,
                  "checkpoint_every": 100, "seed": 3},
        "encoder": {"num_rrdb_blocks": 2, "scale": 4},
        "predictor": {"base_channels": 16},
        "data": {"hr_dir": str(hr_dir), "patch": 16, "patches_per_image": 2, "out_dir": str(tmp / out)},
    }
    p = tmp / f"{out}.json"
    p.write_text(json.dumps(cfg))
    return p


@pytest.fixture(scope="module")
def hr_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("hr")
    for i in range(3):
        save_png(synthetic_hr(32, i), d / f"img{i}.png")
    return d


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory, hr_dir):
    tmp = tmp_path_factory.mktemp("toy")
    t0 = time.perf_counter()
    code = main(["train", "--config", str(toy_config(tmp, hr_dir))])
    return tmp, code, time.perf_counter() - t0


@pytest.fixture(scope="module")
def deep_ckpt(tmp_path_factory):
    """Untrained T = 100 model with a nonzero output layer, for t-bar sweeps."""
    d = tmp_path_factory.mktemp("deep")
    b = build_model(TrainConfig(T=100), EncoderConfig(num_rrdb_blocks=1, scale=4), PredictorConfig(base_channels=8))
    w = b.predictor.final.weight
    w.data[...] = np.random.default_rng(0).standard_normal(w.shape).astype(np.float32) * 0.05
    save_checkpoint(b, d / "ckpt", with_optimizer=False)
    return d / "ckpt"


@pytest.fixture(scope="module")
def lr_png(tmp_path_factory):
    p = tmp_path_factory.mktemp("lr") / "lr.png"
    save_png(down(synthetic_hr(16, 5), 4), p)
    return p


# --- train --------------------------------------------------------------------------

def test_toy_train_completes_quickly(toy_run):
    tmp, code, secs = toy_run
    assert code == 0
    assert secs < 300
    run = tmp / "run"
    rows = (run / "loss.tsv").read_text().splitlines()
    assert len(rows) == 200 and rows[-1].startswith("200\t")
    assert (run / "checkpoint" / "manifest.json").is_file()
    assert json.loads((run / "run.json").read_text())["step"] == 200


def test_train_rerun_reproduces_log(toy_run, hr_dir):
    tmp, _, _ = toy_run
    assert main(["train", "--config", str(toy_config(tmp, hr_dir, out="again"))]) == 0
    assert (tmp / "again" / "loss.tsv").read_bytes() == (tmp / "run" / "loss.tsv").read_bytes()
    assert (tmp / "again" / "pretrain.tsv").read_bytes() == (tmp / "run" / "pretrain.tsv").read_bytes()


def test_train_resume_flag(tmp_path, hr_dir, toy_run):
    cfg = toy_config(tmp_path, hr_dir, out="res", steps=120)
    assert main(["train", "--config", str(cfg)]) == 0
    cfg = toy_config(tmp_path, hr_dir, out="res", steps=200)
    assert main(["train", "--config", str(cfg), "--resume"]) == 0
    assert (tmp_path / "res" / "loss.tsv").read_bytes() == (toy_run[0] / "run" / "loss.tsv").read_bytes()
    doc = json.loads(cfg.read_text())
    doc["predictor"]["base_channels"] = 32
    cfg.write_text(json.dumps(doc))
    assert main(["train", "--config", str(cfg), "--resume"]) == 2


def test_train_missing_config(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert main(["train", "--config", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


@pytest.mark.parametrize("doc", [{"train": {"bogus": 1}}, {"train": {"T": "ten"}}, {"data": {"patch": 20}}, []])
def test_train_invalid_config(tmp_path, doc):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(doc))
    assert main(["train", "--config", str(p)]) == 2


def test_train_missing_data(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"data": {"hr_dir": str(tmp_path / "none"), "patch": 32, "out_dir": str(tmp_path / "o")},
                             "encoder": {"scale": 4}}))
    assert main(["train", "--config", str(p)]) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_numeric_abort(tmp_path, hr_dir):
    p = toy_config(tmp_path, hr_dir, out="nan", steps=5)
    doc = json.loads(p.read_text())
    doc["train"]["lr"] = 1e300  # first update overflows the weights
    doc["train"]["grad_clip"] = None
    p.write_text(json.dumps(doc))
    assert main(["train", "--config", str(p)]) == 4


# --- sr -----------------------------------------------------------------------------

def test_sr_same_seed_same_hash(toy_run, lr_png, tmp_path, capsys):
    ckpt = toy_run[0] / "run" / "checkpoint"
    for d in ("a", "b"):
        assert main(["sr", "--checkpoint", str(ckpt), "--input", str(lr_png), "--output", str(tmp_path / d),
                     "--seed", "9"]) == 0
    out = capsys.readouterr()
    assert sha(tmp_path / "a" / "sr_9.png") == sha(tmp_path / "b" / "sr_9.png")
    # stdout holds paths only; the resolved config goes to stderr
    assert out.out.split() == [str(tmp_path / "a" / "sr_9.png"), str(tmp_path / "b" / "sr_9.png")]
    assert '"seed": 9' in out.err


def test_sr_three_samples_sigma_and_trace(toy_run, lr_png, tmp_path):
    ckpt = toy_run[0] / "run" / "checkpoint"
    assert main(["sr", "--checkpoint", str(ckpt), "--input", str(lr_png), "--output", str(tmp_path),
                 "--seed", "4", "--num-samples", "3", "--trace"]) == 0
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["sigma.json", "sigma.png", "sr_4.png", "sr_5.png", "sr_6.png",
                     "trace_4_t1.npy", "trace_4_t12.npy", "trace_4_t25.npy"]
    side = json.loads((tmp_path / "sigma.json").read_text())
    assert side["mean_sigma"] > 0
    assert load_png(tmp_path / "sigma.png").shape == (3, 16, 16)
    assert np.load(tmp_path / "trace_4_t1.npy").shape == (3, 16, 16)


def test_sr_errors(toy_run, tmp_path):
    ckpt = toy_run[0] / "run" / "checkpoint"
    save_png(np.zeros((3, 5, 4), np.float32), tmp_path / "odd.png")
    assert main(["sr", "--checkpoint", str(ckpt), "--input", str(tmp_path / "odd.png"), "--output",
                 str(tmp_path / "o"), "--seed", "0"]) == 5
    (tmp_path / "bad.png").write_bytes(b"junk")
    assert main(["sr", "--checkpoint", str(ckpt), "--input", str(tmp_path / "bad.png"), "--output",
                 str(tmp_path / "o"), "--seed", "0"]) == 3
    assert main(["sr", "--checkpoint", str(tmp_path / "none"), "--input", str(tmp_path / "odd.png"), "--output",
                 str(tmp_path / "o"), "--seed", "0"]) == 3
    # seeds are mandatory
    assert main(["sr", "--checkpoint", str(ckpt), "--input", "x.png", "--output", "o"]) == 2


def test_sr_no_clip_flag(deep_ckpt, lr_png, tmp_path):
    for d, extra in (("clip", []), ("raw", ["--no-clip-x0"])):
        assert main(["sr", "--checkpoint", str(deep_ckpt), "--input", str(lr_png), "--output", str(tmp_path / d),
                     "--seed", "3"] + extra) == 0
    raw = super_resolve(load_checkpoint(deep_ckpt), load_png(lr_png), 3, clip_x0=False).image
    np.testing.assert_array_equal(load_png(tmp_path / "raw" / "sr_3.png"), to_uint8(raw).transpose(2, 0, 1) / np.float32(255))
    assert sha(tmp_path / "raw" / "sr_3.png") != sha(tmp_path / "clip" / "sr_3.png")


# --- fuse ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def face_pngs(tmp_path_factory):
    d = tmp_path_factory.mktemp("faces")
    save_png(synthetic_hr(16, 11), d / "face.png")
    save_png(synthetic_hr(16, 12), d / "eye.png")
    return d / "face.png", d / "eye.png"


def test_fuse_tbar_zero_is_paste(deep_ckpt, face_pngs, tmp_path):
    face, eye = face_pngs
    out = tmp_path / "fused.png"
    assert main(["fuse", "--checkpoint", str(deep_ckpt), "--face", str(face), "--eye", str(eye),
                 "--region", "2,4,6,8", "--tbar", "0", "--seed", "1", "--out", str(out)]) == 0
    ref = load_png(face)
    ref[:, 2:8, 4:12] = load_png(eye)[:, 2:8, 4:12]
    save_png(ref, tmp_path / "ref.png")
    assert sha(out) == sha(tmp_path / "ref.png")
    assert load_png(tmp_path / "fused_strip.png").shape == (3, 16, 48)


def test_fuse_sweep_and_whole_image(deep_ckpt, face_pngs, tmp_path):
    face, eye = face_pngs
    out = tmp_path / "f.png"
    assert main(["fuse", "--checkpoint", str(deep_ckpt), "--face", str(face), "--eye", str(eye),
                 "--region", "0,0,16,16", "--tbar", "30,50,70", "--seed", "2", "--out", str(out)]) == 0
    for tb in (30, 50, 70):
        assert load_png(tmp_path / f"f_tbar{tb}.png").shape == (3, 16, 16)
    assert load_png(tmp_path / "f_strip.png").shape == (3, 16, 16 * 5)


@pytest.mark.parametrize("region", ["1,2,3", "a,b,c,d", "0,0,40,40"])
def test_fuse_bad_region(deep_ckpt, face_pngs, tmp_path, region):
    face, eye = face_pngs
    assert main(["fuse", "--checkpoint", str(deep_ckpt), "--face", str(face), "--eye", str(eye),
                 "--region", region, "--seed", "0", "--out", str(tmp_path / "x.png")]) == 2


# --- interp -------------------------------------------------------------------------

def test_interp_four_pngs_default_tbar(deep_ckpt, lr_png, tmp_path, capsys):
    assert main(["interp", "--checkpoint", str(deep_ckpt), "--input", str(lr_png), "--seed-a", "1",
                 "--seed-b", "2", "--lambda", "0.0,0.4,0.8,1.0", "--out", str(tmp_path)]) == 0
    assert '"tbar": 50' in capsys.readouterr().err
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == [f"interp_lambda{v}.png" for v in ("0.00", "0.40", "0.80", "1.00")]
    for n in names:
        assert load_png(tmp_path / n).shape == (3, 16, 16)


def test_interp_lambda_one_matches_sr(deep_ckpt, lr_png, tmp_path):
    assert main(["interp", "--checkpoint", str(deep_ckpt), "--input", str(lr_png), "--seed-a", "6",
                 "--seed-b", "2", "--lambda", "1.0", "--tbar", "100", "--out", str(tmp_path / "i")]) == 0
    assert main(["sr", "--checkpoint", str(deep_ckpt), "--input", str(lr_png), "--output", str(tmp_path / "s"),
                 "--seed", "6"]) == 0
    assert sha(tmp_path / "i" / "interp_lambda1.00.png") == sha(tmp_path / "s" / "sr_6.png")


@pytest.mark.parametrize("lam", ["1.5", "-0.2", "0.5,2", "x"])
def test_interp_bad_lambda(deep_ckpt, lr_png, tmp_path, lam):
    assert main(["interp", "--checkpoint", str(deep_ckpt), "--input", str(lr_png), "--seed-a", "1",
                 "--seed-b", "2", "--lambda", lam, "--out", str(tmp_path)]) == 2


# --- eval ---------------------------------------------------------------------------

def test_eval_identical(tmp_path, hr_dir):
    lr = tmp_path / "lr"
    for p in hr_dir.iterdir():
        save_png(down(load_png(p), 4), lr / p.name)
    out = tmp_path / "rep" / "report.json"
    assert main(["eval", "--sr-dir", str(hr_dir), "--hr-dir", str(hr_dir), "--lr-dir", str(lr), "--scale", "4",
                 "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    jsonschema.validate(doc, REPORT_SCHEMA)
    assert doc["mean"]["psnr"] == "inf"
    assert doc["mean"]["ssim"] == pytest.approx(1.0)
    assert (tmp_path / "rep" / "report.tsv").is_file()


def test_eval_no_match(tmp_path, hr_dir, capsys):
    other = tmp_path / "sr"
    save_png(np.zeros((3, 16, 16), np.float32), other / "zzz.png")
    assert main(["eval", "--sr-dir", str(other), "--hr-dir", str(hr_dir), "--out", str(tmp_path / "r.json")]) == 3
    assert "unmatched: zzz.png" in capsys.readouterr().err


def test_summary(deep_ckpt, capsys):
    assert main(["summary", "--checkpoint", str(deep_ckpt)]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["total"] == doc["predictor"] + doc["encoder"]


def test_entry_point_subprocess(deep_ckpt, tmp_path):
    r = subprocess.run([sys.executable, "-m", "srdiff.cli", "summary", "--checkpoint", str(deep_ckpt)],
                       capture_output=True, text=True)
    assert r.returncode == 0 and json.loads(r.stdout)["step"] == 0
    r = subprocess.run([sys.executable, "-m", "srdiff.cli", "train", "--config", str(tmp_path / "x.json")],
                       capture_output=True, text=True)
    assert r.returncode == 2 and "x.json" in r.stderr and r.stdout == ""

