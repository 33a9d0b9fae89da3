"""Ablation over diffusion length T, predictor width c and residual prediction.

All runs share one encoder pretraining. Results go to <out>/ablation.tsv.

    python3 scripts/ablation.py --out runs/ablation
    python3 scripts/ablation.py --out runs/grid --grid --steps 1000
"""

import argparse
import itertools
from dataclasses import replace
from pathlib import Path

from srdiff.data import PairSet
from srdiff.experiments import ABLATION_RUNS, SmokeConfig, ablation_config, pretrained_encoder, run_smoke, synthetic_hr

COLUMNS = ["T", "c", "res", "initial_loss", "final_loss", "loss_ratio", "psnr_sr", "psnr_bicubic",
           "lr_psnr_sr", "diffused_hr", "seconds_train"]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", required=True)
    ap.add_argument("--grid", action="store_true", help="full 2x2x2 grid instead of the paired design")
    ap.add_argument("--steps", type=int, default=SmokeConfig.steps)
    ap.add_argument("--pretrain-steps", type=int, default=SmokeConfig.pretrain_steps)
    args = ap.parse_args()

    steps = dict(steps=args.steps, pretrain_steps=args.pretrain_steps)
    base = SmokeConfig(**steps)
    runs = list(ABLATION_RUNS.values())
    if args.grid:
        runs = [ablation_config(T, c, r) for T, c, r in itertools.product((25, 100), (32, 64), (True, False))]

    pairs = PairSet.from_arrays(synthetic_hr(base.hr_size, base.seed), base.scale)
    enc = pretrained_encoder(base, pairs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["\t".join(COLUMNS)]
    for sc in runs:
        sc = replace(sc, **steps)
        res, _ = run_smoke(sc, out / f"T{sc.T}_c{sc.base_channels}_{'res' if sc.residual_prediction else 'hr'}",
                           encoder_state=enc)
        vals = [sc.T, sc.base_channels, int(sc.residual_prediction), res.initial_loss, res.final_loss,
                res.loss_ratio, res.psnr_sr, res.psnr_bicubic, res.lr_psnr_sr, int(res.diffused_hr),
                res.seconds_train]
        rows.append("\t".join(f"{v:.4f}" if isinstance(v, float) else str(v) for v in vals))
        print(rows[-1], flush=True)
    (out / "ablation.tsv").write_text("\n".join(rows) + "\n")


if __name__ == "__main__":
    main()
