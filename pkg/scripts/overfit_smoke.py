"""Overfit one synthetic 64x64 pair and compare the sample against bicubic.

    python3 scripts/overfit_smoke.py --out runs/smoke
    python3 scripts/overfit_smoke.py --out runs/quick --pretrain-steps 200 --steps 300
"""

import argparse
import json
from dataclasses import fields, replace

from srdiff.data import save_png, up
from srdiff.experiments import SmokeConfig, run_smoke
from srdiff.sampler import super_resolve


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", required=True)
    for f in fields(SmokeConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            ap.add_argument(flag, type=lambda v: v.lower() in ("1", "true", "yes"), default=f.default)
        else:
            ap.add_argument(flag, type=type(f.default), default=f.default)
    args = vars(ap.parse_args())
    out = args.pop("out")
    sc = replace(SmokeConfig(), **args)

    res, tr = run_smoke(sc, out)
    x_l = tr.pairs.lr[0]
    save_png(tr.pairs.hr[0], f"{out}/hr.png")
    save_png(up(x_l, sc.scale), f"{out}/bicubic.png")
    save_png(super_resolve(tr.bundle, x_l, sc.sample_seed).image, f"{out}/sr.png")
    print(json.dumps(res.summary(), indent=1, sort_keys=True))


if __name__ == "__main__":
    main()
