"""Content fusion over several t_bar values plus a latent interpolation sweep.

Writes one PNG per setting and a side-by-side strip of each sweep.

    python3 scripts/fusion_sweep.py --checkpoint runs/smoke/checkpoint --out runs/fusion
"""

import argparse
from pathlib import Path

import numpy as np

from srdiff.checkpoint import load_checkpoint
from srdiff.data import down, load_png, save_png
from srdiff.experiments import synthetic_hr
from srdiff.sampler import Region, content_fuse, latent_interpolate


def strip(images):
    return np.concatenate(images, axis=2)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--face", help="HR PNG; defaults to a synthetic image")
    ap.add_argument("--eye", help="HR PNG supplying the region; defaults to a synthetic image")
    ap.add_argument("--region", default=None, help="top,left,height,width; defaults to a centred band")
    ap.add_argument("--tbars", default="30,50,70")
    ap.add_argument("--lambdas", default="0.0,0.4,0.8,1.0")
    ap.add_argument("--interp-tbar", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    m = load_checkpoint(args.checkpoint)
    size = 16 * m.scale
    face = load_png(args.face) if args.face else synthetic_hr(size, 0)
    eye = load_png(args.eye) if args.eye else synthetic_hr(size, 5)
    h, w = face.shape[1:]
    region = Region.parse(args.region) if args.region else Region(h // 3, w // 6, h // 4, 2 * w // 3)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    fused = [content_fuse(m, face, eye, region, 0, args.seed)]
    for tb in map(int, args.tbars.split(",")):
        fused.append(content_fuse(m, face, eye, region, tb, args.seed))
        save_png(fused[-1], out / f"fuse_t{tb}.png")
    save_png(strip([face, eye] + fused), out / "fuse_strip.png")

    x_l = down(face, m.scale)
    interp = []
    for lam in map(float, args.lambdas.split(",")):
        interp.append(latent_interpolate(m, x_l, args.seed, args.seed + 1, lam, args.interp_tbar))
        save_png(interp[-1], out / f"interp_{lam:.1f}.png")
    save_png(strip(interp), out / "interp_strip.png")
    print(f"wrote {len(fused) - 1 + len(interp)} images and 2 strips to {out}")


if __name__ == "__main__":
    main()
