"""Contact sheet of original / replaced / masked images for q = 1, 2, 3 on one synthetic leaf.

    python scripts/preview_sheet.py --out sheet.ppm --scale 3
"""

import argparse

import numpy as np

from cecs.augment import augment_triplet, dataset_donor_sampler
from cecs.codec import write_image
from cecs.data import SynthSpec, generate_synthetic


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="sheet.ppm")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n", type=int, default=7)
    ap.add_argument("--scale", type=int, default=3, help="nearest-neighbour upscale factor")
    args = ap.parse_args()

    ds = generate_synthetic(SynthSpec())
    sampler = dataset_donor_sampler(ds.images, ds.labels)
    rows = []
    for q in (1, 2, 3):
        rng = np.random.default_rng([args.seed, q])
        t = augment_triplet(ds.images[0], int(ds.labels[0]), sampler, args.n, q, rng)
        gap = np.ones((ds.images.shape[1], 2, 3))
        rows.append(np.concatenate([t.original, gap, t.replaced, gap, t.masked], axis=1))
    sep = np.ones((2, rows[0].shape[1], 3))
    sheet = np.concatenate([rows[0], sep, rows[1], sep, rows[2]], axis=0)
    sheet = sheet.repeat(args.scale, axis=0).repeat(args.scale, axis=1)
    write_image(args.out, sheet)
    print(f"wrote {args.out} ({sheet.shape[1]}x{sheet.shape[0]}): rows q=1,2,3; columns original, replaced, masked")


if __name__ == "__main__":
    main()
