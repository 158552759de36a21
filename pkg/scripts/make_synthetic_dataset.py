#!/usr/bin/env python3
"""Write a synthetic grape/background tile dataset in the train/val/test layout.

``--mode tiles`` stores generator-labelled 32x32 tiles directly.
``--mode frames`` renders whole frames and runs them through the tiler and
HSV pre-labeler, the same path used for real vineyard footage.
"""
import argparse

from finnlite import synthetic, tiles


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("tiles", "frames"), default="tiles")
    p.add_argument("-n", type=int, default=1000, help="tiles (tiles mode) or frames (frames mode)")
    p.add_argument("--size", type=int, default=256, help="frame edge in pixels (frames mode)")
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args(argv)

    if a.mode == "frames":
        idx = tiles.write_dataset(a.out, synthetic.make_frames(a.n, a.size, a.size, seed=a.seed))
    else:
        x, y = synthetic.make_tiles(a.n, seed=a.seed)
        n_train, n_val, _ = tiles.split_counts(a.n)
        cuts = (0, n_train, n_train + n_val, a.n)
        for s, lo, hi in zip(tiles.SPLITS, cuts, cuts[1:]):
            tiles.write_tiles(a.out, s, x[lo:hi], y[lo:hi])
        idx = tiles.load_dataset(a.out)
    for s in tiles.SPLITS:
        print(s, {c: len(idx.files[s][c]) for c in tiles.CLASSES})


if __name__ == "__main__":
    main()
