#!/usr/bin/env python3
"""Tile and pre-label a directory of raw frames into a train/val/test dataset.

Frames are taken in sorted filename order, which is assumed to be
acquisition order, so the split never mixes neighbouring frames.
"""
import argparse
from pathlib import Path

import numpy as np
from PIL import Image

from finnlite import tiles


def frames(src):
    for p in sorted(Path(src).iterdir()):
        if p.suffix.lower() in tiles.IMAGE_SUFFIXES:
            with Image.open(p) as im:
                yield p.stem, np.asarray(im.convert("RGB"))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("src", help="directory of frame images")
    p.add_argument("--out", required=True)
    p.add_argument("--min-fraction", type=float, default=0.25)
    a = p.parse_args(argv)
    idx = tiles.write_dataset(a.out, frames(a.src), min_fraction=a.min_fraction)
    for s in tiles.SPLITS:
        print(s, len(idx.frames[s]), "frames", {c: len(idx.files[s][c]) for c in tiles.CLASSES})


if __name__ == "__main__":
    main()
