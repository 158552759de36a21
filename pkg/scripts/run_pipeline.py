#!/usr/bin/env python3
"""End-to-end run through the CLI: data, train, streamline, fold, eval, bench.

Without ``--data`` a synthetic tile dataset is generated first. Every stage
writes into its own subdirectory of ``--work``.
"""
import argparse
import json
from pathlib import Path

from finnlite import cli, synthetic, tiles


def stage(*argv):
    print("$ finnlite", " ".join(map(str, argv)), flush=True)
    code = cli.main([str(a) for a in argv])
    if code:
        raise SystemExit(code)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--work", default="pipeline_out")
    p.add_argument("--model", default="cnv_w1a1")
    p.add_argument("--data")
    p.add_argument("--n-tiles", type=int, default=600)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    a = p.parse_args(argv)

    work = Path(a.work)
    data = Path(a.data) if a.data else work / "data"
    if not a.data and not data.exists():
        x, y = synthetic.make_tiles(a.n_tiles, seed=0)
        n_train, n_val, _ = tiles.split_counts(a.n_tiles)
        cuts = (0, n_train, n_train + n_val, a.n_tiles)
        for s, lo, hi in zip(tiles.SPLITS, cuts, cuts[1:]):
            tiles.write_tiles(data, s, x[lo:hi], y[lo:hi])

    stage("train", "--model", a.model, "--data", data, "--epochs", a.epochs, "--out", work / "trained")
    stage("streamline", "--graph", work / "trained", "--out", work / "streamlined", "--dump-pass-log")
    fold = ["fold", "--graph", work / "streamlined", "--out", work / "folded"]
    stage(*fold, *(["--budget", a.budget] if a.budget else []))
    stage("eval", "--graph", work / "streamlined", "--data", data, "--workers", a.workers,
          "--out", work / "eval", "--plot")
    stage("bench", "--graph", work / "streamlined", "--workers", a.workers, "--out", work / "bench")
    print(json.dumps(json.loads((work / "eval" / "eval.json").read_text())["report"], indent=2))


if __name__ == "__main__":
    main()
