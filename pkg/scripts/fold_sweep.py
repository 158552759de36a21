#!/usr/bin/env python3
"""Sweep the lane budget for each zoo model and print estimated FPS as CSV."""
import argparse

import numpy as np

from finnlite import folding, zoo


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--models", nargs="+", default=sorted(zoo.MODELS))
    p.add_argument("--max-budget", type=int, default=20000)
    p.add_argument("--points", type=int, default=16)
    p.add_argument("--clock-hz", type=float, default=100e6)
    a = p.parse_args(argv)
    print("model,budget,lanes,bottleneck,bottleneck_cycles,fps")
    for m in a.models:
        g = zoo.build(m)
        lo = len(folding.layer_dims(g))
        for b in np.unique(np.geomspace(lo, a.max_budget, a.points).astype(int)):
            f = folding.auto_fold(g, int(b), clock_hz=a.clock_hz)
            r = folding.report_throughput(g, f)
            print(f"{m},{b},{f.lanes},{r.bottleneck},{r.bottleneck_cycles},{r.fps_estimate:.2f}")


if __name__ == "__main__":
    main()
