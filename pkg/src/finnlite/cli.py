"""Command-line entry point: build, train, streamline, fold, infer, eval and bench.

Each subcommand reads and writes files, prints a JSON result (``"schema": 1``)
on stdout and a short human summary on stderr. Exit status is 0 on success,
1 on a pipeline error and 2 on a usage error.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import folding, streamline, tiles, trainer, zoo
from .executor import Plan, predict
from .graph import float_nodes, validate

SEED_ENV = "FINNLITE_SEED"


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    model: Optional[str] = None
    graph: Optional[str] = None
    data: Optional[str] = None
    out: Optional[str] = None
    seed: int = 0
    budget: Optional[int] = None
    clock_hz: float = 100e6
    workers: int = 1
    extra: dict = field(default_factory=dict)

    def check_inputs(self) -> None:
        for label in ("graph", "data"):
            p = getattr(self, label)
            if p is not None and not Path(p).exists():
                raise UsageError(f"--{label} {p} does not exist")


@contextlib.contextmanager
def atomic_dir(out):
    """Yield a scratch directory that replaces ``out`` only if the block succeeds."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    old = None
    if out.exists():
        old = out.with_name(f".{out.name}.old-{os.getpid()}")
        os.replace(out, old)
    os.replace(tmp, out)
    if old is not None:
        shutil.rmtree(old, ignore_errors=True)


def _dump(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load_data(root, split: str):
    idx = tiles.load_dataset(root)
    x, y, _ = tiles.load_split(idx, split)
    return x, y


# -- subcommands -----------------------------------------------------------------

def cmd_build(cfg: RunConfig) -> dict:
    g = zoo.build(cfg.model, seed=cfg.seed)
    with atomic_dir(cfg.out) as d:
        zoo.save_graph(g, d)
    _say(f"built {cfg.model}: {len(g.nodes)} nodes -> {cfg.out}")
    return {"model": cfg.model, "seed": cfg.seed, "graph": str(Path(cfg.out) / "graph.json"),
            "census": g.kind_census(), "violations": [str(v) for v in validate(g)]}


def cmd_train(cfg: RunConfig) -> dict:
    g = zoo.load_graph(cfg.graph) if cfg.graph else zoo.build(cfg.model, seed=cfg.seed)
    train_xy = _load_data(cfg.data, "train")
    try:
        val_xy = _load_data(cfg.data, "val")
    except tiles.EmptySplit:
        val_xy = None
    tc = trainer.TrainConfig(epochs=cfg.extra["epochs"], lr=cfg.extra["lr"],
                             batch_size=cfg.extra["batch_size"], seed=cfg.seed)
    trained, state = trainer.train(g, train_xy, val_xy, tc)
    with atomic_dir(cfg.out) as d:
        zoo.save_graph(trained, d)
        trainer.write_history(state, d / "history.json")
    last = state.history[-1] if state.history else {}
    _say(f"trained {state.epoch} epochs; train accuracy {last.get('train_accuracy')}")
    return {"graph": str(Path(cfg.out) / "graph.json"), "epochs": state.epoch, "history": state.history}


def cmd_streamline(cfg: RunConfig) -> dict:
    g = zoo.load_graph(cfg.graph)
    s, log = streamline.streamline_all(g, cfg.extra["max_iterations"])
    with atomic_dir(cfg.out) as d:
        zoo.save_graph(s, d)
        if cfg.extra["dump_pass_log"]:
            _dump({"schema": 1, "log": log}, d / "pass_log.json")
    left = float_nodes(s)
    _say(f"streamlined: {len(g.nodes)} -> {len(s.nodes)} nodes, {len(log)} log entries")
    return {"graph": str(Path(cfg.out) / "graph.json"), "census": s.kind_census(),
            "streamlined": streamline.is_streamlined(s), "unresolved": [n.id for n in left],
            "log": log if cfg.extra["dump_pass_log"] else None}


def cmd_fold(cfg: RunConfig) -> dict:
    g = zoo.load_graph(cfg.graph)
    f = folding.auto_fold(g, cfg.budget, cfg.clock_hz)
    bad = folding.validate_folding(g, f)
    if bad:
        raise folding.InvalidFolding("; ".join(f"{v.code}@{v.node}" for v in bad))
    est = folding.report_throughput(g, f)
    with atomic_dir(cfg.out) as d:
        _dump(f.to_json(), d / "folding.json")
        _dump(est.to_json(), d / "throughput.json")
    _say(f"folded with {f.lanes} lanes; bottleneck {est.bottleneck} at {est.fps_estimate:.2f} FPS")
    return {"folding": f.to_json(), "throughput": est.to_json(), "lanes": f.lanes}


def cmd_infer(cfg: RunConfig) -> dict:
    from PIL import Image
    g = zoo.load_graph(cfg.graph)
    frames = []
    for p in cfg.extra["images"]:
        if not Path(p).exists():
            raise UsageError(f"image {p} does not exist")
        with Image.open(p) as im:
            img = np.asarray(im.convert("RGB"))
        recs = tiles.split_frame(img, Path(p).stem)
        x = np.stack([tiles.tile_pixels(img, r) for r in recs]).transpose(0, 3, 1, 2)
        logits, per_tile = tiles.infer_tiles(g, x, cfg.workers)
        pred = predict(logits)
        frames.append({"image": str(p), "n_c": len(recs), "tiles": [
            {"row": r.row, "col": r.col, "rect": list(r.rect), "score": float(s),
             "prediction": tiles.CLASSES[0] if q else tiles.CLASSES[1]}
            for r, s, q in zip(recs, logits, pred)]})
    if cfg.out:
        with atomic_dir(cfg.out) as d:
            _dump({"schema": 1, "frames": frames}, d / "infer.json")
    _say(f"classified {sum(f['n_c'] for f in frames)} tiles from {len(frames)} image(s)")
    return {"frames": frames}


def cmd_eval(cfg: RunConfig) -> dict:
    g = zoo.load_graph(cfg.graph)
    idx = tiles.load_dataset(cfg.data)
    report, recs = tiles.evaluate(g, idx, cfg.extra["split"], cfg.workers, n_c=cfg.extra["n_c"])
    result = {"report": report.to_json(), "predictions": tiles.predictions_json(recs)}
    if cfg.out:
        with atomic_dir(cfg.out) as d:
            _dump(result, d / "eval.json")
            (d / "report.txt").write_text(report.to_text() + "\n")
            if cfg.extra["plot"]:
                (d / "plot.csv").write_text(report.plot_csv())
    _say(report.to_text())
    return result


def cmd_bench(cfg: RunConfig) -> dict:
    g = zoo.load_graph(cfg.graph)
    rng = np.random.default_rng(cfg.seed)
    n = cfg.extra["n_tiles"]
    x = rng.integers(0, 256, size=(n,) + tuple(zoo.INPUT_SHAPE[1:]), dtype=np.uint8)
    Plan(g).run(x[:1])  # warm-up
    t0 = time.perf_counter_ns()
    _, per_tile = tiles.infer_tiles(g, x, cfg.workers, cfg.extra["batch"])
    wall = time.perf_counter_ns() - t0
    fps_chunk, fps_image = tiles.fps_report(per_tile, cfg.extra["n_c"])
    e2e = n * 1e9 / max(wall, 1)
    res = {"n_tiles": n, "n_c": cfg.extra["n_c"], "workers": cfg.workers, "fps_chunk": fps_chunk,
           "fps_image": fps_image, "fps_chunk_end_to_end": e2e,
           "speedup_vs_realtime": tiles.speedup(fps_image), "realtime_fps": tiles.REALTIME_FPS}
    if cfg.out:
        with atomic_dir(cfg.out) as d:
            _dump({"schema": 1, **res}, d / "bench.json")
    _say(f"FPS_chunk {fps_chunk:.2f}, FPS_image {fps_image:.2f}")
    return res


COMMANDS = {"build": cmd_build, "train": cmd_train, "streamline": cmd_streamline, "fold": cmd_fold,
            "infer": cmd_infer, "eval": cmd_eval, "bench": cmd_bench}


# -- argument parsing ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="finnlite", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")
    sub.required = True

    def common(sp, graph=True, out_required=True):
        if graph:
            sp.add_argument("--graph", required=True, help="graph.json or its directory")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("build", help="emit a model-zoo graph and a fresh weight bundle")
    sp.add_argument("--model", required=True, choices=sorted(zoo.MODELS))
    common(sp, graph=False)

    sp = sub.add_parser("train", help="quantization-aware training on a tile dataset")
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--graph")
    g.add_argument("--model", choices=sorted(zoo.MODELS))
    sp.add_argument("--data", required=True, help="dataset root with train/val/test splits")
    sp.add_argument("--epochs", type=int, default=10)
    sp.add_argument("--lr", type=float, default=trainer.TrainConfig.lr)
    sp.add_argument("--batch-size", type=int, default=50)
    common(sp, graph=False)

    sp = sub.add_parser("streamline", help="rewrite float-domain nodes into integer thresholds")
    sp.add_argument("--dump-pass-log", action="store_true")
    sp.add_argument("--max-iterations", type=int, default=100)
    common(sp)

    sp = sub.add_parser("fold", help="choose PE/SIMD per layer and estimate throughput")
    sp.add_argument("--budget", type=int, default=None, help="total lanes; omit for fully parallel")
    sp.add_argument("--clock-hz", type=float, default=100e6)
    common(sp)

    sp = sub.add_parser("infer", help="tile and classify whole frames")
    sp.add_argument("images", nargs="+")
    sp.add_argument("--workers", type=int, default=1)
    common(sp, out_required=False)

    for name, helptext in (("eval", "metrics on a dataset split"), ("bench", "timed inference on random tiles")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--n-c", type=int, default=tiles.tiles_per_frame(1920, 1080),
                        help="tiles per frame for FPS_image")
        common(sp, out_required=False)
        if name == "eval":
            sp.add_argument("--data", required=True)
            sp.add_argument("--split", choices=tiles.SPLITS, default="test")
            sp.add_argument("--plot", action="store_true", help="also write bar-chart data as CSV")
        else:
            sp.add_argument("--n-tiles", type=int, default=256)
            sp.add_argument("--batch", type=int, default=64)
    return p


def config_from_args(a: argparse.Namespace) -> RunConfig:
    seed = a.seed
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            seed = int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV}={env!r} is not an integer")
    known = {"command", "model", "graph", "data", "out", "seed", "budget", "clock_hz", "workers", "verbose"}
    extra = {k: v for k, v in vars(a).items() if k not in known}
    cfg = RunConfig(a.command, getattr(a, "model", None), getattr(a, "graph", None), getattr(a, "data", None),
                    a.out, seed, getattr(a, "budget", None), getattr(a, "clock_hz", 100e6),
                    getattr(a, "workers", 1), extra)
    if cfg.workers < 1:
        raise UsageError("--workers must be at least 1")
    cfg.check_inputs()
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        cfg = config_from_args(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        _say(f"finnlite: error: {e}")
        return 2
    try:
        result = COMMANDS[cfg.command](cfg)
    except UsageError as e:
        _say(f"finnlite {cfg.command}: error: {e}")
        return 2
    except Exception as e:  # reported as a structured pipeline error
        err = {"schema": 1, "command": cfg.command, "error": type(e).__name__, "message": str(e)}
        if getattr(e, "node_id", None):
            err["node"] = e.node_id
        print(json.dumps(err, sort_keys=True))
        _say(f"finnlite {cfg.command}: {type(e).__name__}: {e}")
        return 1
    print(json.dumps({"schema": 1, "command": cfg.command, **result}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
