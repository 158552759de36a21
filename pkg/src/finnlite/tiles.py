"""Frame tiling, colour pre-labelling, split logic, dataset IO, batch tile inference and metrics."""
from __future__ import annotations

import csv
import io
import json
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image

from .executor import Plan, predict

TILE = 32
CLASSES = ("grape", "no_grape")
SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.6, 0.2, 0.2)
REALTIME_FPS = 25.0
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
_TILE_NAME = re.compile(r"^(?P<frame>.+)_(?P<row>\d+)_(?P<col>\d+)$")


class FrameTooSmall(ValueError):
    pass


class EmptySplit(ValueError):
    pass


class EmptyTimings(ValueError):
    pass


@dataclass
class TileRecord:
    frame: str
    row: int
    col: int
    rect: tuple  # (x, y, width, height) in frame pixels
    label: str = "unlabeled"
    prediction: Optional[str] = None
    score: Optional[float] = None
    time_ns: Optional[int] = None
    path: Optional[str] = None

    @property
    def key(self) -> tuple:
        return (self.frame, self.row, self.col)


@dataclass(frozen=True)
class HsvRange:
    """Hue band plus saturation/value floors, all in 0..255 units.

    ``h_lo > h_hi`` means the band wraps through hue 0 (red).
    """
    h_lo: int = 200
    h_hi: int = 15
    s_min: int = 60
    v_min: int = 30

    def contains(self, hsv: np.ndarray) -> np.ndarray:
        h, s, v = (hsv[..., i].astype(np.int64) for i in range(3))
        if self.h_lo <= self.h_hi:
            in_hue = (h >= self.h_lo) & (h <= self.h_hi)
        else:
            in_hue = (h >= self.h_lo) | (h <= self.h_hi)
        return in_hue & (s >= self.s_min) & (v >= self.v_min)


DEFAULT_HSV = HsvRange()


# -- tiling and labelling --------------------------------------------------------

def split_frame(img: np.ndarray, frame: str = "0") -> list:
    """Cut an HxWx3 frame into whole 32x32 tiles, row-major; partial edge strips are dropped."""
    h, w = img.shape[:2]
    if h < TILE or w < TILE:
        raise FrameTooSmall(f"frame {frame!r} is {w}x{h}; tiles need at least {TILE}x{TILE}")
    return [TileRecord(frame, r, c, (c * TILE, r * TILE, TILE, TILE))
            for r in range(h // TILE) for c in range(w // TILE)]


def tile_pixels(img: np.ndarray, rec: TileRecord) -> np.ndarray:
    x, y, w, h = rec.rect
    return img[y:y + h, x:x + w]


def tiles_per_frame(width: int, height: int) -> int:
    return (width // TILE) * (height // TILE)


def in_range_fraction(tile: np.ndarray, hsv_range: HsvRange = DEFAULT_HSV) -> float:
    hsv = np.asarray(Image.fromarray(np.ascontiguousarray(tile, dtype=np.uint8), "RGB").convert("HSV"))
    return float(hsv_range.contains(hsv).mean())


def prelabel_color_threshold(tile: np.ndarray, hsv_range: HsvRange = DEFAULT_HSV,
                             min_fraction: float = 0.25) -> str:
    if not 0.0 <= min_fraction <= 1.0:
        raise ValueError(f"min_fraction must lie in [0, 1], got {min_fraction}")
    return "grape" if in_range_fraction(tile, hsv_range) >= min_fraction else "no_grape"


# -- splits and dataset layout ---------------------------------------------------

def split_counts(n: int) -> tuple:
    """Frames per split: cut points at 60% and 80% of the sequence, rounded half up."""
    c1 = int(Fraction(3 * n, 5) + Fraction(1, 2))
    c2 = int(Fraction(4 * n, 5) + Fraction(1, 2))
    return c1, c2 - c1, n - c2


@dataclass
class DatasetIndex:
    root: Optional[str] = None
    frames: dict = field(default_factory=lambda: {s: [] for s in SPLITS})
    files: dict = field(default_factory=lambda: {s: {c: [] for c in CLASSES} for s in SPLITS})

    def split_of(self, frame: str) -> str:
        for s in SPLITS:
            if frame in self.frames[s]:
                return s
        raise KeyError(frame)

    def tile_counts(self) -> dict:
        return {s: {c: len(self.files[s][c]) for c in CLASSES} for s in SPLITS}

    def records(self, split: str) -> list:
        """Labelled tile records of ``split``, sorted by (frame, row, col)."""
        out = []
        for c in CLASSES:
            for p in self.files[split][c]:
                m = _TILE_NAME.match(Path(p).stem)
                if m is None:
                    raise ValueError(f"tile file name {p!r} is not <frame>_<row>_<col>")
                r, col = int(m["row"]), int(m["col"])
                out.append(TileRecord(m["frame"], r, col, (col * TILE, r * TILE, TILE, TILE), c, path=str(p)))
        return sorted(out, key=lambda t: t.key)


def make_splits(frames: Iterable[str]) -> DatasetIndex:
    """Contiguous 60/20/20 split of frames given in acquisition order."""
    frames = list(frames)
    if len(set(frames)) != len(frames):
        raise ValueError("frame ids must be unique")
    n_train, n_val, _ = split_counts(len(frames))
    idx = DatasetIndex()
    idx.frames = {"train": frames[:n_train], "val": frames[n_train:n_train + n_val],
                  "test": frames[n_train + n_val:]}
    return idx


def write_dataset(root, frames: Iterable, hsv_range: HsvRange = DEFAULT_HSV,
                  min_fraction: float = 0.25) -> DatasetIndex:
    """Tile, pre-label and store frames as ``<root>/<split>/<class>/<frame>_<row>_<col>.png``.

    ``frames`` yields ``(frame_id, HxWx3 uint8 array)`` in acquisition order.
    """
    frames = list(frames)
    idx = make_splits(f for f, _ in frames)
    idx.root = str(root)
    root = Path(root)
    for fid, img in frames:
        split = idx.split_of(fid)
        for rec in split_frame(img, fid):
            px = tile_pixels(img, rec)
            label = prelabel_color_threshold(px, hsv_range, min_fraction)
            path = root / split / label / f"{fid}_{rec.row}_{rec.col}.png"
            path.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(np.ascontiguousarray(px, dtype=np.uint8), "RGB").save(path)
            idx.files[split][label].append(str(path))
    return idx


def write_tiles(root, split: str, tiles: np.ndarray, labels: np.ndarray, frame_prefix: str = "f") -> None:
    """Store pre-labelled 32x32 tiles directly, one pseudo-frame per tile."""
    root = Path(root)
    for i, (t, y) in enumerate(zip(tiles, labels)):
        path = root / split / CLASSES[0 if y else 1] / f"{frame_prefix}{i:06d}_0_0.png"
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.ascontiguousarray(t, dtype=np.uint8), "RGB").save(path)


def load_dataset(root) -> DatasetIndex:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    idx = DatasetIndex(str(root))
    for s in SPLITS:
        frames = set()
        for c in CLASSES:
            d = root / s / c
            files = sorted(p for p in d.glob("*") if p.suffix.lower() in IMAGE_SUFFIXES) if d.is_dir() else []
            idx.files[s][c] = [str(p) for p in files]
            frames.update(_TILE_NAME.match(p.stem)["frame"] for p in files if _TILE_NAME.match(p.stem))
        idx.frames[s] = sorted(frames)
    return idx


def read_tile(path) -> np.ndarray:
    with Image.open(path) as im:
        a = np.asarray(im.convert("RGB"))
    if a.shape[:2] != (TILE, TILE):
        raise ValueError(f"{path}: tile is {a.shape[1]}x{a.shape[0]}, expected {TILE}x{TILE}")
    return a


def load_split(idx: DatasetIndex, split: str):
    """Tiles of ``split`` as (NCHW uint8 array, 0/1 grape labels, records)."""
    recs = idx.records(split)
    if not recs:
        raise EmptySplit(f"split {split!r} has no tiles")
    x = np.stack([read_tile(r.path) for r in recs]).transpose(0, 3, 1, 2)
    y = np.array([r.label == "grape" for r in recs], dtype=np.int64)
    return x, y, recs


# -- metrics ---------------------------------------------------------------------

def fps_report(timings_ns, n_c: int) -> tuple:
    """(fps_chunk, fps_image) from per-chunk latencies in nanoseconds."""
    t = [int(v) for v in timings_ns]
    if not t:
        raise EmptyTimings("no timings to average")
    if n_c < 1:
        raise ValueError(f"n_c must be at least 1, got {n_c}")
    if sum(t) <= 0:
        raise ValueError("timings must sum to a positive duration")
    fps_chunk = Fraction(10 ** 9 * len(t), sum(t))
    return float(fps_chunk), float(fps_chunk * n_c)


def speedup(fps: float, realtime_fps: float = REALTIME_FPS) -> float:
    return fps / realtime_fps


def confusion(y_true, y_pred) -> tuple:
    y_true, y_pred = np.asarray(y_true, dtype=bool), np.asarray(y_pred, dtype=bool)
    tp = int(np.sum(y_true & y_pred))
    fp = int(np.sum(~y_true & y_pred))
    fn = int(np.sum(y_true & ~y_pred))
    tn = int(np.sum(~y_true & ~y_pred))
    return tp, fp, fn, tn


@dataclass
class EvalReport:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    fps_chunk: float
    fps_image: float
    n_c: int
    fps_chunk_end_to_end: Optional[float] = None

    @property
    def n_tiles(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.n_tiles

    @classmethod
    def from_counts(cls, tp, fp, fn, tn, fps_chunk, fps_image, n_c, **kw) -> "EvalReport":
        p = tp / (tp + fp) if tp + fp else None
        r = tp / (tp + fn) if tp + fn else None
        f1 = 2 * p * r / (p + r) if p is not None and r is not None and p + r > 0 else None
        return cls(tp, fp, fn, tn, p, r, f1, fps_chunk, fps_image, n_c, **kw)

    def to_json(self) -> dict:
        return {"schema": 1, **asdict(self), "n_tiles": self.n_tiles, "accuracy": self.accuracy}

    def to_text(self) -> str:
        def f(v):
            return "n/a" if v is None else f"{v:.4f}"
        rows = [("TP", self.tp), ("FP", self.fp), ("FN", self.fn), ("TN", self.tn),
                ("precision", f(self.precision)), ("recall", f(self.recall)), ("F1", f(self.f1)),
                ("FPS_chunk", f"{self.fps_chunk:.2f}"), ("FPS_image", f"{self.fps_image:.2f}"),
                ("N_c", self.n_c)]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)

    def plot_csv(self) -> str:
        """Bar-chart data: one row per metric, mirroring the metric and frame-rate figures."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["figure", "metric", "value"])
        for k in ("precision", "recall", "f1"):
            w.writerow(["metrics", k, "" if getattr(self, k) is None else getattr(self, k)])
        w.writerow(["frame_rate", "fps_chunk", self.fps_chunk])
        w.writerow(["frame_rate", "fps_image", self.fps_image])
        return buf.getvalue()


# -- batch inference -------------------------------------------------------------

def _chunks(n: int, size: int) -> list:
    return [(i, min(i + size, n)) for i in range(0, n, size)]


def infer_tiles(g, x: np.ndarray, workers: int = 1, batch: int = 64, path: str = "fast"):
    """Logits and per-tile compute time (ns) for an NCHW tile stack.

    Chunks run on a thread pool; results land in input order so the worker
    count never changes the output.
    """
    if workers < 1:
        raise ValueError("workers must be at least 1")
    plan = Plan(g, path)
    plan.check_input(x)
    spans = _chunks(len(x), batch)

    def run(span):
        lo, hi = span
        t0 = time.perf_counter_ns()
        out = plan.run(x[lo:hi]).output
        return out, time.perf_counter_ns() - t0

    if workers == 1:
        results = [run(s) for s in spans]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, spans))
    logits = np.concatenate([np.asarray(r[0], dtype=np.float64).reshape(r[0].shape[0], -1)[:, 0]
                             for r in results])
    per_tile = np.concatenate([np.full(hi - lo, max(1, dt // (hi - lo)), dtype=np.int64)
                               for (lo, hi), (_, dt) in zip(spans, results)])
    return logits, per_tile


def evaluate(g, idx: DatasetIndex, split: str = "test", workers: int = 1, batch: int = 64,
             n_c: int = tiles_per_frame(1920, 1080)):
    """Run every tile of ``split`` through ``g``; returns (EvalReport, records)."""
    t0 = time.perf_counter_ns()
    x, y, recs = load_split(idx, split)
    logits, per_tile = infer_tiles(g, x, workers, batch)
    wall = time.perf_counter_ns() - t0
    pred = predict(logits)
    for r, p, s, t in zip(recs, pred, logits, per_tile):
        r.prediction = CLASSES[0] if p else CLASSES[1]
        r.score = float(s)
        r.time_ns = int(t)
    fps_chunk, fps_image = fps_report(per_tile, n_c)
    end_to_end = float(Fraction(10 ** 9 * len(recs), max(1, wall)))
    report = EvalReport.from_counts(*confusion(y, pred), fps_chunk, fps_image, n_c,
                                    fps_chunk_end_to_end=end_to_end)
    return report, recs


def predictions_json(recs: list) -> list:
    return [{"frame": r.frame, "row": r.row, "col": r.col, "label": r.label,
             "prediction": r.prediction, "score": r.score} for r in recs]


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
