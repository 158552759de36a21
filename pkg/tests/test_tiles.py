import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from finnlite import synthetic
from finnlite import tiles as TP
import nets
import oracles as O

PURPLE = (128, 0, 128)  # PIL hue 213, inside the default band
GREEN = (0, 128, 0)


def tile_with(n_in_range):
    t = np.empty((32 * 32, 3), dtype=np.uint8)
    t[:] = GREEN
    t[:n_in_range] = PURPLE
    return t.reshape(32, 32, 3)


def test_hd_frame_tile_count():
    recs = TP.split_frame(np.zeros((1080, 1920, 3), np.uint8))
    assert len(recs) == 60 * 33 == 1980 == TP.tiles_per_frame(1920, 1080)
    assert recs[0].rect == (0, 0, 32, 32) and recs[1].rect == (32, 0, 32, 32)
    assert recs[-1].rect == (59 * 32, 32 * 32, 32, 32)


def test_single_tile_frame():
    recs = TP.split_frame(np.zeros((32, 32, 3), np.uint8), "f")
    assert [(r.frame, r.row, r.col, r.rect) for r in recs] == [("f", 0, 0, (0, 0, 32, 32))]


def test_frame_too_small():
    with pytest.raises(TP.FrameTooSmall):
        TP.split_frame(np.zeros((64, 31, 3), np.uint8))


@given(st.integers(32, 300), st.integers(32, 300))
def test_tiles_disjoint_in_bounds_and_cover(h, w):
    recs = TP.split_frame(np.zeros((h, w, 3), np.uint8))
    cover = np.zeros((h, w), np.int64)
    for r in recs:
        x, y, tw, th = r.rect
        assert (tw, th) == (32, 32) and x + tw <= w and y + th <= h
        cover[y:y + th, x:x + tw] += 1
    assert cover.max() == 1
    # only the dropped right and bottom strips stay uncovered
    assert cover[: h // 32 * 32, : w // 32 * 32].min() == 1
    assert cover.sum() == len(recs) * 1024
    assert [r.key for r in recs] == sorted(r.key for r in recs)


def test_prelabel_extremes():
    assert TP.prelabel_color_threshold(tile_with(1024)) == "grape"
    assert TP.prelabel_color_threshold(tile_with(0)) == "no_grape"


def test_prelabel_thirty_percent():
    n = 308  # ceil(0.3 * 1024)
    assert TP.in_range_fraction(tile_with(n)) == n / 1024
    assert TP.prelabel_color_threshold(tile_with(n), min_fraction=0.25) == "grape"
    assert TP.prelabel_color_threshold(tile_with(n), min_fraction=0.35) == "no_grape"


def test_prelabel_boundary_is_inclusive():
    assert TP.prelabel_color_threshold(tile_with(256)) == "grape"
    assert TP.prelabel_color_threshold(tile_with(255)) == "no_grape"
    with pytest.raises(ValueError):
        TP.prelabel_color_threshold(tile_with(0), min_fraction=1.5)


def test_hue_band_wraps_through_red():
    assert TP.in_range_fraction(np.full((32, 32, 3), (200, 10, 10), np.uint8)) == 1.0
    assert TP.in_range_fraction(np.full((32, 32, 3), (200, 200, 200), np.uint8)) == 0.0
    assert TP.HsvRange(50, 100).contains(np.array([[75, 200, 200]]))[0]


def test_synthetic_tiles_prelabel_to_their_class():
    x, y = synthetic.make_tiles(200, seed=1)
    labels = [TP.prelabel_color_threshold(t) == "grape" for t in x]
    assert np.array_equal(np.array(labels, dtype=np.int64), y)


def test_split_counts():
    assert TP.split_counts(10) == (6, 2, 2)
    assert TP.split_counts(1198) == (719, 239, 240)
    assert TP.split_counts(0) == (0, 0, 0)


@given(st.integers(0, 5000))
def test_split_counts_partition(n):
    a, b, c = TP.split_counts(n)
    assert a + b + c == n and min(a, b, c) >= 0


def test_make_splits_contiguous_and_disjoint():
    frames = [f"f{i}" for i in range(10)]
    idx = TP.make_splits(frames)
    assert idx.frames["train"] == frames[:6] and idx.frames["val"] == frames[6:8]
    assert idx.frames["test"] == frames[8:]
    assert idx.split_of("f7") == "val"
    with pytest.raises(ValueError):
        TP.make_splits(["a", "a"])


@pytest.fixture(scope="module")
def frame_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("frames")
    idx = TP.write_dataset(root, synthetic.make_frames(5, 96, 128, seed=3))
    return root, idx


def test_write_and_load_dataset(frame_dataset):
    root, idx = frame_dataset
    back = TP.load_dataset(root)
    assert back.frames == {"train": ["frame0000", "frame0001", "frame0002"], "val": ["frame0003"],
                           "test": ["frame0004"]}
    assert sum(sum(v.values()) for v in back.tile_counts().values()) == 5 * 12
    recs = back.records("train")
    assert [r.key for r in recs] == sorted(r.key for r in recs)
    assert {r.label for r in recs} <= set(TP.CLASSES)
    x, y, _ = TP.load_split(back, "test")
    assert x.shape == (12, 3, 32, 32) and x.dtype == np.uint8 and len(y) == 12


def test_empty_split(tmp_path):
    TP.write_tiles(tmp_path, "train", *synthetic.make_tiles(4))
    idx = TP.load_dataset(tmp_path)
    with pytest.raises(TP.EmptySplit):
        TP.evaluate(nets.brightness_graph(0), idx, "test")


def test_missing_root(tmp_path):
    with pytest.raises(FileNotFoundError):
        TP.load_dataset(tmp_path / "nope")


@pytest.fixture(scope="module")
def light_dark(tmp_path_factory):
    """Balanced set: white tiles labelled grape, black tiles labelled no_grape."""
    root = tmp_path_factory.mktemp("ld")
    x = np.zeros((20, 32, 32, 3), np.uint8)
    x[::2] = 255
    y = (np.arange(20) % 2 == 0).astype(np.int64)
    TP.write_tiles(root, "test", x, y)
    return TP.load_dataset(root)


def test_perfect_predictor(light_dark):
    rep, recs = TP.evaluate(nets.brightness_graph(1000), light_dark)
    assert (rep.tp, rep.fp, rep.fn, rep.tn) == (10, 0, 0, 10)
    assert rep.precision == rep.recall == rep.f1 == 1.0
    assert all(r.prediction == r.label for r in recs)


def test_all_positive_predictor(light_dark):
    rep, _ = TP.evaluate(nets.brightness_graph(-1), light_dark)
    assert (rep.precision, rep.recall) == (0.5, 1.0)
    assert rep.f1 == pytest.approx(2 / 3)


def test_all_negative_predictor_has_undefined_precision(light_dark):
    rep, _ = TP.evaluate(nets.brightness_graph(10 ** 9), light_dark)
    assert rep.precision is None and rep.recall == 0.0 and rep.f1 is None
    assert "n/a" in rep.to_text()


def test_counts_match_recount(frame_dataset):
    _, idx = frame_dataset
    rep, recs = TP.evaluate(nets.brightness_graph(3 * 1024 * 100), idx, "train", batch=7)
    assert (rep.tp, rep.fp, rep.fn, rep.tn) == O.recount([r.label for r in recs], [r.prediction for r in recs])
    assert rep.n_tiles == len(recs) == 36
    assert rep.fps_image / rep.fps_chunk == pytest.approx(rep.n_c, rel=1e-12)


def test_worker_count_does_not_change_results(frame_dataset):
    _, idx = frame_dataset
    g = nets.brightness_graph(3 * 1024 * 100)
    a, ra = TP.evaluate(g, idx, "train", workers=1, batch=5)
    b, rb = TP.evaluate(g, idx, "train", workers=4, batch=5)
    assert (a.tp, a.fp, a.fn, a.tn) == (b.tp, b.fp, b.fn, b.tn)
    assert TP.predictions_json(ra) == TP.predictions_json(rb)


def test_fps_report():
    assert TP.fps_report([10 ** 6], 1) == (1000.0, 1000.0)
    assert TP.fps_report([10 ** 6] * 5, 1980) == (1000.0, 1_980_000.0)
    assert TP.fps_report([1, 2], 3) == (float(2e9 / 3), 2e9)
    with pytest.raises(TP.EmptyTimings):
        TP.fps_report([], 1)
    with pytest.raises(ValueError):
        TP.fps_report([5], 0)


def test_speedup():
    assert TP.speedup(25.0) == 1.0
    assert TP.speedup(50.0, realtime_fps=10) == 5.0


def test_report_serialisations():
    rep = TP.EvalReport.from_counts(3, 1, 2, 4, 100.0, 198000.0, 1980)
    doc = json.loads(json.dumps(rep.to_json()))
    assert doc["precision"] == 0.75 and doc["recall"] == 0.6 and doc["n_tiles"] == 10
    assert doc["f1"] == pytest.approx(2 * 0.75 * 0.6 / 1.35)
    lines = rep.plot_csv().splitlines()
    assert lines[0] == "figure,metric,value" and lines[-1] == "frame_rate,fps_image,198000.0"
