import json
import math

import numpy as np
import pytest

from finnlite import executor, streamline, synthetic, zoo
from finnlite import trainer as T
from finnlite.qtensor import PackedBitTensor, QTensor
import nets


@pytest.fixture(scope="module")
def tiles():
    x, y = synthetic.make_tiles(100, seed=5)
    return x.transpose(0, 3, 1, 2), y


def test_zero_weight_net_loss_is_ln2(tiles):
    x, y = tiles
    m = T.QATModel(zoo.build("cnv_w2a2"), "float64", seed=0)
    for k in m.params:
        m.params[k][...] = 0
    loss, _ = T.forward_backward(m, x[:50], y[:50], logit_scale=1.0)
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_gradient_check_float_path():
    assert nets.gradient_check() <= 1e-4


def test_latent_outside_clip_gets_no_gradient(tiles):
    x, y = tiles
    m = T.QATModel(zoo.build("cnv_w2a2"), "float64", seed=1)
    name = "conv1/weight"
    m.params[name][0, 0, 0, 0] = 1.5
    m.params[name][0, 0, 0, 1] = 0.2
    _, grads = T.forward_backward(m, x[:20], y[:20])
    assert grads[name][0, 0, 0, 0] == 0.0
    assert np.count_nonzero(grads[name]) > 0


def test_ste_mask_regions():
    x = np.array([-1.5, -1.0, -0.2, 0.0, 0.7, 1.0, 1.01])
    assert T.ste_mask(x).tolist() == [False, True, True, True, True, True, False]
    assert T.ste_mask(x, unsigned=True).tolist() == [False, False, False, True, True, True, False]


def test_binary_weights_sign_of_zero_is_plus_one():
    spec = T.WeightSpec(1, 1.0)
    assert spec.quantize(np.array([-0.1, 0.0, 0.3])).tolist() == [-1, 1, 1]
    assert isinstance(spec.export(np.zeros((2, 3))), PackedBitTensor)


def test_zero_lr_leaves_weights_and_loss_fixed(tiles):
    g = zoo.build("cnv_w1a1")
    cfg = T.TrainConfig(epochs=2, lr=0.0, seed=3, bn_momentum=0.0)
    before = T.QATModel(g, cfg.dtype, seed=3)
    _, state = T.train(g, tiles, config=cfg)
    for k, v in before.params.items():
        assert np.array_equal(state.params[k], v)
    losses = [h["train_loss"] for h in state.history]
    assert losses[0] == losses[1]


def test_same_seed_same_history(tiles):
    g = zoo.build("cnv_w1a1")
    cfg = T.TrainConfig(epochs=1, seed=11)
    ga, a = T.train(g, tiles, tiles, cfg)
    gb, b = T.train(g, tiles, tiles, cfg)
    assert a.history == b.history
    assert ga == gb
    _, c = T.train(g, tiles, config=T.TrainConfig(epochs=1, seed=12))
    assert c.history[0]["train_loss"] != a.history[0]["train_loss"]


def test_history_is_append_only(tiles, tmp_path):
    g = zoo.build("cnv_w1a1")
    cfg = T.TrainConfig(epochs=1, seed=2)
    _, state = T.train(g, tiles, config=cfg)
    first = dict(state.history[0])
    T.train(g, tiles, config=cfg, state=state)
    assert state.history[0] == first and [h["epoch"] for h in state.history] == [1, 2]
    T.write_history(state, tmp_path / "history.json")
    doc = json.loads((tmp_path / "history.json").read_text())
    assert doc["schema"] == 1 and len(doc["history"]) == 2


@pytest.mark.parametrize("model", ["cnv_w1a1", "cnv_w2a2", "mobilenet_w4a4"])
def test_export_sandwich_is_bit_exact(tiles, model):
    x, y = tiles
    g, state = T.train(zoo.build(model), (x[:50], y[:50]), config=T.TrainConfig(epochs=1, seed=4))
    x = x[50:]
    want = state.model.eval_logits(x)
    got = executor.execute(g, x).output.reshape(len(x), -1)[:, 0]
    assert np.array_equal(got, want)
    s, _ = streamline.streamline_all(g)
    assert np.array_equal(executor.predict(executor.execute(s, x).output), (want >= 0).astype(int))


def test_exported_weights_are_quantizer_of_latents(tiles):
    g, state = T.train(zoo.build("cnv_w2a2"), tiles, config=T.TrainConfig(epochs=1, seed=6))
    t = g.tensors["conv2/weight"]
    assert isinstance(t, QTensor)
    assert np.array_equal(t.to_float(), state.model.weight("conv2/weight").astype(np.float64))


def test_gamma_stays_positive(tiles):
    _, state = T.train(zoo.build("cnv_w2a2"), tiles, config=T.TrainConfig(epochs=1, lr=5.0, seed=1))
    for n in state.model.order:
        if n.kind == "BatchNorm":
            assert state.params[n.weights["gamma"]].min() >= np.float32(1e-3)


def test_non_finite_loss_raises():
    with pytest.raises(T.NumericalOverflow):
        T.bce_with_logits(np.array([np.inf, 0.0]), np.array([0.0, 1.0]))
    with pytest.raises(T.NumericalOverflow):
        T.bce_with_logits(np.array([np.nan]), np.array([1.0]))


def test_bce_is_stable_for_large_logits():
    loss, grad = T.bce_with_logits(np.array([800.0, -800.0]), np.array([1.0, 0.0]))
    assert loss == 0.0 and np.all(np.isfinite(grad))
