"""Small hand-built graphs shared by the trainer tests and the acceptance suite."""
import numpy as np

from finnlite import trainer as T
from finnlite.graph import GraphBuilder
from finnlite.qtensor import FTensor, QTensor
import oracles as O


def toy_graph(cout=4, size=6):
    """Conv -> BatchNorm -> 2-bit activation -> MaxPool -> dense layer with bias."""
    b = GraphBuilder("toy")
    b.add("Input", {"shape": [1, 3, size, size], "bits": 8, "signed": False, "scale": 2 ** -8}, id="input")
    b.add("Conv", {"out_channels": cout, "kernel": 3, "stride": 1, "pad": 1},
          {"weight": QTensor((cout, 3, 3, 3), np.zeros((cout, 3, 3, 3), int), 2, 0.5)})
    b.add("BatchNorm", {"eps": 1e-4}, {"gamma": FTensor.of(np.ones(cout)), "beta": FTensor.of(np.zeros(cout)),
                                       "mean": FTensor.of(np.zeros(cout)), "var": FTensor.of(np.ones(cout))})
    b.add("QuantActivation", {"bits": 2, "mode": "signed", "scale": 0.5})
    b.add("MaxPool", {"kernel": 2, "stride": 2})
    b.add("Flatten")
    n = cout * (size // 2) ** 2
    b.add("FC", {"out_features": 1}, {"weight": QTensor((1, n), np.zeros((1, n), int), 2, 0.5),
                                      "bias": FTensor.of(np.zeros(1))})
    b.add("Output", id="output")
    return b.finalize()


def gradient_check(seed=3, logit_scale=0.7):
    """Worst relative error between backprop and central differences on the float path of the toy net."""
    m = T.QATModel(toy_graph(), "float64", quantize=False, seed=seed)
    rng = np.random.default_rng(seed)
    for k, p in m.params.items():
        # keep latents inside the clip region and move BN params off their identity values
        m.params[k] = p * 0.8 if p.ndim > 1 else p + rng.normal(0, 0.3, p.shape)
    x = rng.integers(0, 256, (8, 3, 6, 6))
    y = rng.integers(0, 2, 8)
    _, grads = T.forward_backward(m, x, y, logit_scale)
    num = O.central_difference(lambda: T.forward_backward(m, x, y, logit_scale)[0], m.params)
    return max(O.relative_error(grads[k], num[k]) for k in m.params)


def brightness_graph(threshold: float):
    """Logit = sum of all tile bytes minus ``threshold``: a predictor with a known decision rule."""
    b = GraphBuilder("brightness")
    b.add("Input", {"shape": [1, 3, 32, 32], "bits": 8, "signed": False, "scale": 1.0}, id="input")
    b.add("Flatten")
    n = 3 * 32 * 32
    b.add("FC", {"out_features": 1}, {"weight": QTensor((1, n), np.ones((1, n), int), 2, 1.0),
                                      "bias": FTensor.of([-float(threshold)])})
    b.add("Output", id="output")
    return b.finalize()
