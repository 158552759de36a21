"""Builders for cnv_w1a1, cnv_w2a2 and mobilenet_w4a4 as pre-streamline dataflow graphs.

All quantizer scales are powers of two. Products and sums of dequantized
operands are then exact in float64, which is what lets the streamlined integer
graph agree with the float graph bit for bit.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bundle import ManifestMismatch, read_bundle, write_bundle
from .executor import input_values, node_op
from .graph import DataflowGraph, GraphBuilder, from_json, infer_shapes, serialize, value_ranges
from .qtensor import FTensor, PackedBitTensor, QTensor, pack_bipolar

INPUT_SHAPE = [1, 3, 32, 32]
INPUT_SCALE = 2.0 ** -8
BN_EPS = 1e-4


class UnsupportedBits(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    name: str
    weight_bits: int
    act_bits: int

    def __post_init__(self):
        suffix = self.name.rsplit("_", 1)[-1]
        if suffix != f"w{self.weight_bits}a{self.act_bits}":
            raise ValueError(f"{self.name}: suffix disagrees with w{self.weight_bits}a{self.act_bits}")


MODELS = {
    "cnv_w1a1": ModelSpec("cnv_w1a1", 1, 1),
    "cnv_w2a2": ModelSpec("cnv_w2a2", 2, 2),
    "mobilenet_w4a4": ModelSpec("mobilenet_w4a4", 4, 4),
}

# conv output channels in order; "P" is a 2x2 max pool
CNV_LAYOUT = (64, 64, "P", 128, 128, "P", 256, 256)
CNV_FC = (512, 512)

MOBILENET_CHANNELS = (64, 128, 128, 256, 256, 512, 512, 512, 512, 512, 512, 1024, 1024)
# first conv followed by the depthwise-separable blocks; unlisted blocks use stride 1
MOBILENET_STRIDES = (1, 1, 2, 1, 2, 1, 2, 1)


def weight_scale(bits: int) -> float:
    """Scale putting the signed ``bits`` grid on [-1, 1)."""
    return 1.0 if bits == 1 else 2.0 ** -(bits - 1)


def act_quantizer(bits: int, unsigned: bool = False) -> dict:
    if bits == 1:
        return {"bits": 1, "mode": "bipolar", "scale": 1.0}
    if unsigned:
        return {"bits": bits, "mode": "unsigned", "scale": 2.0 ** -bits}
    return {"bits": bits, "mode": "signed", "scale": 2.0 ** -(bits - 1)}


def random_weight(rng: np.random.Generator, shape, bits: int):
    """Signed uniform draw over the representable grid."""
    if bits == 1:
        return pack_bipolar(rng.choice(np.array([-1, 1]), size=shape))
    lo, hi = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    return QTensor(shape, rng.integers(lo, hi + 1, size=shape), bits, weight_scale(bits))


def _bn(c: int) -> dict:
    return {"gamma": FTensor.of(np.ones(c)), "beta": FTensor.of(np.zeros(c)),
            "mean": FTensor.of(np.zeros(c)), "var": FTensor.of(np.ones(c))}


def _input(b: GraphBuilder) -> None:
    b.add("Input", {"shape": INPUT_SHAPE, "bits": 8, "signed": False, "scale": INPUT_SCALE}, id="input")


def build_cnv(bits: int, seed: int = 0, calibrate: bool = True) -> DataflowGraph:
    """CNV topology: six unpadded 3x3 convs with two max pools, then three dense layers."""
    if bits not in (1, 2):
        raise UnsupportedBits(f"CNV supports 1 or 2 bits, got {bits}")
    rng = np.random.default_rng(seed)
    b = GraphBuilder(f"cnv_w{bits}a{bits}")
    _input(b)
    cin = 3
    for item in CNV_LAYOUT:
        if item == "P":
            b.add("MaxPool", {"kernel": 2, "stride": 2})
            continue
        b.add("Conv", {"out_channels": item, "kernel": 3, "stride": 1, "pad": 0},
              {"weight": random_weight(rng, (item, cin, 3, 3), bits)})
        b.add("BatchNorm", {"eps": BN_EPS}, _bn(item))
        b.add("QuantActivation", act_quantizer(bits))
        cin = item
    b.add("Flatten")
    fin = cin
    for fout in CNV_FC:
        b.add("FC", {"out_features": fout}, {"weight": random_weight(rng, (fout, fin), bits)})
        b.add("BatchNorm", {"eps": BN_EPS}, _bn(fout))
        b.add("QuantActivation", act_quantizer(bits))
        fin = fout
    b.add("FC", {"out_features": 1}, {"weight": random_weight(rng, (1, fin), bits),
                                      "bias": FTensor.of(np.zeros(1))})
    b.add("Output", id="output")
    g = b.finalize()
    return randomize_batchnorm(g, rng) if calibrate else g


def build_mobilenet_w4a4(seed: int = 0, calibrate: bool = True) -> DataflowGraph:
    """Depthwise-separable stack for 32x32 input; head is avg pool, 4-bit ReLU, dense logit."""
    rng = np.random.default_rng(seed)
    bits = 4
    relu = act_quantizer(bits, unsigned=True)
    b = GraphBuilder("mobilenet_w4a4")
    _input(b)
    b.add("Conv", {"out_channels": 32, "kernel": 3, "stride": MOBILENET_STRIDES[0], "pad": 1},
          {"weight": random_weight(rng, (32, 3, 3, 3), bits)})
    b.add("BatchNorm", {"eps": BN_EPS}, _bn(32))
    b.add("QuantActivation", relu)
    cin = 32
    for i, cout in enumerate(MOBILENET_CHANNELS):
        stride = MOBILENET_STRIDES[i + 1] if i + 1 < len(MOBILENET_STRIDES) else 1
        b.add("DepthwiseConv", {"kernel": 3, "stride": stride, "pad": 1},
              {"weight": random_weight(rng, (cin, 1, 3, 3), bits)})
        b.add("BatchNorm", {"eps": BN_EPS}, _bn(cin))
        b.add("QuantActivation", relu)
        b.add("Conv", {"out_channels": cout, "kernel": 1, "stride": 1, "pad": 0},
              {"weight": random_weight(rng, (cout, cin, 1, 1), bits)})
        b.add("BatchNorm", {"eps": BN_EPS}, _bn(cout))
        b.add("QuantActivation", relu)
        cin = cout
    b.add("AvgPool", {"mode": "mean"})
    b.add("QuantActivation", relu)
    b.add("Flatten")
    b.add("FC", {"out_features": 1}, {"weight": random_weight(rng, (1, cin), bits),
                                      "bias": FTensor.of(np.zeros(1))})
    b.add("Output", id="output")
    g = b.finalize()
    return randomize_batchnorm(g, rng) if calibrate else g


def build(name: str, seed: int = 0, calibrate: bool = True) -> DataflowGraph:
    if name == "cnv_w1a1":
        return build_cnv(1, seed, calibrate)
    if name == "cnv_w2a2":
        return build_cnv(2, seed, calibrate)
    if name == "mobilenet_w4a4":
        return build_mobilenet_w4a4(seed, calibrate)
    raise KeyError(f"unknown model {name!r}; choose from {sorted(MODELS)}")


def randomize_batchnorm(g: DataflowGraph, rng: np.random.Generator, n_images: int = 8) -> DataflowGraph:
    """Set BatchNorm statistics from random images, with random positive gains and shifts.

    Statistics come from the running activations so that every quantizer sees
    inputs spread across its levels; the final dense bias is set to the negated
    median logit so that decisions split roughly evenly.
    """
    x = rng.integers(0, 256, size=(n_images,) + tuple(INPUT_SHAPE[1:]))
    tensors = dict(g.tensors)
    ranges = value_ranges(g)
    values = {}
    for n in g.topo_order():
        if n.kind == "Input":
            values[n.id] = input_values(n, x)
            continue
        v = values[n.inputs[0]]
        if n.kind == "BatchNorm":
            axes = (0, 2, 3) if v.ndim == 4 else (0,)
            c = v.shape[1]
            std = np.sqrt(v.var(axis=axes) + 1e-2)
            tensors[n.weights["mean"]] = FTensor.of(v.mean(axis=axes) + rng.normal(0, 0.1, c) * std)
            tensors[n.weights["var"]] = FTensor.of(std ** 2)
            tensors[n.weights["gamma"]] = FTensor.of(rng.uniform(0.5, 1.5, c))
            tensors[n.weights["beta"]] = FTensor.of(rng.uniform(-0.2, 0.2, c))
            g = DataflowGraph(g.nodes, tensors, g.shapes, g.name)
        if n.kind == "FC" and "bias" in n.weights:
            nobias = node_op(DataflowGraph(g.nodes, {**tensors, n.weights["bias"]: FTensor.of(np.zeros(1))},
                                           g.shapes, g.name), n, ranges)
            logits = np.asarray(nobias(v), dtype=np.float64)
            # a dyadic bias keeps the logit arithmetic exact
            bias = -np.round(np.median(logits, axis=0) * 64) / 64
            tensors[n.weights["bias"]] = FTensor.of(bias)
            g = DataflowGraph(g.nodes, tensors, g.shapes, g.name)
        values[n.id] = node_op(g, n, ranges)(v)
    return g


# -- persistence -----------------------------------------------------------------

def save_weights(g: DataflowGraph, path) -> None:
    write_bundle(g.tensors, path)


def load_weights(g: DataflowGraph, path) -> DataflowGraph:
    """Resolve every tensor reference of ``g`` from the bundle at ``path``."""
    found = read_bundle(path)
    tensors = {}
    for n in g.nodes:
        for role, name in n.weights.items():
            if name not in found:
                raise ManifestMismatch(name, "present", "missing")
            t = found[name]
            if name in g.tensors:
                want = g.tensors[name]
                if tuple(want.shape) != tuple(t.shape):
                    raise ManifestMismatch(name, tuple(want.shape), tuple(t.shape))
                if (type(want), getattr(want, "bits", 64)) != (type(t), getattr(t, "bits", 64)):
                    raise ManifestMismatch(name, f"{type(want).__name__}[{getattr(want, 'bits', 64)} bits]",
                                           f"{type(t).__name__}[{getattr(t, 'bits', 64)} bits]")
            tensors[name] = t
    return infer_shapes(DataflowGraph(g.nodes, tensors, g.shapes, g.name))


def save_graph(g: DataflowGraph, out_dir, bundle: str = "bundle") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_weights(g, out_dir / bundle)
    path = out_dir / "graph.json"
    path.write_bytes(serialize(g, bundle))
    return path


def load_graph(path) -> DataflowGraph:
    """Load ``graph.json`` (or a directory holding it) together with its bundle."""
    path = Path(path)
    if path.is_dir():
        path = path / "graph.json"
    doc = json.loads(path.read_text())
    g = from_json(doc)
    bundle = doc.get("bundle")
    if bundle is None:
        return g
    return load_weights(g, path.parent / bundle)
