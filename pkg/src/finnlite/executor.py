"""Topological-order graph execution with per-node wall-clock timing."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .graph import DataflowGraph, value_ranges, weight_values
from .kernels import ShapeMismatch
from .qtensor import PackedBitTensor

PATHS = ("fast", "oracle")


@dataclass
class ExecutionResult:
    output: np.ndarray
    timings_ns: dict = field(default_factory=dict)

    @property
    def total_ns(self) -> int:
        return sum(self.timings_ns.values())


def node_op(g: DataflowGraph, n, ranges: dict, path: str = "fast"):
    """Kernel closure computing node ``n`` from its input value."""
    fast = path == "fast"
    a = n.attrs
    k = n.kind

    def const(role):
        return g.tensor(n, role).to_float() if role in n.weights else None

    if k in ("Conv", "FC"):
        t = g.tensor(n, "weight")
        w = weight_values(t)
        bias = const("bias")
        xnor = (fast and isinstance(t, PackedBitTensor) and ranges[n.inputs[0]].bipolar
                and (k == "FC" or a["pad"] == 0))
        if k == "Conv":
            if xnor:
                op = lambda x: K.conv2d_xnor(x, t.words, t.shape, a["stride"])
            elif fast:
                op = lambda x: K.conv2d(x, w, a["stride"], a["pad"])
            else:
                op = lambda x: K.conv2d_direct(x, w, a["stride"], a["pad"])
        else:
            if xnor:
                op = lambda x: K.fully_connected_xnor(x, t.words, t.row_length)
            elif fast:
                op = lambda x: K.fully_connected(x, w)
            else:
                op = lambda x: K.fully_connected_direct(x, w)
        if bias is None:
            return op
        return lambda x: K.add(op(x), bias)
    if k == "DepthwiseConv":
        w = weight_values(g.tensor(n, "weight"))
        fn = K.depthwise_conv2d if fast else K.depthwise_conv2d_direct
        return lambda x: fn(x, w, a["stride"], a["pad"])
    if k == "MaxPool":
        fn = K.maxpool2d if fast else K.maxpool2d_direct
        return lambda x: fn(x, a["kernel"], a["stride"])
    if k == "AvgPool":
        return lambda x: K.avgpool_global(x, a["mode"])
    if k == "Flatten":
        return lambda x: x.reshape(x.shape[0], -1)
    if k == "BatchNorm":
        p = [const(r) for r in ("gamma", "beta", "mean", "var")]
        s, b = K.bn_affine(*p, a["eps"])
        return lambda x: K.add(K.scale(x, s), b)
    if k == "Scale":
        s = const("scale")
        return lambda x: K.scale(x, s)
    if k == "Add":
        b = const("bias")
        return lambda x: K.add(x, b)
    if k == "QuantActivation":
        bits, mode, s = a["bits"], a["mode"], a["scale"]
        if s == 1.0:
            return lambda x: K.quant_levels(np.asarray(x, dtype=np.float64), bits, mode, 1.0)
        return lambda x: K.quant_activation(x, bits, mode, s)
    if k == "MultiThreshold":
        t = weight_values(g.tensor(n, "thresholds"))
        return lambda x: K.multithreshold(x, t, a["out_scale"], a["out_offset"])
    if k == "Sign":
        return K.sign
    if k == "Output":
        s, b = const("scale"), const("bias")
        if s is None and b is None:
            return lambda x: x
        return lambda x: K.add(K.scale(x, 1.0 if s is None else s), 0.0 if b is None else b)
    raise ValueError(f"no kernel for node kind {k!r}")


def input_values(input_node, x: np.ndarray) -> np.ndarray:
    s = input_node.attrs["scale"]
    return x.astype(np.int64) if s == 1.0 else x.astype(np.float64) * s


class Plan:
    """A graph prepared for repeated execution: order, constants and kernel choice fixed."""

    def __init__(self, g: DataflowGraph, path: str = "fast"):
        if path not in PATHS:
            raise ValueError(f"path must be one of {PATHS}")
        self.graph = g
        self.path = path
        self.order = g.topo_order()
        self.ranges = value_ranges(g)
        self.input = g.input_node
        self.output = g.output_node
        self._steps = [(n, node_op(g, n, self.ranges, path)) for n in self.order if n.kind != "Input"]

    def check_input(self, x: np.ndarray) -> None:
        want = tuple(self.input.attrs["shape"])
        if x.ndim != len(want) or tuple(x.shape[1:]) != want[1:]:
            raise ShapeMismatch("Input", ("N",) + want[1:], x.shape)

    def run(self, x, keep: bool = False, batch: int = 128) -> ExecutionResult:
        """Execute on ``x``; inputs larger than ``batch`` run in slices to bound memory.

        ``keep=True`` retains every intermediate value and disables slicing.
        """
        x = np.asarray(x)
        self.check_input(x)
        if keep or len(x) <= batch:
            return self._run(x, keep)
        parts = [self._run(x[i:i + batch]) for i in range(0, len(x), batch)]
        timings = {k: sum(p.timings_ns[k] for p in parts) for k in parts[0].timings_ns}
        return ExecutionResult(np.concatenate([p.output for p in parts]), timings)

    def _run(self, x: np.ndarray, keep: bool = False) -> ExecutionResult:
        timings = {}
        t0 = time.perf_counter_ns()
        values = {self.input.id: input_values(self.input, x)}
        timings[self.input.id] = time.perf_counter_ns() - t0
        for n, op in self._steps:
            t0 = time.perf_counter_ns()
            try:
                values[n.id] = op(values[n.inputs[0]])
            except Exception as e:
                e.node_id = n.id
                raise
            timings[n.id] = time.perf_counter_ns() - t0
        res = ExecutionResult(values[self.output.id], timings)
        if keep:
            res.values = values
        return res


def execute(g: DataflowGraph, x, path: str = "fast") -> ExecutionResult:
    return Plan(g, path).run(x)


def predict(logits: np.ndarray) -> np.ndarray:
    """Binary decision: logit >= 0 means grape."""
    return (np.asarray(logits).reshape(len(logits), -1)[:, 0] >= 0).astype(np.int64)
