"""Dataflow graph IR shared by the builders, the streamlining passes, folding and the executor.

A graph is an immutable DAG of :class:`Node` objects. Each node produces one
tensor; ``shapes`` annotates the edge leaving each producer. Weight-like constants
(conv kernels, BatchNorm statistics, thresholds, affine constants) live in
``tensors`` and are referenced from nodes by name, so the JSON form of a graph
stays small and the constants go to a weight bundle.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

import numpy as np

from .kernels import ACC_LIMIT, ShapeMismatch, conv_out_size
from .qtensor import FTensor, PackedBitTensor, QTensor, Tensor

SCHEMA = 1

KINDS = (
    "Input", "Output", "Conv", "DepthwiseConv", "FC", "MaxPool", "AvgPool", "BatchNorm",
    "QuantActivation", "MultiThreshold", "Scale", "Add", "Sign", "Flatten",
)
REQUIRED_ATTRS = {
    "Input": ("shape", "bits", "signed", "scale"),
    "Conv": ("out_channels", "kernel", "stride", "pad"),
    "DepthwiseConv": ("kernel", "stride", "pad"),
    "FC": ("out_features",),
    "MaxPool": ("kernel", "stride"),
    "AvgPool": ("mode",),
    "BatchNorm": ("eps",),
    "QuantActivation": ("bits", "mode", "scale"),
    "MultiThreshold": ("out_scale", "out_offset"),
}
REQUIRED_WEIGHTS = {
    "Conv": ("weight",),
    "DepthwiseConv": ("weight",),
    "FC": ("weight",),
    "BatchNorm": ("gamma", "beta", "mean", "var"),
    "MultiThreshold": ("thresholds",),
    "Scale": ("scale",),
    "Add": ("bias",),
}
# kinds that may not survive streamlining
FLOAT_KINDS = ("BatchNorm", "Scale", "Add", "QuantActivation", "Sign")


class MalformedStream(ValueError):
    def __init__(self, offset, reason):
        super().__init__(f"malformed graph stream at offset {offset}: {reason}")
        self.offset, self.reason = offset, reason


class GraphError(ValueError):
    pass


def _plain(obj):
    return json.loads(json.dumps(obj))


@dataclass(frozen=True)
class Node:
    id: str
    kind: str
    inputs: tuple = ()
    attrs: dict = field(default_factory=dict, hash=False)
    weights: dict = field(default_factory=dict, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "attrs", _plain(self.attrs))
        object.__setattr__(self, "weights", dict(self.weights))

    def with_(self, **changes) -> "Node":
        return replace(self, **changes)

    def to_json(self) -> dict:
        return {"id": self.id, "kind": self.kind, "inputs": list(self.inputs),
                "attrs": self.attrs, "weights": self.weights}


@dataclass(frozen=True, eq=False)
class Violation:
    code: str
    node: Optional[str] = None
    detail: str = ""

    def __eq__(self, other):
        if isinstance(other, str):
            return self.code == other
        return isinstance(other, Violation) and (self.code, self.node) == (other.code, other.node)

    def __repr__(self):
        return f"{self.code}({self.node})" + (f": {self.detail}" if self.detail else "")


@dataclass(frozen=True, eq=False)
class DataflowGraph:
    nodes: tuple
    tensors: dict = field(default_factory=dict)
    shapes: dict = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "shapes", {k: tuple(v) for k, v in self.shapes.items()})

    # -- lookup -----------------------------------------------------------
    def node(self, node_id: str) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    @property
    def ids(self) -> list:
        return [n.id for n in self.nodes]

    def by_kind(self, *kinds) -> list:
        return [n for n in self.nodes if n.kind in kinds]

    def consumers(self, node_id: str) -> list:
        return [n for n in self.nodes if node_id in n.inputs]

    def producer(self, node: Node) -> Optional[Node]:
        return self.node(node.inputs[0]) if node.inputs else None

    def tensor(self, node: Node, role: str) -> Tensor:
        return self.tensors[node.weights[role]]

    @property
    def input_node(self) -> Node:
        return self.by_kind("Input")[0]

    @property
    def output_node(self) -> Node:
        return self.by_kind("Output")[0]

    @property
    def edges(self) -> list:
        return [(src, n.id) for n in self.nodes for src in n.inputs]

    def topo_order(self) -> list:
        order = _topo(self.nodes)
        if order is None:
            raise GraphError("graph contains a cycle")
        return order

    def kind_census(self) -> dict:
        out = {}
        for n in self.nodes:
            out[n.kind] = out.get(n.kind, 0) + 1
        return out

    # -- rebuilding -------------------------------------------------------
    def evolve(self, nodes=None, tensors=None, reshape=True) -> "DataflowGraph":
        """New graph with replaced nodes/tensors, unreferenced tensors dropped."""
        nodes = tuple(self.nodes if nodes is None else nodes)
        tensors = dict(self.tensors if tensors is None else tensors)
        used = {name for n in nodes for name in n.weights.values()}
        tensors = {k: v for k, v in tensors.items() if k in used}
        g = DataflowGraph(nodes, tensors, {}, self.name)
        return infer_shapes(g) if reshape else g

    def fresh_id(self, base: str) -> str:
        taken = set(self.ids)
        i = 0
        while f"{base}{i}" in taken:
            i += 1
        return f"{base}{i}"

    def __eq__(self, other):
        if not isinstance(other, DataflowGraph):
            return NotImplemented
        return (self.nodes == other.nodes and self.shapes == other.shapes
                and self.tensors.keys() == other.tensors.keys()
                and all(self.tensors[k] == other.tensors[k] for k in self.tensors))


def _topo(nodes) -> Optional[list]:
    ids = {n.id for n in nodes}
    indeg = {n.id: sum(1 for i in n.inputs if i in ids) for n in nodes}
    users = {n.id: [] for n in nodes}
    for n in nodes:
        for i in n.inputs:
            if i in users:
                users[i].append(n.id)
    by_id = {n.id: n for n in nodes}
    ready = [n.id for n in nodes if indeg[n.id] == 0]
    order = []
    while ready:
        nid = ready.pop(0)
        order.append(by_id[nid])
        for u in users[nid]:
            indeg[u] -= 1
            if indeg[u] == 0:
                ready.append(u)
    return order if len(order) == len(nodes) else None


class GraphBuilder:
    """Append-style construction of a chain (or DAG) of nodes."""

    def __init__(self, name: str = ""):
        self.name = name
        self.nodes: list[Node] = []
        self.tensors: dict[str, Tensor] = {}
        self._counts: dict[str, int] = {}

    def add(self, kind: str, attrs=None, weights=None, inputs=None, id=None) -> str:
        if id is None:
            base = kind.lower()
            k = self._counts.get(base, 0)
            self._counts[base] = k + 1
            id = f"{base}{k}"
        if inputs is None:
            inputs = (self.nodes[-1].id,) if self.nodes else ()
        refs = {}
        for role, t in (weights or {}).items():
            name = f"{id}/{role}"
            self.tensors[name] = t
            refs[role] = name
        self.nodes.append(Node(id, kind, tuple(inputs), attrs or {}, refs))
        return id

    def finalize(self) -> DataflowGraph:
        return infer_shapes(DataflowGraph(tuple(self.nodes), dict(self.tensors), {}, self.name))


# -- shape inference ----------------------------------------------------------

def _weight_shape(g: DataflowGraph, node: Node, role: str = "weight"):
    name = node.weights.get(role)
    if name is None or name not in g.tensors:
        return None
    return tuple(g.tensors[name].shape)


def node_output_shape(g: DataflowGraph, node: Node, in_shapes: list) -> tuple:
    a = node.attrs
    k = node.kind
    if k == "Input":
        return tuple(a["shape"])
    x = tuple(in_shapes[0])
    if k in ("Conv", "DepthwiseConv"):
        if len(x) != 4:
            raise ShapeMismatch(f"edge {node.inputs[0]}->{node.id}", ("N", "C", "H", "W"), x)
        ws = _weight_shape(g, node)
        cin = ws[1] if (ws and k == "Conv") else (ws[0] if ws else x[1])
        if ws is not None and x[1] != cin:
            raise ShapeMismatch(f"edge {node.inputs[0]}->{node.id}", (x[0], cin) + x[2:], x)
        if k == "Conv" and ws is not None and ws[0] != a["out_channels"]:
            raise ShapeMismatch(f"weight of {node.id}", (a["out_channels"],) + ws[1:], ws)
        kk, s, p = a["kernel"], a["stride"], a["pad"]
        oh, ow = conv_out_size(x[2], kk, s, p), conv_out_size(x[3], kk, s, p)
        if oh < 1 or ow < 1:
            raise ShapeMismatch(f"edge {node.inputs[0]}->{node.id}", (x[0], x[1], kk, kk), x)
        c = a["out_channels"] if k == "Conv" else x[1]
        return (x[0], c, oh, ow)
    if k == "FC":
        ws = _weight_shape(g, node)
        fin = ws[1] if ws else x[-1]
        if len(x) != 2 or x[1] != fin:
            raise ShapeMismatch(f"edge {node.inputs[0]}->{node.id}", (x[0], fin), x)
        return (x[0], a["out_features"])
    if k == "MaxPool":
        kk, s = a["kernel"], a["stride"]
        return (x[0], x[1], (x[2] - kk) // s + 1, (x[3] - kk) // s + 1)
    if k == "AvgPool":
        return (x[0], x[1], 1, 1)
    if k == "Flatten":
        return (x[0], int(np.prod(x[1:])))
    return x


def infer_shapes(g: DataflowGraph) -> DataflowGraph:
    order = _topo(g.nodes)
    if order is None:
        raise GraphError("cannot infer shapes of a cyclic graph")
    shapes = {}
    for n in order:
        shapes[n.id] = node_output_shape(g, n, [shapes[i] for i in n.inputs])
    return DataflowGraph(g.nodes, g.tensors, shapes, g.name)


# -- value ranges ---------------------------------------------------------------

@dataclass(frozen=True)
class ValueRange:
    lo: float
    hi: float
    integral: bool
    bipolar: bool = False


def weight_values(t: Tensor) -> np.ndarray:
    """Integer array when the tensor carries no scale, float array otherwise."""
    if isinstance(t, PackedBitTensor):
        return t.to_int()
    if isinstance(t, QTensor) and not t.per_channel and t.scale == 1.0:
        return t.to_int()
    return t.to_float()


def _weight_sums(t: Tensor) -> tuple:
    """Per-row sums of positive and of negative weights, cached on the immutable tensor."""
    cached = t.__dict__.get("_row_sums")
    if cached is None:
        w = weight_values(t)
        w2d = w.reshape(w.shape[0], -1)
        cached = (np.where(w2d > 0, w2d, 0).sum(axis=1), np.where(w2d < 0, w2d, 0).sum(axis=1),
                  _is_integer_array(w))
        object.__setattr__(t, "_row_sums", cached)
    return cached


def _linear_range(t: Tensor, r: ValueRange, bias=None) -> tuple:
    wp, wn, _ = _weight_sums(t)
    hi = wp * r.hi + wn * r.lo
    lo = wp * r.lo + wn * r.hi
    if bias is not None:
        hi, lo = hi + bias, lo + bias
    return float(lo.min()), float(hi.max())


def value_ranges(g: DataflowGraph) -> dict:
    """Interval bounds of every node output, plus integrality and bipolarity."""
    out = {}
    for n in g.topo_order():
        a = n.attrs
        r = out[n.inputs[0]] if n.inputs else None
        k = n.kind
        if k == "Input":
            bits, s = a["bits"], a["scale"]
            lo, hi = (-(2 ** (bits - 1)), 2 ** (bits - 1) - 1) if a["signed"] else (0, 2 ** bits - 1)
            out[n.id] = ValueRange(lo * s, hi * s, s == 1.0)
        elif k in ("Conv", "DepthwiseConv", "FC"):
            t = g.tensor(n, "weight")
            bias = g.tensor(n, "bias").to_float() if "bias" in n.weights else None
            lo, hi = _linear_range(t, r, bias)
            out[n.id] = ValueRange(lo, hi, r.integral and _weight_sums(t)[2] and bias is None)
        elif k in ("MaxPool", "Flatten"):
            out[n.id] = r
        elif k == "AvgPool":
            x = g.shapes[n.inputs[0]]
            hw = x[2] * x[3]
            if a["mode"] == "sum":
                out[n.id] = ValueRange(r.lo * hw, r.hi * hw, r.integral)
            else:
                out[n.id] = ValueRange(r.lo, r.hi, r.integral and hw == 1)
        elif k == "MultiThreshold":
            kk = g.tensor(n, "thresholds").shape[1]
            os_, oo = a["out_scale"], a["out_offset"]
            ends = (oo, oo + os_ * kk)
            out[n.id] = ValueRange(min(ends), max(ends), float(os_).is_integer() and float(oo).is_integer(),
                                   kk == 1 and os_ == 2 and oo == -1)
        elif k == "QuantActivation":
            lo, hi = _level_range(a["bits"], a["mode"])
            s = a["scale"]
            out[n.id] = ValueRange(lo * s, hi * s, s == 1.0, a["mode"] == "bipolar" and s == 1.0)
        elif k == "Sign":
            out[n.id] = ValueRange(-1, 1, True, True)
        elif k in ("Scale", "Add", "BatchNorm", "Output"):
            out[n.id] = _affine_range(g, n, r)
        else:
            out[n.id] = r
    return out


def _level_range(bits, mode):
    from .kernels import level_range
    return level_range(bits, mode)


def _is_integer_array(w: np.ndarray) -> bool:
    return np.issubdtype(w.dtype, np.integer)


def _affine_range(g, n, r):
    from .kernels import bn_affine
    if n.kind == "BatchNorm":
        p = [g.tensor(n, k).to_float() for k in ("gamma", "beta", "mean", "var")]
        s, b = bn_affine(*p, n.attrs["eps"])
    else:
        s = g.tensor(n, "scale").to_float() if "scale" in n.weights else np.ones(1)
        b = g.tensor(n, "bias").to_float() if "bias" in n.weights else np.zeros(1)
        if n.kind == "Output" and not n.weights:
            return r
    c1, c2 = r.lo * s + b, r.hi * s + b
    return ValueRange(float(np.minimum(c1, c2).min()), float(np.maximum(c1, c2).max()), False)


# -- validation ------------------------------------------------------------------

def validate(g: DataflowGraph) -> list:
    """All invariant violations of ``g``; empty iff the graph is well formed."""
    v = []
    ids = [n.id for n in g.nodes]
    for nid in {i for i in ids if ids.count(i) > 1}:
        v.append(Violation("DuplicateId", nid))
    known = set(ids)
    for n in g.nodes:
        if n.kind not in KINDS:
            v.append(Violation("UnknownKind", n.id, n.kind))
            continue
        for attr in REQUIRED_ATTRS.get(n.kind, ()):
            if attr not in n.attrs:
                v.append(Violation("MissingAttribute", n.id, attr))
        for role in REQUIRED_WEIGHTS.get(n.kind, ()):
            if role not in n.weights:
                v.append(Violation("MissingWeight", n.id, role))
        for role, name in n.weights.items():
            if name not in g.tensors:
                v.append(Violation("UnresolvedTensor", n.id, name))
        for i in n.inputs:
            if i not in known:
                v.append(Violation("DanglingInput", n.id, i))
        expected_inputs = 0 if n.kind == "Input" else 1
        if len(n.inputs) != expected_inputs:
            v.append(Violation("InputArity", n.id, f"{len(n.inputs)} inputs"))
        if n.kind == "MultiThreshold" and n.weights.get("thresholds") in g.tensors:
            t = g.tensors[n.weights["thresholds"]].to_float()
            if t.ndim != 2 or (t.shape[1] > 1 and np.any(np.diff(t, axis=1) < 0)):
                v.append(Violation("ThresholdsNotIncreasing", n.id))
    if g.nodes:
        if len(g.by_kind("Input")) != 1:
            v.append(Violation("InputCount", None, f"{len(g.by_kind('Input'))} Input nodes"))
        if len(g.by_kind("Output")) != 1:
            v.append(Violation("OutputCount", None, f"{len(g.by_kind('Output'))} Output nodes"))
    if _topo(g.nodes) is None:
        v.append(Violation("CycleDetected"))
        return v
    if v:
        return v
    try:
        fresh = infer_shapes(g)
    except ShapeMismatch as e:
        return v + [Violation("ShapeMismatch", None, str(e))]
    for src, dst in g.edges:
        if g.shapes.get(src) != fresh.shapes[src]:
            v.append(Violation("ShapeMismatch", src,
                               f"edge {src}->{dst} annotated {g.shapes.get(src)}, computed {fresh.shapes[src]}"))
    if g.nodes and not v:
        ranges = value_ranges(fresh)
        for n in g.nodes:
            if n.kind in ("Conv", "DepthwiseConv", "FC") and ranges[n.id].integral:
                worst = max(abs(ranges[n.id].lo), abs(ranges[n.id].hi))
                if worst >= ACC_LIMIT:
                    v.append(Violation("AccumulatorOverflow", n.id, f"|acc| up to {worst:.0f}"))
    return v


def float_nodes(g: DataflowGraph) -> list:
    """Nodes that compute outside the integer domain."""
    bad = [n for n in g.nodes if n.kind in FLOAT_KINDS]
    for n in g.by_kind("Conv", "DepthwiseConv", "FC"):
        if not _is_integer_array(weight_values(g.tensor(n, "weight"))) or "bias" in n.weights:
            bad.append(n)
    for n in g.by_kind("AvgPool"):
        if n.attrs["mode"] != "sum":
            bad.append(n)
    for n in g.by_kind("Input"):
        if n.attrs["scale"] != 1.0:
            bad.append(n)
    return bad


# -- serialization ----------------------------------------------------------------

def to_json(g: DataflowGraph, bundle: Optional[str] = None) -> dict:
    doc = {
        "schema": SCHEMA,
        "name": g.name,
        "nodes": [n.to_json() for n in g.nodes],
        "edges": [{"src": s, "dst": d, "shape": list(g.shapes[s]) if s in g.shapes else None}
                  for s, d in g.edges],
    }
    outs = [n.id for n in g.nodes if n.kind == "Output"]
    ins = [n for n in g.nodes if n.kind == "Input"]
    if ins:
        doc["input"] = {"shape": ins[0].attrs.get("shape"), "bits": ins[0].attrs.get("bits")}
    if outs and outs[0] in g.shapes:
        doc["output"] = {"shape": list(g.shapes[outs[0]])}
    if bundle is not None:
        doc["bundle"] = bundle
    return doc


def serialize(g: DataflowGraph, bundle: Optional[str] = None) -> bytes:
    return json.dumps(to_json(g, bundle), indent=1, sort_keys=True).encode()


def deserialize(data: bytes, tensors: Optional[dict] = None) -> DataflowGraph:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise MalformedStream(e.start, "invalid utf-8") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise MalformedStream(len(text[:e.pos].encode()), e.msg) from None
    return from_json(doc, tensors, len(data))


def from_json(doc: dict, tensors: Optional[dict] = None, size: int = 0) -> DataflowGraph:
    try:
        if doc.get("schema") != SCHEMA:
            raise MalformedStream(size, f"unsupported schema {doc.get('schema')!r}")
        nodes = tuple(Node(d["id"], d["kind"], tuple(d["inputs"]), d["attrs"], d["weights"])
                      for d in doc["nodes"])
        shapes = {e["src"]: tuple(e["shape"]) for e in doc["edges"] if e["shape"] is not None}
    except (KeyError, TypeError, AttributeError) as e:
        raise MalformedStream(size, f"missing or mistyped field: {e}") from None
    for n in nodes:
        if n.kind == "Output" or n.id in shapes or not any(n.id in m.inputs for m in nodes):
            continue
        raise MalformedStream(size, f"edge from {n.id} lacks a shape annotation")
    tensors = dict(tensors or {})
    used = {name for n in nodes for name in n.weights.values()}
    out_shape = (doc.get("output") or {}).get("shape")
    if out_shape is not None:
        outs = [n.id for n in nodes if n.kind == "Output"]
        if outs:
            shapes[outs[0]] = tuple(out_shape)
    g = DataflowGraph(nodes, {k: v for k, v in tensors.items() if k in used}, shapes, doc.get("name", ""))
    return g


def census(g: DataflowGraph, kinds: Iterable[str]) -> int:
    return sum(1 for n in g.nodes if n.kind in kinds)
