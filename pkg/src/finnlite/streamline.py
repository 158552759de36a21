"""Streamlining: rewrite a float-annotated graph into integer and threshold nodes only.

Passes run in a fixed order and the sequence is repeated until nothing changes:

1. ``extract_scales`` -- quantizer scales on inputs, weights, biases and mean
   pooling become explicit Scale/Add nodes, leaving integer operands behind.
2. ``collapse_affine`` -- chains of Scale/Add/BatchNorm fold into one Scale+Add.
3. ``move_scale_past_maxpool`` -- positive scales commute with max.
4. ``move_scale_past_linear`` -- scalar scales commute with conv/dense/pool/flatten.
5. ``absorb_into_threshold`` -- affine + quantizer becomes one MultiThreshold.
6. ``absorb_output_affine`` -- the trailing affine is kept as the Output dequantizer.

Every rewrite evaluates exactly the same float operations as the graph it
replaces, or an integer equivalent of them, so outputs are bit-identical.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import kernels as K
from .graph import DataflowGraph, Node, float_nodes, value_ranges, weight_values
from .qtensor import FTensor, QTensor

AFFINE_KINDS = ("Scale", "Add", "BatchNorm")
QUANT_KINDS = ("QuantActivation", "Sign")


class FixpointNotReached(RuntimeError):
    def __init__(self, limit):
        super().__init__(f"streamlining did not converge within {limit} iterations")
        self.limit = limit


class NonMonotoneAffine(ValueError):
    pass


@dataclass(frozen=True)
class Pass:
    name: str
    rewrite: Callable  # DataflowGraph -> (DataflowGraph, list of applied node-id lists, list of skips)

    def applicable(self, g: DataflowGraph) -> bool:
        return bool(self.rewrite(g)[1])

    def __call__(self, g: DataflowGraph) -> DataflowGraph:
        return self.rewrite(g)[0]


# -- node-list surgery -----------------------------------------------------------

def _rewire(nodes: list, old: str, new: str, skip: str) -> list:
    return [n if n.id == skip or old not in n.inputs
            else n.with_(inputs=tuple(new if i == old else i for i in n.inputs)) for n in nodes]


def _insert_after(nodes: list, target: str, new: Node) -> list:
    nodes = _rewire(nodes, target, new.id, skip=new.id)
    idx = next(i for i, n in enumerate(nodes) if n.id == target)
    return nodes[:idx + 1] + [new.with_(inputs=(target,))] + nodes[idx + 1:]


def _remove(nodes: list, node_id: str) -> list:
    node = next(n for n in nodes if n.id == node_id)
    rest = [n for n in nodes if n.id != node_id]
    return _rewire(rest, node_id, node.inputs[0], skip="")


def _swap(nodes: list, first: str, second: str) -> list:
    """``first -> second`` becomes ``second -> first``."""
    a = next(n for n in nodes if n.id == first)
    b = next(n for n in nodes if n.id == second)
    nodes = _rewire(nodes, second, first, skip=first)
    out = []
    for n in nodes:
        if n.id == first:
            out.append(b.with_(inputs=a.inputs))
            out.append(a.with_(inputs=(second,)))
        elif n.id != second:
            out.append(n)
    return out


def _sole_consumer(g: DataflowGraph, node_id: str) -> Optional[Node]:
    users = g.consumers(node_id)
    return users[0] if len(users) == 1 else None


def _const(g: DataflowGraph, n: Node, role: str) -> np.ndarray:
    return g.tensor(n, role).to_float()


def _new_id(taken: set, base: str) -> str:
    i = 0
    while f"{base}{i}" in taken:
        i += 1
    taken.add(f"{base}{i}")
    return f"{base}{i}"


def _fixed(rewrite_one):
    """Apply a single-match rewrite repeatedly until it no longer matches."""
    def run(g: DataflowGraph):
        applied, skipped = [], []
        seen_skips = set()
        while True:
            res = rewrite_one(g, seen_skips)
            if res is None:
                return g, applied, skipped
            g, ids, skip = res
            if ids:
                applied.append(ids)
            if skip:
                skipped.append(skip)
    return run


# -- extract_scales --------------------------------------------------------------

def _extract_one(g: DataflowGraph, _skips) -> Optional[tuple]:
    taken = set(g.ids)
    tensors = dict(g.tensors)
    nodes = list(g.nodes)
    for n in g.topo_order():
        if n.kind == "Input" and n.attrs["scale"] != 1.0:
            sid = _new_id(taken, "scale")
            tensors[f"{sid}/scale"] = FTensor.of(n.attrs["scale"])
            nodes = [m.with_(attrs={**m.attrs, "scale": 1.0}) if m.id == n.id else m for m in nodes]
            nodes = _insert_after(nodes, n.id, Node(sid, "Scale", (), {}, {"scale": f"{sid}/scale"}))
            return g.evolve(nodes, tensors), [n.id, sid], None
        if n.kind in ("Conv", "DepthwiseConv", "FC"):
            t = g.tensor(n, "weight")
            if isinstance(t, QTensor) and (t.per_channel or t.scale != 1.0):
                sid = _new_id(taken, "scale")
                wname = n.weights["weight"]
                tensors[wname] = QTensor(t.shape, t.data, t.bits, 1.0)
                tensors[f"{sid}/scale"] = FTensor.of(np.asarray(t.scale, dtype=np.float64))
                nodes = _insert_after(nodes, n.id, Node(sid, "Scale", (), {}, {"scale": f"{sid}/scale"}))
                return g.evolve(nodes, tensors), [n.id, sid], None
            if isinstance(t, FTensor):
                continue
            if "bias" in n.weights:
                aid = _new_id(taken, "add")
                tensors[f"{aid}/bias"] = g.tensor(n, "bias")
                # bias is added after every Scale that already follows this node
                tail = n.id
                nxt = _sole_consumer(g, tail)
                while nxt is not None and nxt.kind == "Scale":
                    tail = nxt.id
                    nxt = _sole_consumer(g, tail)
                nodes = [m.with_(weights={k: v for k, v in m.weights.items() if k != "bias"})
                         if m.id == n.id else m for m in nodes]
                nodes = _insert_after(nodes, tail, Node(aid, "Add", (), {}, {"bias": f"{aid}/bias"}))
                return g.evolve(nodes, tensors), [n.id, aid], None
        if n.kind == "AvgPool" and n.attrs["mode"] == "mean":
            x = g.shapes[n.inputs[0]]
            sid = _new_id(taken, "scale")
            tensors[f"{sid}/scale"] = FTensor.of(1.0 / (x[2] * x[3]))
            nodes = [m.with_(attrs={**m.attrs, "mode": "sum"}) if m.id == n.id else m for m in nodes]
            nodes = _insert_after(nodes, n.id, Node(sid, "Scale", (), {}, {"scale": f"{sid}/scale"}))
            return g.evolve(nodes, tensors), [n.id, sid], None
    return None


extract_scales = _fixed(_extract_one)


# -- collapse_affine ---------------------------------------------------------------

def _affine_chains(g: DataflowGraph) -> list:
    chains, seen = [], set()
    for n in g.topo_order():
        if n.kind not in AFFINE_KINDS or n.id in seen:
            continue
        chain = [n]
        while True:
            nxt = _sole_consumer(g, chain[-1].id)
            if nxt is None or nxt.kind not in AFFINE_KINDS:
                break
            chain.append(nxt)
        seen.update(m.id for m in chain)
        chains.append(chain)
    return chains


def _is_canonical(chain: list) -> bool:
    kinds = [n.kind for n in chain]
    return kinds in (["Scale"], ["Add"], ["Scale", "Add"])


def compose_affine(g: DataflowGraph, chain: list) -> tuple:
    """(scale, shift) of a chain of Scale/Add/BatchNorm nodes, applied in order."""
    s, b = np.float64(1.0), np.float64(0.0)
    for n in chain:
        if n.kind == "Scale":
            c = _const(g, n, "scale")
            s, b = s * c, b * c
        elif n.kind == "Add":
            b = b + _const(g, n, "bias")
        else:
            p = [_const(g, n, r) for r in ("gamma", "beta", "mean", "var")]
            cs, cb = K.bn_affine(*p, n.attrs["eps"])
            s, b = s * cs, b * cs + cb
    return np.asarray(s, dtype=np.float64), np.asarray(b, dtype=np.float64)


def _collapse_one(g: DataflowGraph, _skips) -> Optional[tuple]:
    for chain in _affine_chains(g):
        if _is_canonical(chain):
            continue
        s, b = compose_affine(g, chain)
        taken = set(g.ids)
        tensors = dict(g.tensors)
        nodes = list(g.nodes)
        head = chain[0]
        for n in chain[1:]:
            nodes = _remove(nodes, n.id)
        new = []
        if np.any(s != 1.0):
            sid = _new_id(taken, "scale")
            tensors[f"{sid}/scale"] = FTensor.of(s)
            new.append(Node(sid, "Scale", (), {}, {"scale": f"{sid}/scale"}))
        if np.any(b != 0.0):
            aid = _new_id(taken, "add")
            tensors[f"{aid}/bias"] = FTensor.of(b)
            new.append(Node(aid, "Add", (), {}, {"bias": f"{aid}/bias"}))
        anchor = head.id
        for m in new:
            nodes = _insert_after(nodes, anchor, m)
            anchor = m.id
        nodes = _remove(nodes, head.id)
        return g.evolve(nodes, tensors), [n.id for n in chain] + [m.id for m in new], None
    return None


collapse_affine = _fixed(_collapse_one)


# -- scale motion ------------------------------------------------------------------

def _move_maxpool_one(g: DataflowGraph, _skips) -> Optional[tuple]:
    for n in g.topo_order():
        if n.kind != "Scale":
            continue
        nxt = _sole_consumer(g, n.id)
        if nxt is None or nxt.kind != "MaxPool":
            continue
        if np.all(_const(g, n, "scale") > 0):
            return g.evolve(_swap(list(g.nodes), n.id, nxt.id)), [n.id, nxt.id], None
    return None


move_scale_past_maxpool = _fixed(_move_maxpool_one)


def _move_linear_one(g: DataflowGraph, _skips) -> Optional[tuple]:
    for n in g.topo_order():
        if n.kind != "Scale":
            continue
        nxt = _sole_consumer(g, n.id)
        if nxt is None:
            continue
        s = _const(g, n, "scale")
        scalar = s.size == 1
        if nxt.kind in ("Conv", "FC") and scalar and "bias" not in nxt.weights:
            pass
        elif nxt.kind in ("DepthwiseConv", "AvgPool") and "bias" not in nxt.weights:
            pass
        elif nxt.kind == "Flatten":
            if not scalar:
                shape = g.shapes[nxt.inputs[0]]
                spatial = int(np.prod(shape[2:]))
                tensors = {**g.tensors, n.weights["scale"]: FTensor.of(np.repeat(s.ravel(), spatial))}
                return (g.evolve(_swap(list(g.nodes), n.id, nxt.id), tensors), [n.id, nxt.id], None)
        else:
            continue
        return g.evolve(_swap(list(g.nodes), n.id, nxt.id)), [n.id, nxt.id], None
    return None


move_scale_past_linear = _fixed(_move_linear_one)


# -- threshold absorption ------------------------------------------------------------

def _levels(q: Node) -> tuple:
    """(bits, mode, scale) of a quantizer node."""
    if q.kind == "Sign":
        return 1, "bipolar", 1.0
    return q.attrs["bits"], q.attrs["mode"], q.attrs["scale"]


def _quant_of(x: np.ndarray, s, b, bits, mode, qscale) -> np.ndarray:
    """The float graph's quantizer level for integer inputs ``x`` of shape (C, K)."""
    y = x.astype(np.float64)
    if s is not None:
        y = y * s
    if b is not None:
        y = y + b
    return K.quant_levels(y, bits, mode, qscale)


def compute_thresholds(s, b, bits: int, mode: str, qscale: float, channels: int,
                       lo: int, hi: int) -> tuple:
    """Integer thresholds T with ``level(x) = L + #{k: x >= T[c, k]}`` for integer x in [lo, hi].

    Boundaries are solved in exact rational arithmetic and then checked against the
    float evaluation of the replaced nodes, so the counts agree bit for bit even
    where the exact solution and the float rounding disagree.
    """
    lmin, lmax = K.level_range(bits, mode)
    nthr = 1 if mode == "bipolar" else lmax - lmin
    sv = np.broadcast_to(np.asarray(1.0 if s is None else s, dtype=np.float64).ravel(), (channels,)) \
        if (s is None or np.size(s) == 1) else np.asarray(s, dtype=np.float64).ravel()
    bv = np.broadcast_to(np.asarray(0.0 if b is None else b, dtype=np.float64).ravel(), (channels,)) \
        if (b is None or np.size(b) == 1) else np.asarray(b, dtype=np.float64).ravel()
    if np.any(sv <= 0):
        raise NonMonotoneAffine(f"channels {np.flatnonzero(sv <= 0).tolist()} have scale <= 0")
    targets = np.arange(1, nthr + 1) + (lmin if mode != "bipolar" else 0)
    if mode == "bipolar":
        targets = np.array([1])
    t = np.empty((channels, nthr), dtype=np.int64)
    # exact ceil(((level - 1/2) * qscale - b) / s) on integer numerators/denominators
    qn, qd = float(qscale).as_integer_ratio()
    edges = [(0, 1)] if mode == "bipolar" else [((2 * int(l) - 1) * qn, 2 * qd) for l in targets]
    for c in range(channels):
        sn, sd = float(sv[c]).as_integer_ratio()
        bn, bd = float(bv[c]).as_integer_ratio()
        for j, (en, ed) in enumerate(edges):
            num = (en * bd - bn * ed) * sd
            den = ed * bd * sn
            v = -((-num) // den)
            t[c, j] = min(max(v, lo), hi + 1)
    # nudge to the float semantics; f is monotone so this converges
    sc = sv[:, None]
    bc = bv[:, None]
    tgt = np.broadcast_to(targets[None, :], t.shape)

    def f(x):
        return _quant_of(x, sc, bc, bits, mode, qscale)

    for _ in range(64):
        down = (t > lo) & (f(t - 1) >= tgt)
        up = (t <= hi) & (f(t) < tgt)
        if not (down.any() or up.any()):
            break
        t = t - down + up
    else:
        raise RuntimeError("threshold correction did not settle")
    t = np.maximum.accumulate(t, axis=1)
    if mode == "bipolar":
        return t, 2, -1
    return t, 1, lmin


def _int_tensor(t: np.ndarray) -> QTensor:
    m = int(np.abs(t).max(initial=0))
    bits = next(b for b in (8, 16, 32) if m < 2 ** (b - 1))
    return QTensor(t.shape, t, bits, 1.0)


def _absorb_one(g: DataflowGraph, skips: set) -> Optional[tuple]:
    ranges = None
    for q in g.topo_order():
        if q.kind not in QUANT_KINDS or q.id in skips:
            continue
        chain = []
        p = g.producer(q)
        while p is not None and p.kind in ("Scale", "Add") and len(chain) < 2 \
                and _sole_consumer(g, p.id) is not None:
            chain.insert(0, p)
            p = g.producer(p)
        if [c.kind for c in chain] not in ([], ["Scale"], ["Add"], ["Scale", "Add"]):
            continue
        ranges = ranges or value_ranges(g)
        src = ranges[p.id]
        if not src.integral:
            continue
        s = _const(g, chain[0], "scale") if chain and chain[0].kind == "Scale" else None
        b = _const(g, chain[-1], "bias") if chain and chain[-1].kind == "Add" else None
        bits, mode, qscale = _levels(q)
        channels = g.shapes[q.id][1]
        try:
            t, out_scale, out_offset = compute_thresholds(
                s, b, bits, mode, qscale, channels, int(math.floor(src.lo)), int(math.ceil(src.hi)))
        except NonMonotoneAffine as e:
            skips.add(q.id)
            return g, None, {"node_ids": [q.id], "reason": f"NonMonotoneAffine: {e}"}
        taken = set(g.ids)
        mid = _new_id(taken, "multithreshold")
        tensors = dict(g.tensors)
        tensors[f"{mid}/thresholds"] = _int_tensor(t)
        nodes = list(g.nodes)
        mt = Node(mid, "MultiThreshold", (), {"out_scale": out_scale, "out_offset": out_offset},
                  {"thresholds": f"{mid}/thresholds"})
        nodes = _insert_after(nodes, q.id, mt)
        anchor = mid
        ids = [c.id for c in chain] + [q.id, mid]
        if mode != "bipolar" and qscale != 1.0:
            sid = _new_id(taken, "scale")
            tensors[f"{sid}/scale"] = FTensor.of(qscale)
            nodes = _insert_after(nodes, anchor, Node(sid, "Scale", (), {}, {"scale": f"{sid}/scale"}))
            ids.append(sid)
        for c in chain + [q]:
            nodes = _remove(nodes, c.id)
        return g.evolve(nodes, tensors), ids, None
    return None


absorb_into_threshold = _fixed(_absorb_one)


def _absorb_output_one(g: DataflowGraph, _skips) -> Optional[tuple]:
    outs = g.by_kind("Output")
    if not outs:
        return None
    out = outs[0]
    if out.weights:
        p = g.producer(out)
        if p.kind != "Scale" or _sole_consumer(g, p.id) is None:
            return None
        # a scale arriving after the dequantizer formed folds into it
        tensors = dict(g.tensors)
        old = _const(g, out, "scale") if "scale" in out.weights else np.float64(1.0)
        tensors[f"{out.id}/scale"] = FTensor.of(_const(g, p, "scale") * old)
        nodes = [n.with_(weights={**n.weights, "scale": f"{out.id}/scale"}) if n.id == out.id else n
                 for n in g.nodes]
        return g.evolve(_remove(nodes, p.id), tensors), [p.id, out.id], None
    chain = []
    p = g.producer(out)
    while p is not None and p.kind in ("Scale", "Add") and len(chain) < 2 \
            and _sole_consumer(g, p.id) is not None:
        chain.insert(0, p)
        p = g.producer(p)
    if not chain or [c.kind for c in chain] not in (["Scale"], ["Add"], ["Scale", "Add"]):
        return None
    weights = {}
    tensors = dict(g.tensors)
    for c in chain:
        role = "scale" if c.kind == "Scale" else "bias"
        name = f"{out.id}/{role}"
        tensors[name] = g.tensor(c, role)
        weights[role] = name
    nodes = [n.with_(weights=weights) if n.id == out.id else n for n in g.nodes]
    for c in chain:
        nodes = _remove(nodes, c.id)
    return g.evolve(nodes, tensors), [c.id for c in chain] + [out.id], None


absorb_output_affine = _fixed(_absorb_output_one)


PASSES = (
    Pass("extract_scales", extract_scales),
    Pass("collapse_affine", collapse_affine),
    Pass("move_scale_past_maxpool", move_scale_past_maxpool),
    Pass("move_scale_past_linear", move_scale_past_linear),
    Pass("absorb_into_threshold", absorb_into_threshold),
    Pass("absorb_output_affine", absorb_output_affine),
)


def streamline_all(g: DataflowGraph, max_iterations: int = 100, passes=PASSES) -> tuple:
    """Run the pass set to a fixpoint. Returns ``(graph, log)``.

    The log holds one ``{"pass", "node_ids", "iteration"}`` entry per rewrite, one
    ``{"pass", "node_ids", "reason"}`` entry per skipped pattern, and a final
    ``unresolved`` entry listing float-domain nodes that no pass could remove.
    """
    if not g.nodes:
        return g, []
    log = []
    for it in range(max_iterations):
        changed = False
        for p in passes:
            g, applied, skipped = p.rewrite(g)
            for ids in applied:
                log.append({"pass": p.name, "node_ids": ids, "iteration": it})
            for s in skipped:
                if not any(e.get("reason") == s["reason"] for e in log if e["pass"] == p.name):
                    log.append({"pass": p.name, "iteration": it, **s})
            changed = changed or bool(applied)
        if not changed:
            left = float_nodes(g)
            if left:
                log.append({"pass": "unresolved", "node_ids": [n.id for n in left],
                            "reason": "pattern outside the streamlining grammar"})
            return g, log
    raise FixpointNotReached(max_iterations)


def is_streamlined(g: DataflowGraph) -> bool:
    return not float_nodes(g)
