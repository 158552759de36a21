"""Per-layer PE/SIMD folding under the divisibility constraints, and a cycle-count throughput model.

For every matrix-lowered layer, ``rows`` (H) is the output-feature count and
``cols`` (W) the kernel-expanded input-feature count. A folding is legal when
PE divides H and SIMD divides W. The layer then needs
``(H / PE) * (W / SIMD) * output_positions`` cycles per frame, and the
pipeline runs at the pace of its slowest layer.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .graph import DataflowGraph, Violation

FOLDABLE = ("Conv", "DepthwiseConv", "FC")


class InvalidFolding(ValueError):
    pass


@dataclass(frozen=True)
class LayerDims:
    id: str
    rows: int     # H: output features
    cols: int     # W: input features per output, kernel-expanded
    spatial: int  # output positions per frame


@dataclass(frozen=True)
class LayerFold:
    pe: int = 1
    simd: int = 1


@dataclass
class FoldingConfig:
    layers: dict = field(default_factory=dict)  # layer id -> LayerFold
    clock_hz: float = 100e6

    def get(self, layer_id: str) -> LayerFold:
        return self.layers.get(layer_id, LayerFold())

    @property
    def lanes(self) -> int:
        return sum(f.pe * f.simd for f in self.layers.values())

    def to_json(self) -> dict:
        return {"schema": 1, "clock_hz": self.clock_hz,
                "layers": {k: {"pe": v.pe, "simd": v.simd} for k, v in sorted(self.layers.items())}}

    @classmethod
    def from_json(cls, doc: dict) -> "FoldingConfig":
        return cls({k: LayerFold(v["pe"], v["simd"]) for k, v in doc["layers"].items()},
                   doc.get("clock_hz", 100e6))


@dataclass
class ThroughputEstimate:
    cycles: dict
    bottleneck: str
    fps_estimate: float
    clock_hz: float

    @property
    def bottleneck_cycles(self) -> int:
        return self.cycles[self.bottleneck]

    def to_json(self) -> dict:
        return {"schema": 1, "cycles": dict(sorted(self.cycles.items())), "bottleneck": self.bottleneck,
                "bottleneck_cycles": self.bottleneck_cycles, "fps_estimate": self.fps_estimate,
                "clock_hz": self.clock_hz}


def layer_dims(g: DataflowGraph) -> list:
    out = []
    for n in g.topo_order():
        if n.kind not in FOLDABLE:
            continue
        shape = g.shapes[n.id]
        if n.kind == "FC":
            out.append(LayerDims(n.id, shape[1], g.shapes[n.inputs[0]][1], 1))
            continue
        k = n.attrs["kernel"]
        spatial = shape[2] * shape[3]
        if n.kind == "Conv":
            cin = g.shapes[n.inputs[0]][1]
            out.append(LayerDims(n.id, shape[1], cin * k * k, spatial))
        else:
            out.append(LayerDims(n.id, shape[1], k * k, spatial))
    return out


def congruence_violations(layer_id, rows: int, cols: int, pe: int, simd: int) -> list:
    v = []
    if pe < 1 or simd < 1:
        v.append(Violation("NonPositiveFolding", layer_id, f"pe={pe}, simd={simd}"))
        return v
    if rows % pe:
        v.append(Violation("PENotDivisor", layer_id, f"H={rows} mod PE={pe} = {rows % pe}"))
    if cols % simd:
        v.append(Violation("SIMDNotDivisor", layer_id, f"W={cols} mod SIMD={simd} = {cols % simd}"))
    if pe > rows:
        v.append(Violation("PEExceedsH", layer_id, f"PE={pe} > H={rows}"))
    if simd > cols:
        v.append(Violation("SIMDExceedsW", layer_id, f"SIMD={simd} > W={cols}"))
    return v


def validate_folding(g: DataflowGraph, f: FoldingConfig) -> list:
    dims = {d.id: d for d in layer_dims(g)}
    v = []
    for lid in f.layers:
        if lid not in dims:
            v.append(Violation("UnknownLayer", lid))
    for d in dims.values():
        fold = f.get(d.id)
        v += congruence_violations(d.id, d.rows, d.cols, fold.pe, fold.simd)
    return v


def estimate_cycles(layer: LayerDims, pe: int, simd: int) -> int:
    bad = congruence_violations(layer.id, layer.rows, layer.cols, pe, simd)
    if bad:
        raise InvalidFolding("; ".join(x.detail for x in bad))
    return (layer.rows // pe) * (layer.cols // simd) * layer.spatial


def report_throughput(g: DataflowGraph, f: FoldingConfig, clock_hz: Optional[float] = None) -> ThroughputEstimate:
    clock = f.clock_hz if clock_hz is None else clock_hz
    cycles = {d.id: estimate_cycles(d, f.get(d.id).pe, f.get(d.id).simd) for d in layer_dims(g)}
    if not cycles:
        raise InvalidFolding("graph has no foldable layers")
    bottleneck = min(cycles, key=lambda k: (-cycles[k], k))
    return ThroughputEstimate(cycles, bottleneck, clock / cycles[bottleneck], clock)


def _divisors(n: int) -> list:
    return [d for d in range(1, n + 1) if n % d == 0]


def _next_divisor(n: int, current: int) -> Optional[int]:
    return next((d for d in _divisors(n) if d > current), None)


def auto_fold(g: DataflowGraph, budget: Optional[int] = None, clock_hz: float = 100e6) -> FoldingConfig:
    """Greedy folding: keep widening the bottleneck layer while lanes remain.

    The widening step for the bottleneck is whichever of its next PE or next
    SIMD divisor saves more cycles per extra lane (PE on ties). That choice does
    not depend on the budget, so a larger budget extends the same sequence of
    steps and the frame rate can only go up. ``budget=None`` folds every layer
    fully parallel.
    """
    dims = sorted(layer_dims(g), key=lambda d: d.id)
    if budget is None:
        return FoldingConfig({d.id: LayerFold(d.rows, d.cols) for d in dims}, clock_hz)
    if budget < len(dims):
        raise ValueError(f"budget {budget} is below the layer count {len(dims)}")
    fold = {d.id: LayerFold() for d in dims}
    cycles = {d.id: estimate_cycles(d, 1, 1) for d in dims}
    lanes = len(dims)
    by_id = {d.id: d for d in dims}
    while True:
        lid = min(cycles, key=lambda k: (-cycles[k], k))
        d, cur = by_id[lid], fold[lid]
        options = []
        npe = _next_divisor(d.rows, cur.pe)
        if npe is not None:
            options.append(LayerFold(npe, cur.simd))
        nsimd = _next_divisor(d.cols, cur.simd)
        if nsimd is not None:
            options.append(LayerFold(cur.pe, nsimd))
        if not options:
            break

        def gain(o):
            saved = cycles[lid] - estimate_cycles(d, o.pe, o.simd)
            return saved / (o.pe * o.simd - cur.pe * cur.simd)

        best = max(options, key=gain)  # first option (PE) wins ties
        extra = best.pe * best.simd - cur.pe * cur.simd
        if lanes + extra > budget:
            break
        fold[lid] = best
        lanes += extra
        cycles[lid] = estimate_cycles(d, best.pe, best.simd)
    return FoldingConfig(fold, clock_hz)
