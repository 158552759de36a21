"""Quantization-aware training of model-zoo graphs with straight-through gradients.

Every quantized weight tensor keeps a float latent copy. The forward pass
quantizes latents and activations, and the backward pass treats each quantizer
as the clipped identity: the gradient passes where the quantizer input lies in
[-1, 1] ([0, 1] for unsigned activations) and is zero elsewhere. With
``quantize=False`` the quantizers are replaced by exactly that clipped identity,
which gives a differentiable float network for gradient checking.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels as K
from .graph import DataflowGraph
from .qtensor import FTensor, PackedBitTensor, QTensor, pack_bipolar, round_half_up

log = logging.getLogger(__name__)

TRAINABLE = ("Input", "Conv", "DepthwiseConv", "FC", "BatchNorm", "QuantActivation",
             "MaxPool", "AvgPool", "Flatten", "Output")


class NumericalOverflow(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 50
    seed: int = 0
    bn_momentum: float = 0.1
    # multiplies the logit inside the loss only; None means 1/sqrt(fan-in of the last dense layer)
    logit_scale: Optional[float] = None
    dtype: str = "float32"
    min_gamma: float = 1e-3
    # stop once an epoch ends at or above this train accuracy
    target_accuracy: Optional[float] = None


@dataclass
class WeightSpec:
    bits: int
    scale: float

    def quantize(self, w: np.ndarray) -> np.ndarray:
        if self.bits == 1:
            return np.where(w >= 0, 1, -1).astype(w.dtype)
        lo, hi = -(2 ** (self.bits - 1)), 2 ** (self.bits - 1) - 1
        return (np.clip(round_half_up(w / self.scale), lo, hi) * self.scale).astype(w.dtype)

    def export(self, w: np.ndarray):
        if self.bits == 1:
            return pack_bipolar(np.where(w >= 0, 1, -1))
        lo, hi = -(2 ** (self.bits - 1)), 2 ** (self.bits - 1) - 1
        levels = np.clip(round_half_up(np.asarray(w, dtype=np.float64) / self.scale), lo, hi)
        return QTensor(w.shape, levels.astype(np.int64), self.bits, self.scale)


def _weight_spec(t) -> Optional[WeightSpec]:
    if isinstance(t, PackedBitTensor):
        return WeightSpec(1, 1.0)
    if isinstance(t, QTensor):
        if t.per_channel:
            raise ValueError("per-channel weight scales are not trainable here")
        return WeightSpec(t.bits, float(t.scale))
    return None


def ste_mask(x: np.ndarray, unsigned: bool = False) -> np.ndarray:
    return (x >= 0) & (x <= 1) if unsigned else np.abs(x) <= 1


# -- layer math shared by the training forward and backward ----------------------

def _cols(x: np.ndarray, k: int, stride: int, pad: int):
    """(N, C, H, W) -> (C*k*k, N*OH*OW) patch matrix and the output size."""
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * oh * ow), (oh, ow)


def _col2im(dcols: np.ndarray, xshape, k: int, stride: int, pad: int, oh: int, ow: int) -> np.ndarray:
    n, c, h, w = xshape
    d = dcols.reshape(c, k, k, n, oh, ow)
    dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += d[:, i, j].transpose(1, 0, 2, 3)
    return dx[:, :, pad:pad + h, pad:pad + w] if pad else dx


class QATModel:
    """A trainable view of a linear-chain model graph."""

    def __init__(self, g: DataflowGraph, dtype="float32", quantize: bool = True,
                 seed: int = 0, init: str = "random"):
        self.graph = g
        self.dtype = np.dtype(dtype)
        self.quantize = quantize
        self.order = g.topo_order()
        for n in self.order:
            if n.kind not in TRAINABLE:
                raise ValueError(f"node {n.id}: kind {n.kind} is not trainable")
            if n.kind != "Input" and len(n.inputs) != 1:
                raise ValueError(f"node {n.id}: only single-input chains are trainable")
        rng = np.random.default_rng(seed)
        self.params, self.specs, self.buffers = {}, {}, {}
        for n in self.order:
            for role, name in n.weights.items():
                t = g.tensors[name]
                spec = _weight_spec(t)
                if n.kind == "BatchNorm" and role in ("mean", "var"):
                    self.buffers[name] = t.to_float().astype(np.float64)
                    continue
                if spec is not None and init == "random":
                    v = rng.uniform(-1, 1, size=t.shape)
                else:
                    v = t.to_float()
                self.params[name] = np.array(v, dtype=self.dtype)
                if spec is not None:
                    self.specs[name] = spec

    # -- helpers

    def weight(self, name: str) -> np.ndarray:
        w = self.params[name]
        spec = self.specs.get(name)
        if spec is None:
            return w
        return spec.quantize(w) if self.quantize else np.clip(w, -1, 1)

    def _act(self, x, a):
        unsigned = a["mode"] == "unsigned"
        if not self.quantize:
            return np.clip(x, 0 if unsigned else -1, 1)
        if a["mode"] == "bipolar":
            return np.where(x >= 0, 1, -1).astype(x.dtype)
        lo, hi = K.level_range(a["bits"], a["mode"])
        return (np.clip(round_half_up(x / a["scale"]), lo, hi) * a["scale"]).astype(x.dtype)

    @property
    def last_fan_in(self) -> int:
        fc = [n for n in self.order if n.kind == "FC"][-1]
        return int(self.graph.tensors[fc.weights["weight"]].shape[1])

    # -- training forward / backward

    def forward(self, x: np.ndarray, train: bool = True, bn_momentum: float = 0.1):
        """Training-mode forward; returns logits (N,) and the tape for ``backward``."""
        tape = []
        v = None
        for n in self.order:
            a = n.attrs
            if n.kind == "Input":
                v = np.asarray(x, dtype=self.dtype) * self.dtype.type(a["scale"])
                tape.append((n, None))
                continue
            if n.kind in ("Conv", "DepthwiseConv"):
                w = self.weight(n.weights["weight"])
                k, s, p = a["kernel"], a["stride"], a["pad"]
                if n.kind == "Conv":
                    cols, (oh, ow) = _cols(v, k, s, p)
                    y = w.reshape(w.shape[0], -1) @ cols
                    y = y.reshape(w.shape[0], v.shape[0], oh, ow).transpose(1, 0, 2, 3)
                    cache = (cols, v.shape, oh, ow)
                else:
                    xp = np.pad(v, ((0, 0), (0, 0), (p, p), (p, p))) if p else v
                    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
                    y = np.einsum("nchwij,cij->nchw", win, w[:, 0])
                    cache = (xp, win, v.shape)
                if "bias" in n.weights:
                    y = y + self.params[n.weights["bias"]].reshape(1, -1, 1, 1)
                tape.append((n, cache))
                v = np.ascontiguousarray(y)
            elif n.kind == "FC":
                w = self.weight(n.weights["weight"])
                y = v @ w.T
                if "bias" in n.weights:
                    y = y + self.params[n.weights["bias"]]
                tape.append((n, v))
                v = y
            elif n.kind == "BatchNorm":
                axes = (0, 2, 3) if v.ndim == 4 else (0,)
                shape = (1, -1, 1, 1) if v.ndim == 4 else (1, -1)
                gamma = self.params[n.weights["gamma"]]
                beta = self.params[n.weights["beta"]]
                if train:
                    mu = v.mean(axis=axes)
                    var = v.var(axis=axes)
                    m = bn_momentum
                    mname, vname = n.weights["mean"], n.weights["var"]
                    self.buffers[mname] = (1 - m) * self.buffers[mname] + m * mu.astype(np.float64)
                    self.buffers[vname] = (1 - m) * self.buffers[vname] + m * var.astype(np.float64)
                else:
                    mu = self.buffers[n.weights["mean"]].astype(self.dtype)
                    var = self.buffers[n.weights["var"]].astype(self.dtype)
                inv = 1 / np.sqrt(var + self.dtype.type(a["eps"]))
                xhat = (v - mu.reshape(shape)) * inv.reshape(shape)
                tape.append((n, (xhat, inv, axes, shape)))
                v = xhat * gamma.reshape(shape) + beta.reshape(shape)
            elif n.kind == "QuantActivation":
                tape.append((n, ste_mask(v, a["mode"] == "unsigned")))
                v = self._act(v, a)
            elif n.kind == "MaxPool":
                k, s = a["kernel"], a["stride"]
                if k != s or v.shape[2] % k or v.shape[3] % k:
                    raise ValueError(f"node {n.id}: training supports non-overlapping pools only")
                nb, c, h, w_ = v.shape
                r = v.reshape(nb, c, h // k, k, w_ // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(
                    nb, c, h // k, w_ // k, k * k)
                idx = r.argmax(axis=-1)
                tape.append((n, (idx, v.shape)))
                v = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]
            elif n.kind == "AvgPool":
                tape.append((n, v.shape))
                v = v.sum(axis=(2, 3), keepdims=True)
                if a["mode"] == "mean":
                    v = v / (v.dtype.type(tape[-1][1][2] * tape[-1][1][3]))
            elif n.kind == "Flatten":
                tape.append((n, v.shape))
                v = v.reshape(v.shape[0], -1)
            elif n.kind == "Output":
                tape.append((n, None))
        return v.reshape(v.shape[0], -1)[:, 0], tape

    def backward(self, dlogit: np.ndarray, tape: list) -> dict:
        grads = {}
        dv = dlogit.reshape(-1, 1).astype(self.dtype)
        for n, cache in reversed(tape):
            if n.kind in ("Input", "Output"):
                continue
            a = n.attrs
            if n.kind == "FC":
                x = cache
                wname = n.weights["weight"]
                if "bias" in n.weights:
                    grads[n.weights["bias"]] = dv.sum(axis=0)
                gw = dv.T @ x
                w = self.weight(wname)
                dv = dv @ w
                grads[wname] = self._weight_grad(wname, gw)
            elif n.kind == "Conv":
                cols, xshape, oh, ow = cache
                wname = n.weights["weight"]
                w = self.weight(wname)
                cout = w.shape[0]
                if "bias" in n.weights:
                    grads[n.weights["bias"]] = dv.sum(axis=(0, 2, 3))
                d2 = dv.transpose(1, 0, 2, 3).reshape(cout, -1)
                grads[wname] = self._weight_grad(wname, (d2 @ cols.T).reshape(w.shape))
                if n.inputs[0] == self.order[0].id:
                    dv = None
                    break
                dv = _col2im(w.reshape(cout, -1).T @ d2, xshape, a["kernel"], a["stride"], a["pad"], oh, ow)
            elif n.kind == "DepthwiseConv":
                xp, win, xshape = cache
                wname = n.weights["weight"]
                w = self.weight(wname)
                k, s, p = a["kernel"], a["stride"], a["pad"]
                if "bias" in n.weights:
                    grads[n.weights["bias"]] = dv.sum(axis=(0, 2, 3))
                gw = np.einsum("nchw,nchwij->cij", dv, win)[:, None]
                grads[wname] = self._weight_grad(wname, gw)
                oh, ow = dv.shape[2], dv.shape[3]
                dxp = np.zeros(xp.shape, dtype=dv.dtype)
                for i in range(k):
                    for j in range(k):
                        dxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += dv * w[:, 0, i, j].reshape(1, -1, 1, 1)
                h, wd = xshape[2], xshape[3]
                dv = dxp[:, :, p:p + h, p:p + wd] if p else dxp
            elif n.kind == "BatchNorm":
                xhat, inv, axes, shape = cache
                gamma = self.params[n.weights["gamma"]]
                grads[n.weights["gamma"]] = (dv * xhat).sum(axis=axes)
                grads[n.weights["beta"]] = dv.sum(axis=axes)
                dxhat = dv * gamma.reshape(shape)
                m = dv.size // dv.shape[1]
                dv = (inv.reshape(shape) / m) * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                                                 - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
            elif n.kind == "QuantActivation":
                dv = dv * cache
            elif n.kind == "MaxPool":
                idx, xshape = cache
                nb, c, h, w_ = xshape
                k = a["kernel"]
                r = np.zeros(idx.shape + (k * k,), dtype=dv.dtype)
                np.put_along_axis(r, idx[..., None], dv[..., None], axis=-1)
                dv = r.reshape(nb, c, h // k, w_ // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(xshape)
            elif n.kind == "AvgPool":
                xshape = cache
                d = dv / (xshape[2] * xshape[3]) if a["mode"] == "mean" else dv
                dv = np.broadcast_to(d, xshape).astype(dv.dtype)
            elif n.kind == "Flatten":
                dv = dv.reshape(cache)
        return grads

    def _weight_grad(self, name: str, g: np.ndarray) -> np.ndarray:
        if name in self.specs:
            # clipped-identity surrogate for the weight quantizer
            return g * (np.abs(self.params[name]) <= 1)
        return g

    # -- inference-mode forward and export

    def eval_logits(self, x: np.ndarray, batch: int = 250) -> np.ndarray:
        """Quantized forward with running statistics, computed in float64 by the inference kernels."""
        out = []
        for i in range(0, len(x), batch):
            out.append(self._eval_batch(x[i:i + batch]))
        return np.concatenate(out) if out else np.zeros(0)

    def _eval_batch(self, x: np.ndarray) -> np.ndarray:
        v = None
        for n in self.order:
            a = n.attrs
            if n.kind == "Input":
                v = np.asarray(x, dtype=np.float64) * a["scale"]
            elif n.kind == "Conv":
                v = K.conv2d(v, self._w64(n), a["stride"], a["pad"])
                if "bias" in n.weights:
                    v = K.add(v, self.params[n.weights["bias"]])
            elif n.kind == "DepthwiseConv":
                v = K.depthwise_conv2d(v, self._w64(n), a["stride"], a["pad"])
            elif n.kind == "FC":
                v = K.fully_connected(v, self._w64(n))
                if "bias" in n.weights:
                    v = K.add(v, self.params[n.weights["bias"]])
            elif n.kind == "BatchNorm":
                s, b = K.bn_affine(*(self._bn64(n, r) for r in ("gamma", "beta", "mean", "var")), a["eps"])
                v = K.add(K.scale(v, s), b)
            elif n.kind == "QuantActivation":
                v = K.quant_activation(v, a["bits"], a["mode"], a["scale"])
            elif n.kind == "MaxPool":
                v = K.maxpool2d(v, a["kernel"], a["stride"])
            elif n.kind == "AvgPool":
                v = K.avgpool_global(v, a["mode"])
            elif n.kind == "Flatten":
                v = v.reshape(v.shape[0], -1)
        return np.asarray(v, dtype=np.float64).reshape(len(x), -1)[:, 0]

    def _w64(self, n) -> np.ndarray:
        name = n.weights["weight"]
        return self.specs[name].export(self.params[name]).to_float()

    def _bn64(self, n, role) -> np.ndarray:
        name = n.weights[role]
        src = self.buffers if role in ("mean", "var") else self.params
        return np.asarray(src[name], dtype=np.float64)

    def export(self) -> DataflowGraph:
        """The graph with quantized weights and learned float parameters filled in."""
        tensors = dict(self.graph.tensors)
        for name, v in self.params.items():
            spec = self.specs.get(name)
            tensors[name] = spec.export(v) if spec else FTensor.of(np.asarray(v, dtype=np.float64))
        for name, v in self.buffers.items():
            tensors[name] = FTensor.of(np.asarray(v, dtype=np.float64))
        return DataflowGraph(self.graph.nodes, tensors, self.graph.shapes, self.graph.name)


# -- loss and optimisation -------------------------------------------------------

def bce_with_logits(z: np.ndarray, y: np.ndarray):
    """Mean binary cross-entropy and its gradient with respect to ``z``."""
    z64 = np.asarray(z, dtype=np.float64)
    with np.errstate(invalid="ignore", over="ignore"):
        loss = float(np.mean(np.logaddexp(0.0, z64) - y * z64))
    if not math.isfinite(loss):
        raise NumericalOverflow(f"non-finite loss {loss}")
    p = 0.5 * (1.0 + np.tanh(0.5 * z64))
    return loss, ((p - y) / len(z64)).astype(np.asarray(z).dtype)


def forward_backward(model: QATModel, x: np.ndarray, y: np.ndarray, logit_scale: float = 1.0,
                     bn_momentum: float = 0.1):
    """One training forward/backward pass; returns (loss, gradients by parameter name)."""
    logits, tape = model.forward(x, train=True, bn_momentum=bn_momentum)
    loss, dz = bce_with_logits(logits * logit_scale, np.asarray(y, dtype=np.float64))
    return loss, model.backward(dz * logit_scale, tape)


@dataclass
class TrainState:
    model: QATModel
    config: TrainConfig
    velocity: dict = field(default_factory=dict)
    epoch: int = 0
    history: list = field(default_factory=list)

    @property
    def logit_scale(self) -> float:
        c = self.config.logit_scale
        return 1.0 / math.sqrt(self.model.last_fan_in) if c is None else c

    def step(self, grads: dict) -> None:
        c = self.config
        for name, g in grads.items():
            v = self.velocity.get(name)
            v = g if v is None else c.momentum * v + g
            self.velocity[name] = v
            self.params[name] -= np.asarray(c.lr * v, dtype=self.model.dtype)
        for n in self.model.order:
            if n.kind == "BatchNorm":
                # positive gains keep the exported affine monotone for threshold absorption
                gname = n.weights["gamma"]
                np.maximum(self.params[gname], c.min_gamma, out=self.params[gname])

    @property
    def params(self) -> dict:
        return self.model.params


def accuracy(logits: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean((np.asarray(logits) >= 0) == (np.asarray(y) == 1)))


def _eval_loss(model: QATModel, x, y, logit_scale: float, batch: int = 250):
    """Loss and accuracy with running statistics, in the training dtype."""
    z = np.concatenate([model.forward(x[i:i + batch], train=False)[0] for i in range(0, len(x), batch)])
    loss, _ = bce_with_logits(z * logit_scale, np.asarray(y, dtype=np.float64))
    return loss, accuracy(z, y)


def train(g: DataflowGraph, train_data, val_data=None, config: TrainConfig = TrainConfig(),
          state: Optional[TrainState] = None):
    """Train ``g`` on ``(x, y)`` arrays; returns (exported graph, TrainState).

    ``x`` is NCHW uint8, ``y`` holds 0/1 grape labels. Shuffling, initial
    latents and batch order derive from ``config.seed`` only, so runs repeat
    bit for bit.
    """
    x, y = train_data
    if state is None:
        state = TrainState(QATModel(g, config.dtype, seed=config.seed), config)
    model = state.model
    rng = np.random.default_rng([config.seed, state.epoch])
    for _ in range(config.epochs):
        order = rng.permutation(len(x))
        losses = []
        for i in range(0, len(x), config.batch_size):
            b = order[i:i + config.batch_size]
            loss, grads = forward_backward(model, x[b], y[b], state.logit_scale, config.bn_momentum)
            losses.append(loss * len(b))
            if config.lr != 0:
                state.step(grads)
        state.epoch += 1
        rec = {"epoch": state.epoch, "train_loss_running": float(sum(losses) / len(x))}
        rec["train_loss"], rec["train_accuracy"] = _eval_loss(model, x, y, state.logit_scale)
        if val_data is not None and len(val_data[0]):
            rec["val_loss"], rec["val_accuracy"] = _eval_loss(model, *val_data, state.logit_scale)
        state.history.append(rec)
        log.info("epoch %d: %s", state.epoch, rec)
        if config.target_accuracy is not None and rec["train_accuracy"] >= config.target_accuracy:
            break
    return model.export(), state


def write_history(state: TrainState, path) -> None:
    doc = {"schema": 1, "config": asdict(state.config), "logit_scale": state.logit_scale,
           "history": state.history}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
