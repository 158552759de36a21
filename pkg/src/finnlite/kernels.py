"""Compute kernels for every node kind.

Two families live here. The fast path lowers convolutions with im2col onto a
GEMM: XNOR-popcount over packed words for bipolar operands, and an integer GEMM
for everything else (evaluated through float64 BLAS whenever the worst-case
accumulator is far below 2**53, so the result is exact). The ``*_direct``
variants accumulate shifted slices instead and share no code with the im2col
path; the executor's oracle mode uses them.

Layout is N,C,H,W for feature maps and N,F for vectors. Per-channel constants
broadcast along axis 1.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .qtensor import WORD_BITS, pack_rows, round_half_up

ACC_LIMIT = 2 ** 31
_EXACT_F64 = 2 ** 52


class ShapeMismatch(ValueError):
    def __init__(self, where, expected, found):
        super().__init__(f"{where}: expected shape {tuple(expected)}, found {tuple(found)}")
        self.where, self.expected, self.found = where, tuple(expected), tuple(found)


class LengthMismatch(ValueError):
    pass


class ThresholdsNotIncreasing(ValueError):
    pass


def conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _chan(v, ndim: int) -> np.ndarray:
    v = np.asarray(v)
    if v.ndim == 0:
        return v
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def _is_int(a) -> bool:
    return np.issubdtype(np.asarray(a).dtype, np.integer)


# -- bit-level primitives ---------------------------------------------------

def _tail_mask(n: int, nwords: int) -> np.ndarray:
    mask = np.full(nwords, np.uint64(0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
    tail = int(n) % WORD_BITS
    if tail:
        mask[-1] = np.uint64((1 << tail) - 1)
    return mask


def xnor_popcount_dot(a, b, n: int) -> int:
    """Dot product of two packed bipolar rows of logical length ``n``."""
    a = np.asarray(a, dtype=np.uint64).ravel()
    b = np.asarray(b, dtype=np.uint64).ravel()
    if a.shape != b.shape or a.size * WORD_BITS < n or (a.size - 1) * WORD_BITS >= max(n, 1):
        raise LengthMismatch(f"rows of {a.size} and {b.size} words do not hold {n} elements")
    live = ~(a ^ b) & _tail_mask(n, a.size)
    return 2 * int(np.bitwise_count(live).sum()) - n


def xnor_popcount_gemm(a_words: np.ndarray, b_words: np.ndarray, n: int,
                       chunk: int = 2048) -> np.ndarray:
    """(M, W) x (N, W) packed rows -> (M, N) int64 bipolar dot products.

    Matching bits count +1 and differing bits -1, so the dot product is
    n - 2 * popcount(a XOR b) over the live bits. Accumulating one word
    column at a time keeps the temporaries at (chunk, N).
    """
    if a_words.shape[1] != b_words.shape[1]:
        raise LengthMismatch(f"{a_words.shape[1]} vs {b_words.shape[1]} words per row")
    nw = a_words.shape[1]
    mask = _tail_mask(n, nw)
    acc_t = np.uint16 if nw * WORD_BITS < 2 ** 16 else np.int64
    out = np.empty((a_words.shape[0], b_words.shape[0]), dtype=np.int64)
    for s in range(0, a_words.shape[0], chunk):
        a = a_words[s:s + chunk]
        acc = np.zeros((a.shape[0], b_words.shape[0]), dtype=acc_t)
        for k in range(nw):
            diff = a[:, k:k + 1] ^ b_words[None, :, k]
            if mask[k] != np.uint64(2 ** 64 - 1):
                diff &= mask[k]
            acc += np.bitwise_count(diff)
        out[s:s + chunk] = acc
    return n - 2 * out


def matmul_exact(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a @ b; integer operands produce an exact int64 result."""
    if not (_is_int(a) and _is_int(b)):
        return np.asarray(a, dtype=np.float64) @ np.asarray(b, dtype=np.float64)
    amax = int(np.abs(a).max(initial=0))
    bmax = int(np.abs(b).max(initial=0))
    if amax * bmax * max(a.shape[-1], 1) < _EXACT_F64:
        return np.rint(a.astype(np.float64) @ b.astype(np.float64)).astype(np.int64)
    return a.astype(np.int64) @ b.astype(np.int64)


# -- convolution --------------------------------------------------------------

def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def im2col(x: np.ndarray, k: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """(N, C, H, W) -> (N, OH, OW, C*k*k), patch order (C, kh, kw)."""
    n, c, h, w = x.shape
    win = sliding_window_view(_pad(x, pad), (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh, ow, c * k * k)


def _check_conv(x, w, groups_dw=False):
    if x.ndim != 4:
        raise ShapeMismatch("conv input", ("N", "C", "H", "W"), x.shape)
    cin = w.shape[0] if groups_dw else w.shape[1]
    if x.shape[1] != cin:
        raise ShapeMismatch("conv input channels", (x.shape[0], cin) + x.shape[2:], x.shape)


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0, bias=None) -> np.ndarray:
    """im2col + GEMM convolution. ``w`` is (Cout, Cin, k, k)."""
    _check_conv(x, w)
    cout, _, k, _ = w.shape
    cols = im2col(x, k, stride, pad)
    n, oh, ow, kk = cols.shape
    out = matmul_exact(cols.reshape(-1, kk), w.reshape(cout, kk).T)
    out = out.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + _chan(bias, 4)
    return np.ascontiguousarray(out)


def conv2d_xnor(x: np.ndarray, w_words: np.ndarray, w_shape, stride: int = 1) -> np.ndarray:
    """Bipolar convolution by XNOR-popcount; ``x`` holds only +1/-1, no padding."""
    cout, cin, k, _ = w_shape
    if x.shape[1] != cin:
        raise ShapeMismatch("conv input channels", (x.shape[0], cin) + x.shape[2:], x.shape)
    cols = im2col((x > 0).view(np.uint8), k, stride, 0)
    n, oh, ow, kk = cols.shape
    packed = pack_rows(cols.reshape(-1, kk))
    out = xnor_popcount_gemm(packed, w_words, kk)
    return np.ascontiguousarray(out.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2))


def conv2d_direct(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0, bias=None) -> np.ndarray:
    """Convolution as a sum of k*k shifted-slice tensor contractions."""
    _check_conv(x, w)
    cout, _, k, _ = w.shape
    xp = _pad(x, pad)
    oh = conv_out_size(x.shape[2], k, stride, pad)
    ow = conv_out_size(x.shape[3], k, stride, pad)
    integer = _is_int(x) and _is_int(w)
    dt = np.int64 if integer else np.float64
    out = np.zeros((x.shape[0], cout, oh, ow), dtype=dt)
    xp = xp.astype(dt)
    w = w.astype(dt)
    for i in range(k):
        for j in range(k):
            sl = xp[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride]
            out += np.einsum("nchw,oc->nohw", sl, w[:, :, i, j])
    if bias is not None:
        out = out + _chan(bias, 4)
    return out


def depthwise_conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """One filter per channel; ``w`` is (C, 1, k, k)."""
    _check_conv(x, w, groups_dw=True)
    c, _, k, _ = w.shape
    win = sliding_window_view(_pad(x, pad), (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    if _is_int(x) and _is_int(w):
        return np.einsum("nchwij,cij->nchw", win.astype(np.int64), w[:, 0].astype(np.int64))
    return np.einsum("nchwij,cij->nchw", win.astype(np.float64), w[:, 0].astype(np.float64))


def depthwise_conv2d_direct(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    _check_conv(x, w, groups_dw=True)
    c, _, k, _ = w.shape
    xp = _pad(x, pad)
    oh = conv_out_size(x.shape[2], k, stride, pad)
    ow = conv_out_size(x.shape[3], k, stride, pad)
    dt = np.int64 if (_is_int(x) and _is_int(w)) else np.float64
    out = np.zeros((x.shape[0], c, oh, ow), dtype=dt)
    for i in range(k):
        for j in range(k):
            sl = xp[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride]
            out += sl.astype(dt) * w[:, 0, i, j].astype(dt).reshape(1, c, 1, 1)
    return out


# -- pooling, dense -----------------------------------------------------------

def maxpool2d(x: np.ndarray, k: int = 2, stride: int = 2) -> np.ndarray:
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.max(axis=(4, 5))


def maxpool2d_direct(x: np.ndarray, k: int = 2, stride: int = 2) -> np.ndarray:
    oh = (x.shape[2] - k) // stride + 1
    ow = (x.shape[3] - k) // stride + 1
    out = None
    for i in range(k):
        for j in range(k):
            sl = x[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride]
            out = sl.copy() if out is None else np.maximum(out, sl)
    return out


def avgpool_global(x: np.ndarray, mode: str = "mean") -> np.ndarray:
    """Global pool to (N, C, 1, 1). ``mode='sum'`` keeps integers integral."""
    s = x.sum(axis=(2, 3), keepdims=True)
    if mode == "sum":
        return s
    return s / (x.shape[2] * x.shape[3])


def fully_connected(x: np.ndarray, w: np.ndarray, b=None) -> np.ndarray:
    """x (N, F_in) times w (F_out, F_in)."""
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch("fc input", (x.shape[0] if x.ndim else 1, w.shape[1]), x.shape)
    out = matmul_exact(x, w.T)
    if b is not None:
        out = out + np.asarray(b)
    return out


def fully_connected_xnor(x: np.ndarray, w_words: np.ndarray, n: int) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != n:
        raise ShapeMismatch("fc input", (x.shape[0] if x.ndim else 1, n), x.shape)
    return xnor_popcount_gemm(pack_rows((x > 0).astype(np.uint8)), w_words, n)


def fully_connected_direct(x: np.ndarray, w: np.ndarray, b=None) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch("fc input", (x.shape[0] if x.ndim else 1, w.shape[1]), x.shape)
    dt = np.int64 if (_is_int(x) and _is_int(w)) else np.float64
    out = np.einsum("nf,of->no", x.astype(dt), w.astype(dt))
    if b is not None:
        out = out + np.asarray(b)
    return out


# -- elementwise ----------------------------------------------------------------

def check_thresholds(t: np.ndarray) -> None:
    if t.shape[1] > 1 and np.any(np.diff(t, axis=1) < 0):
        raise ThresholdsNotIncreasing("thresholds must be sorted along the threshold axis")


def multithreshold(x: np.ndarray, thresholds: np.ndarray, out_scale=1, out_offset=0) -> np.ndarray:
    """out = out_offset + out_scale * #{k : x >= T[c, k]} with c the channel (axis 1)."""
    t = np.asarray(thresholds)
    if t.ndim == 1:
        t = t[None, :]
    check_thresholds(t)
    if t.shape[0] not in (1, x.shape[1]):
        raise ShapeMismatch("thresholds", (x.shape[1], t.shape[1]), t.shape)
    count = np.zeros(x.shape, dtype=np.int64)
    for k in range(t.shape[1]):
        count += x >= _chan(t[:, k], x.ndim)
    return out_offset + out_scale * count


def quant_levels(x: np.ndarray, bits: int, mode: str, scale: float) -> np.ndarray:
    """Integer level of a uniform quantizer; rounding is half up."""
    if mode == "bipolar":
        return np.where(x >= 0, 1, -1).astype(np.int64)
    if mode == "signed":
        lo, hi = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    elif mode == "unsigned":
        lo, hi = 0, 2 ** bits - 1
    else:
        raise ValueError(f"unknown quantizer mode {mode!r}")
    return np.clip(round_half_up(x / scale), lo, hi).astype(np.int64)


def level_range(bits: int, mode: str) -> tuple[int, int]:
    if mode == "bipolar":
        return -1, 1
    if mode == "signed":
        return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    return 0, 2 ** bits - 1


def quant_activation(x: np.ndarray, bits: int, mode: str, scale: float) -> np.ndarray:
    return quant_levels(np.asarray(x, dtype=np.float64), bits, mode, scale) * scale


def sign(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1, -1).astype(np.int64)


def bn_affine(gamma, beta, mean, var, eps: float):
    """BatchNorm as per-channel (scale, shift): y = x * scale + shift."""
    s = np.asarray(gamma, dtype=np.float64) / np.sqrt(np.asarray(var, dtype=np.float64) + eps)
    return s, np.asarray(beta, dtype=np.float64) - np.asarray(mean, dtype=np.float64) * s


def batchnorm(x: np.ndarray, gamma, beta, mean, var, eps: float) -> np.ndarray:
    s, b = bn_affine(gamma, beta, mean, var, eps)
    return scale(x, s) + _chan(b, x.ndim)


def scale(x: np.ndarray, s) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) * _chan(np.asarray(s, dtype=np.float64), x.ndim)


def add(x: np.ndarray, b) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) + _chan(np.asarray(b, dtype=np.float64), x.ndim)
