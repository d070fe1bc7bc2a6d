"""Inference kernels on NCHW float32 tensors.

Convolution has three paths: a plain matmul for pointwise (1x1) kernels, a
compiled direct loop for depthwise kernels, and per-group im2col + matmul for
everything else.  All three accumulate in float32; the accumulation order
differs from the scalar oracle in :mod:`hdesnet.reference`, so results agree to
rounding, not bitwise.  With BLAS pinned to one thread the results are
bitwise reproducible run to run.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import InvalidGeometryError, ShapeError
from .tensor import DTYPE, Tensor

BN_EPS = 1e-5


@dataclass(frozen=True)
class ConvSpec:
    in_ch: int
    out_ch: int
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1

    def __post_init__(self):
        if min(self.in_ch, self.out_ch, self.kernel, self.stride, self.dilation, self.groups) < 1:
            raise ShapeError(f"invalid conv hyperparameters {self}")
        if self.padding < 0:
            raise ShapeError(f"negative padding in {self}")
        if self.in_ch % self.groups or self.out_ch % self.groups:
            raise ShapeError(f"channels ({self.in_ch}, {self.out_ch}) not divisible by groups={self.groups}")

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_ch == self.out_ch and self.groups > 1

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_ch, self.in_ch // self.groups, self.kernel, self.kernel)

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        span = self.dilation * (self.kernel - 1) + 1
        oh = (h + 2 * self.padding - span) // self.stride + 1
        ow = (w + 2 * self.padding - span) // self.stride + 1
        if oh < 1 or ow < 1:
            raise InvalidGeometryError(f"conv {self} on {h}x{w} input gives empty output {oh}x{ow}")
        return oh, ow

    def macs(self, out_elems: int) -> int:
        return out_elems * self.kernel * self.kernel * (self.in_ch // self.groups)


@dataclass
class BnParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = BN_EPS

    def __post_init__(self):
        for name in ("gamma", "beta", "running_mean", "running_var"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=DTYPE).reshape(-1))
        c = self.gamma.size
        if any(v.size != c for v in (self.beta, self.running_mean, self.running_var)):
            raise ShapeError("batch-norm parameter vectors differ in length")
        if (self.running_var < 0).any():
            raise ValueError("running_var must be non-negative")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    @property
    def channels(self) -> int:
        return self.gamma.size

    @classmethod
    def identity(cls, c: int, epsilon: float = BN_EPS) -> "BnParams":
        return cls(np.ones(c), np.zeros(c), np.zeros(c), np.ones(c), epsilon)


def _check_conv_args(x: Tensor, weight: np.ndarray, bias, spec: ConvSpec):
    if x.c != spec.in_ch:
        raise ShapeError(f"conv expects {spec.in_ch} input channels, got {x.c}")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"conv weight shape {weight.shape} != expected {spec.weight_shape}")
    if bias is not None and np.asarray(bias).size != spec.out_ch:
        raise ShapeError(f"conv bias has {np.asarray(bias).size} entries, expected {spec.out_ch}")


def _pad(a: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return a
    n, c, h, w = a.shape
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=a.dtype)
    out[:, :, p:p + h, p:p + w] = a
    return out


def _window(xp: np.ndarray, ky: int, kx: int, spec: ConvSpec, oh: int, ow: int) -> np.ndarray:
    y0, x0 = ky * spec.dilation, kx * spec.dilation
    s = spec.stride
    return xp[:, :, y0:y0 + s * (oh - 1) + 1:s, x0:x0 + s * (ow - 1) + 1:s]


@njit(cache=True)
def _depthwise_loop(xp, w, b, stride, dil, oh, ow):
    # row slices keep the innermost loop free of index wraparound checks,
    # which lets LLVM vectorize it; the bias seeds the accumulator
    n_b, c = xp.shape[0], xp.shape[1]
    k = w.shape[2]
    span = stride * (ow - 1) + 1
    out = np.empty((n_b, c, oh, ow), dtype=np.float32)
    for n in range(n_b):
        for ch in range(c):
            for oy in range(oh):
                acc = out[n, ch, oy]
                acc[:] = b[ch]
                for ky in range(k):
                    for kx in range(k):
                        wt = w[ch, 0, ky, kx]
                        x0 = kx * dil
                        row = xp[n, ch, oy * stride + ky * dil, x0:x0 + span:stride]
                        for ox in range(ow):
                            acc[ox] += wt * row[ox]
    return out


@njit(cache=True)
def _depthwise_loop_s1(xp, w, b, dil, oh, ow):
    # stride 1: contiguous source rows, roughly twice as fast as the strided view
    n_b, c = xp.shape[0], xp.shape[1]
    k = w.shape[2]
    out = np.empty((n_b, c, oh, ow), dtype=np.float32)
    for n in range(n_b):
        for ch in range(c):
            for oy in range(oh):
                acc = out[n, ch, oy]
                acc[:] = b[ch]
                for ky in range(k):
                    src = xp[n, ch, oy + ky * dil]
                    for kx in range(k):
                        wt = w[ch, 0, ky, kx]
                        x0 = kx * dil
                        for ox in range(ow):
                            acc[ox] += wt * src[x0 + ox]
    return out


def _conv_depthwise(x, w, b, spec, oh, ow):
    xp = np.ascontiguousarray(_pad(x, spec.padding))
    w = np.ascontiguousarray(w)
    if spec.stride == 1:
        return _depthwise_loop_s1(xp, w, b, spec.dilation, oh, ow)
    return _depthwise_loop(xp, w, b, spec.stride, spec.dilation, oh, ow)


def _conv_im2col(x, w, spec, oh, ow):
    n = x.shape[0]
    k, g = spec.kernel, spec.groups
    cin_g, cout_g = spec.in_ch // g, spec.out_ch // g
    xp = _pad(x, spec.padding)
    out = np.empty((n, spec.out_ch, oh * ow), dtype=DTYPE)
    cols = np.empty((n, cin_g, k, k, oh, ow), dtype=DTYPE)
    for gi in range(g):
        xg = xp[:, gi * cin_g:(gi + 1) * cin_g]
        for ky in range(k):
            for kx in range(k):
                cols[:, :, ky, kx] = _window(xg, ky, kx, spec, oh, ow)
        wg = w[gi * cout_g:(gi + 1) * cout_g].reshape(cout_g, -1)
        np.matmul(wg, cols.reshape(n, cin_g * k * k, oh * ow), out=out[:, gi * cout_g:(gi + 1) * cout_g])
    return out.reshape(n, spec.out_ch, oh, ow)


def conv2d(x: Tensor, weight, bias, spec: ConvSpec) -> Tensor:
    """2-D convolution with symmetric zero padding, stride, dilation and groups."""
    w = np.asarray(weight, dtype=DTYPE)
    _check_conv_args(x, w, bias, spec)
    oh, ow = spec.out_hw(x.h, x.w)
    a = x.array
    if spec.kernel == 1 and spec.groups == 1 and spec.padding == 0:
        if spec.stride > 1:
            a = a[:, :, ::spec.stride, ::spec.stride]
        a = np.ascontiguousarray(a).reshape(a.shape[0], spec.in_ch, oh * ow)
        out = np.matmul(w.reshape(spec.out_ch, spec.in_ch), a).reshape(-1, spec.out_ch, oh, ow)
    elif spec.depthwise:
        b = np.zeros(spec.out_ch, DTYPE) if bias is None else np.asarray(bias, dtype=DTYPE)
        return Tensor.wrap(_conv_depthwise(a, w, b, spec, oh, ow))
    else:
        out = _conv_im2col(a, w, spec, oh, ow)
    if bias is not None:
        out += np.asarray(bias, dtype=DTYPE)[None, :, None, None]
    return Tensor.wrap(out)


def batchnorm_infer(x: Tensor, p: BnParams) -> Tensor:
    if x.c != p.channels:
        raise ShapeError(f"batch norm has {p.channels} channels, input has {x.c}")
    inv_std = (p.gamma.astype(np.float64) / np.sqrt(p.running_var.astype(np.float64) + p.epsilon)).astype(DTYPE)
    out = x.array - p.running_mean[None, :, None, None]
    out *= inv_std[None, :, None, None]
    out += p.beta[None, :, None, None]
    return Tensor.wrap(out)


def relu(x: Tensor) -> Tensor:
    return Tensor.wrap(np.maximum(x.array, 0))


def relu6(x: Tensor) -> Tensor:
    return Tensor.wrap(np.clip(x.array, 0, 6))


def global_avg_pool(x: Tensor) -> Tensor:
    m = x.array.mean(axis=(2, 3), dtype=np.float64, keepdims=True)
    return Tensor.wrap(m.astype(DTYPE))


def _interp_matrix(n_in: int, factor: int) -> np.ndarray:
    """(n_in*factor, n_in) linear interpolation weights, half-pixel centres,
    source coordinate clamped to [0, n_in - 1]."""
    dst = np.arange(n_in * factor, dtype=np.float64)
    src = np.clip((dst + 0.5) / factor - 0.5, 0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = src - i0
    m = np.zeros((dst.size, n_in))
    rows = np.arange(dst.size)
    np.add.at(m, (rows, i0), 1 - t)
    np.add.at(m, (rows, i1), t)
    return m


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    # float64 products of float32 data with convex weights: constants come
    # back exact and results stay inside [min, max] of the input
    ry = _interp_matrix(x.h, factor)
    rx = _interp_matrix(x.w, factor)
    out = ry @ x.array.astype(np.float64) @ rx.T
    return Tensor.wrap(out.astype(DTYPE))


def fold_bn(conv_w, conv_b, p: BnParams) -> tuple[np.ndarray, np.ndarray]:
    """Fold inference batch norm into the preceding conv: returns (weight, bias)."""
    w = np.asarray(conv_w, dtype=np.float64)
    if w.shape[0] != p.channels:
        raise ShapeError(f"conv has {w.shape[0]} output channels, batch norm has {p.channels}")
    b = np.zeros(w.shape[0]) if conv_b is None else np.asarray(conv_b, dtype=np.float64)
    scale = p.gamma.astype(np.float64) / np.sqrt(p.running_var.astype(np.float64) + p.epsilon)
    w_f = w * scale.reshape(-1, *([1] * (w.ndim - 1)))
    b_f = (b - p.running_mean) * scale + p.beta
    return w_f.astype(DTYPE), b_f.astype(DTYPE)
