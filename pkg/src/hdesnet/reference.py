"""Slow, obviously-correct scalar implementations used as test oracles.

Nothing here imports from :mod:`hdesnet.kernels`; each routine is a plain
nested loop over output elements with float64 accumulation.  The loops are
compiled with numba so that a full-network ``--reference`` run stays usable,
but the code is written exactly as one would write it by hand.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

from .errors import EmptyMaskError, InvalidGeometryError, LabelError, ShapeError
from .tensor import Tensor


@njit(cache=True)
def _conv_loop(x, w, b, stride, pad, dil, groups, oh, ow):
    n_batch, cin, h, wd = x.shape
    cout, cin_g, k, _ = w.shape
    cout_g = cout // groups
    out = np.zeros((n_batch, cout, oh, ow), dtype=np.float32)
    for n in range(n_batch):
        for oc in range(cout):
            g = oc // cout_g
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    for ic in range(cin_g):
                        c = g * cin_g + ic
                        for ky in range(k):
                            iy = oy * stride - pad + ky * dil
                            for kx in range(k):
                                ix = ox * stride - pad + kx * dil
                                if iy < 0 or iy >= h or ix < 0 or ix >= wd:
                                    v = 0.0
                                else:
                                    v = x[n, c, iy, ix]
                                acc += v * w[oc, ic, ky, kx]
                    out[n, oc, oy, ox] = acc + b[oc]
    return out


def naive_conv2d(x: Tensor, weight, bias, spec) -> Tensor:
    w = np.asarray(weight, dtype=np.float64)
    k = spec.kernel
    if x.c != spec.in_ch:
        raise ShapeError(f"conv expects {spec.in_ch} input channels, got {x.c}")
    if w.shape != (spec.out_ch, spec.in_ch // spec.groups, k, k):
        raise ShapeError(f"conv weight shape {w.shape} inconsistent with {spec}")
    b = np.zeros(spec.out_ch) if bias is None else np.asarray(bias, dtype=np.float64).reshape(-1)
    if b.size != spec.out_ch:
        raise ShapeError(f"conv bias has {b.size} entries, expected {spec.out_ch}")
    oh = (x.h + 2 * spec.padding - spec.dilation * (k - 1) - 1) // spec.stride + 1
    ow = (x.w + 2 * spec.padding - spec.dilation * (k - 1) - 1) // spec.stride + 1
    if oh < 1 or ow < 1:
        raise InvalidGeometryError(f"conv output would be {oh}x{ow}")
    out = _conv_loop(x.array.astype(np.float64), w, b, spec.stride, spec.padding,
                     spec.dilation, spec.groups, oh, ow)
    return Tensor.wrap(out)


@njit(cache=True)
def _bilinear_loop(x, factor):
    nb, c, h, w = x.shape
    out = np.zeros((nb, c, h * factor, w * factor), dtype=np.float32)
    for n in range(nb):
        for ch in range(c):
            for oy in range(h * factor):
                sy = (oy + 0.5) / factor - 0.5
                sy = min(max(sy, 0.0), h - 1.0)
                y0 = int(math.floor(sy))
                y1 = min(y0 + 1, h - 1)
                ty = sy - y0
                for ox in range(w * factor):
                    sx = (ox + 0.5) / factor - 0.5
                    sx = min(max(sx, 0.0), w - 1.0)
                    x0 = int(math.floor(sx))
                    x1 = min(x0 + 1, w - 1)
                    tx = sx - x0
                    top = x[n, ch, y0, x0] + (x[n, ch, y1, x0] - x[n, ch, y0, x0]) * ty
                    bot = x[n, ch, y0, x1] + (x[n, ch, y1, x1] - x[n, ch, y0, x1]) * ty
                    out[n, ch, oy, ox] = top + (bot - top) * tx
    return out


def naive_bilinear(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    return Tensor.wrap(_bilinear_loop(x.array.astype(np.float64), factor))


@njit(cache=True)
def _gap_loop(x):
    nb, c, h, w = x.shape
    out = np.zeros((nb, c, 1, 1), dtype=np.float32)
    for n in range(nb):
        for ch in range(c):
            s = 0.0
            for y in range(h):
                for xx in range(w):
                    s += x[n, ch, y, xx]
            out[n, ch, 0, 0] = s / (h * w)
    return out


def naive_global_avg_pool(x: Tensor) -> Tensor:
    return Tensor.wrap(_gap_loop(x.array.astype(np.float64)))


@njit(cache=True)
def _bn_loop(x, gamma, beta, mean, var, eps):
    nb, c, h, w = x.shape
    out = np.zeros(x.shape, dtype=np.float32)
    for n in range(nb):
        for ch in range(c):
            d = math.sqrt(var[ch] + eps)
            for y in range(h):
                for xx in range(w):
                    out[n, ch, y, xx] = gamma[ch] * (x[n, ch, y, xx] - mean[ch]) / d + beta[ch]
    return out


def naive_batchnorm(x: Tensor, p) -> Tensor:
    vecs = [np.asarray(v, dtype=np.float64).reshape(-1)
            for v in (p.gamma, p.beta, p.running_mean, p.running_var)]
    if any(v.size != x.c for v in vecs):
        raise ShapeError(f"batch norm parameters do not match {x.c} channels")
    return Tensor.wrap(_bn_loop(x.array.astype(np.float64), *vecs, float(p.epsilon)))


@njit(cache=True)
def _clamp_loop(x, lo, hi):
    flat = x.reshape(-1)
    out = np.empty(flat.size, dtype=np.float32)
    for i in range(flat.size):
        v = flat[i]
        if v < lo:
            v = lo
        if v > hi:
            v = hi
        out[i] = v
    return out.reshape(x.shape)


def naive_relu(x: Tensor) -> Tensor:
    return Tensor.wrap(_clamp_loop(x.array, np.float32(0), np.float32(np.inf)))


def naive_relu6(x: Tensor) -> Tensor:
    return Tensor.wrap(_clamp_loop(x.array, np.float32(0), np.float32(6)))


# Metric oracles: pure python over flattened pixel lists.

def _pixels(t) -> list[float]:
    return [float(v) for v in np.asarray(t, dtype=np.float64).reshape(-1)]


def _flags(mask) -> list[bool]:
    flags = getattr(mask, "flags", mask)
    return [bool(v) for v in np.asarray(flags).reshape(-1)]


def naive_rmse(pred, gt, mask) -> float:
    total, count = 0.0, 0
    for p, g, ok in zip(_pixels(pred), _pixels(gt), _flags(mask)):
        if ok:
            total += (p - g) ** 2
            count += 1
    if count == 0:
        raise EmptyMaskError("no valid pixels")
    return math.sqrt(total / count)


def naive_delta1(pred, gt, mask, floor: float = 1e-3) -> float:
    hits, count = 0, 0
    for p, g, ok in zip(_pixels(pred), _pixels(gt), _flags(mask)):
        if ok:
            p = max(p, floor)
            if max(p / g, g / p) < 1.25:
                hits += 1
            count += 1
    if count == 0:
        raise EmptyMaskError("no valid pixels")
    return hits / count


def naive_people_iou(pred_logits, gt_labels, person: int = 1) -> float:
    logits = np.asarray(pred_logits, dtype=np.float64)
    s, h, w = logits.shape[1:]
    labels = np.asarray(gt_labels).reshape(h, w)
    inter = union = 0
    for y in range(h):
        for x in range(w):
            lab = int(labels[y, x])
            if lab < 0 or lab >= s:
                raise LabelError(f"label {lab} outside 0..{s - 1}")
            best = 0
            for k in range(1, s):
                if logits[0, k, y, x] > logits[0, best, y, x]:
                    best = k
            a, b = best == person, lab == person
            inter += a and b
            union += a or b
    return 1.0 if union == 0 else inter / union


def naive_smooth_l1(pred, gt, mask) -> float:
    total, count = 0.0, 0
    for p, g, ok in zip(_pixels(pred), _pixels(gt), _flags(mask)):
        if ok:
            d = abs(p - g)
            total += 0.5 * d * d if d < 1 else d - 0.5
            count += 1
    if count == 0:
        raise EmptyMaskError("no valid pixels")
    return total / count


def naive_cross_entropy(logits, labels, mask) -> float:
    lg = np.asarray(logits, dtype=np.float64)
    s, h, w = lg.shape[1:]
    lab = np.asarray(labels).reshape(h, w)
    ok = np.asarray(getattr(mask, "flags", mask)).reshape(h, w)
    total, count = 0.0, 0
    for y in range(h):
        for x in range(w):
            if not ok[y, x]:
                continue
            zs = [lg[0, k, y, x] for k in range(s)]
            m = max(zs)
            lse = m + math.log(sum(math.exp(z - m) for z in zs))
            total += lse - zs[int(lab[y, x])]
            count += 1
    if count == 0:
        raise EmptyMaskError("no valid pixels")
    return total / count


KERNELS = {
    "conv2d": naive_conv2d,
    "batchnorm": naive_batchnorm,
    "relu": naive_relu,
    "relu6": naive_relu6,
    "global_avg_pool": naive_global_avg_pool,
    "bilinear_upsample": naive_bilinear,
}
