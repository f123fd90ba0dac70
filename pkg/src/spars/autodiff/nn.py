"""Layer ops for volumetric nets: conv3d, batchnorm3d, maxpool3d, linear."""
from __future__ import annotations

import math

import numpy as np

from ..errors import ParameterError, ShapeError
from .tensor import Tensor, make, matmul

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _im2col(xp, kernel, stride, out_dims):
    """Gather ``(k*k*k, C, N, oD, oH, oW)`` patches from a padded input."""
    kd, kh, kw = kernel
    od, oh, ow = out_dims
    s = stride
    n, c = xp.shape[:2]
    cols = np.empty((kd * kh * kw, c, n, od, oh, ow), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3, 4)
    idx = 0
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                cols[idx] = xt[:, :, i:i + s * od:s, j:j + s * oh:s, k:k + s * ow:s]
                idx += 1
    return cols


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=1) -> Tensor:
    """3-d cross-correlation over an ``(N, C, D, H, W)`` input."""
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d: expected 5-d input and weight, got {x.shape} and {weight.shape}")
    n_out, n_in, kd, kh, kw = weight.shape
    if x.shape[1] != n_in:
        raise ShapeError(f"conv3d: input {x.shape} has {x.shape[1]} channels but weight {weight.shape} expects {n_in}")
    if bias is not None and bias.shape != (n_out,):
        raise ShapeError(f"conv3d: bias {bias.shape} does not match weight {weight.shape}")
    p, s = padding, stride
    n = x.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x.data
    out_dims = tuple((xp.shape[2 + a] - (kd, kh, kw)[a]) // s + 1 for a in range(3))
    if min(out_dims) < 1:
        raise ShapeError(f"conv3d: input {x.shape} too small for kernel {weight.shape[2:]}")
    cols = _im2col(xp, (kd, kh, kw), s, out_dims)
    k_total = kd * kh * kw * n_in
    cols2 = cols.reshape(k_total, -1)
    # weight (O, C, kd, kh, kw) -> (O, kd*kh*kw*C) to match the patch layout
    w2 = weight.data.transpose(0, 2, 3, 4, 1).reshape(n_out, k_total)
    out = (w2 @ cols2).reshape(n_out, n, *out_dims)
    if bias is not None:
        out += bias.data[:, None, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3, 4))

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3, 4)).reshape(n_out, -1)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = (g2 @ cols2.T).reshape(n_out, kd, kh, kw, n_in).transpose(0, 4, 1, 2, 3)
            gw = np.ascontiguousarray(gw)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=1)
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(kd * kh * kw, n_in, n, *out_dims)
            gxt = np.zeros((n_in, n) + xp.shape[2:], dtype=xp.dtype)
            od, oh, ow = out_dims
            idx = 0
            for i in range(kd):
                for j in range(kh):
                    for k in range(kw):
                        gxt[:, :, i:i + s * od:s, j:j + s * oh:s, k:k + s * ow:s] += gcols[idx]
                        idx += 1
            gxp = gxt.transpose(1, 0, 2, 3, 4)
            if p:
                gxp = gxp[:, :, p:-p, p:-p, p:-p]
            gx = np.ascontiguousarray(gxp)
        return (gx, gw) + ((gb,) if bias is not None else ())

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return make(out, parents, bw)


def batchnorm3d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, train: bool) -> Tensor:
    """Per-channel normalisation over ``(N, D, H, W)``.

    In train mode the running statistics are updated in place.
    """
    if x.ndim != 5 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm3d: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    axes = (0, 2, 3, 4)
    bshape = (1, -1, 1, 1, 1)
    xd = x.data
    if train:
        if x.shape[0] < 2:
            raise ParameterError("batchnorm3d: batch size 1 in train mode; use eval mode (train=False)")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        m = xd.size // xd.shape[1]
        running_mean *= 1 - BN_MOMENTUM
        running_mean += BN_MOMENTUM * mu
        running_var *= 1 - BN_MOMENTUM
        running_var += BN_MOMENTUM * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + BN_EPS)).astype(xd.dtype)
    xhat = (xd - mu.reshape(bshape).astype(xd.dtype)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bw(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if train:
                gx = inv_std.reshape(bshape) * (
                    gxhat
                    - gxhat.mean(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
                )
            else:
                gx = gxhat * inv_std.reshape(bshape)
        return gx, gg, gbeta

    return make(out, (x, gamma, beta), bw)


def maxpool3d(x: Tensor, kernel=(2, 2, 2)) -> Tensor:
    """Non-overlapping max pooling; odd spatial dims are edge-replicated to even first.

    Ties send the gradient to the first position in C order within each block.
    """
    if x.ndim != 5:
        raise ShapeError(f"maxpool3d: expected 5-d input, got {x.shape}")
    kd, kh, kw = kernel
    n, c, d, h, w = x.shape
    pads = [(-d) % kd, (-h) % kh, (-w) % kw]
    xd = x.data
    if any(pads):
        xd = np.pad(xd, ((0, 0), (0, 0), (0, pads[0]), (0, pads[1]), (0, pads[2])), mode="edge")
    D, H, W = xd.shape[2:]
    od, oh, ow = D // kd, H // kh, W // kw
    blocks = xd.reshape(n, c, od, kd, oh, kh, ow, kw).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    blocks = blocks.reshape(n, c, od, oh, ow, kd * kh * kw)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, od, oh, ow, kd, kh, kw).transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(n, c, D, H, W)
        # fold replicated edges back onto their source plane
        if pads[0]:
            gb[:, :, d - 1] += gb[:, :, d:].sum(axis=2)
        if pads[1]:
            gb[:, :, :, h - 1] += gb[:, :, :, h:].sum(axis=3)
        if pads[2]:
            gb[:, :, :, :, w - 1] += gb[:, :, :, :, w:].sum(axis=4)
        return (np.ascontiguousarray(gb[:, :, :d, :h, :w]),)

    return make(out, (x,), bw)


def pooled_dims(dims, n_pools):
    """Spatial dims after ``n_pools`` 2x poolings with replicate-pad to even."""
    dims = tuple(dims)
    for _ in range(n_pools):
        dims = tuple(-(-v // 2) for v in dims)
    return dims


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as ``(out, in)``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    wd = weight.data
    out = x.data @ wd.T
    if bias is not None:
        if bias.shape != (wd.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data

    def bw(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return make(out, parents, bw)


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in, dtype=np.float32):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


__all__ = [
    "conv3d", "batchnorm3d", "maxpool3d", "linear", "flatten", "matmul",
    "pooled_dims", "kaiming_uniform",
]
