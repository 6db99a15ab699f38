"""Spatial operations: 2-D convolution, pooling, channel projection.

All convolutions are cross-correlations (no kernel flip), zero-padded,
bias-free, and square-kernel with odd extent. Implemented over strided
window views plus BLAS matrix products; backward passes are hand-derived
and covered by finite-difference tests.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ShapeError, ValueCheckError
from .autodiff import Array, Tensor, _record

_POOL_KINDS = {"avg": "avg", "average": "avg", "max": "max", "maximum": "max"}


def _windows(xp: Array, out_h: int, out_w: int, k: int, stride: int, dilation: int) -> Array:
    """Strided view (B, C, out_h, out_w, k, k) over a padded array. No copy."""
    b, c, _, _ = xp.shape
    sb, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(b, c, out_h, out_w, k, k),
        strides=(sb, sc, sh * stride, sw * stride, sh * dilation, sw * dilation),
        writeable=False,
    )


def _check_spatial_args(stride: int, dilation: int, padding: int) -> None:
    if stride < 1 or dilation < 1:
        raise ShapeError(f"stride/dilation must be >= 1, got {stride}/{dilation}")
    if padding < 0:
        raise ShapeError(f"padding must be >= 0, got {padding}")


def conv2d(x: Tensor, kernel: Tensor, *, stride: int = 1, dilation: int = 1,
           groups: int = 1, padding: int = 0) -> Tensor:
    """Grouped, dilated, zero-padded 2-D cross-correlation.

    x: (B, C_in, H, W); kernel: (C_out, C_in/groups, k, k) with k odd.
    Output spatial extent: (H + 2*padding - dilation*(k-1) - 1)//stride + 1.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D operands, got {x.shape} and {kernel.shape}")
    bsz, c_in, h, w = x.shape
    c_out, c_ker, kh, kw = kernel.shape
    if kh != kw:
        raise ShapeError(f"conv2d: kernel must be square, got {kh}x{kw}")
    k = kh
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel extent must be odd, got {k}")
    if groups < 1 or c_in % groups != 0 or c_out % groups != 0:
        raise ShapeError(f"conv2d: groups={groups} incompatible with channels {c_in}->{c_out}")
    if c_ker != c_in // groups:
        raise ShapeError(f"conv2d: kernel expects {c_ker} in-channels per group, "
                         f"input supplies {c_in // groups}")
    _check_spatial_args(stride, dilation, padding)
    eff = dilation * (k - 1) + 1
    if eff > h + 2 * padding or eff > w + 2 * padding:
        raise ShapeError(f"conv2d: effective kernel extent {eff} exceeds padded input "
                         f"{h + 2 * padding}x{w + 2 * padding}")
    out_h = (h + 2 * padding - eff) // stride + 1
    out_w = (w + 2 * padding - eff) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _windows(xp, out_h, out_w, k, stride, dilation)
    # (B, out_h, out_w, C_in, k, k) contiguous; rows are per-position patches.
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    n_pos = bsz * out_h * out_w
    cg = c_in // groups
    og = c_out // groups
    colsf = cols.reshape(n_pos, groups, cg * k * k)
    kerf = kernel.data.reshape(groups, og, cg * k * k)
    out = np.empty((n_pos, c_out))
    for g in range(groups):
        out[:, g * og:(g + 1) * og] = colsf[:, g, :] @ kerf[g].T
    out = out.reshape(bsz, out_h, out_w, c_out).transpose(0, 3, 1, 2)

    keep_cols = colsf if kernel.requires_grad else None
    ker_data = kernel.data
    hp, wp = xp.shape[2], xp.shape[3]

    def bw(gout: Array):
        gf = np.ascontiguousarray(gout.transpose(0, 2, 3, 1)).reshape(n_pos, c_out)
        dker = None
        if keep_cols is not None:
            dker = np.empty_like(ker_data)
            for g in range(groups):
                dk = gf[:, g * og:(g + 1) * og].T @ keep_cols[:, g, :]
                dker[g * og:(g + 1) * og] = dk.reshape(og, cg, k, k)
        dx = None
        if x.requires_grad:
            dxp = np.zeros((bsz, c_in, hp, wp))
            for g in range(groups):
                go = gout[:, g * og:(g + 1) * og]
                kg = ker_data[g * og:(g + 1) * og]
                for i in range(k):
                    ys = slice(i * dilation, i * dilation + (out_h - 1) * stride + 1, stride)
                    for j in range(k):
                        xs = slice(j * dilation, j * dilation + (out_w - 1) * stride + 1, stride)
                        contrib = np.einsum("boyx,oc->bcyx", go, kg[:, :, i, j], optimize=True)
                        dxp[:, g * cg:(g + 1) * cg, ys, xs] += contrib
            dx = dxp[:, :, padding:padding + h, padding:padding + w]
            if padding:
                dx = np.ascontiguousarray(dx)
        return dx, dker

    return _record((x, kernel), out, bw)


def _pool_counts(h: int, w: int, window: int, stride: int, padding: int,
                 out_h: int, out_w: int) -> Array:
    """In-bounds cell count per output position (padded cells excluded)."""
    ys = np.arange(out_h) * stride - padding
    xs = np.arange(out_w) * stride - padding
    rows = np.minimum(ys + window, h) - np.maximum(ys, 0)
    cols = np.minimum(xs + window, w) - np.maximum(xs, 0)
    return np.maximum(rows, 0)[:, None] * np.maximum(cols, 0)[None, :]


def pool2d(x: Tensor, kind: str, window: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Average or maximum pooling.

    Average pooling divides by the count of in-bounds contributing cells, so
    padded zeros never enter the denominator. Maximum pooling ignores padded
    positions; at ties the gradient goes to the first maximum in row-major
    window order.
    """
    if x.ndim != 4:
        raise ShapeError(f"pool2d: need a 4-D operand, got {x.shape}")
    if kind not in _POOL_KINDS:
        raise ValueCheckError(f"pool2d: unknown kind {kind!r}")
    kind = _POOL_KINDS[kind]
    if window < 1:
        raise ShapeError(f"pool2d: window must be >= 1, got {window}")
    _check_spatial_args(stride, 1, padding)
    bsz, c, h, w = x.shape
    if window > h + 2 * padding or window > w + 2 * padding:
        raise ShapeError(f"pool2d: window {window} larger than padded extent "
                         f"{h + 2 * padding}x{w + 2 * padding}")
    if padding >= window:
        raise ValueCheckError(f"pool2d: padding {padding} >= window {window} "
                              "creates windows with no in-bounds cells")
    out_h = (h + 2 * padding - window) // stride + 1
    out_w = (w + 2 * padding - window) // stride + 1
    hp, wp = h + 2 * padding, w + 2 * padding

    if kind == "avg":
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        win = _windows(xp, out_h, out_w, window, stride, 1)
        counts = _pool_counts(h, w, window, stride, padding, out_h, out_w)
        out = win.sum(axis=(-2, -1)) / counts

        def bw_avg(g: Array):
            gg = g / counts
            dxp = np.zeros((bsz, c, hp, wp))
            for i in range(window):
                ys = slice(i, i + (out_h - 1) * stride + 1, stride)
                for j in range(window):
                    xs = slice(j, j + (out_w - 1) * stride + 1, stride)
                    dxp[:, :, ys, xs] += gg
            dx = dxp[:, :, padding:padding + h, padding:padding + w]
            return (np.ascontiguousarray(dx) if padding else dx,)

        return _record((x,), out, bw_avg)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf)
    win = _windows(xp, out_h, out_w, window, stride, 1)
    flat = np.ascontiguousarray(win).reshape(bsz, c, out_h, out_w, window * window)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bw_max(g: Array):
        ti = idx // window
        tj = idx % window
        ay = np.arange(out_h).reshape(1, 1, out_h, 1) * stride + ti
        ax = np.arange(out_w).reshape(1, 1, 1, out_w) * stride + tj
        ab = np.arange(bsz).reshape(bsz, 1, 1, 1)
        ac = np.arange(c).reshape(1, c, 1, 1)
        fidx = ((ab * c + ac) * hp + ay) * wp + ax
        dxp = np.zeros(bsz * c * hp * wp)
        np.add.at(dxp, fidx.ravel(), g.ravel())
        dxp = dxp.reshape(bsz, c, hp, wp)
        dx = dxp[:, :, padding:padding + h, padding:padding + w]
        return (np.ascontiguousarray(dx) if padding else dx,)

    return _record((x,), out, bw_max)


def project_channels(x: Tensor, weight: Tensor) -> Tensor:
    """Per-position channel projection: out[b,o,h,w] = sum_c W[o,c] x[b,c,h,w].

    Equivalent to a 1x1 convolution.
    """
    if x.ndim != 4 or weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"project_channels: shapes {x.shape} and {weight.shape} incompatible")
    wd = weight.data
    xd = x.data
    out = np.einsum("oc,bchw->bohw", wd, xd, optimize=True)

    def bw(g: Array):
        dx = np.einsum("oc,bohw->bchw", wd, g, optimize=True) if x.requires_grad else None
        dw = np.einsum("bohw,bchw->oc", g, xd, optimize=True) if weight.requires_grad else None
        return dx, dw

    return _record((x, weight), out, bw)
