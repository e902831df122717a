"""Differentiable neural-network operations on :class:`~fednet.tensor.Tensor`.

Conventions fixed here, once, so every result is bit-reproducible:

* convolution is cross-correlation (no kernel flip) with zero padding;
* ``upsample_nearest`` replicates each pixel into an f x f block;
* ``pixel_shuffle`` maps out[n, c, h*r+a, w*r+b] = x[n, c*r*r + a*r + b, h, w].

conv2d / conv_transpose2d are implemented via im2col / col2im so the heavy
lifting is a single matmul; the transposed convolution is the exact adjoint
of conv2d for matching geometry.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .tensor import Tensor, log_kink_pattern, record


def _check_dtypes(op: str, *tensors: Optional[Tensor]) -> None:
    dtypes = {t.data.dtype for t in tensors if t is not None}
    if len(dtypes) > 1:
        raise TypeError(f"{op}: mixed precision {sorted(str(d) for d in dtypes)}")


def _check_rank(op: str, t: Tensor, rank: int, role: str) -> None:
    if t.ndim != rank:
        raise ValueError(f"{op}: {role} must be {rank}-d, got shape {tuple(t.shape)}")


# ---------------------------------------------------------------------------
# im2col / col2im
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """[N,C,H,W] -> [N, C*kh*kw, OH*OW] patch matrix."""
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(cols: np.ndarray, out_shape: tuple, kh: int, kw: int, stride: int,
            pad: int, oh: int, ow: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches back into [N,C,H,W]."""
    n, c, h, w = out_shape
    buf = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            buf[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols6[:, :, i, j]
    if pad:
        return buf[:, :, pad:pad + h, pad:pad + w].copy()
    return buf


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
           pad: int = 0) -> Tensor:
    """Cross-correlation of x:[N,Cin,H,W] with w:[Cout,Cin,kh,kw].

    Output spatial extents: floor((H + 2*pad - kh) / stride) + 1, same for W.
    """
    _check_rank("conv2d", x, 4, "input")
    _check_rank("conv2d", w, 4, "weight")
    _check_dtypes("conv2d", x, w, b)
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if pad < 0:
        raise ValueError(f"conv2d: pad must be >= 0, got {pad}")
    n, cin, h, width = x.shape
    cout, wcin, kh, kw = w.shape
    if cin != wcin:
        raise ValueError(
            f"conv2d: channel axis mismatch: input has {cin} channels (axis 1), "
            f"weight expects {wcin} (axis 1)")
    if h + 2 * pad < kh:
        raise ValueError(f"conv2d: height axis too small: H+2*pad={h + 2 * pad} < kh={kh}")
    if width + 2 * pad < kw:
        raise ValueError(f"conv2d: width axis too small: W+2*pad={width + 2 * pad} < kw={kw}")
    if b is not None and b.shape != (cout,):
        raise ValueError(f"conv2d: bias must have shape ({cout},), got {tuple(b.shape)}")

    oh = (h + 2 * pad - kh) // stride + 1
    ow = (width + 2 * pad - kw) // stride + 1
    cols = _im2col(x.data, kh, kw, stride, pad)
    w2 = w.data.reshape(cout, cin * kh * kw)
    out_data = np.matmul(w2, cols).reshape(n, cout, oh, ow)
    if b is not None:
        out_data = out_data + b.data[None, :, None, None]
    out = Tensor(out_data)

    def backward_fn(g):
        g2 = g.reshape(n, cout, oh * ow)
        dx = dw = db = None
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2)
            dx = _col2im(dcols, x.shape, kh, kw, stride, pad, oh, ow)
        if w.requires_grad:
            dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if b is not None and b.requires_grad:
            db = g.sum(axis=(0, 2, 3))
        return (dx, dw) if b is None else (dx, dw, db)

    inputs = (x, w) if b is None else (x, w, b)
    return record(out, inputs, backward_fn)


def conv_transpose2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
                     stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution of x:[N,Cin,H,W] with w:[Cin,Cout,kh,kw].

    Output spatial extents: (H - 1)*stride - 2*pad + kh, same for W.  For
    matching geometry this is the exact adjoint of :func:`conv2d`:
    dot(conv2d(x, w), y) == dot(x, conv_transpose2d(y, w)).
    """
    _check_rank("conv_transpose2d", x, 4, "input")
    _check_rank("conv_transpose2d", w, 4, "weight")
    _check_dtypes("conv_transpose2d", x, w, b)
    if stride < 1:
        raise ValueError(f"conv_transpose2d: stride must be >= 1, got {stride}")
    if pad < 0:
        raise ValueError(f"conv_transpose2d: pad must be >= 0, got {pad}")
    n, cin, h, width = x.shape
    wcin, cout, kh, kw = w.shape
    if cin != wcin:
        raise ValueError(
            f"conv_transpose2d: channel axis mismatch: input has {cin} channels (axis 1), "
            f"weight expects {wcin} (axis 0)")
    hp = (h - 1) * stride - 2 * pad + kh
    wp = (width - 1) * stride - 2 * pad + kw
    if hp < 1:
        raise ValueError(f"conv_transpose2d: height axis collapses to {hp}")
    if wp < 1:
        raise ValueError(f"conv_transpose2d: width axis collapses to {wp}")
    if b is not None and b.shape != (cout,):
        raise ValueError(f"conv_transpose2d: bias must have shape ({cout},), got {tuple(b.shape)}")

    w2 = w.data.reshape(cin, cout * kh * kw)
    cols = np.matmul(w2.T, x.data.reshape(n, cin, h * width))
    out_data = _col2im(cols, (n, cout, hp, wp), kh, kw, stride, pad, h, width)
    if b is not None:
        out_data = out_data + b.data[None, :, None, None]
    out = Tensor(out_data)

    def backward_fn(g):
        dx = dw = db = None
        gcols = None
        if x.requires_grad or w.requires_grad:
            gcols = _im2col(g, kh, kw, stride, pad)
        if x.requires_grad:
            dx = np.matmul(w2, gcols).reshape(x.shape)
        if w.requires_grad:
            dw = np.matmul(x.data.reshape(n, cin, h * width),
                           gcols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if b is not None and b.requires_grad:
            db = g.sum(axis=(0, 2, 3))
        return (dx, dw) if b is None else (dx, dw, db)

    inputs = (x, w) if b is None else (x, w, b)
    return record(out, inputs, backward_fn)


# ---------------------------------------------------------------------------
# Dense / activations / pooling
# ---------------------------------------------------------------------------


def dense(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Fully connected layer: y = x @ w.T + b for x:[N,Cin], w:[Cout,Cin]."""
    _check_rank("dense", x, 2, "input")
    _check_rank("dense", w, 2, "weight")
    _check_dtypes("dense", x, w, b)
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"dense: inner axis mismatch: input has {x.shape[1]} features (axis 1), "
            f"weight expects {w.shape[1]} (axis 1)")
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"dense: bias must have shape ({w.shape[0]},), got {tuple(b.shape)}")
    out_data = x.data @ w.data.T
    if b is not None:
        out_data = out_data + b.data[None, :]
    out = Tensor(out_data)

    def backward_fn(g):
        dx = g @ w.data if x.requires_grad else None
        dw = g.T @ x.data if w.requires_grad else None
        if b is None:
            return dx, dw
        db = g.sum(axis=0) if b.requires_grad else None
        return dx, dw, db

    inputs = (x, w) if b is None else (x, w, b)
    return record(out, inputs, backward_fn)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    mask = x.data > 0
    log_kink_pattern(mask)
    return record(out, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic; output clipped strictly inside (0, 1)."""
    z = x.data
    out_data = np.empty_like(z)
    pos = z >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out_data[~pos] = e / (1.0 + e)
    info = np.finfo(z.dtype)
    np.clip(out_data, info.tiny, 1.0 - info.epsneg, out=out_data)
    out = Tensor(out_data)
    return record(out, (x,), lambda g: (g * out_data * (1.0 - out_data),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation kind {kind!r}")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: [N,C,H,W] -> [N,C]."""
    _check_rank("global_avg_pool", x, 4, "input")
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3), dtype=x.data.dtype))
    scale = 1.0 / (h * w)

    def backward_fn(g):
        return (np.broadcast_to(g[:, :, None, None] * scale, x.shape),)

    return record(out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# Resolution changes
# ---------------------------------------------------------------------------


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate each pixel into a factor x factor block (no interpolation)."""
    _check_rank("upsample_nearest", x, 4, "input")
    if factor < 1:
        raise ValueError(f"upsample_nearest: factor must be >= 1, got {factor}")
    if factor == 1:
        out = Tensor(x.data.copy())
        return record(out, (x,), lambda g: (g,))
    n, c, h, w = x.shape
    out_data = np.broadcast_to(
        x.data[:, :, :, None, :, None], (n, c, h, factor, w, factor)
    ).reshape(n, c, h * factor, w * factor).copy()
    out = Tensor(out_data)

    def backward_fn(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return record(out, (x,), backward_fn)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """[N, C*r*r, H, W] -> [N, C, H*r, W*r] by periodic channel-to-space rearrangement."""
    _check_rank("pixel_shuffle", x, 4, "input")
    if r < 1:
        raise ValueError(f"pixel_shuffle: r must be >= 1, got {r}")
    n, c_in, h, w = x.shape
    if c_in % (r * r) != 0:
        raise ValueError(f"pixel_shuffle: channel extent {c_in} not divisible by r*r={r * r}")
    c = c_in // (r * r)
    out_data = (x.data.reshape(n, c, r, r, h, w)
                .transpose(0, 1, 4, 2, 5, 3)
                .reshape(n, c, h * r, w * r).copy())
    out = Tensor(out_data)

    def backward_fn(g):
        return (g.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4)
                .reshape(n, c_in, h, w),)

    return record(out, (x,), backward_fn)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Exact inverse of :func:`pixel_shuffle`: [N,C,H*r,W*r] -> [N,C*r*r,H,W]."""
    _check_rank("pixel_unshuffle", x, 4, "input")
    if r < 1:
        raise ValueError(f"pixel_unshuffle: r must be >= 1, got {r}")
    n, c, hr, wr = x.shape
    if hr % r != 0:
        raise ValueError(f"pixel_unshuffle: height extent {hr} not divisible by r={r}")
    if wr % r != 0:
        raise ValueError(f"pixel_unshuffle: width extent {wr} not divisible by r={r}")
    h, w = hr // r, wr // r
    out_data = (x.data.reshape(n, c, h, r, w, r)
                .transpose(0, 1, 3, 5, 2, 4)
                .reshape(n, c * r * r, h, w).copy())
    out = Tensor(out_data)

    def backward_fn(g):
        return (g.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
                .reshape(n, c, hr, wr),)

    return record(out, (x,), backward_fn)


def channel_scale(x: Tensor, gate: Tensor) -> Tensor:
    """Scale each channel map of x:[N,C,H,W] by gate:[N,C]."""
    _check_rank("channel_scale", x, 4, "input")
    _check_rank("channel_scale", gate, 2, "gate")
    _check_dtypes("channel_scale", x, gate)
    if x.shape[:2] != gate.shape:
        raise ValueError(
            f"channel_scale: gate shape {tuple(gate.shape)} must match input batch/channel "
            f"axes {tuple(x.shape[:2])}")
    g4 = gate.data[:, :, None, None]
    out = Tensor(x.data * g4)

    def backward_fn(g):
        dx = g * g4 if x.requires_grad else None
        dgate = (g * x.data).sum(axis=(2, 3)) if gate.requires_grad else None
        return dx, dgate

    return record(out, (x, gate), backward_fn)
