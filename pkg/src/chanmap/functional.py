"""Neural-network operators on :class:`~chanmap.tensor.Tensor` (NCHW layout)."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, Tensor, as_tensor, make_node


def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _col2im(gwin: np.ndarray, xp_shape, k: int, stride: int) -> np.ndarray:
    """Scatter-add window gradients [N, OH, OW, K, K, C] back onto the padded NCHW input."""
    n, c, hp, wp = xp_shape
    out = np.zeros((n, hp, wp, c), dtype=DTYPE)
    oh, ow = gwin.shape[1], gwin.shape[2]
    for i in range(k):
        for j in range(k):
            out[:, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride] += gwin[:, :, :, i, j]
    return out.transpose(0, 3, 1, 2)


def _conv_dense(xp, w, stride, oh, ow):
    # channels-last columns: rows (n, oh, ow), columns (kh, kw, c)
    n, c = xp.shape[:2]
    o, _, k, _ = w.shape
    xl = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    win = sliding_window_view(xl, (k, k), axis=(1, 2))[:, : stride * (oh - 1) + 1 : stride, : stride * (ow - 1) + 1 : stride]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, k * k * c)
    out = (cols @ w.transpose(0, 2, 3, 1).reshape(o, -1).T).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def _conv_dense_backward(g, xp_shape, w, cols, stride):
    n, c = xp_shape[:2]
    o, _, k, _ = w.shape
    oh, ow = g.shape[2], g.shape[3]
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
    wl = w.transpose(0, 2, 3, 1).reshape(o, -1)
    gw = (g2.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2)
    gcols = (g2 @ wl).reshape(n, oh, ow, k, k, c)
    return _col2im(gcols, xp_shape, k, stride), np.ascontiguousarray(gw)


def _conv_depthwise(xp, w, stride, oh, ow):
    k = w.shape[-1]
    out = np.zeros((xp.shape[0], xp.shape[1], oh, ow), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            tap = xp[:, :, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride]
            out += tap * w[None, :, 0, i, j, None, None]
    return out


def _conv_depthwise_backward(g, xp, w, stride):
    k = w.shape[-1]
    oh, ow = g.shape[2], g.shape[3]
    gxp = np.zeros(xp.shape, dtype=DTYPE)
    gw = np.zeros(w.shape, dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            sl = (slice(None), slice(None), slice(i, i + stride * (oh - 1) + 1, stride), slice(j, j + stride * (ow - 1) + 1, stride))
            gw[:, 0, i, j] = (g * xp[sl]).sum(axis=(0, 2, 3))
            gxp[sl] += g * w[None, :, 0, i, j, None, None]
    return gxp, gw


def conv2d_array(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0, groups: int = 1) -> np.ndarray:
    """Plain numpy convolution, no tape. Used by artifact replay."""
    out, _ = _conv_forward(np.asarray(x, DTYPE), np.asarray(w, DTYPE), stride, padding, groups)
    return out


def conv2d_int(
    x_codes: np.ndarray, x_scale: float, codes: np.ndarray, w_scale: np.ndarray, stride: int = 1, padding: int = 0, groups: int = 1
) -> np.ndarray:
    """Convolution of integer activation codes with integer weight codes, rescaled per output channel.

    Partial sums are integers; below 2**24 they are exact in float32, so the
    result does not depend on summation order (channel permutations, splits).
    """
    fan_in = codes[0].size
    bound = float(np.abs(x_codes).max(initial=0)) * float(np.abs(codes).max(initial=0)) * fan_in
    dtype = DTYPE if bound < 2**24 else np.float64
    acc, _ = _conv_forward(x_codes.astype(dtype), codes.astype(dtype), stride, padding, groups)
    return _rescale(acc, x_scale, w_scale, (1, -1, 1, 1))


def linear_int(x_codes: np.ndarray, x_scale: float, codes: np.ndarray, w_scale: np.ndarray) -> np.ndarray:
    """Integer-code counterpart of :func:`linear` without bias."""
    bound = float(np.abs(x_codes).max(initial=0)) * float(np.abs(codes).max(initial=0)) * codes.shape[1]
    dtype = DTYPE if bound < 2**24 else np.float64
    acc = x_codes.astype(dtype) @ codes.astype(dtype).T
    return _rescale(acc, x_scale, w_scale, (1, -1))


def _rescale(acc, x_scale, w_scale, shape):
    return (acc.astype(np.float64) * (x_scale * np.asarray(w_scale, np.float64)).reshape(shape)).astype(DTYPE)


def batchnorm_eval_array(x: np.ndarray, gamma, beta, mean, var, eps: float = 1e-5) -> np.ndarray:
    """Eval-mode batch normalization, the same arithmetic as :func:`batchnorm2d`."""
    inv = (1.0 / np.sqrt(var + eps)).astype(DTYPE)
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    return gamma[None, :, None, None] * xhat + beta[None, :, None, None]


def _check_conv(xs, ws, stride, padding, groups):
    if len(xs) != 4 or len(ws) != 4:
        raise ValueError(f"conv2d: expected 4-d input and weight, got {xs} and {ws}")
    n, c, h, wd = xs
    o, cg, kh, kw = ws
    if kh != kw:
        raise ValueError(f"conv2d: only square kernels are supported, got {kh}x{kw}")
    if groups < 1 or c % groups or o % groups:
        raise ValueError(f"conv2d: groups={groups} must divide input channels {c} and output channels {o}")
    if cg != c // groups:
        raise ValueError(
            f"conv2d: weight expects {cg} input channels per group, input has {c} channels / {groups} groups"
        )
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: bad stride {stride} or padding {padding}")
    oh = conv_out_size(h, kh, stride, padding)
    ow = conv_out_size(wd, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d: kernel {kh} larger than padded input {h}x{wd}")
    return oh, ow


def _conv_forward(x, w, stride, padding, groups):
    oh, ow = _check_conv(x.shape, w.shape, stride, padding, groups)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    c, o = x.shape[1], w.shape[0]
    if groups == 1:
        out, cols = _conv_dense(xp, w, stride, oh, ow)
        return out, (xp, cols)
    if groups == c and o == c:
        return _conv_depthwise(xp, w, stride, oh, ow), (xp, None)
    cg, og = c // groups, o // groups
    outs, cache = [], []
    for gi in range(groups):
        out_g, cols = _conv_dense(xp[:, gi * cg : (gi + 1) * cg], w[gi * og : (gi + 1) * og], stride, oh, ow)
        outs.append(out_g)
        cache.append(cols)
    return np.concatenate(outs, axis=1), (xp, cache)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    out, (xp, cache) = _conv_forward(x.data, w.data, stride, padding, groups)
    c, o = x.shape[1], w.shape[0]

    def backward(g):
        if groups == 1:
            gxp, gw = _conv_dense_backward(g, xp.shape, w.data, cache, stride)
        elif groups == c and o == c:
            gxp, gw = _conv_depthwise_backward(g, xp, w.data, stride)
        else:
            cg, og = c // groups, o // groups
            gxp = np.zeros(xp.shape, dtype=DTYPE)
            gw = np.zeros(w.shape, dtype=DTYPE)
            for gi in range(groups):
                gx_g, gw_g = _conv_dense_backward(
                    g[:, gi * og : (gi + 1) * og], (xp.shape[0], cg) + xp.shape[2:], w.data[gi * og : (gi + 1) * og], cache[gi], stride
                )
                gxp[:, gi * cg : (gi + 1) * cg] = gx_g
                gw[gi * og : (gi + 1) * og] = gw_g
        if padding:
            gxp = gxp[:, :, padding:-padding, padding:-padding]
        grads = [np.ascontiguousarray(gxp), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ValueError(f"conv2d: bias shape {bias.shape} != ({o},)")
        out = out + bias.data[None, :, None, None]
        return make_node(out, (x, w, bias), backward)
    return make_node(out, (x, w), backward)


def linear(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ w.T + bias`` with ``w`` shaped [out, in]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    out = x.data @ w.data.T

    def backward(g):
        grads = [g @ w.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (w.shape[0],):
            raise ValueError(f"linear: bias shape {bias.shape} != ({w.shape[0]},)")
        return make_node(out + bias.data, (x, w, bias), backward)
    return make_node(out, (x, w), backward)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over (N, H, W). Updates the running buffers in place when training."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[1]
    if x.ndim != 4 or gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm2d: input {x.shape} vs affine params {gamma.shape}, {beta.shape}")
    g_ = gamma.data[None, :, None, None]
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        unbiased = var * m / max(m - 1, 1)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(DTYPE)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = g_ * xhat + beta.data[None, :, None, None]

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * g_
        if training:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            dx = (inv[None, :, None, None] / m) * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            dx = dxhat * inv[None, :, None, None]
        return dx, dgamma, dbeta

    return make_node(out, (x, gamma, beta), backward)


def avgpool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    x = as_tensor(x)
    stride = stride or kernel
    n, c, h, w = x.shape
    oh, ow = conv_out_size(h, kernel, stride, 0), conv_out_size(w, kernel, stride, 0)
    if oh < 1 or ow < 1:
        raise ValueError(f"avgpool2d: kernel {kernel} larger than input {h}x{w}")
    taps = [
        (slice(None), slice(None), slice(i, i + stride * (oh - 1) + 1, stride), slice(j, j + stride * (ow - 1) + 1, stride))
        for i in range(kernel)
        for j in range(kernel)
    ]
    out = sum(x.data[t] for t in taps) / (kernel * kernel)

    def backward(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        for t in taps:
            gx[t] += g / (kernel * kernel)
        return (gx,)

    return make_node(out.astype(DTYPE), (x,), backward)


def global_avgpool(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C]."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"global_avgpool: expected 4-d input, got {x.shape}")
    return x.mean(axis=(2, 3))
