"""Differentiable layers used by the network."""
from __future__ import annotations

from typing import Union

import numpy as np

from .tensor import DimensionError, Tensor, as_tensor, record


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


def conv_output_width(width: int, kw: int, stride_w: int, dilation_w: int, left_pad_w: int) -> int:
    return (width + left_pad_w - (kw - 1) * dilation_w - 1) // stride_w + 1


def conv2d(x: Tensor, kernels: Tensor, stride=(1, 1), dilation=(1, 1), left_pad_w: int = 0) -> Tensor:
    """2-d cross-correlation with zero padding on the left of the last axis.

    ``x`` is ``[in_ch, H, W]`` or batched ``[B, in_ch, H, W]``; ``kernels`` is
    ``[out_ch, in_ch, kh, kw]``. Dilation 1 means contiguous taps. With
    ``left_pad_w == (kw - 1) * dw`` and unit width stride the output keeps
    the input width and is causal along it.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    sh, sw = _pair(stride)
    dh, dw = _pair(dilation)
    if sh < 1 or sw < 1 or dh < 1 or dw < 1:
        raise ValueError("stride and dilation must be >= 1")
    if left_pad_w < 0:
        raise ValueError("left_pad_w must be non-negative")
    unbatched = x.ndim == 3
    if x.ndim not in (3, 4):
        raise DimensionError(f"input must be 3-d or 4-d, got {x.ndim}-d")
    if kernels.ndim != 4:
        raise DimensionError(f"kernels must be 4-d, got {kernels.ndim}-d")
    xd = x.data[None] if unbatched else x.data
    B, cin, H, W = xd.shape
    O, kcin, kh, kw = kernels.shape
    if kcin != cin:
        raise DimensionError(f"in_ch axis mismatch: input has {cin}, kernels expect {kcin}")
    if H < (kh - 1) * dh + 1:
        raise DimensionError(f"H axis too short: {H} < dilated kernel height {(kh - 1) * dh + 1}")
    Wo = conv_output_width(W, kw, sw, dw, left_pad_w)
    if Wo < 1:
        raise DimensionError(f"W axis too short for kernel width {kw} at dilation {dw}")
    Ho = (H - (kh - 1) * dh - 1) // sh + 1

    if left_pad_w:
        xp = np.zeros((B, cin, H, W + left_pad_w))
        xp[..., left_pad_w:] = xd
    else:
        xp = np.ascontiguousarray(xd)
    sB, sC, sH, sW = xp.strides
    # every (tap, output position) pair as one strided view, copied once
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(B, cin, kh, kw, Ho, Wo),
        strides=(sB, sC, dh * sH, dw * sW, sh * sH, sw * sW), writeable=False)
    cols2 = np.ascontiguousarray(view).reshape(B, cin * kh * kw, Ho * Wo)
    w2 = kernels.data.reshape(O, cin * kh * kw)
    out = np.matmul(w2, cols2).reshape(B, O, Ho, Wo)
    if unbatched:
        out = out[0]

    def bwd(g):
        g2 = (g[None] if unbatched else g).reshape(B, O, Ho * Wo)
        gw = g2[0] @ cols2[0].T
        for i in range(1, B):
            gw += g2[i] @ cols2[i].T
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2).reshape(B, cin, kh, kw, Ho, Wo)
            if kw == 1 and sw == 1 and not left_pad_w and Ho == 1 and kh == H:
                gxp = gcols.reshape(xp.shape)
            elif kh * dh == H and Ho == 1 and dh == 1:
                # full-height kernel: rows map one-to-one onto the input
                gxp = np.zeros(xp.shape)
                for b in range(kw):
                    gxp[..., b * dw: b * dw + (Wo - 1) * sw + 1: sw] += gcols[:, :, :, b, 0]
            else:
                gxp = np.zeros(xp.shape)
                for a in range(kh):
                    hs = slice(a * dh, a * dh + (Ho - 1) * sh + 1, sh)
                    for b in range(kw):
                        ws = slice(b * dw, b * dw + (Wo - 1) * sw + 1, sw)
                        gxp[:, :, hs, ws] += gcols[:, :, a, b]
            gx = gxp[..., left_pad_w:]
            if unbatched:
                gx = gx[0]
        return (gx, gw.reshape(kernels.shape))

    return record("conv2d", (x, kernels), out, bwd)


def prelu(x: Tensor, alpha: Tensor, channel_axis: int = 1) -> Tensor:
    """PReLU with one slope per channel (``alpha`` of length x.shape[channel_axis]).

    A scalar ``alpha`` shares one slope across all elements.
    """
    x, alpha = as_tensor(x), as_tensor(alpha)
    xd = x.data
    if alpha.size == 1:
        a = alpha.data.reshape(())
    else:
        if alpha.size != xd.shape[channel_axis]:
            raise DimensionError(
                f"channel axis mismatch: {xd.shape[channel_axis]} channels, {alpha.size} slopes")
        bshape = [1] * xd.ndim
        bshape[channel_axis] = alpha.size
        a = alpha.data.reshape(bshape)
    neg = xd < 0
    out = np.where(neg, a * xd, xd)

    def bwd(g):
        gx = np.where(neg, a * g, g)
        contrib = np.where(neg, g * xd, 0.0)
        if alpha.size == 1:
            ga = np.array(contrib.sum()).reshape(alpha.shape)
        else:
            axes = tuple(i for i in range(xd.ndim) if i != channel_axis % xd.ndim)
            ga = contrib.sum(axis=axes).reshape(alpha.shape)
        return (gx, ga)

    return record("prelu", (x, alpha), out, bwd)


def weight_norm(direction: Tensor, gain: Tensor) -> Tensor:
    """Effective kernel ``gain[o] * direction[o] / ||direction[o]||``.

    The norm runs over every axis except the first (output channel).
    """
    direction, gain = as_tensor(direction), as_tensor(gain)
    v = direction.data
    O = v.shape[0]
    if gain.size != O:
        raise DimensionError(f"output axis mismatch: {O} channels, {gain.size} gains")
    flat = v.reshape(O, -1)
    norm = np.sqrt((flat * flat).sum(axis=1))
    if np.any(norm == 0.0):
        raise FloatingPointError("weight_norm: direction has a zero-norm output channel")
    bshape = (O,) + (1,) * (v.ndim - 1)
    g = gain.data.reshape(bshape)
    n = norm.reshape(bshape)
    out = g * v / n

    def bwd(grad):
        proj = (grad * v).reshape(O, -1).sum(axis=1).reshape(bshape)
        ggain = (proj / n).reshape(gain.shape)
        gdir = g / n * (grad - proj / (n * n) * v)
        return (gdir, ggain)

    return record("weight_norm", (direction, gain), out, bwd)


def dropout(x: Tensor, rate: float, rng: Union[np.random.Generator, int, None] = None,
            training: bool = True) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate); eval mode is identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if not isinstance(rng, np.random.Generator):
        rng = np.random.Generator(np.random.PCG64(rng))
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return record("dropout", (x,), x.data * mask, lambda g: (g * mask,))


def linear(x: Tensor, W: Tensor, b: Tensor = None) -> Tensor:
    """Affine map on the last axis: ``x @ W.T + b``."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2:
        raise DimensionError("W must be 2-d [d_out, d_in]")
    if x.shape[-1] != W.shape[1]:
        raise DimensionError(f"inner dimension mismatch: x has {x.shape[-1]}, W expects {W.shape[1]}")
    xd, wd = x.data, W.data
    out = xd @ wd.T
    inputs = [x, W]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[0],):
            raise DimensionError(f"bias must have shape ({W.shape[0]},), got {b.shape}")
        out = out + b.data
        inputs.append(b)

    def bwd(g):
        gx = g @ wd
        gW = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1])
        if b is None:
            return (gx, gW)
        return (gx, gW, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return record("linear", inputs, out, bwd)
