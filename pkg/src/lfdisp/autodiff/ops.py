"""Forward ops with hand-written adjoints.

Every op takes and returns :class:`Tensor` and preserves the input dtype.
Convolutions use cross-correlation (no kernel flip) and zero padding.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .tensor import Tensor, make_result


@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    in_channels: int
    out_channels: int
    dilation: int = 1
    stride: int = 1
    padding: int = 0
    has_bias: bool = False

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be an odd positive integer, got {self.kernel}")
        if self.dilation < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError("dilation and stride must be >= 1 and padding >= 0")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")

    @property
    def effective_kernel(self) -> int:
        return self.kernel + (self.kernel - 1) * (self.dilation - 1)

    @classmethod
    def same(cls, kernel: int, in_channels: int, out_channels: int, dilation: int = 1,
             has_bias: bool = False) -> "ConvSpec":
        """Stride-1 spec whose padding keeps the spatial size unchanged."""
        k_eff = kernel + (kernel - 1) * (dilation - 1)
        return cls(kernel, in_channels, out_channels, dilation=dilation, stride=1,
                   padding=(k_eff - 1) // 2, has_bias=has_bias)

    def output_size(self, h: int, w: int):
        k_eff = self.effective_kernel
        return ((h + 2 * self.padding - k_eff) // self.stride + 1,
                (w + 2 * self.padding - k_eff) // self.stride + 1)


def _check_input(x: Tensor, channels: int, what: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{what}: input must be (batch, channels, height, width), got rank {x.ndim}")
    if x.shape[1] != channels:
        raise ValueError(f"{what}: input channels {x.shape[1]} != expected in_channels {channels}")


def _output_extent(spec: ConvSpec, h: int, w: int, what: str):
    ho, wo = spec.output_size(h, w)
    if ho < 1 or wo < 1:
        raise ValueError(
            f"{what}: output extent {ho}x{wo} < 1 (input {h}x{w}, effective kernel "
            f"{spec.effective_kernel}, padding {spec.padding})")
    return ho, wo


def _pad(a: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p)))


def _tap(a: np.ndarray, i: int, j: int, spec: ConvSpec, ho: int, wo: int):
    d, s = spec.dilation, spec.stride
    return (slice(None), slice(None),
            slice(i * d, i * d + s * (ho - 1) + 1, s),
            slice(j * d, j * d + s * (wo - 1) + 1, s))


def _im2col(xp: np.ndarray, spec: ConvSpec, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    k = spec.kernel
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[_tap(xp, i, j, spec, ho, wo)]
    return cols.reshape(n, c * k * k, ho * wo)


def _col2im(cols: np.ndarray, shape, spec: ConvSpec, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = shape
    k, p = spec.kernel, spec.padding
    cols = cols.reshape(n, c, k, k, ho, wo)
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[_tap(dxp, i, j, spec, ho, wo)] += cols[:, :, i, j]
    if p:
        dxp = dxp[:, :, p:p + h, p:p + w]
    return dxp


def _is_pointwise(spec: ConvSpec) -> bool:
    return spec.kernel == 1 and spec.padding == 0 and spec.stride == 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           spec: Optional[ConvSpec] = None) -> Tensor:
    """2-D (dilated, strided) cross-correlation with zero padding.

    ``weight`` is (out_channels, in_channels, k, k). Without ``spec`` the
    kernel is applied with stride 1, no dilation and no padding.
    """
    o, ci, kh, kw = weight.shape
    if spec is None:
        spec = ConvSpec(kh, ci, o, has_bias=bias is not None)
    _check_input(x, spec.in_channels, "conv2d")
    if weight.shape != (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel):
        raise ValueError(
            f"conv2d: weight shape {weight.shape} != expected "
            f"{(spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({spec.out_channels},)")
    n, c, h, w = x.shape
    ho, wo = _output_extent(spec, h, w, "conv2d")
    w2 = weight.data.reshape(o, -1)
    if _is_pointwise(spec):
        cols = x.data.reshape(n, c, h * w)
    else:
        cols = _im2col(_pad(x.data, spec.padding), spec, ho, wo)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, o, ho, wo)

    def backward(g: np.ndarray):
        g2 = g.reshape(n, o, ho * wo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)
            if _is_pointwise(spec):
                gx = gcols.reshape(x.shape)
            else:
                gx = _col2im(gcols, x.shape, spec, ho, wo)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "conv2d")


def depthwise_conv2d(x: Tensor, weight: Tensor, spec: ConvSpec) -> Tensor:
    """Per-channel spatial convolution; ``weight`` is (channels, 1, k, k)."""
    _check_input(x, spec.in_channels, "depthwise_conv2d")
    c = spec.in_channels
    k = spec.kernel
    if weight.shape != (c, 1, k, k):
        raise ValueError(f"depthwise_conv2d: weight shape {weight.shape} != expected {(c, 1, k, k)}")
    n, _, h, w = x.shape
    ho, wo = _output_extent(spec, h, w, "depthwise_conv2d")
    if spec.stride == 1:
        return _depthwise_flat(x, weight, spec, ho, wo)
    xp = _pad(x.data, spec.padding)
    wd = weight.data[:, 0]
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    tmp = np.empty_like(out)
    for i in range(k):
        for j in range(k):
            np.multiply(xp[_tap(xp, i, j, spec, ho, wo)], wd[None, :, i, j, None, None], out=tmp)
            out += tmp

    def backward(g: np.ndarray):
        gx = gw = None
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            for i in range(k):
                for j in range(k):
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[_tap(xp, i, j, spec, ho, wo)])
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    np.multiply(g, wd[None, :, i, j, None, None], out=tmp)
                    gxp[_tap(gxp, i, j, spec, ho, wo)] += tmp
            p = spec.padding
            gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        return gx, gw

    return make_result(out, (x, weight), backward, "depthwise_conv2d")


def _depthwise_shifts(a: np.ndarray, wk: np.ndarray, d: int, p: int) -> np.ndarray:
    # Stride-1 depthwise correlation of ``a`` (n, c, h, w) with ``wk`` (c, k, k).
    # With the padded image flattened row-major every tap is a contiguous
    # shift; outputs are computed on the padded row pitch, then cropped.
    n, c, h, w = a.shape
    k = wk.shape[-1]
    ap = _pad(a, p)
    hp, wp = ap.shape[2:]
    ho, wo = hp - (k - 1) * d, wp - (k - 1) * d
    af = ap.reshape(n, c, hp * wp)
    length = ho * wp - (k - 1) * d
    cols = np.empty((n, c, k * k, length), dtype=a.dtype)
    for i in range(k):
        for j in range(k):
            off = i * d * wp + j * d
            cols[:, :, i * k + j] = af[:, :, off:off + length]
    acc = np.zeros((n, c, ho * wp), dtype=a.dtype)
    acc[:, :, :length] = np.matmul(wk.reshape(1, c, 1, k * k).astype(a.dtype), cols)[:, :, 0]
    return np.ascontiguousarray(acc.reshape(n, c, ho, wp)[:, :, :, :wo])


def _depthwise_flat(x: Tensor, weight: Tensor, spec: ConvSpec, ho: int, wo: int) -> Tensor:
    n, c, h, w = x.shape
    k, d, p = spec.kernel, spec.dilation, spec.padding
    wk = weight.data[:, 0]
    out = _depthwise_shifts(x.data, wk, d, p)

    def backward(g: np.ndarray):
        gx = gw = None
        if weight.requires_grad:
            xp = _pad(x.data, p)
            wp = xp.shape[3]
            xf = xp.reshape(n, c, -1)
            length = ho * wp - (k - 1) * d
            gfull = np.zeros((n, c, ho, wp), dtype=g.dtype)
            gfull[:, :, :, :wo] = g
            gf = gfull.reshape(n, c, ho * wp)[:, :, :length]
            gw = np.empty_like(weight.data)
            for i in range(k):
                for j in range(k):
                    off = i * d * wp + j * d
                    gw[:, 0, i, j] = np.einsum("ncl,ncl->c", gf, xf[:, :, off:off + length])
        if x.requires_grad:
            # The input adjoint is the same correlation with a flipped kernel.
            q = (k - 1) * d - p
            if q >= 0:
                gx = _depthwise_shifts(g, wk[:, ::-1, ::-1], d, q)
            else:
                gx = _depthwise_shifts(g, wk[:, ::-1, ::-1], d, 0)[:, :, -q:-q + h, -q:-q + w]
        return gx, gw

    return make_result(out, (x, weight), backward, "depthwise_conv2d")


def depthwise_separable_conv(x: Tensor, depthwise_weight: Tensor, pointwise_weight: Tensor,
                             spec: ConvSpec) -> Tensor:
    """Depthwise k x k convolution followed by a 1 x 1 channel mix.

    ``spec`` describes the layer as a whole: its kernel, dilation, stride
    and padding apply to the depthwise stage, its channel counts to the
    pointwise stage.
    """
    c_in, c_out = spec.in_channels, spec.out_channels
    if pointwise_weight.shape != (c_out, c_in, 1, 1):
        raise ValueError(
            f"depthwise_separable_conv: pointwise weight shape {pointwise_weight.shape} "
            f"!= expected {(c_out, c_in, 1, 1)}")
    dw_spec = ConvSpec(spec.kernel, c_in, c_in, dilation=spec.dilation, stride=spec.stride,
                       padding=spec.padding)
    mid = depthwise_conv2d(x, depthwise_weight, dw_spec)
    return conv2d(mid, pointwise_weight, None, ConvSpec(1, c_in, c_out))


def separable_weight_count(c_in: int, c_out: int, k: int) -> int:
    return c_in * k * k + c_in * c_out


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics of one BN layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5
    training: bool = True

    @classmethod
    def create(cls, gamma: Tensor, beta: Tensor, momentum: float = 0.1,
               epsilon: float = 1e-5) -> "BatchNormState":
        c = gamma.shape[0]
        return cls(gamma, beta, np.zeros(c, dtype=np.float64), np.ones(c, dtype=np.float64),
                   momentum=momentum, epsilon=epsilon)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batch_norm(x: Tensor, state: BatchNormState) -> Tensor:
    """Batch normalization over (batch, height, width) per channel.

    Training mode normalizes with batch statistics and updates the running
    estimates (unbiased variance); inference mode reads running statistics
    only.
    """
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise ValueError(
            f"batch_norm: input channels {x.shape[1] if x.ndim == 4 else x.shape} "
            f"!= state channels {state.channels}")
    n, c, h, w = x.shape
    gamma = state.gamma.data.reshape(1, c, 1, 1)
    beta = state.beta.data.reshape(1, c, 1, 1)
    dt = x.dtype
    if state.training:
        m = n * h * w
        if m < 2:
            raise ValueError("batch_norm: training mode needs batch*height*width >= 2")
        mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mean
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv_std = (1.0 / np.sqrt(var + state.epsilon)).astype(dt)
        xhat = xc * inv_std
        mom = state.momentum
        state.running_mean = (1 - mom) * state.running_mean + mom * mean.reshape(c).astype(np.float64)
        state.running_var = (1 - mom) * state.running_var + mom * var.reshape(c).astype(np.float64) * (m / (m - 1))
        out = xhat * gamma + beta

        def backward(g: np.ndarray):
            ggamma = (g * xhat).sum(axis=(0, 2, 3)) if state.gamma.requires_grad else None
            gbeta = g.sum(axis=(0, 2, 3)) if state.beta.requires_grad else None
            gx = None
            if x.requires_grad:
                gxhat = g * gamma
                s1 = gxhat.mean(axis=(0, 2, 3), keepdims=True)
                s2 = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                gx = inv_std * (gxhat - s1 - xhat * s2)
            return gx, ggamma, gbeta
    else:
        rm = state.running_mean.astype(dt).reshape(1, c, 1, 1)
        inv_std = (1.0 / np.sqrt(state.running_var + state.epsilon)).astype(dt).reshape(1, c, 1, 1)
        xhat = (x.data - rm) * inv_std
        out = xhat * gamma + beta

        def backward(g: np.ndarray):
            ggamma = (g * xhat).sum(axis=(0, 2, 3)) if state.gamma.requires_grad else None
            gbeta = g.sum(axis=(0, 2, 3)) if state.beta.requires_grad else None
            gx = g * gamma * inv_std if x.requires_grad else None
            return gx, ggamma, gbeta

    return make_result(out.astype(dt, copy=False), (x, state.gamma, state.beta), backward, "batch_norm")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.maximum(x.data, 0, dtype=x.dtype)

    def backward(g: np.ndarray):
        return (g * mask,)

    return make_result(out, (x,), backward, "relu")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def backward(g: np.ndarray):
        return g, g

    return make_result(a.data + b.data, (a, b), backward, "add")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channels by default)."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat: nothing to concatenate")
    sizes: List[int] = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def backward(g: np.ndarray):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return parts

    return make_result(out, tensors, backward, "concat")


def scale(x: Tensor, factor: float) -> Tensor:
    def backward(g: np.ndarray):
        return (g * factor,)

    return make_result((x.data * factor).astype(x.dtype, copy=False), (x,), backward, "scale")


def total(x: Tensor) -> Tensor:
    """Sum of every element, as a scalar tensor."""
    shape = x.shape

    def backward(g: np.ndarray):
        return (np.broadcast_to(g.reshape(()), shape).astype(x.dtype),)

    return make_result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward, "sum")
