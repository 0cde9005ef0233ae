"""Neural layers over 5-D activations (batch, channel, depth, height, width).

3-D convolution is cross-correlation (no kernel flip), the deep-learning
convention.  The trunk uses k=3 same-padding convolutions; projections
use k=1.  Backward helpers are module-level functions so verification
harnesses can substitute deliberately broken versions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor

__all__ = [
    "Conv3dParams",
    "BatchNormParams",
    "conv3d",
    "conv1x1x1",
    "max_pool3d",
    "trilinear_resample",
    "batch_norm",
    "he_uniform",
    "make_conv3d_params",
    "make_batch_norm_params",
]


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise DimensionError(f"expected scalar or 3 per-axis values, got {v!r}")
    return t


@dataclass
class Conv3dParams:
    """Weights for a 3-D convolution.

    weight has shape (out_channels, in_channels, k, k, k); bias, when
    present, has shape (out_channels,).  stride and padding are per
    spatial axis.
    """

    weight: Tensor
    bias: Tensor | None
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        self.stride = _triple(self.stride)
        self.padding = _triple(self.padding)
        if self.weight.ndim != 5:
            raise DimensionError(f"conv weight must be 5-D, got {self.weight.shape}")
        if any(s < 1 for s in self.stride) or any(p < 0 for p in self.padding):
            raise DimensionError("stride must be positive and padding non-negative")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> tuple[int, int, int]:
        return self.weight.shape[2:]


def he_uniform(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def make_conv3d_params(
    in_channels: int,
    out_channels: int,
    kernel: int,
    rng: np.random.Generator,
    stride: int | tuple[int, int, int] = 1,
    padding: int | tuple[int, int, int] = 0,
    bias: bool = True,
) -> Conv3dParams:
    """He-uniform fan-in weights, zero bias."""
    k = int(kernel)
    fan_in = in_channels * k * k * k
    w = T.parameter(he_uniform((out_channels, in_channels, k, k, k), fan_in, rng))
    b = T.parameter(np.zeros(out_channels)) if bias else None
    return Conv3dParams(weight=w, bias=b, stride=_triple(stride), padding=_triple(padding))


def _conv3d_forward(xp: np.ndarray, w: np.ndarray, stride: tuple[int, int, int]) -> np.ndarray:
    if w.shape[2:] == (1, 1, 1):
        xs = xp[:, :, :: stride[0], :: stride[1], :: stride[2]]
        out = np.tensordot(xs, w[:, :, 0, 0, 0], axes=([1], [1]))
        return np.ascontiguousarray(np.moveaxis(out, -1, 1))
    win = sliding_window_view(xp, w.shape[2:], axis=(2, 3, 4))
    win = win[:, :, :: stride[0], :: stride[1], :: stride[2]]
    return np.einsum("bcdhwijk,ocijk->bodhw", win, w, optimize=True)


def _conv3d_grad_weight(xp: np.ndarray, gout: np.ndarray, kshape, stride) -> np.ndarray:
    if tuple(kshape) == (1, 1, 1):
        xs = xp[:, :, :: stride[0], :: stride[1], :: stride[2]]
        gw = np.tensordot(gout, xs, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        return gw[:, :, None, None, None]
    win = sliding_window_view(xp, kshape, axis=(2, 3, 4))
    win = win[:, :, :: stride[0], :: stride[1], :: stride[2]]
    return np.einsum("bcdhwijk,bodhw->ocijk", win, gout, optimize=True)


def _conv3d_grad_input(gout: np.ndarray, w: np.ndarray, xp_shape, stride) -> np.ndarray:
    gx = np.zeros(xp_shape)
    _, _, do, ho, wo = gout.shape
    k1, k2, k3 = w.shape[2:]
    sd, sh, sw = stride
    for i in range(k1):
        for j in range(k2):
            for k in range(k3):
                # (B, D, H, W, Cin) contribution of kernel tap (i, j, k)
                contrib = np.tensordot(gout, w[:, :, i, j, k], axes=([1], [0]))
                gx[
                    :,
                    :,
                    i : i + sd * do : sd,
                    j : j + sh * ho : sh,
                    k : k + sw * wo : sw,
                ] += np.moveaxis(contrib, -1, 1)
    return gx


def conv3d(x: Tensor, p: Conv3dParams) -> Tensor:
    """Strided cross-correlation over the three spatial axes.

    Output spatial extent per axis is floor((in + 2*pad - k)/stride) + 1.
    Gradients flow to the input, the weight, and the bias.
    """
    if x.ndim != 5:
        raise DimensionError(f"conv3d expects 5-D input, got {x.shape}")
    if x.shape[1] != p.in_channels:
        raise DimensionError(
            f"channel mismatch: input has {x.shape[1]}, weights expect {p.in_channels}"
        )
    pad = p.padding
    for ax in range(3):
        if x.shape[2 + ax] + 2 * pad[ax] < p.kernel[ax]:
            raise DimensionError(
                f"spatial extent {x.shape[2 + ax]} (+2*{pad[ax]} pad) admits no "
                f"placement of kernel extent {p.kernel[ax]}"
            )

    if pad != (0, 0, 0):
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad[0], pad[0]), (pad[1], pad[1]), (pad[2], pad[2])))
    else:
        xp = x.data
    out_data = _conv3d_forward(xp, p.weight.data, p.stride)
    if p.bias is not None:
        out_data = out_data + p.bias.data[None, :, None, None, None]

    weight, bias, stride = p.weight, p.bias, p.stride
    kshape = p.weight.shape[2:]

    def bwd(g):
        if bias is not None and bias.requires_grad:
            T._accum(bias, g.sum(axis=(0, 2, 3, 4)))
        if weight.requires_grad:
            T._accum(weight, _conv3d_grad_weight(xp, g, kshape, stride))
        if x.requires_grad:
            gxp = _conv3d_grad_input(g, weight.data, xp.shape, stride)
            if pad != (0, 0, 0):
                gxp = gxp[
                    :,
                    :,
                    pad[0] : gxp.shape[2] - pad[0],
                    pad[1] : gxp.shape[3] - pad[1],
                    pad[2] : gxp.shape[4] - pad[2],
                ]
            T._accum(x, gxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return T._make(out_data, "conv3d", parents, bwd)


def conv1x1x1(x: Tensor, p: Conv3dParams) -> Tensor:
    """Per-voxel linear map across channels; delegates to conv3d."""
    if p.kernel != (1, 1, 1):
        raise DimensionError(f"conv1x1x1 requires a 1x1x1 kernel, got {p.kernel}")
    if p.stride != (1, 1, 1) or p.padding != (0, 0, 0):
        raise DimensionError("conv1x1x1 requires stride 1 and no padding")
    return conv3d(x, p)


def max_pool3d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping per-window maximum; ties route the gradient to the
    first element in flattened window order."""
    if x.ndim != 5:
        raise DimensionError(f"max_pool3d expects 5-D input, got {x.shape}")
    w = int(window)
    b, c, d, h, wd = x.shape
    if d % w or h % w or wd % w:
        raise DimensionError(f"spatial extents {x.shape[2:]} not divisible by window {w}")
    do, ho, wo = d // w, h // w, wd // w
    blocks = x.data.reshape(b, c, do, w, ho, w, wo, w)
    blocks = np.ascontiguousarray(blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7)).reshape(
        b, c, do, ho, wo, w * w * w
    )
    arg = blocks.argmax(axis=-1)
    out_data = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        if not x.requires_grad:
            return
        gb = np.zeros((b, c, do, ho, wo, w * w * w))
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(b, c, do, ho, wo, w, w, w).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        T._accum(x, gb.reshape(b, c, d, h, wd))

    return T._make(out_data, "max_pool3d", (x,), bwd)


def _resample_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Align-corners source indices and weights for one axis.

    Returns (i0, i1, frac) so that out[t] = (1-frac)*x[i0] + frac*x[i1].
    """
    if n_out == 1 or n_in == 1:
        i0 = np.zeros(n_out, dtype=np.intp)
        return i0, i0.copy(), np.zeros(n_out)
    s = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.minimum(np.floor(s).astype(np.intp), n_in - 2)
    frac = s - i0
    return i0, i0 + 1, frac


def trilinear_resample(x: Tensor, target_spatial: tuple[int, int, int]) -> Tensor:
    """Align-corners trilinear resampling of a 5-D activation.

    Source coordinate for output index t is t*(in-1)/(out-1), or 0 when
    the output extent is 1.  Exact for fields linear in (z, y, x), and
    the identity when target extents equal the source extents.
    """
    if x.ndim != 5:
        raise DimensionError(f"trilinear_resample expects 5-D input, got {x.shape}")
    tgt = _triple(target_spatial)
    if any(t < 1 for t in tgt):
        raise DimensionError(f"target extents must be >= 1, got {tgt}")
    b, c, d, h, w = x.shape
    td, th, tw = tgt

    z0, z1, fz = _resample_axis(d, td)
    y0, y1, fy = _resample_axis(h, th)
    x0, x1, fx = _resample_axis(w, tw)

    corners = []
    for zi, wz in ((z0, 1.0 - fz), (z1, fz)):
        for yi, wy in ((y0, 1.0 - fy), (y1, fy)):
            for xi, wx in ((x0, 1.0 - fx), (x1, fx)):
                wgt = wz[:, None, None] * wy[None, :, None] * wx[None, None, :]
                corners.append((zi, yi, xi, wgt))

    out_data = np.zeros((b, c, td, th, tw))
    for zi, yi, xi, wgt in corners:
        out_data += wgt * x.data[:, :, zi[:, None, None], yi[None, :, None], xi[None, None, :]]

    def bwd(g):
        if not x.requires_grad:
            return
        gx = np.zeros(b * c * d * h * w)
        bc_base = (np.arange(b * c) * (d * h * w))[:, None]
        gflat = g.reshape(b * c, -1)
        for zi, yi, xi, wgt in corners:
            lin = (
                zi[:, None, None] * (h * w) + yi[None, :, None] * w + xi[None, None, :]
            ).reshape(-1)
            idx = (bc_base + lin[None, :]).reshape(-1)
            vals = (gflat * wgt.reshape(1, -1)).reshape(-1)
            gx += np.bincount(idx, weights=vals, minlength=gx.size)
        T._accum(x, gx.reshape(b, c, d, h, w))

    return T._make(out_data, "trilinear_resample", (x,), bwd)


@dataclass
class BatchNormParams:
    """Per-channel batch normalization state.

    scale/shift are learnable; running statistics track training-mode
    batch statistics with the configured momentum and drive inference
    mode.  Batch variance is the biased estimator throughout.
    """

    scale: Tensor
    shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    def __post_init__(self):
        if not (0.0 < self.momentum < 1.0):
            raise DimensionError(f"momentum must lie in (0,1), got {self.momentum}")
        if self.epsilon <= 0.0:
            raise DimensionError("epsilon must be positive")


def make_batch_norm_params(channels: int, momentum: float = 0.1, epsilon: float = 1e-5) -> BatchNormParams:
    return BatchNormParams(
        scale=T.parameter(np.ones(channels)),
        shift=T.parameter(np.zeros(channels)),
        running_mean=np.zeros(channels),
        running_var=np.ones(channels),
        momentum=momentum,
        epsilon=epsilon,
    )


def batch_norm(x: Tensor, p: BatchNormParams, training: bool) -> Tensor:
    """Normalize per channel over (batch, spatial) axes.

    Training mode normalizes by batch statistics and updates the running
    statistics in place; inference mode applies the affine map implied
    by the stored running statistics.
    """
    if x.ndim != 5:
        raise DimensionError(f"batch_norm expects 5-D input, got {x.shape}")
    ch = x.shape[1]
    if p.scale.shape != (ch,) or p.shift.shape != (ch,):
        raise DimensionError(
            f"channel mismatch: input has {ch}, parameters have {p.scale.shape[0]}"
        )
    scale5 = T.reshape(p.scale, (1, ch, 1, 1, 1))
    shift5 = T.reshape(p.shift, (1, ch, 1, 1, 1))
    axes = (0, 2, 3, 4)

    if training:
        mu = T.tmean(x, axes=axes, keepdims=True)
        centered = x - mu
        var = T.tmean(centered * centered, axes=axes, keepdims=True)
        inv_std = T.pow_const(var + p.epsilon, -0.5)
        out = centered * inv_std * scale5 + shift5
        m = p.momentum
        p.running_mean[...] = (1.0 - m) * p.running_mean + m * mu.data.reshape(ch)
        p.running_var[...] = (1.0 - m) * p.running_var + m * var.data.reshape(ch)
        return out

    inv = 1.0 / np.sqrt(p.running_var + p.epsilon)
    a = scale5 * Tensor(inv.reshape(1, ch, 1, 1, 1))
    bconst = Tensor((-p.running_mean * inv).reshape(1, ch, 1, 1, 1))
    return x * a + (shift5 + scale5 * bconst)
