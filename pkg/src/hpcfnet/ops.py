"""Neural-network operators on :class:`~hpcfnet.tensor.Tensor`.

All operators take and return (n, c, h, w) tensors and register their
backward rule on the tape.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import ShapeError, Tensor, concat, make_result


class SpecError(ValueError):
    """Raised for inconsistent layer specifications."""


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    padding: tuple[int, int] = (0, 0)
    dilation: int = 1
    groups: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        object.__setattr__(self, "padding", _pair(self.padding))
        if self.groups < 1 or self.in_channels % self.groups or self.out_channels % self.groups:
            raise SpecError(f"channels ({self.in_channels}, {self.out_channels}) "
                            f"not divisible by groups={self.groups}")
        if self.stride < 1 or self.dilation < 1:
            raise SpecError("stride and dilation must be >= 1")

    @classmethod
    def same(cls, in_channels, out_channels, kernel=3, dilation=1, groups=1):
        """Stride-1 spec whose padding preserves spatial size (odd kernels)."""
        kh, kw = _pair(kernel)
        return cls(in_channels, out_channels, (kh, kw), 1,
                   (dilation * (kh - 1) // 2, dilation * (kw - 1) // 2), dilation, groups)

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        (kh, kw), (ph, pw), d, s = self.kernel, self.padding, self.dilation, self.stride
        ho = (h + 2 * ph - d * (kh - 1) - 1) // s + 1
        wo = (w + 2 * pw - d * (kw - 1) - 1) // s + 1
        if ho < 1 or wo < 1:
            raise SpecError(f"non-positive output size {(ho, wo)} for input {(h, w)}")
        return ho, wo

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           spec: ConvSpec | None = None) -> Tensor:
    """Grouped, dilated 2-D cross-correlation (no kernel flip)."""
    n, c, h, w = x.shape
    if spec is None:
        spec = ConvSpec(c, weight.shape[0], weight.shape[2:])
    if c != spec.in_channels:
        raise SpecError(f"input has {c} channels, spec expects {spec.in_channels}")
    if weight.shape != spec.weight_shape:
        raise SpecError(f"weight shape {weight.shape} != expected {spec.weight_shape}")
    g = spec.groups
    (kh, kw), (ph, pw), d, s = spec.kernel, spec.padding, spec.dilation, spec.stride
    ho, wo = spec.output_size(h, w)
    cin_g, cout_g = c // g, spec.out_channels // g
    K, P = cin_g * kh * kw, ho * wo

    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    sn, sc, sh, sw = xp.strides
    win = as_strided(xp, shape=(n, c, kh, kw, ho, wo),
                     strides=(sn, sc, sh * d, sw * d, sh * s, sw * s), writeable=False)
    cols = win.reshape(n, g, K, P)
    wmat = weight.data.reshape(g, cout_g, K)
    if g == 1:
        out = np.matmul(wmat[0], cols[:, 0])
    else:
        out = np.matmul(wmat[None], cols)
    out = out.reshape(n, spec.out_channels, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def backward(grad):
        go = grad.reshape(n, g, cout_g, P)
        if g == 1:
            dw = np.matmul(go[:, 0], cols[:, 0].transpose(0, 2, 1)).sum(axis=0)[None]
            dcols = np.matmul(wmat[0].T, go[:, 0])[:, None]
        else:
            dw = np.matmul(go, cols.transpose(0, 1, 3, 2)).sum(axis=0)
            if cout_g == 1:
                dcols = wmat.reshape(1, g, K, 1) * go
            else:
                dcols = np.matmul(wmat.transpose(0, 2, 1)[None], go)
        dcols = dcols.reshape(n, c, kh, kw, ho, wo)
        dxp = np.zeros(xp.shape, dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i * d:i * d + s * (ho - 1) + 1:s, j * d:j * d + s * (wo - 1) + 1:s] += dcols[:, :, i, j]
        dx = dxp[:, :, ph:ph + h, pw:pw + w]
        db = grad.sum(axis=(0, 2, 3)) if bias is not None else None
        return dx, dw.reshape(weight.shape), db

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "conv2d")


@dataclass
class BNState:
    """Per-channel affine parameters and running statistics."""

    scale: Tensor
    shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, dtype=np.float64, momentum: float = 0.1, eps: float = 1e-5):
        return cls(Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
                   Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
                   np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype),
                   momentum, eps)

    @property
    def channels(self) -> int:
        return self.scale.shape[0]


def batch_norm(x: Tensor, state: BNState, mode: str = "train") -> Tensor:
    """Per-channel normalization; train mode also updates running stats."""
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise SpecError(f"batch_norm expects (n, {state.channels}, h, w), got {x.shape}")
    xd = x.data
    gamma = state.scale.data.reshape(1, -1, 1, 1)
    beta = state.shift.data.reshape(1, -1, 1, 1)
    if mode == "eval":
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (xd - state.running_mean.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
        out = gamma * xhat + beta

        def backward_eval(g):
            return (g * gamma * inv.reshape(1, -1, 1, 1),
                    (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

        return make_result(out, (x, state.scale, state.shift), backward_eval, "batch_norm")
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")

    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    mean = xd.mean(axis=(0, 2, 3))
    centered = xd - mean.reshape(1, -1, 1, 1)
    var = (centered * centered).mean(axis=(0, 2, 3))
    inv = (1.0 / np.sqrt(var + state.eps)).reshape(1, -1, 1, 1)
    xhat = centered * inv
    out = gamma * xhat + beta

    mom = state.momentum
    unbiased = var * (m / (m - 1)) if m > 1 else var
    state.running_mean[:] = (1 - mom) * state.running_mean + mom * mean
    state.running_var[:] = (1 - mom) * state.running_var + mom * unbiased

    def backward(g):
        dxhat = g * gamma
        s1 = dxhat.mean(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        dx = inv * (dxhat - s1 - xhat * s2)
        return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_result(out, (x, state.scale, state.shift), backward, "batch_norm")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    xd = x.data
    pos = xd >= 0
    out = np.where(pos, xd, slope * xd)
    return make_result(out, (x,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 / stride-2 max pooling.

    Odd extents are padded on the right/bottom by edge replication. Ties
    route the gradient to the first element in row-major window order.
    """
    n, c, h, w = x.shape
    xd = x.data
    ph, pw = h % 2, w % 2
    xp = np.pad(xd, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge") if (ph or pw) else xd
    H2, W2 = xp.shape[2] // 2, xp.shape[3] // 2
    win = xp.reshape(n, c, H2, 2, W2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, H2, W2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dwin = np.zeros((n, c, H2, W2, 4), dtype=g.dtype)
        np.put_along_axis(dwin, arg[..., None], g[..., None], axis=-1)
        dxp = dwin.reshape(n, c, H2, W2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * H2, 2 * W2)
        if ph:
            dxp[:, :, h - 1, :] += dxp[:, :, h, :]
        if pw:
            dxp[:, :, :, w - 1] += dxp[:, :, :, w]
        return (dxp[:, :, :h, :w],)

    return make_result(out, (x,), backward, "max_pool2d")


def _interp_matrix(size: int, factor: int, dtype) -> np.ndarray:
    """Linear interpolation weights, half-pixel centres (align_corners=False)."""
    out = size * factor
    src = (np.arange(out) + 0.5) / factor - 0.5
    src = np.clip(src, 0, size - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, size - 1)
    frac = src - i0
    A = np.zeros((out, size), dtype=dtype)
    A[np.arange(out), i0] += 1 - frac
    A[np.arange(out), i1] += frac
    return A


def upsample_bilinear(x: Tensor, factor: int = 2) -> Tensor:
    """Bilinear upsampling by an integer factor."""
    if factor == 1:
        return x
    n, c, h, w = x.shape
    Ah = _interp_matrix(h, factor, x.dtype)
    Aw = _interp_matrix(w, factor, x.dtype)
    out = np.matmul(Ah, np.matmul(x.data, Aw.T))

    def backward(g):
        return (np.matmul(Ah.T, np.matmul(g, Aw)),)

    return make_result(out, (x,), backward, "upsample_bilinear")


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, clamped so the output lies strictly inside (0, 1)."""
    xd = x.data
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)
    eps = np.finfo(xd.dtype).eps
    out = np.clip(out, eps, 1 - eps)
    return make_result(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def concat_channels(parts) -> Tensor:
    parts = list(parts)
    n, _, h, w = parts[0].shape
    for p in parts:
        if p.ndim != 4 or p.shape[0] != n or p.shape[2:] != (h, w):
            raise ShapeError(f"concat_channels: {p.shape} incompatible with batch {n} and spatial {(h, w)}")
    return concat(parts, axis=1)


def channel_pool(x: Tensor, mode: str = "avg") -> Tensor:
    """Mean or max over the channel axis, giving shape (n, 1, h, w)."""
    xd = x.data
    c = xd.shape[1]
    if mode == "avg":
        return make_result(xd.mean(axis=1, keepdims=True), (x,),
                           lambda g: (np.broadcast_to(g / c, xd.shape).copy(),), "channel_avg")
    if mode == "max":
        arg = xd.argmax(axis=1)[:, None]
        out = np.take_along_axis(xd, arg, axis=1)

        def backward(g):
            dx = np.zeros_like(xd)
            np.put_along_axis(dx, arg, g, axis=1)
            return (dx,)

        return make_result(out, (x,), backward, "channel_max")
    raise ValueError(f"unknown pooling mode {mode!r}")
