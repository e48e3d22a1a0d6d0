"""Parameterised primitives: convolutions, norms, activations, resampling.

All spatial tensors are channels-last, ``[B, H, W, C]``. Convolution weights
are stored as ``[k_h, k_w, C_in / groups, C_out]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .numerics import (
    ContractError, DimensionError, Tensor, _make, _tracked, add, as_tensor,
    gelu, interp2d, matmul, relu, sigmoid,
)

__all__ = [
    "Conv2dSpec", "conv2d", "layer_norm", "batch_norm", "BatchNormState",
    "activation", "linear", "upsample_bilinear", "resize_bilinear",
    "resize_matrix", "conv_output_size",
]


@dataclass(frozen=True)
class Conv2dSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1

    def __post_init__(self):
        if isinstance(self.kernel, int):
            object.__setattr__(self, "kernel", (self.kernel, self.kernel))
        values = (self.in_channels, self.out_channels, *self.kernel, self.stride,
                  self.dilation, self.groups)
        if any(int(v) < 1 for v in values) or self.padding < 0:
            raise ContractError(f"conv spec fields must be positive: {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ContractError(
                f"channels {self.in_channels}->{self.out_channels} not divisible by groups={self.groups}")

    @property
    def is_channelwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    @property
    def is_pointwise(self) -> bool:
        return self.kernel == (1, 1) and self.groups == 1

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (*self.kernel, self.in_channels // self.groups, self.out_channels)

    @property
    def num_weights(self) -> int:
        kh, kw = self.kernel
        return kh * kw * (self.in_channels // self.groups) * self.out_channels

    def receptive_span(self) -> tuple[int, int]:
        kh, kw = self.kernel
        return self.dilation * (kh - 1) + 1, self.dilation * (kw - 1) + 1


def conv_output_size(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x, spec: Conv2dSpec, weight, bias=None) -> Tensor:
    """Grouped, dilated, strided cross-correlation over ``[B, H, W, C_in]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    B, H, W, C = x.shape
    if C != spec.in_channels:
        raise DimensionError(f"conv2d expects {spec.in_channels} input channels, got {C}")
    if weight.shape != spec.weight_shape:
        raise DimensionError(f"conv2d weight shape {weight.shape} != {spec.weight_shape}")
    kh, kw = spec.kernel
    s, p, d, G = spec.stride, spec.padding, spec.dilation, spec.groups
    Ho = conv_output_size(H, kh, s, p, d)
    Wo = conv_output_size(W, kw, s, p, d)
    if Ho < 1 or Wo < 1:
        raise ContractError(f"conv2d output would be empty for input {H}x{W} and {spec}")

    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    offsets = [(u * d, v * d) for u in range(kh) for v in range(kw)]

    def window(arr, du, dv):
        return arr[:, du:du + s * (Ho - 1) + 1:s, dv:dv + s * (Wo - 1) + 1:s, :]

    if spec.is_channelwise:
        w = weight.data.reshape(kh * kw, C)
        out = np.zeros((B, Ho, Wo, C), dtype=x.dtype)
        for k, (du, dv) in enumerate(offsets):
            out += window(xp, du, dv) * w[k]

        def _bw(g):
            gx = gw = None
            if _tracked(x):
                gxp = np.zeros_like(xp)
                for k, (du, dv) in enumerate(offsets):
                    window(gxp, du, dv)[...] += g * w[k]
                gx = gxp[:, p:p + H, p:p + W, :] if p else gxp
            if _tracked(weight):
                gw = np.stack([(g * window(xp, du, dv)).sum(axis=(0, 1, 2)) for du, dv in offsets])
                gw = gw.reshape(weight.shape)
            return gx, gw
    else:
        K = kh * kw
        Cg, Co = C // G, spec.out_channels
        Cog = Co // G
        N = B * Ho * Wo
        if K == 1 and s == 1 and not p:
            cols = xp.reshape(N, 1, C)
        else:
            cols = np.stack([window(xp, du, dv) for du, dv in offsets], axis=3).reshape(N, K, C)
        w = weight.data.reshape(K, Cg, G, Cog)
        if G == 1:
            cols_g = cols.reshape(1, N, K * Cg)
        else:
            cols_g = cols.reshape(N, K, G, Cg).transpose(2, 0, 1, 3).reshape(G, N, K * Cg)
        w_g = w.transpose(2, 0, 1, 3).reshape(G, K * Cg, Cog)
        out_g = np.matmul(cols_g, w_g)
        out = out_g.transpose(1, 0, 2).reshape(B, Ho, Wo, Co)

        def _bw(g):
            gx = gw = None
            g_g = g.reshape(N, G, Cog).transpose(1, 0, 2)
            if _tracked(x):
                gcols = np.matmul(g_g, w_g.transpose(0, 2, 1))
                gcols = gcols.reshape(G, N, K, Cg).transpose(1, 2, 0, 3).reshape(B, Ho, Wo, K, C)
                if K == 1 and s == 1 and not p:
                    gx = gcols.reshape(B, H, W, C)
                else:
                    gxp = np.zeros_like(xp)
                    for k, (du, dv) in enumerate(offsets):
                        window(gxp, du, dv)[...] += gcols[:, :, :, k, :]
                    gx = gxp[:, p:p + H, p:p + W, :] if p else gxp
            if _tracked(weight):
                gw_g = np.matmul(cols_g.transpose(0, 2, 1), g_g)
                gw = gw_g.reshape(G, K, Cg, Cog).transpose(1, 2, 0, 3).reshape(weight.shape)
            return gx, gw

    y = _make(out, (x, weight), _bw)
    if bias is not None:
        y = add(y, bias)
    return y


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise each token over its last (channel) axis, then scale and shift."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm affine shape mismatch for channels {x.shape[-1]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data
    red = tuple(range(x.ndim - 1))

    def _bw(g):
        gx = None
        if _tracked(x):
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).sum(axis=red) if _tracked(gamma) else None
        gb = g.sum(axis=red) if _tracked(beta) else None
        return gx, gg, gb

    return _make(out, (x, gamma, beta), _bw)


class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=None):
        dtype = dtype or np.float32
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x, gamma, beta, state: BatchNormState, mode: str = "train") -> Tensor:
    """Batch normalisation over the batch and spatial axes of ``[B, ..., C]``.

    In ``train`` mode the batch statistics are used and the running
    estimates move towards them by ``state.momentum``. The running variance
    tracks the biased batch variance, so a stream of identical batches makes
    train and eval outputs converge.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    red = tuple(range(x.ndim - 1))
    if mode == "train":
        if x.shape[0] < 2:
            raise ContractError("batch_norm in train mode needs a batch of at least 2")
        mu = x.data.mean(axis=red)
        centered = x.data - mu
        var = (centered * centered).mean(axis=red)
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mu).astype(state.running_mean.dtype)
        state.running_var = ((1 - m) * state.running_var + m * var).astype(state.running_var.dtype)
    elif mode == "eval":
        mu = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
        centered = x.data - mu
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    inv = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data
    train = mode == "train"

    def _bw(g):
        gx = None
        if _tracked(x):
            gh = g * gamma.data
            if train:
                gx = inv * (gh - gh.mean(axis=red) - xhat * (gh * xhat).mean(axis=red))
            else:
                gx = gh * inv
        gg = (g * xhat).sum(axis=red) if _tracked(gamma) else None
        gb = g.sum(axis=red) if _tracked(beta) else None
        return gx, gg, gb

    return _make(out, (x, gamma, beta), _bw)


_ACTIVATIONS = {"relu": relu, "gelu": gelu, "sigmoid": sigmoid}


def activation(x, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


def linear(x, weight, bias=None) -> Tensor:
    """Affine map over the last axis; ``weight`` is ``[C_in, C_out]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    y = matmul(x.reshape(-1, x.shape[-1]), weight)
    if bias is not None:
        y = add(y, bias)
    return y.reshape(*lead, weight.shape[1])


@lru_cache(maxsize=None)
def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic ``[n_out, n_in]`` bilinear weights, half-pixel centres.

    Matches the align-corners=false convention: output index ``o`` samples
    the input at ``(o + 0.5) * n_in / n_out - 0.5``, clamped to the edges.
    """
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    m.setflags(write=False)
    return m


def resize_bilinear(x, height: int, width: int) -> Tensor:
    x = as_tensor(x)
    _, H, W, _ = x.shape
    if (H, W) == (height, width):
        return x
    return interp2d(x, resize_matrix(H, height), resize_matrix(W, width))


def upsample_bilinear(x, factor: int) -> Tensor:
    if factor < 1 or int(factor) != factor:
        raise ContractError(f"upsample factor must be an integer >= 1, got {factor}")
    x = as_tensor(x)
    _, H, W, _ = x.shape
    return resize_bilinear(x, H * factor, W * factor)
