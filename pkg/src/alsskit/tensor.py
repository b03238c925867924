"""Minimal rank-4 tensor engine.

Feature maps are plain ``numpy`` arrays in ``(batch, channels, height, width)``
order, held in float64.  Every function here is pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "BnParams",
    "ConvParams",
    "adaptive_avg_pool",
    "as_tensor4",
    "batch_norm_infer",
    "channel_concat",
    "channel_shuffle",
    "channel_split",
    "conv2d",
    "finite_diff_grad",
    "max_pool2d",
    "shuffle_index",
    "sigmoid",
    "silu",
    "upsample_nearest",
]


def as_tensor4(x) -> np.ndarray:
    """Validate ``x`` as a (N, C, H, W) array and return it as float64."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 4:
        raise ValueError(f"expected a rank-4 tensor, got shape {a.shape}")
    if min(a.shape) < 1:
        raise ValueError(f"all dimensions must be >= 1, got {a.shape}")
    return a


@dataclass
class ConvParams:
    """Weights of one 2-D convolution.

    ``weights`` has shape ``(out_channels, in_channels // groups, kernel, kernel)``.
    """

    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    groups: int = 1
    weights: np.ndarray = field(default=None, repr=False)
    bias: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )
        shape = (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)
        if self.weights is None:
            self.weights = np.zeros(shape)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(shape)
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64).reshape(self.out_channels)

    @property
    def num_params(self) -> int:
        return self.weights.size + (0 if self.bias is None else self.bias.size)


@dataclass
class BnParams:
    """Inference-mode batch-norm statistics and affine terms."""

    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-3

    def __post_init__(self):
        for name in ("scale", "shift", "running_mean", "running_var"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).ravel())
        n = self.scale.size
        if any(v.size != n for v in (self.shift, self.running_mean, self.running_var)):
            raise ValueError("batch-norm vectors must share one length")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")

    @classmethod
    def identity(cls, channels: int, eps: float = 1e-3) -> "BnParams":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels), eps)

    @property
    def channels(self) -> int:
        return self.scale.size

    @property
    def num_params(self) -> int:
        # running statistics are buffers, not parameters
        return 2 * self.channels


def _out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x, p: ConvParams) -> np.ndarray:
    """Grouped 2-D cross-correlation with zero padding."""
    x = as_tensor4(x)
    n, c, h, w = x.shape
    if c != p.in_channels:
        raise ValueError(f"input has {c} channels, conv expects {p.in_channels}")
    k, s, pad, g = p.kernel, p.stride, p.padding, p.groups
    oh, ow = _out_size(h, k, s, pad), _out_size(w, k, s, pad)
    if oh < 1 or ow < 1 or s < 1:
        raise ValueError(f"conv k={k} s={s} p={pad} yields empty output for {h}x{w}")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cin_g, cout_g = c // g, p.out_channels // g
    wts = p.weights.reshape(g, cout_g, cin_g, k, k)
    if k == 1:
        xs = x[:, :, : (oh - 1) * s + 1 : s, : (ow - 1) * s + 1 : s].reshape(n, g, cin_g, oh * ow)
        out = np.matmul(np.ascontiguousarray(wts[..., 0, 0]), np.ascontiguousarray(xs))
    elif cin_g == 1 and cout_g == 1:
        # depthwise: accumulate kernel taps, no im2col copy
        out = np.zeros((n, c, oh, ow))
        for i in range(k):
            for j in range(k):
                tap = x[:, :, i : i + (oh - 1) * s + 1 : s, j : j + (ow - 1) * s + 1 : s]
                out += tap * wts[:, 0, 0, i, j][None, :, None, None]
    else:
        # one (cout x cin) @ (cin x pixels) product per kernel tap
        wk = np.ascontiguousarray(wts.transpose(3, 4, 0, 1, 2))
        out = np.zeros((n, g, cout_g, oh * ow))
        for i in range(k):
            for j in range(k):
                tap = x[:, :, i : i + (oh - 1) * s + 1 : s, j : j + (ow - 1) * s + 1 : s]
                out += np.matmul(wk[i, j], np.ascontiguousarray(tap).reshape(n, g, cin_g, oh * ow))
    out = out.reshape(n, p.out_channels, oh, ow)
    if p.bias is not None:
        out = out + p.bias[None, :, None, None]
    return out


def batch_norm_infer(x, p: BnParams) -> np.ndarray:
    x = as_tensor4(x)
    if x.shape[1] != p.channels:
        raise ValueError(f"input has {x.shape[1]} channels, batch norm has {p.channels}")
    inv = p.scale / np.sqrt(p.running_var + p.eps)
    return (x - p.running_mean[None, :, None, None]) * inv[None, :, None, None] + p.shift[None, :, None, None]


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def silu(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x * sigmoid(x)


def max_pool2d(x, kernel: int, stride: int | None = None, padding: int = 0) -> np.ndarray:
    """Windowed maximum; padded cells are -inf and never win."""
    x = as_tensor4(x)
    stride = kernel if stride is None else stride
    h, w = x.shape[2:]
    oh, ow = _out_size(h, kernel, stride, padding), _out_size(w, kernel, stride, padding)
    if oh < 1 or ow < 1:
        raise ValueError(f"max pool k={kernel} s={stride} p={padding} yields empty output for {h}x{w}")
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    out = None
    for i in range(kernel):
        for j in range(kernel):
            tap = x[:, :, i : i + (oh - 1) * stride + 1 : stride, j : j + (ow - 1) * stride + 1 : stride]
            out = tap.copy() if out is None else np.maximum(out, tap)
    return out


def adaptive_avg_pool(x, out_h: int, out_w: int) -> np.ndarray:
    """Average pooling onto a fixed output grid.

    Bin ``i`` along an axis of length ``L`` covers ``[floor(i*L/o), ceil((i+1)*L/o))``,
    so the ``(H, 1)`` and ``(1, W)`` grids reduce to plain row and column means.
    """
    x = as_tensor4(x)
    h, w = x.shape[2:]
    if out_h < 1 or out_w < 1:
        raise ValueError("target dims must be >= 1")
    if out_h > h or out_w > w:
        raise ValueError(f"cannot pool {h}x{w} up to {out_h}x{out_w}")
    if out_h == h and out_w == 1:
        return x.mean(axis=3, keepdims=True)
    if out_h == 1 and out_w == w:
        return x.mean(axis=2, keepdims=True)
    out = np.empty(x.shape[:2] + (out_h, out_w))
    for i in range(out_h):
        r0, r1 = (i * h) // out_h, -((-(i + 1) * h) // out_h)
        for j in range(out_w):
            c0, c1 = (j * w) // out_w, -((-(j + 1) * w) // out_w)
            out[:, :, i, j] = x[:, :, r0:r1, c0:c1].mean(axis=(2, 3))
    return out


def upsample_nearest(x, factor: int = 2) -> np.ndarray:
    x = as_tensor4(x)
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return x.copy()
    return x.repeat(factor, axis=2).repeat(factor, axis=3)


def channel_split(x, first: int) -> tuple[np.ndarray, np.ndarray]:
    x = as_tensor4(x)
    if not 0 < first < x.shape[1]:
        raise ValueError(f"split point {first} outside (0, {x.shape[1]})")
    return x[:, :first].copy(), x[:, first:].copy()


def channel_concat(parts: Sequence[np.ndarray]) -> np.ndarray:
    parts = [as_tensor4(p) for p in parts]
    if not parts:
        raise ValueError("nothing to concatenate")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ValueError(f"cannot concatenate {p.shape} with {ref}")
    return np.concatenate(parts, axis=1)


def channel_shuffle(x, groups: int = 2) -> np.ndarray:
    """Interleave channel groups: (g, C/g) -> transpose -> flatten."""
    x = as_tensor4(x)
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ValueError(f"{c} channels not divisible into {groups} groups")
    return x.reshape(n, groups, c // groups, h, w).transpose(0, 2, 1, 3, 4).reshape(n, c, h, w)


def shuffle_index(channels: int, groups: int) -> np.ndarray:
    """Source channel for every output channel of :func:`channel_shuffle`."""
    if groups < 1 or channels % groups:
        raise ValueError(f"{channels} channels not divisible into {groups} groups")
    return np.arange(channels).reshape(groups, channels // groups).T.ravel()


def finite_diff_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=np.float64).ravel()
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = eps
        hi, lo = float(f(x + e)), float(f(x - e))
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise FloatingPointError(f"non-finite evaluation at coordinate {i}")
        g[i] = (hi - lo) / (2 * eps)
    return g
