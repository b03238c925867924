"""Composite building blocks: CBS/CB, ALSS, LCA, CA, single-channel Focus, SPPF and the
decoupled detection head.

Each block is a pure forward function over a :class:`BlockParams` mapping.  Tensor names
follow ``<path>.conv`` / ``<path>.bn``; a path whose ``.bn`` entry is missing has been
fused and its conv carries a bias instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    BnParams,
    ConvParams,
    adaptive_avg_pool,
    as_tensor4,
    batch_norm_infer,
    channel_concat,
    channel_shuffle,
    channel_split,
    conv2d,
    max_pool2d,
    sigmoid,
    silu,
)

PART_A_MODES = {1: ("conv", "identity"), 2: ("conv", "pool_conv", "pool")}


class BlockParams(dict):
    """Ordered ``name -> ConvParams | BnParams`` mapping for one block instance."""

    def conv(self, path: str) -> ConvParams:
        return self[f"{path}.conv"]

    def bn(self, path: str) -> BnParams | None:
        return self.get(f"{path}.bn")

    def paths(self) -> list[str]:
        return [k[: -len(".conv")] for k in self if k.endswith(".conv")]

    def sub(self, prefix: str) -> "BlockParams":
        """Entries under ``prefix.`` with the prefix stripped."""
        n = len(prefix) + 1
        return BlockParams((k[n:], v) for k, v in self.items() if k.startswith(prefix + "."))


def block_param_count(params: BlockParams) -> int:
    """Weights + biases + BN scale/shift.  Running statistics are not counted."""
    return sum(v.num_params for v in params.values())


# ---------------------------------------------------------------------------
# parameter construction


def _rand_conv(rng, c1, c2, k, s=1, p=None, groups=1, bias=False) -> ConvParams:
    p = k // 2 if p is None else p
    fan_in = (c1 // groups) * k * k
    w = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(c2, c1 // groups, k, k))
    b = rng.normal(0.0, 0.1, size=c2) if bias else None
    return ConvParams(c1, c2, k, s, p, groups, w, b)


def _rand_bn(rng, c) -> BnParams:
    return BnParams(
        scale=rng.uniform(0.5, 1.5, c),
        shift=rng.normal(0.0, 0.1, c),
        running_mean=rng.normal(0.0, 0.1, c),
        running_var=rng.uniform(0.5, 1.5, c),
        eps=1e-3,
    )


def _add_conv_bn(params, path, rng, c1, c2, k, s=1, p=None, groups=1):
    params[f"{path}.conv"] = _rand_conv(rng, c1, c2, k, s, p, groups)
    params[f"{path}.bn"] = _rand_bn(rng, c2)


def _rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def init_conv_bn(c1: int, c2: int, k: int = 1, s: int = 1, p: int | None = None, groups: int = 1, rng=None):
    """Parameters for a CBS or CB block (bias-free conv followed by BN)."""
    params = BlockParams()
    _add_conv_bn(params, "cv", _rng(rng), c1, c2, k, s, p, groups)
    return params


def _conv_bn(x, params: BlockParams, path: str, act: bool = True):
    y = conv2d(x, params.conv(path))
    bn = params.bn(path)
    if bn is not None:
        y = batch_norm_infer(y, bn)
    return silu(y) if act else y


def cbs_forward(x, params: BlockParams) -> np.ndarray:
    """conv -> BN -> SiLU."""
    return _conv_bn(x, params, "cv", act=True)


def cb_forward(x, params: BlockParams) -> np.ndarray:
    """conv -> BN, no activation."""
    return _conv_bn(x, params, "cv", act=False)


# ---------------------------------------------------------------------------
# ALSS


@dataclass(frozen=True)
class AlssConfig:
    """Knobs of one ALSS block.

    ``alpha`` is the share of input channels routed through part A, ``beta`` the
    bottleneck width of branch B relative to its input.  ``rounding`` selects how the
    fractional channel counts are made integral ("floor" or "nearest").
    """

    in_channels: int
    out_channels: int
    alpha: float
    beta: float
    stride: int = 1
    part_a_mode: str = "conv"
    dw_repeats: int = 1
    shuffle_groups: int = 2
    part_a_kernel: int | None = None
    rounding: str = "floor"

    def __post_init__(self):
        if self.stride not in PART_A_MODES:
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.part_a_mode not in PART_A_MODES[self.stride]:
            raise ValueError(f"part_a_mode {self.part_a_mode!r} invalid for stride {self.stride}")
        if not (0 < self.alpha < 1 and 0 < self.beta < 1):
            raise ValueError("alpha and beta must lie in (0, 1)")
        if self.dw_repeats < 0:
            raise ValueError("dw_repeats must be >= 0")
        if self.rounding not in ("floor", "nearest"):
            raise ValueError(f"unknown rounding {self.rounding!r}")
        if self.in_channels < 2:
            raise ValueError("ALSS needs at least 2 input channels")
        if self.branch_b_out < 1:
            raise ValueError(
                f"out_channels={self.out_channels} leaves no room for branch B "
                f"after {self.split_channels} part-A channels"
            )
        if self.out_channels % self.shuffle_groups:
            raise ValueError(f"out_channels={self.out_channels} not divisible by shuffle_groups")

    def _round(self, v: float) -> int:
        return math.floor(v + 1e-9) if self.rounding == "floor" else int(round(v))

    @property
    def split_channels(self) -> int:
        return min(max(self._round(self.alpha * self.in_channels), 1), self.in_channels - 1)

    @property
    def mid_channels(self) -> int:
        return max(self._round(self.beta * (self.in_channels - self.split_channels)), 1)

    @property
    def branch_b_out(self) -> int:
        return self.out_channels - self.split_channels

    @property
    def a_kernel(self) -> int:
        if self.part_a_kernel is not None:
            return self.part_a_kernel
        return 1 if self.part_a_mode == "pool_conv" else 3


def init_alss(cfg: AlssConfig, rng=None) -> BlockParams:
    rng = _rng(rng)
    params = BlockParams()
    a, b_in, mid = cfg.split_channels, cfg.in_channels - cfg.split_channels, cfg.mid_channels
    if cfg.part_a_mode == "conv":
        _add_conv_bn(params, "a", rng, a, a, cfg.a_kernel, cfg.stride)
    elif cfg.part_a_mode == "pool_conv":
        _add_conv_bn(params, "a", rng, a, a, cfg.a_kernel, 1)
    _add_conv_bn(params, "b1", rng, b_in, mid, 3, cfg.stride)
    for i in range(cfg.dw_repeats):
        _add_conv_bn(params, f"dw{i}", rng, mid, mid, 3, 1, groups=mid)
    _add_conv_bn(params, "b3", rng, mid, cfg.branch_b_out, 3, 1)
    return params


def _alss(x, cfg: AlssConfig, params: BlockParams) -> np.ndarray:
    x = as_tensor4(x)
    if x.shape[1] != cfg.in_channels:
        raise ValueError(f"input has {x.shape[1]} channels, ALSS expects {cfg.in_channels}")
    xa, xb = channel_split(x, cfg.split_channels)
    mode = cfg.part_a_mode
    if mode in ("pool", "pool_conv"):
        xa = max_pool2d(xa, 2, 2)
    if mode in ("conv", "pool_conv"):
        xa = _conv_bn(xa, params, "a")
    yb = _conv_bn(xb, params, "b1")
    for i in range(cfg.dw_repeats):
        yb = _conv_bn(yb, params, f"dw{i}", act=False)
    yb = _conv_bn(yb, params, "b3")
    return channel_shuffle(channel_concat([xa, yb]), cfg.shuffle_groups)


def alss_forward(x, cfg: AlssConfig, params: BlockParams) -> np.ndarray:
    """Unit-stride ALSS: split, part A (conv or identity), bottleneck branch B, concat, shuffle."""
    if cfg.stride != 1:
        raise ValueError("alss_forward handles stride 1; use alss_down_forward")
    return _alss(x, cfg, params)


def alss_down_forward(x, cfg: AlssConfig, params: BlockParams) -> np.ndarray:
    """Downsampling ALSS.  Part A is a stride-2 conv, pool then conv, or pool alone."""
    if cfg.stride != 2:
        raise ValueError("alss_down_forward handles stride 2; use alss_forward")
    x = as_tensor4(x)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"downsampling ALSS needs even spatial dims, got {x.shape[2:]}")
    return _alss(x, cfg, params)


# ---------------------------------------------------------------------------
# attention


@dataclass(frozen=True)
class LcaConfig:
    channels: int
    transform_groups: int = 2
    use_norm: bool = False

    def __post_init__(self):
        if self.transform_groups < 1 or self.channels % self.transform_groups:
            raise ValueError(f"transform_groups={self.transform_groups} must divide channels={self.channels}")


def init_lca(cfg: LcaConfig, rng=None) -> BlockParams:
    """Per direction: depthwise 1x1 conv then grouped pointwise conv, both biased."""
    rng = _rng(rng)
    c, g = cfg.channels, cfg.transform_groups
    params = BlockParams()
    for d in ("h", "w"):
        params[f"{d}.dw.conv"] = _rand_conv(rng, c, c, 1, groups=c, bias=True)
        params[f"{d}.pw.conv"] = _rand_conv(rng, c, c, 1, groups=g, bias=not cfg.use_norm)
        if cfg.use_norm:
            params[f"{d}.pw.bn"] = _rand_bn(rng, c)
    return params


def _gate(z, params: BlockParams, d: str) -> np.ndarray:
    z = _conv_bn(z, params, f"{d}.dw", act=False)
    return sigmoid(_conv_bn(z, params, f"{d}.pw", act=False))


def lca_forward(x, cfg: LcaConfig, params: BlockParams) -> np.ndarray:
    """Directional pooling, independent per-direction gates, broadcast product."""
    x = as_tensor4(x)
    if x.shape[1] != cfg.channels:
        raise ValueError(f"input has {x.shape[1]} channels, LCA expects {cfg.channels}")
    h, w = x.shape[2:]
    gh = _gate(adaptive_avg_pool(x, h, 1), params, "h")  # (N, C, H, 1)
    gw = _gate(adaptive_avg_pool(x, 1, w), params, "w")  # (N, C, 1, W)
    return x * gh * gw


def init_ca(channels: int, reduction: int = 32, min_mid: int = 8, rng=None) -> BlockParams:
    rng = _rng(rng)
    mid = max(min_mid, channels // reduction)
    if mid < 1:
        raise ValueError("reduction leaves zero channels")
    params = BlockParams()
    params["cv1.conv"] = _rand_conv(rng, channels, mid, 1, bias=True)
    params["cv1.bn"] = _rand_bn(rng, mid)
    params["h.conv"] = _rand_conv(rng, mid, channels, 1, bias=True)
    params["w.conv"] = _rand_conv(rng, mid, channels, 1, bias=True)
    return params


def _hswish(x):
    return x * np.clip(x + 3.0, 0.0, 6.0) / 6.0


def ca_forward(x, params: BlockParams) -> np.ndarray:
    """Coordinate attention with a shared reduction over the concatenated descriptors."""
    x = as_tensor4(x)
    n, c, h, w = x.shape
    if params.conv("cv1").in_channels != c:
        raise ValueError(f"input has {c} channels, CA expects {params.conv('cv1').in_channels}")
    zh = adaptive_avg_pool(x, h, 1)
    zw = adaptive_avg_pool(x, 1, w).transpose(0, 1, 3, 2)
    y = _hswish(_conv_bn(np.concatenate([zh, zw], axis=2), params, "cv1", act=False))
    yh, yw = y[:, :, :h], y[:, :, h:].transpose(0, 1, 3, 2)
    gh = sigmoid(conv2d(yh, params.conv("h")))
    gw = sigmoid(conv2d(yw, params.conv("w")))
    return x * gh * gw


# ---------------------------------------------------------------------------
# stem, pyramid pooling, head


def focus_slice(x) -> np.ndarray:
    """Four parity sub-images of a single-channel map, stacked as (x00, x01, x10, x11)."""
    x = as_tensor4(x)
    if x.shape[1] != 1:
        raise ValueError(f"Focus expects a single-channel input, got {x.shape[1]} channels")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"Focus needs even spatial dims, got {x.shape[2:]}")
    return np.concatenate(
        [x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2], x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2]], axis=1
    )


def init_focus(c2: int, k: int = 6, s: int = 2, p: int = 2, rng=None) -> BlockParams:
    return init_conv_bn(4, c2, k, s, p, rng=rng)


def focus_forward(x, params: BlockParams) -> np.ndarray:
    return cbs_forward(focus_slice(x), params)


def init_sppf(c1: int, c2: int, k: int = 5, rng=None) -> BlockParams:
    rng = _rng(rng)
    c_ = c1 // 2
    params = BlockParams()
    _add_conv_bn(params, "cv1", rng, c1, c_, 1)
    _add_conv_bn(params, "cv2", rng, 4 * c_, c2, 1)
    return params


def sppf_forward(x, params: BlockParams, k: int = 5) -> np.ndarray:
    y = [_conv_bn(x, params, "cv1")]
    for _ in range(3):
        y.append(max_pool2d(y[-1], k, 1, k // 2))
    return _conv_bn(channel_concat(y), params, "cv2")


def init_detect(num_classes: int, channels: tuple[int, ...], reg_max: int = 16, rng=None) -> BlockParams:
    """Anchor-free decoupled head: a box branch and a class branch per scale, plus the
    fixed distribution-to-offset projection."""
    rng = _rng(rng)
    c2 = max(16, channels[0] // 4, reg_max * 4)
    c3 = max(channels[0], min(num_classes, 100))
    params = BlockParams()
    for i, c in enumerate(channels):
        _add_conv_bn(params, f"box{i}.0", rng, c, c2, 3)
        _add_conv_bn(params, f"box{i}.1", rng, c2, c2, 3)
        params[f"box{i}.2.conv"] = _rand_conv(rng, c2, 4 * reg_max, 1, bias=True)
        _add_conv_bn(params, f"cls{i}.0", rng, c, c3, 3)
        _add_conv_bn(params, f"cls{i}.1", rng, c3, c3, 3)
        params[f"cls{i}.2.conv"] = _rand_conv(rng, c3, num_classes, 1, bias=True)
    dfl = ConvParams(reg_max, 1, 1, weights=np.arange(reg_max, dtype=np.float64))
    params["dfl.conv"] = dfl
    return params


def detect_forward(xs, params: BlockParams) -> list[np.ndarray]:
    """Raw per-scale outputs: 4*reg_max distance logits followed by class logits."""
    out = []
    for i, x in enumerate(xs):
        box = _conv_bn(_conv_bn(x, params, f"box{i}.0"), params, f"box{i}.1")
        cls = _conv_bn(_conv_bn(x, params, f"cls{i}.0"), params, f"cls{i}.1")
        out.append(
            channel_concat(
                [_conv_bn(box, params, f"box{i}.2", act=False), _conv_bn(cls, params, f"cls{i}.2", act=False)]
            )
        )
    return out


# ---------------------------------------------------------------------------
# fusion


def fuse_conv_bn(conv: ConvParams, bn: BnParams) -> ConvParams:
    """Fold inference-mode BN into the preceding conv's weights and bias."""
    if bn.channels != conv.out_channels:
        raise ValueError("batch norm does not match conv output channels")
    inv = bn.scale / np.sqrt(bn.running_var + bn.eps)
    bias = conv.bias if conv.bias is not None else np.zeros(conv.out_channels)
    return ConvParams(
        conv.in_channels,
        conv.out_channels,
        conv.kernel,
        conv.stride,
        conv.padding,
        conv.groups,
        conv.weights * inv[:, None, None, None],
        (bias - bn.running_mean) * inv + bn.shift,
    )


def fuse_block(params: BlockParams) -> BlockParams:
    out = BlockParams()
    for name, v in params.items():
        if name.endswith(".bn"):
            path = name[: -len(".bn")]
            if f"{path}.conv" not in params:
                raise ValueError(f"batch norm {name!r} has no conv to fold into")
            continue
        if name.endswith(".conv") and f"{name[:-5]}.bn" in params:
            v = fuse_conv_bn(v, params[f"{name[:-5]}.bn"])
        out[name] = v
    return out
