"""Attention/convolution fusion block and its multi-scale gated feed-forward.

Layout of one block (pre-norm residual)::

    y   = x + ACFM(LN1(x))
    out = y + MSNN(LN2(y))

ACFM sums a global branch (channel attention with a C x C map, plus the
residual of its own input) and a local branch (1x1 conv, channel shuffle,
3x3x3 conv).  MSNN gates the sum of two dilated 3x3 convs with a ReLU'd
depthwise 3x3x3 path.

All forward functions accept plain arrays or autodiff Vars for both inputs
and parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from . import autodiff as ad
from . import tree
from .tensor_core import Conv3Spec, ConvSpec, ShapeError


@dataclass
class AcfmParams:
    qkv_point: ConvSpec
    qkv_depth: ConvSpec
    log_alpha: np.ndarray  # shape (1,); temperature = exp(log_alpha) > 0
    out_point: ConvSpec
    local_point: ConvSpec
    local_conv3: Conv3Spec
    shuffle_groups: int = 1

    @property
    def width(self) -> int:
        return self.out_point.out_ch

    @property
    def alpha(self) -> float:
        return float(np.exp(ad.value(self.log_alpha)).reshape(()))


@dataclass
class MsnnParams:
    in_point_low: ConvSpec
    depth3_low: Conv3Spec
    in_point_up: ConvSpec
    dil_n1: ConvSpec
    dil_n2: ConvSpec
    out_point: ConvSpec

    @property
    def hidden(self) -> int:
        return self.in_point_up.out_ch

    @property
    def dilations(self) -> Tuple[int, int]:
        return self.dil_n1.dilation[0], self.dil_n2.dilation[0]


@dataclass
class NormParams:
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 0.1  # variance floor; keeps near-constant positions from exploding


@dataclass
class CafBlockParams:
    ln1: NormParams
    acfm: AcfmParams
    ln2: NormParams
    msnn: MsnnParams

    @property
    def width(self) -> int:
        return len(self.ln1.gamma)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def default_shuffle_groups(c: int) -> int:
    """4 when it divides ``c``, otherwise the largest divisor of ``c`` below 4."""
    return next(g for g in (4, 3, 2, 1) if c % g == 0)


def kaiming_uniform(rng: np.random.Generator, shape, gain: float = 1.0, dtype=np.float32):
    fan_in = int(np.prod(shape[1:]))
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def make_conv(rng, in_ch, out_ch, k=1, stride=1, padding=0, dilation=1, groups=1,
              gain=1.0, dtype=np.float32) -> ConvSpec:
    w = kaiming_uniform(rng, (out_ch, in_ch // groups, k, k), gain, dtype)
    return ConvSpec(w, np.zeros(out_ch, dtype), stride, padding, dilation, groups)


def make_conv3(rng, in_ch, out_ch, groups=1, gain=1.0, dtype=np.float32) -> Conv3Spec:
    w = kaiming_uniform(rng, (out_ch, in_ch // groups, 3, 3, 3), gain, dtype)
    return Conv3Spec(w, np.zeros(out_ch, dtype), (1, 1, 1), groups)


def init_acfm(c: int, rng: np.random.Generator, shuffle_groups: Optional[int] = None,
              dtype=np.float32) -> AcfmParams:
    g = default_shuffle_groups(c) if shuffle_groups is None else shuffle_groups
    if c % g:
        raise ShapeError(f"width {c} not divisible by shuffle groups {g}", "channel")
    return AcfmParams(
        qkv_point=make_conv(rng, c, 3 * c, dtype=dtype),
        qkv_depth=make_conv(rng, 3 * c, 3 * c, k=3, padding=1, groups=3 * c, dtype=dtype),
        log_alpha=np.array([0.5 * np.log(c)], dtype=dtype),
        out_point=make_conv(rng, c, c, dtype=dtype),
        local_point=make_conv(rng, c, c, dtype=dtype),
        local_conv3=make_conv3(rng, c, c, dtype=dtype),
        shuffle_groups=g,
    )


def init_msnn(c: int, rng: np.random.Generator, hidden: Optional[int] = None,
              dilations: Tuple[int, int] = (2, 3), dtype=np.float32) -> MsnnParams:
    ch = 2 * c if hidden is None else hidden
    if ch < c:
        raise ShapeError(f"hidden width {ch} must be >= block width {c}", "hidden")
    n1, n2 = dilations
    return MsnnParams(
        in_point_low=make_conv(rng, c, ch, dtype=dtype),
        depth3_low=make_conv3(rng, ch, ch, groups=ch, dtype=dtype),
        in_point_up=make_conv(rng, c, ch, dtype=dtype),
        dil_n1=make_conv(rng, ch, ch, k=3, padding=n1, dilation=n1, dtype=dtype),
        dil_n2=make_conv(rng, ch, ch, k=3, padding=n2, dilation=n2, dtype=dtype),
        out_point=make_conv(rng, ch, c, dtype=dtype),
    )


def init_caf_block(c: int, rng: np.random.Generator, hidden: Optional[int] = None,
                   shuffle_groups: Optional[int] = None, dilations: Tuple[int, int] = (2, 3),
                   norm_eps: float = 0.1, dtype=np.float32) -> CafBlockParams:
    return CafBlockParams(
        ln1=NormParams(np.ones(c, dtype), np.zeros(c, dtype), norm_eps),
        acfm=init_acfm(c, rng, shuffle_groups, dtype),
        ln2=NormParams(np.ones(c, dtype), np.zeros(c, dtype), norm_eps),
        msnn=init_msnn(c, rng, hidden, dilations, dtype),
    )


def param_count(p) -> int:
    """Number of learnable scalars stored in ``p``."""
    return tree.count(p)


def cast(p, dtype):
    return tree.map_arrays(p, lambda _, a: np.asarray(a, dtype=dtype))


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def _check_width(x, c, who):
    if x.shape[1] != c:
        raise ShapeError(f"{who}: input has {x.shape[1]} channels, block width is {c}", "channel")


def attention_map(y, p: AcfmParams):
    """C x C channel attention map for each batch item, plus the values.

    Returns ``(A, V)`` with A of shape (n, c, c) and V of shape (n, c, h*w).
    """
    n, c, h, w = y.shape
    _check_width(y, p.width, "acfm_global")
    qkv = ad.conv(ad.conv(y, p.qkv_point), p.qkv_depth)
    q = ad.reshape(ad.slice_channels(qkv, 0, c), (n, c, h * w))
    k = ad.reshape(ad.slice_channels(qkv, c, 2 * c), (n, c, h * w))
    v = ad.reshape(ad.slice_channels(qkv, 2 * c, 3 * c), (n, c, h * w))
    logits = ad.matmul(q, ad.permute(k, (0, 2, 1)))
    logits = ad.div_scalar(logits, ad.exp(p.log_alpha))
    return ad.softmax_lastdim(logits), v


def acfm_global(y, p: AcfmParams):
    n, c, h, w = y.shape
    a, v = attention_map(y, p)
    att = ad.reshape(ad.matmul(a, v), (n, c, h, w))
    return ad.add(ad.conv(att, p.out_point), y)


def acfm_local(y, p: AcfmParams):
    _check_width(y, p.width, "acfm_local")
    z = ad.conv(y, p.local_point)
    z = ad.channel_shuffle(z, p.shuffle_groups)
    return ad.conv(z, p.local_conv3)


def acfm_forward(y, p: AcfmParams):
    return ad.add(acfm_global(y, p), acfm_local(y, p))


def msnn_forward(x, p: MsnnParams):
    _check_width(x, p.out_point.out_ch, "msnn_forward")
    low = ad.relu(ad.conv(ad.conv(x, p.in_point_low), p.depth3_low))
    u = ad.conv(x, p.in_point_up)
    up = ad.add(ad.conv(u, p.dil_n1), ad.conv(u, p.dil_n2))
    return ad.conv(ad.mul(low, up), p.out_point)


def caf_block_forward(x, p: CafBlockParams):
    _check_width(x, p.width, "caf_block_forward")
    y = ad.add(x, acfm_forward(ad.layer_norm_channels(x, p.ln1.gamma, p.ln1.beta, p.ln1.eps), p.acfm))
    return ad.add(y, msnn_forward(ad.layer_norm_channels(y, p.ln2.gamma, p.ln2.beta, p.ln2.eps), p.msnn))
