"""Dense rank-4 tensor kernels.

Every value is a numpy array laid out as (batch, channel, height, width).
Kernels are pure: they never mutate their inputs, and they keep the input
dtype (float32 for training and inference, float64 for gradient checks).

Convolutions gather im2col columns for every kernel tap that can see real
input and issue one batched matmul per call.  The same gather drives the
vector-Jacobian products used by :mod:`fusiondet.autodiff`.
"""
from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence, Tuple

import numpy as np

Tensor4 = np.ndarray


class ShapeError(ValueError):
    """Raised when an operand's shape violates a kernel contract.

    ``dim`` names the offending dimension (e.g. ``"channel"``).
    """

    def __init__(self, message: str, dim: str = ""):
        super().__init__(message)
        self.dim = dim


def _pair(v, n=2) -> Tuple[int, ...]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * n
    v = tuple(int(i) for i in v)
    if len(v) != n:
        raise ShapeError(f"expected {n} values, got {v}", "hyperparameter")
    return v


def _check_finite(x: np.ndarray) -> np.ndarray:
    if __debug__ and not np.all(np.isfinite(x)):
        raise FloatingPointError("kernel produced non-finite values")
    return x


def as_tensor4(x) -> Tensor4:
    """Validate ``x`` as a Tensor4 and return it as a contiguous array."""
    x = np.ascontiguousarray(x)
    if x.ndim != 4:
        raise ShapeError(f"expected rank-4 (n, c, h, w), got shape {x.shape}", "rank")
    for name, size in zip(("batch", "channel", "height", "width"), x.shape):
        if size < 1:
            raise ShapeError(f"{name} dimension must be >= 1, got {size}", name)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float32)
    return x


@dataclass
class ConvSpec:
    """Weights and hyperparameters of a 2D convolution.

    ``weights`` has shape (out_ch, in_ch // groups, kh, kw).
    """

    weights: Any
    bias: Optional[Any] = None
    stride: Tuple[int, int] = (1, 1)
    padding: Tuple[int, int] = (0, 0)
    dilation: Tuple[int, int] = (1, 1)
    groups: int = 1

    def __post_init__(self):
        self.stride = _pair(self.stride)
        self.padding = _pair(self.padding)
        self.dilation = _pair(self.dilation)
        shape = tuple(self.weights.shape)
        if len(shape) != 4:
            raise ShapeError(f"conv2d weights must be rank 4, got {shape}", "rank")
        _validate_conv(shape, self.bias, self.stride, self.padding, self.dilation, self.groups)

    @property
    def out_ch(self) -> int:
        return int(self.weights.shape[0])

    @property
    def in_ch(self) -> int:
        return int(self.weights.shape[1]) * self.groups


@dataclass
class Conv3Spec:
    """Weights of a 3D convolution, shape (out_ch, in_ch // groups, kd, kh, kw)."""

    weights: Any
    bias: Optional[Any] = None
    padding: Tuple[int, int, int] = (1, 1, 1)
    groups: int = 1

    def __post_init__(self):
        self.padding = _pair(self.padding, 3)
        shape = tuple(self.weights.shape)
        if len(shape) != 5:
            raise ShapeError(f"conv3d weights must be rank 5, got {shape}", "rank")
        if shape[2:] != (3, 3, 3):
            raise ShapeError(f"conv3d kernel must be 3x3x3, got {shape[2:]}", "kernel")
        _validate_conv(shape, self.bias, (1, 1, 1), self.padding, (1, 1, 1), self.groups)

    @property
    def out_ch(self) -> int:
        return int(self.weights.shape[0])

    @property
    def in_ch(self) -> int:
        return int(self.weights.shape[1]) * self.groups


def _validate_conv(wshape, bias, stride, padding, dilation, groups):
    if not isinstance(groups, (int, np.integer)) or groups < 1:
        raise ShapeError(f"groups must be a positive integer, got {groups}", "groups")
    if wshape[0] % groups:
        raise ShapeError(f"out_ch {wshape[0]} not divisible by groups {groups}", "out_channel")
    if any(k < 1 for k in wshape[2:]):
        raise ShapeError(f"kernel dims must be >= 1, got {wshape[2:]}", "kernel")
    if any(s < 1 for s in stride):
        raise ShapeError(f"stride must be >= 1, got {stride}", "stride")
    if any(d < 1 for d in dilation):
        raise ShapeError(f"dilation must be >= 1, got {dilation}", "dilation")
    if any(p < 0 for p in padding):
        raise ShapeError(f"padding must be >= 0, got {padding}", "padding")
    if bias is not None and tuple(bias.shape) != (wshape[0],):
        raise ShapeError(f"bias shape {tuple(bias.shape)} != ({wshape[0]},)", "bias")


def conv_output_size(size: int, k: int, stride: int, pad: int, dil: int) -> int:
    return (size + 2 * pad - dil * (k - 1) - 1) // stride + 1


# ---------------------------------------------------------------------------
# N-d convolution core (2D and 3D share it)
# ---------------------------------------------------------------------------

def _conv_geometry(xshape, wshape, stride, padding, dilation, groups):
    n, c = xshape[:2]
    spatial = xshape[2:]
    oc, icg = wshape[:2]
    ks = wshape[2:]
    if c != icg * groups:
        raise ShapeError(
            f"input has {c} channels but weights expect {icg * groups} "
            f"(in_ch/groups={icg}, groups={groups})", "channel")
    if oc % groups:
        raise ShapeError(f"out_ch {oc} not divisible by groups {groups}", "out_channel")
    out = tuple(conv_output_size(s, k, st, p, d)
                for s, k, st, p, d in zip(spatial, ks, stride, padding, dilation))
    names = ("depth", "height", "width")[-len(spatial):]
    for name, o in zip(names, out):
        if o < 1:
            raise ShapeError(f"output {name} would be {o} < 1", name)
    return out


def _tap_slices(tap, out, stride, dilation):
    return tuple(slice(t * d, t * d + s * (o - 1) + 1, s)
                 for t, o, s, d in zip(tap, out, stride, dilation))


@functools.lru_cache(maxsize=1024)
def _live_taps(kernel, spatial, out, stride, padding, dilation):
    """Kernel taps that touch at least one non-padding input position.

    Taps reading only zero padding contribute exactly nothing, so skipping
    them leaves every result unchanged.
    """
    live = []
    for tap in itertools.product(*(range(k) for k in kernel)):
        ok = True
        for t, o, s, p, d, size in zip(tap, out, stride, padding, dilation, spatial):
            first, last = t * d, t * d + s * (o - 1)
            hits = range(first, last + 1, s)
            if not any(p <= r < p + size for r in hits):
                ok = False
                break
        if ok:
            live.append(tap)
    return tuple(live)


def _im2col(xg, taps, out, stride, dilation):
    """Gather (g, icg * taps, n * m) columns from padded grouped input."""
    n, g, icg = xg.shape[:3]
    m = int(np.prod(out))
    cols = np.empty((g, icg, len(taps), n, m), dtype=xg.dtype)
    for t, tap in enumerate(taps):
        patch = xg[(slice(None),) * 3 + _tap_slices(tap, out, stride, dilation)]
        cols[:, :, t] = patch.reshape(n, g, icg, m).transpose(1, 2, 0, 3)
    return cols.reshape(g, icg * len(taps), n * m)


def _prepare(x, w, stride, padding, dilation, groups):
    nsp = x.ndim - 2
    stride = _pair(stride if stride is not None else 1, nsp)
    padding = _pair(padding if padding is not None else 0, nsp)
    dilation = _pair(dilation if dilation is not None else 1, nsp)
    out = _conv_geometry(x.shape, w.shape, stride, padding, dilation, groups)
    taps = _live_taps(w.shape[2:], x.shape[2:], out, stride, padding, dilation)
    n = x.shape[0]
    icg = w.shape[1]
    if any(padding):
        xp = np.zeros(x.shape[:2] + tuple(s + 2 * p for s, p in zip(x.shape[2:], padding)), dtype=x.dtype)
        xp[(slice(None), slice(None)) + tuple(slice(p, p + s) for s, p in zip(x.shape[2:], padding))] = x
    else:
        xp = x
    xg = xp.reshape((n, groups, icg) + xp.shape[2:])
    return stride, padding, dilation, out, taps, xp, xg


@functools.lru_cache(maxsize=1024)
def _flat_taps(taps, kernel):
    return [int(np.ravel_multi_index(t, kernel)) for t in taps]


def _tap_weights(w, taps, groups):
    """(g, ocg, icg * taps) weight matrix restricted to ``taps``."""
    oc, icg = w.shape[:2]
    wk = w.reshape(oc, icg, -1)
    flat = _flat_taps(taps, w.shape[2:])
    return wk[:, :, flat].reshape(groups, oc // groups, icg * len(taps)), flat


def conv_nd(x, w, b=None, stride=None, padding=None, dilation=None, groups=1):
    """Grouped N-d cross-correlation with zero padding.

    ``x`` is (n, c, *spatial), ``w`` is (oc, c // groups, *kernel).
    """
    stride, padding, dilation, out, taps, xp, xg = _prepare(x, w, stride, padding, dilation, groups)
    n = x.shape[0]
    oc = w.shape[0]
    dtype = np.result_type(x.dtype, w.dtype)
    cols = _im2col(xg, taps, out, stride, dilation)
    wm, _ = _tap_weights(w, taps, groups)
    acc = np.matmul(wm.astype(dtype, copy=False), cols)  # (g, ocg, n * m)
    y = acc.reshape(oc, n, *out).swapaxes(0, 1)
    if b is not None:
        y = y + b.reshape((1, oc) + (1,) * len(out))
    return np.ascontiguousarray(y, dtype=dtype)


def conv_nd_backward(gy, x, w, stride, padding, dilation, groups, need_x=True):
    """Vector-Jacobian product of :func:`conv_nd`.

    Returns ``(grad_x, grad_w, grad_b)``; ``grad_x`` is None unless requested.
    """
    stride, padding, dilation, out, taps, xp, xg = _prepare(x, w, stride, padding, dilation, groups)
    n = x.shape[0]
    oc, icg = w.shape[:2]
    ocg = oc // groups
    m = int(np.prod(out))
    gm = gy.reshape(n, groups, ocg, m).transpose(1, 2, 0, 3).reshape(groups, ocg, n * m)
    cols = _im2col(xg, taps, out, stride, dilation)
    wm, flat = _tap_weights(w, taps, groups)
    gwm = np.matmul(gm, cols.swapaxes(-1, -2))  # (g, ocg, icg * taps)
    gw = np.zeros((oc, icg, int(np.prod(w.shape[2:]))), dtype=w.dtype)
    gw[:, :, flat] = gwm.reshape(oc, icg, len(taps))
    gb = gy.sum(axis=(0,) + tuple(range(2, gy.ndim)))
    gx = None
    if need_x:
        gcols = np.matmul(wm.swapaxes(-1, -2), gm).reshape(groups, icg, len(taps), n, m)
        gxp = np.zeros_like(xg)
        for t, tap in enumerate(taps):
            idx = (slice(None),) * 3 + _tap_slices(tap, out, stride, dilation)
            gxp[idx] += gcols[:, :, t].transpose(2, 0, 1, 3).reshape((n, groups, icg) + tuple(out))
        gxp = gxp.reshape(xp.shape)
        crop = tuple(slice(p, p + s) for p, s in zip(padding, x.shape[2:]))
        gx = np.ascontiguousarray(gxp[(slice(None), slice(None)) + crop])
    return gx, gw.reshape(w.shape), gb


# ---------------------------------------------------------------------------
# Public kernels
# ---------------------------------------------------------------------------

def conv2d(x: Tensor4, spec: ConvSpec) -> Tensor4:
    """2D cross-correlation; depthwise when ``spec.groups == x.shape[1]``."""
    x = as_tensor4(x)
    y = conv_nd(x, np.asarray(spec.weights), None if spec.bias is None else np.asarray(spec.bias),
                spec.stride, spec.padding, spec.dilation, spec.groups)
    return _check_finite(y)


def conv3d_singleton(x: Tensor4, spec: Conv3Spec) -> Tensor4:
    """3x3x3 convolution over a singleton depth axis inserted after channels.

    Depth is zero padded, so with depth 1 only the middle depth slice of the
    kernel ever meets non-zero input.
    """
    x = as_tensor4(x)
    y = conv_nd(x[:, :, None], np.asarray(spec.weights),
                None if spec.bias is None else np.asarray(spec.bias),
                1, spec.padding, 1, spec.groups)
    if y.shape[2] != 1:
        raise ShapeError(f"depth padding {spec.padding[0]} yields output depth {y.shape[2]}", "depth")
    return _check_finite(y[:, :, 0])


def shuffle_permutation(c: int, g: int) -> np.ndarray:
    """Source channel index for each output channel of a shuffle."""
    if g < 1 or c % g:
        raise ShapeError(f"channel count {c} not divisible by groups {g}", "channel")
    return np.arange(c).reshape(g, c // g).T.reshape(-1)


def channel_shuffle(x: Tensor4, g: int) -> Tensor4:
    n, c, h, w = x.shape
    if g < 1 or c % g:
        raise ShapeError(f"channel count {c} not divisible by groups {g}", "channel")
    return x.reshape(n, g, c // g, h, w).transpose(0, 2, 1, 3, 4).reshape(n, c, h, w)


def channel_unshuffle(x: Tensor4, g: int) -> Tensor4:
    """Inverse of :func:`channel_shuffle` with the same ``g``."""
    return channel_shuffle(x, x.shape[1] // g)


def softmax_lastdim(m: np.ndarray) -> np.ndarray:
    z = m - m.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm_channels(x: Tensor4, gamma, beta, eps: float = 1e-5) -> Tensor4:
    """Normalize the channel vector at every (n, h, w) position."""
    c = x.shape[1]
    if len(gamma) != c or len(beta) != c:
        raise ShapeError(f"gamma/beta length must equal channel count {c}", "channel")
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    y = xhat * np.asarray(gamma).reshape(1, c, 1, 1) + np.asarray(beta).reshape(1, c, 1, 1)
    return _check_finite(y.astype(x.dtype, copy=False))


def _same_shape(x, y):
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {y.shape}", "shape")


def relu(x):
    return np.maximum(x, 0)


def add(x, y):
    _same_shape(x, y)
    return x + y


def mul(x, y):
    _same_shape(x, y)
    return x * y


def matmul(a, b):
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}", "inner")
    return np.matmul(a, b)


def reshape(x, shape: Sequence[int]):
    return np.reshape(x, tuple(shape))


def permute(x, axes: Sequence[int]):
    return np.transpose(x, tuple(axes))
