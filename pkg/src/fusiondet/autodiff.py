"""Tape-based reverse-mode differentiation over the tensor_core kernels.

Every op in this module is polymorphic: called on plain arrays it just
computes the value, called with at least one :class:`Var` it also records a
node on that Var's tape.  Model code (``caf_blocks``, ``detect_toy``) is
written once against these ops and serves both inference and training.

    tape = Tape()
    x = tape.leaf(np.random.randn(2, 3))
    loss = sum_all(mul(x, x))
    grads = backward(tape, loss)
    grads[x]  # == 2 * x.value
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import tensor_core as tc


class Var:
    """A value recorded on a tape."""

    __slots__ = ("tape", "id", "value")

    def __init__(self, tape: "Tape", node_id: int, value: np.ndarray):
        self.tape = tape
        self.id = node_id
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.value.shape})"


@dataclass
class Node:
    kind: str
    parents: Tuple[int, ...]
    vjp: Optional[Callable]  # grad_out -> tuple of parent grads (None entries allowed)
    leaf: bool = False
    name: Optional[str] = None


class Tape:
    """Append-only record of ops; node ids are topologically ordered."""

    def __init__(self):
        self.nodes: List[Node] = []
        self.values: List[np.ndarray] = []
        self.consumed = False

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, name: Optional[str] = None) -> Var:
        value = np.asarray(value)
        return self._append(Node("leaf", (), None, leaf=True, name=name), value)

    def record(self, kind: str, value: np.ndarray, inputs: Sequence, vjp: Callable) -> Var:
        """Record ``value`` as produced by ``kind`` from ``inputs``.

        ``vjp(grad_out)`` must return one gradient (or None) per input; only
        entries for Var inputs are used.
        """
        if self.consumed:
            raise RuntimeError("tape already differentiated; record on a fresh tape")
        parents = tuple(x.id if isinstance(x, Var) else -1 for x in inputs)
        return self._append(Node(kind, parents, vjp), value)

    def _append(self, node, value):
        self.nodes.append(node)
        self.values.append(value)
        return Var(self, len(self.nodes) - 1, value)


class GradStore(dict):
    """Map node id to d(loss)/d(node); also indexable by :class:`Var`."""

    def __getitem__(self, key):
        if isinstance(key, Var):
            key = key.id
        return super().__getitem__(key)

    def __contains__(self, key):
        if isinstance(key, Var):
            key = key.id
        return super().__contains__(key)


def backward(tape: Tape, loss: Var) -> GradStore:
    """Reverse sweep from a scalar ``loss``; fan-out gradients accumulate."""
    if not tape.nodes:
        raise ValueError("backward on an empty tape")
    if not isinstance(loss, Var) or loss.tape is not tape:
        raise ValueError("loss must be a Var recorded on this tape")
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    if tape.consumed:
        raise RuntimeError("backward already ran on this tape")
    tape.consumed = True

    grads: Dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    for i in range(loss.id, -1, -1):
        g = grads.get(i)
        node = tape.nodes[i]
        if g is None or node.leaf:
            continue
        for pid, pg in zip(node.parents, node.vjp(g)):
            if pid < 0 or pg is None:
                continue
            pg = np.asarray(pg)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    store = GradStore()
    for i, v in enumerate(tape.values):
        g = grads.get(i)
        store[i] = np.zeros_like(v) if g is None else g.reshape(v.shape)
    return store


# ---------------------------------------------------------------------------
# Non-differentiable point monitor
# ---------------------------------------------------------------------------

_kink_log: Optional[List[np.ndarray]] = None


@contextlib.contextmanager
def watch_kinks():
    """Collect the sign pattern of every argument at a non-smooth point."""
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


def note_kink(arg: np.ndarray) -> None:
    if _kink_log is not None:
        _kink_log.append(np.asarray(arg) > 0)


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------

def _val(x):
    return x.value if isinstance(x, Var) else x


def _tape(*xs) -> Optional[Tape]:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def value(x) -> np.ndarray:
    return _val(x)


def conv2d(x, w, b=None, stride=1, padding=0, dilation=1, groups=1):
    xv, wv, bv = _val(x), _val(w), _val(b)
    y = tc.conv_nd(xv, wv, bv, stride, padding, dilation, groups)
    tape = _tape(x, w, b)
    if tape is None:
        return y

    def vjp(g):
        gx, gw, gb = tc.conv_nd_backward(g, xv, wv, stride, padding, dilation, groups,
                                         need_x=isinstance(x, Var))
        return gx, gw, gb

    return tape.record("conv2d", y, (x, w, b), vjp)


def conv(x, spec):
    """Apply a :class:`~fusiondet.tensor_core.ConvSpec` or ``Conv3Spec``."""
    if isinstance(spec, tc.Conv3Spec):
        return conv3d_singleton(x, spec.weights, spec.bias, spec.padding, spec.groups)
    return conv2d(x, spec.weights, spec.bias, spec.stride, spec.padding, spec.dilation, spec.groups)


def conv3d_singleton(x, w, b=None, padding=(1, 1, 1), groups=1):
    xv, wv, bv = _val(x), _val(w), _val(b)
    y5 = tc.conv_nd(xv[:, :, None], wv, bv, 1, padding, 1, groups)
    if y5.shape[2] != 1:
        raise tc.ShapeError(f"output depth {y5.shape[2]} != 1", "depth")
    y = y5[:, :, 0]
    tape = _tape(x, w, b)
    if tape is None:
        return y

    def vjp(g):
        gx, gw, gb = tc.conv_nd_backward(g[:, :, None], xv[:, :, None], wv, 1, padding, 1, groups,
                                         need_x=isinstance(x, Var))
        return (None if gx is None else gx[:, :, 0]), gw, gb

    return tape.record("conv3d_singleton", y, (x, w, b), vjp)


def channel_shuffle(x, g: int):
    y = tc.channel_shuffle(_val(x), g)
    tape = _tape(x)
    if tape is None:
        return y
    return tape.record("channel_shuffle", y, (x,), lambda gy: (tc.channel_unshuffle(gy, g),))


def softmax_lastdim(x):
    y = tc.softmax_lastdim(_val(x))
    tape = _tape(x)
    if tape is None:
        return y

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return tape.record("softmax", y, (x,), vjp)


def layer_norm_channels(x, gamma, beta, eps: float = 1e-5):
    xv, gv, bv = _val(x), _val(gamma), _val(beta)
    c = xv.shape[1]
    if len(gv) != c or len(bv) != c:
        raise tc.ShapeError(f"gamma/beta length must equal channel count {c}", "channel")
    mu = xv.mean(axis=1, keepdims=True)
    var = ((xv - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    y = xhat * gv.reshape(1, c, 1, 1) + bv.reshape(1, c, 1, 1)
    tape = _tape(x, gamma, beta)
    if tape is None:
        return y

    def vjp(g):
        dxhat = g * gv.reshape(1, c, 1, 1)
        gx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return tape.record("layer_norm", y, (x, gamma, beta), vjp)


def relu(x):
    xv = _val(x)
    note_kink(xv)
    y = np.maximum(xv, 0)
    tape = _tape(x)
    if tape is None:
        return y
    return tape.record("relu", y, (x,), lambda g: (g * (xv > 0),))


def add(x, y):
    xv, yv = _val(x), _val(y)
    out = tc.add(xv, yv)
    tape = _tape(x, y)
    if tape is None:
        return out
    return tape.record("add", out, (x, y), lambda g: (g, g))


def sub(x, y):
    xv, yv = _val(x), _val(y)
    tc._same_shape(xv, yv)
    out = xv - yv
    tape = _tape(x, y)
    if tape is None:
        return out
    return tape.record("sub", out, (x, y), lambda g: (g, -g))


def mul(x, y):
    xv, yv = _val(x), _val(y)
    out = tc.mul(xv, yv)
    tape = _tape(x, y)
    if tape is None:
        return out
    return tape.record("mul", out, (x, y), lambda g: (g * yv, g * xv))


def matmul(a, b):
    av, bv = _val(a), _val(b)
    out = tc.matmul(av, bv)
    tape = _tape(a, b)
    if tape is None:
        return out

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return tape.record("matmul", out, (a, b), vjp)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def reshape(x, shape):
    xv = _val(x)
    y = tc.reshape(xv, shape)
    tape = _tape(x)
    if tape is None:
        return y
    return tape.record("reshape", y, (x,), lambda g: (g.reshape(xv.shape),))


def permute(x, axes):
    y = tc.permute(_val(x), axes)
    tape = _tape(x)
    if tape is None:
        return y
    inverse = tuple(np.argsort(axes))
    return tape.record("permute", y, (x,), lambda g: (np.transpose(g, inverse),))


def slice_channels(x, start: int, stop: int):
    xv = _val(x)
    y = xv[:, start:stop]
    tape = _tape(x)
    if tape is None:
        return y

    def vjp(g):
        gx = np.zeros_like(xv)
        gx[:, start:stop] = g
        return (gx,)

    return tape.record("slice_channels", y, (x,), vjp)


def sum_all(x):
    xv = _val(x)
    y = np.asarray(xv.sum(), dtype=xv.dtype)
    tape = _tape(x)
    if tape is None:
        return y
    return tape.record("sum", y, (x,), lambda g: (np.full(xv.shape, g, dtype=xv.dtype),))


def exp(x):
    y = np.exp(_val(x))
    tape = _tape(x)
    if tape is None:
        return y
    return tape.record("exp", y, (x,), lambda g: (g * y,))


def div_scalar(x, s):
    """``x / s`` for a one-element ``s``."""
    xv, sv = _val(x), _val(s)
    if np.size(sv) != 1:
        raise tc.ShapeError(f"divisor must hold one element, got shape {np.shape(sv)}", "scalar")
    sc = sv.reshape(())
    y = xv / sc
    tape = _tape(x, s)
    if tape is None:
        return y

    def vjp(g):
        gs = -(g * xv).sum() / (sc * sc)
        return g / sc, np.asarray(gs).reshape(np.shape(sv))

    return tape.record("div_scalar", y, (x, s), vjp)


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

def _scalar(v) -> float:
    v = float(np.asarray(_val(v)).reshape(()))
    if not np.isfinite(v):
        raise FloatingPointError(f"function value is not finite: {v}")
    return v


def grad_check(f: Callable[[Mapping], object], params: Mapping[str, np.ndarray],
               eps: float = 1e-4, samples: int = 200, seed: int = 0,
               details: Optional[dict] = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a dict of parameters (arrays or Vars) to a scalar.  At most
    ``samples`` coordinates are drawn per parameter tensor.  A coordinate
    whose perturbation flips the side of any ReLU (or other registered kink)
    is skipped, since a difference quotient across a kink is meaningless.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape = Tape()
    leaves = {k: tape.leaf(v.copy(), name=k) for k, v in base.items()}
    loss = f(leaves)
    if not isinstance(loss, Var):
        raise ValueError("f does not depend on any parameter")
    _scalar(loss)
    grads = backward(tape, loss)

    def evaluate(p):
        with watch_kinks() as log:
            v = _scalar(f(p))
        return v, log

    _, base_kinks = evaluate(base)
    rng = np.random.default_rng(seed)
    worst, checked, skipped = 0.0, 0, 0
    for name, arr in base.items():
        analytic = grads[leaves[name]].reshape(-1)
        picks = rng.choice(arr.size, size=min(arr.size, samples), replace=False)
        for i in picks:
            trial = dict(base)
            flat = arr.copy().reshape(-1)
            flat[i] = arr.reshape(-1)[i] + eps
            trial[name] = flat.reshape(arr.shape)
            fp, kp = evaluate(trial)
            flat[i] = arr.reshape(-1)[i] - eps
            trial[name] = flat.reshape(arr.shape)
            fm, km = evaluate(trial)
            if not (_same_kinks(kp, base_kinks) and _same_kinks(km, base_kinks)):
                skipped += 1
                continue
            numeric = (fp - fm) / (2 * eps)
            a = float(analytic[i])
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, rel)
            checked += 1
    if details is not None:
        details.update(checked=checked, skipped=skipped)
    return worst


def _same_kinks(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))
