"""Randomized finite-difference checks for every differentiable op and block.

Each case builder takes a generator and returns ``(f, params)`` ready for
:func:`autodiff.grad_check`.  The scalar under test is always a random
weighted sum of the op output, so no gradient is trivially constant.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np

from . import autodiff as ad
from . import caf_blocks as cb
from . import tree

CaseBuilder = Callable[[np.random.Generator], Tuple[Callable, Dict[str, np.ndarray]]]

TOLERANCE = 1e-4


def _weighted(out_fn, params, rng):
    probe = out_fn({k: v for k, v in params.items()})
    w = rng.standard_normal(np.shape(ad.value(probe)))
    return lambda p: ad.sum_all(ad.mul(out_fn(p), w))


def _case(rng, out_fn, **params):
    return _weighted(out_fn, params, rng), params


def _small(rng, lo=1, hi=4):
    return int(rng.integers(lo, hi + 1))


def _conv2d(rng):
    groups = int(rng.choice([1, 2]))
    cin, cout = groups * _small(rng, 1, 2), groups * _small(rng, 1, 2)
    k = int(rng.choice([1, 3]))
    stride, dilation = _small(rng, 1, 2), _small(rng, 1, 2)
    pad = _small(rng, 0, 2)
    h, w = _small(rng, 3, 6) + dilation * (k - 1), _small(rng, 3, 6) + dilation * (k - 1)
    return _case(rng, lambda p: ad.conv2d(p["x"], p["w"], p["b"], stride, pad, dilation, groups),
                 x=rng.standard_normal((_small(rng, 1, 2), cin, h, w)),
                 w=rng.standard_normal((cout, cin // groups, k, k)),
                 b=rng.standard_normal(cout))


def _conv3d(rng):
    groups = int(rng.choice([1, 2]))
    cin, cout = groups * _small(rng, 1, 2), groups * _small(rng, 1, 2)
    return _case(rng, lambda p: ad.conv3d_singleton(p["x"], p["w"], p["b"], groups=groups),
                 x=rng.standard_normal((_small(rng, 1, 2), cin, _small(rng, 1, 4), _small(rng, 1, 4))),
                 w=rng.standard_normal((cout, cin // groups, 3, 3, 3)),
                 b=rng.standard_normal(cout))


def _shuffle(rng):
    g = _small(rng, 1, 3)
    c = g * _small(rng, 1, 3)
    return _case(rng, lambda p: ad.channel_shuffle(p["x"], g), x=rng.standard_normal((2, c, 2, 3)))


def _softmax(rng):
    return _case(rng, lambda p: ad.softmax_lastdim(p["x"]),
                 x=2 * rng.standard_normal((_small(rng), _small(rng), _small(rng, 2, 6))))


def _layer_norm(rng):
    c = _small(rng, 2, 5)
    eps = float(rng.choice([1e-5, 0.1]))
    return _case(rng, lambda p: ad.layer_norm_channels(p["x"], p["gamma"], p["beta"], eps),
                 x=rng.standard_normal((2, c, _small(rng), _small(rng))),
                 gamma=rng.standard_normal(c), beta=rng.standard_normal(c))


def _relu(rng):
    return _case(rng, lambda p: ad.relu(p["x"]), x=rng.standard_normal((3, _small(rng, 2, 6))))


def _add(rng):
    shape = (2, _small(rng), 3)
    return _case(rng, lambda p: ad.add(p["x"], p["y"]), x=rng.standard_normal(shape), y=rng.standard_normal(shape))


def _mul(rng):
    shape = (2, _small(rng), 3)
    return _case(rng, lambda p: ad.mul(p["x"], p["y"]), x=rng.standard_normal(shape), y=rng.standard_normal(shape))


def _matmul(rng):
    n, m, k = _small(rng), _small(rng), _small(rng)
    return _case(rng, lambda p: ad.matmul(p["a"], p["b"]),
                 a=rng.standard_normal((2, n, k)), b=rng.standard_normal((2, k, m)))


def _reshape_permute(rng):
    a, b = _small(rng), _small(rng)
    return _case(rng, lambda p: ad.permute(ad.reshape(p["x"], (a, b, 2)), (2, 0, 1)),
                 x=rng.standard_normal((a * b, 2)))


def _block_case(part: str):
    def build(rng):
        c = int(rng.choice([2, 4]))
        p = cb.init_caf_block(c, rng, hidden=int(rng.choice([c, 2 * c])), dtype=np.float64)
        x = rng.standard_normal((_small(rng, 1, 2), c, _small(rng, 2, 4), _small(rng, 2, 4)))
        sub = {"acfm_global": p.acfm, "acfm_local": p.acfm, "acfm": p.acfm, "msnn": p.msnn, "caf_block": p}[part]
        fn = {"acfm_global": cb.acfm_global, "acfm_local": cb.acfm_local, "acfm": cb.acfm_forward,
              "msnn": cb.msnn_forward, "caf_block": cb.caf_block_forward}[part]
        params = dict(tree.named_arrays(sub))
        params["input"] = x

        def out(d):
            return fn(d["input"], tree.map_arrays(sub, lambda name, _: d[name]))

        return _weighted(out, params, rng), params
    return build


CASES: Dict[str, CaseBuilder] = {
    "conv2d": _conv2d,
    "conv3d_singleton": _conv3d,
    "channel_shuffle": _shuffle,
    "softmax_lastdim": _softmax,
    "layer_norm_channels": _layer_norm,
    "relu": _relu,
    "add": _add,
    "mul": _mul,
    "matmul": _matmul,
    "reshape+permute": _reshape_permute,
    "acfm_global": _block_case("acfm_global"),
    "acfm_local": _block_case("acfm_local"),
    "acfm": _block_case("acfm"),
    "msnn": _block_case("msnn"),
    "caf_block": _block_case("caf_block"),
}


@dataclass
class SuiteRow:
    op: str
    instances: int
    max_rel_error: float
    checked: int
    skipped: int
    seconds: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE


def run_suite(instances: int = 20, seed: int = 0, samples: int = 200, ops=None) -> List[SuiteRow]:
    rows = []
    for k, name in enumerate(ops or CASES):
        rng = np.random.default_rng([seed, k])
        worst, checked, skipped = 0.0, 0, 0
        start = time.perf_counter()
        for i in range(instances):
            f, params = CASES[name](rng)
            info: dict = {}
            worst = max(worst, ad.grad_check(f, params, samples=samples, seed=i, details=info))
            checked += info["checked"]
            skipped += info["skipped"]
        rows.append(SuiteRow(name, instances, worst, checked, skipped, time.perf_counter() - start))
    return rows
