"""Micro-benchmarks for the kernels and the two attention layouts.

Channel attention builds a C x C map (cost ~ c^2 * hw); the spatial layout
builds an (HW) x (HW) map (cost ~ (hw)^2 * c).  Both are timed, and their
multiply-add counts are reported analytically next to the timings.
"""
from __future__ import annotations

import statistics
import time
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from . import caf_blocks as cb
from . import tensor_core as tc

DEFAULT_SHAPES: Tuple[Tuple[int, int, int], ...] = ((8, 8, 8), (16, 8, 8), (32, 8, 8), (32, 16, 16), (64, 4, 4))

FIELDS = ("op", "n", "c", "h", "w", "repeats", "median_s", "stdev_s", "elements_per_s", "attn_macs")


def attention_macs(c: int, h: int, w: int, layout: str) -> int:
    """Multiply-adds for the score matmul plus the weighted sum."""
    hw = h * w
    if layout == "cxc":
        return 2 * c * c * hw
    if layout == "hwxhw":
        return 2 * hw * hw * c
    raise ValueError(f"unknown attention layout {layout!r}")


def channel_attention(q, k, v, alpha):
    """(n, c, hw) inputs; softmax over a (c, c) map."""
    return np.matmul(tc.softmax_lastdim(np.matmul(q, k.swapaxes(1, 2)) / alpha), v)


def spatial_attention(q, k, v, alpha):
    """(n, c, hw) inputs; softmax over an (hw, hw) map."""
    a = tc.softmax_lastdim(np.matmul(q.swapaxes(1, 2), k) / alpha)
    return np.matmul(v, a.swapaxes(1, 2))


def _time(fn: Callable[[], object], repeats: int) -> Tuple[float, float]:
    fn()  # warm-up
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples), (statistics.stdev(samples) if repeats > 1 else 0.0)


def _ops_for(c: int, h: int, w: int, n: int, rng: np.random.Generator) -> Dict[str, Tuple[Callable, object]]:
    x = rng.standard_normal((n, c, h, w)).astype(np.float32)
    conv = tc.ConvSpec(rng.standard_normal((c, c, 3, 3)).astype(np.float32) * 0.1, padding=1)
    depth = tc.ConvSpec(rng.standard_normal((c, 1, 3, 3)).astype(np.float32), padding=1, groups=c)
    conv3 = tc.Conv3Spec(rng.standard_normal((c, c, 3, 3, 3)).astype(np.float32) * 0.1)
    gamma, beta = np.ones(c, np.float32), np.zeros(c, np.float32)
    g = cb.default_shuffle_groups(c)
    q, k, v = (rng.standard_normal((n, c, h * w)).astype(np.float32) for _ in range(3))
    alpha = float(np.sqrt(c))
    block = cb.init_caf_block(c, rng)
    return {
        "conv2d_3x3": (lambda: tc.conv2d(x, conv), None),
        "depthwise_3x3": (lambda: tc.conv2d(x, depth), None),
        "conv3d_singleton": (lambda: tc.conv3d_singleton(x, conv3), None),
        "layer_norm_channels": (lambda: tc.layer_norm_channels(x, gamma, beta), None),
        "channel_shuffle": (lambda: tc.channel_shuffle(x, g), None),
        "attention_cxc": (lambda: channel_attention(q, k, v, alpha), attention_macs(c, h, w, "cxc")),
        "attention_hwxhw": (lambda: spatial_attention(q, k, v, alpha), attention_macs(c, h, w, "hwxhw")),
        "caf_block": (lambda: cb.caf_block_forward(x, block), None),
    }


def run_bench(shapes: Sequence[Tuple[int, int, int]] = DEFAULT_SHAPES, repeats: int = 5, batch: int = 1,
              seed: int = 0) -> List[dict]:
    """One row per (op, shape), timings as median and stdev over ``repeats``."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    rows = []
    for c, h, w in shapes:
        rng = np.random.default_rng([seed, c, h, w])
        for op, (fn, macs) in _ops_for(c, h, w, batch, rng).items():
            med, sd = _time(fn, repeats)
            elements = batch * c * h * w
            rows.append({
                "op": op, "n": batch, "c": c, "h": h, "w": w, "repeats": repeats,
                "median_s": med, "stdev_s": sd,
                "elements_per_s": elements / med if med > 0 else float("inf"),
                "attn_macs": "" if macs is None else macs,
            })
    return rows
