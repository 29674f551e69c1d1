"""Saving and restoring model parameters together with their architecture."""
from __future__ import annotations

from typing import Tuple

import numpy as np

from . import caf_blocks as cb
from . import detect_toy as dt
from . import io_formats as io


def detector_config(p: dt.ToyDetectorParams, **extra) -> dict:
    widths = [spec.out_ch for spec in p.backbone]
    cfg = {
        "kind": "detector",
        "in_channels": p.backbone[0].in_ch,
        "widths": widths,
        "num_classes": p.num_classes,
        "use_caf_block": p.use_caf_block,
        "blocks": len(p.caf),
        "hidden": p.caf[0].msnn.hidden if p.caf else None,
        "dilations": list(p.caf[0].msnn.dilations) if p.caf else None,
        "shuffle_groups": p.caf[0].acfm.shuffle_groups if p.caf else None,
        "norm_eps": p.caf[0].ln1.eps if p.caf else None,
    }
    cfg.update(extra)
    return cfg


def block_config(p: cb.CafBlockParams, **extra) -> dict:
    cfg = {
        "kind": "caf_block",
        "width": p.width,
        "hidden": p.msnn.hidden,
        "dilations": list(p.msnn.dilations),
        "shuffle_groups": p.acfm.shuffle_groups,
        "norm_eps": p.ln1.eps,
    }
    cfg.update(extra)
    return cfg


def _template(cfg: dict):
    kind = cfg.get("kind")
    rng = np.random.default_rng(0)
    if kind == "detector":
        p = dt.init_detector(num_classes=cfg["num_classes"], use_caf_block=cfg["use_caf_block"],
                             blocks=cfg["blocks"], widths=cfg["widths"], in_ch=cfg["in_channels"],
                             hidden=cfg["hidden"], dilations=tuple(cfg["dilations"] or (2, 3)))
        for block in p.caf:
            _apply_block_options(block, cfg)
        return p
    if kind == "caf_block":
        p = cb.init_caf_block(cfg["width"], rng, hidden=cfg["hidden"], shuffle_groups=cfg["shuffle_groups"],
                              dilations=tuple(cfg["dilations"]), norm_eps=cfg["norm_eps"])
        return p
    raise io.FormatError(f"unknown model kind {kind!r}")


def _apply_block_options(block: cb.CafBlockParams, cfg: dict) -> None:
    if cfg.get("shuffle_groups") is not None:
        block.acfm.shuffle_groups = int(cfg["shuffle_groups"])
    if cfg.get("norm_eps") is not None:
        block.ln1.eps = block.ln2.eps = float(cfg["norm_eps"])


def save(path, params, config: dict) -> None:
    io.write_checkpoint(path, io.params_to_tensors(params), config)


def load(path) -> Tuple[dict, object]:
    """Return ``(config, params)``; the architecture is rebuilt from the config."""
    cfg, tensors = io.read_checkpoint(path)
    try:
        template = _template(cfg)
    except (KeyError, TypeError) as exc:
        raise io.FormatError(f"checkpoint config incomplete: {exc!r}") from None
    return cfg, io.params_from_tensors(template, tensors)


def forward(config: dict, params, x: np.ndarray) -> np.ndarray:
    if config["kind"] == "detector":
        return dt.detector_forward(x, params)
    return cb.caf_block_forward(x, params)
