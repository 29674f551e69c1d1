"""A small grid detector trained on synthetic disc scenes.

Backbone: three stride-2 3x3 convs with ReLU (1 -> 8 -> 16 -> 32 channels),
optionally followed by CAF blocks, then a 1x1 head.  Each cell of the
stride-8 grid predicts ``[objectness, dx, dy, log_w, log_h, class logits...]``
where (dx, dy) is the box centre offset from the cell centre in cell units
and (log_w, log_h) the log box size in cell units.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import caf_blocks as cb
from . import tree
from .metrics_eval import DetBox, EvalReport, batched_nms, evaluate
from .tensor_core import ConvSpec, ShapeError

log = logging.getLogger(__name__)

STRIDE = 8
VAL_OFFSET = 1_000_000
LOSS_WEIGHTS = (1.0, 5.0, 1.0)  # objectness, box L1, class


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 3
    radii: Tuple[Tuple[float, float], ...] = ((3.0, 5.0), (6.0, 8.0), (9.0, 12.0))
    intensities: Tuple[float, ...] = (1.0, 0.5, 0.75)
    objects: Tuple[int, int] = (1, 4)
    noise: float = 0.05
    blur: float = 0.5
    seed: int = 0
    centered: bool = False  # single object at the image centre

    def __post_init__(self):
        self.radii = tuple(tuple(float(v) for v in r) for r in self.radii)
        self.intensities = tuple(float(v) for v in self.intensities)
        self.objects = tuple(int(v) for v in self.objects)
        if len(self.radii) != self.num_classes or len(self.intensities) != self.num_classes:
            raise ValueError("radii and intensities need one entry per class")
        lo, hi = self.objects
        if lo < 0 or hi < lo:
            raise ValueError(f"bad object count range {self.objects}")
        for rmin, rmax in self.radii:
            if not 0 < rmin <= rmax or 2 * rmax >= min(self.height, self.width):
                raise ValueError(f"radius range ({rmin}, {rmax}) does not fit the image")
        if self.noise < 0 or self.blur < 0:
            raise ValueError("noise and blur must be non-negative")
        if self.centered and hi > 1:
            raise ValueError("a centered scene holds at most one object")


def trivial_scene(seed: int = 0) -> SceneConfig:
    """One large noise-free disc at the image centre."""
    return SceneConfig(radii=((10.0, 12.0),) * 3, objects=(1, 1), noise=0.0, centered=True, seed=seed)


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return img
    half = max(1, int(np.ceil(3 * sigma)))
    t = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    k /= k.sum()
    pad = np.pad(img, half, mode="edge")
    rows = np.apply_along_axis(lambda r: np.convolve(r, k, mode="valid"), 1, pad)
    return np.apply_along_axis(lambda c: np.convolve(c, k, mode="valid"), 0, rows)


def gen_scene(cfg: SceneConfig, index: int) -> Tuple[np.ndarray, List[DetBox]]:
    """Render scene ``index``: a (1, 1, H, W) float32 image and its boxes.

    Discs never overlap and their centres fall in distinct grid cells, so
    every object owns one cell of the detector grid.
    """
    rng = np.random.default_rng([cfg.seed, index])
    h, w = cfg.height, cfg.width
    target = int(rng.integers(cfg.objects[0], cfg.objects[1] + 1))
    placed: List[Tuple[float, float, float, int]] = []
    cells = set()
    for _ in range(50 * max(target, 1)):
        if len(placed) >= target:
            break
        cls = int(rng.integers(cfg.num_classes))
        r = float(rng.uniform(*cfg.radii[cls]))
        if cfg.centered:
            cx, cy = w / 2, h / 2
        else:
            cx = float(rng.uniform(r, w - r))
            cy = float(rng.uniform(r, h - r))
        cell = (int(cy // STRIDE), int(cx // STRIDE))
        if cell in cells:
            continue
        if any((cx - px) ** 2 + (cy - py) ** 2 <= (r + pr + 1.0) ** 2 for px, py, pr, _ in placed):
            continue
        placed.append((cx, cy, r, cls))
        cells.add(cell)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    img = np.zeros((h, w))
    gts = []
    for cx, cy, r, cls in placed:
        dist = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
        img += cfg.intensities[cls] * np.clip(r + 0.5 - dist, 0.0, 1.0)
        gts.append(DetBox(cx - r, cy - r, cx + r, cy + r, cls, 1.0))
    img = _gaussian_blur(img, cfg.blur)
    img += rng.normal(0.0, cfg.noise, size=img.shape) if cfg.noise > 0 else 0.0
    return img[None, None].astype(np.float32), gts


def gen_batch(cfg: SceneConfig, indices: Sequence[int]):
    scenes = [gen_scene(cfg, int(i)) for i in indices]
    return np.concatenate([s[0] for s in scenes]), [s[1] for s in scenes]


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass
class ToyDetectorParams:
    backbone: List[ConvSpec]
    head: ConvSpec
    caf: List[cb.CafBlockParams] = field(default_factory=list)
    use_caf_block: bool = True

    @property
    def num_classes(self) -> int:
        return self.head.out_ch - 5


def init_detector(num_classes: int = 3, seed: int = 0, use_caf_block: bool = True,
                  blocks: int = 1, widths: Sequence[int] = (8, 16, 32), in_ch: int = 1,
                  hidden: Optional[int] = None, dilations=(2, 3), dtype=np.float32) -> ToyDetectorParams:
    """Deterministic initialization; both ablation arms share backbone and head."""
    rng = np.random.default_rng([seed, 17])
    chans = [in_ch] + list(widths)
    backbone = [cb.make_conv(rng, a, b, k=3, stride=2, padding=1, gain=np.sqrt(2.0), dtype=dtype)
                for a, b in zip(chans[:-1], chans[1:])]
    head = cb.make_conv(rng, chans[-1], 5 + num_classes, dtype=dtype)
    block_rng = np.random.default_rng([seed, 29])
    caf = [cb.init_caf_block(chans[-1], block_rng, hidden=hidden, dilations=dilations, dtype=dtype)
           for _ in range(blocks)] if use_caf_block else []
    return ToyDetectorParams(backbone, head, caf, use_caf_block)


def detector_forward(img, p: ToyDetectorParams):
    n, c, h, w = img.shape
    if h % STRIDE or w % STRIDE:
        raise ShapeError(f"image size {h}x{w} not divisible by {STRIDE}", "height" if h % STRIDE else "width")
    x = img
    for spec in p.backbone:
        x = ad.relu(ad.conv(x, spec))
    if p.use_caf_block:
        for block in p.caf:
            x = cb.caf_block_forward(x, block)
    return ad.conv(x, p.head)


# ---------------------------------------------------------------------------
# Targets and loss
# ---------------------------------------------------------------------------

@dataclass
class GridTargets:
    obj: np.ndarray  # (n, gh, gw) in {0, 1}
    box: np.ndarray  # (n, 4, gh, gw)
    cls: np.ndarray  # (n, gh, gw) int, -1 where empty


def assign(gts: Sequence[DetBox], gh: int, gw: int) -> Dict[Tuple[int, int], DetBox]:
    """Map grid cell -> owning gt; extra gts in a cell lose by area (largest kept)."""
    owners: Dict[Tuple[int, int], Tuple[float, int, DetBox]] = {}
    for idx, g in enumerate(gts):
        cx, cy = (g.x1 + g.x2) / 2, (g.y1 + g.y2) / 2
        cell = (min(max(int(cy // STRIDE), 0), gh - 1), min(max(int(cx // STRIDE), 0), gw - 1))
        key = (-g.area, idx)
        if cell not in owners or key < owners[cell][:2]:
            owners[cell] = (key[0], key[1], g)
    return {cell: v[2] for cell, v in owners.items()}


def encode_box(g: DetBox, i: int, j: int) -> Tuple[float, float, float, float]:
    cx, cy = (g.x1 + g.x2) / 2, (g.y1 + g.y2) / 2
    bw, bh = max(g.x2 - g.x1, 1e-6), max(g.y2 - g.y1, 1e-6)
    return ((cx - (j + 0.5) * STRIDE) / STRIDE, (cy - (i + 0.5) * STRIDE) / STRIDE,
            float(np.log(bw / STRIDE)), float(np.log(bh / STRIDE)))


def encode_targets(gts_batch: Sequence[Sequence[DetBox]], gh: int, gw: int) -> GridTargets:
    n = len(gts_batch)
    obj = np.zeros((n, gh, gw))
    box = np.zeros((n, 4, gh, gw))
    cls = np.full((n, gh, gw), -1, dtype=np.int64)
    for b, gts in enumerate(gts_batch):
        for (i, j), g in assign(gts, gh, gw).items():
            obj[b, i, j] = 1.0
            box[b, :, i, j] = encode_box(g, i, j)
            cls[b, i, j] = g.class_id
    return GridTargets(obj, box, cls)


def perfect_predictions(gts_batch, gh: int, gw: int, num_classes: int, margin: float = 20.0) -> np.ndarray:
    """Saturated raw predictions that exactly encode ``gts_batch``."""
    t = encode_targets(gts_batch, gh, gw)
    out = np.zeros((len(gts_batch), 5 + num_classes, gh, gw))
    out[:, 0] = np.where(t.obj > 0, margin, -margin)
    out[:, 1:5] = t.box
    out[:, 5:] = -margin
    for b, i, j in zip(*np.nonzero(t.cls >= 0)):
        out[b, 5 + t.cls[b, i, j], i, j] = margin
    return out


def _loss_terms(pv: np.ndarray, t: GridTargets):
    """Loss and its gradient w.r.t. the raw predictions.

    Objectness is averaged over every cell of the batch; box and class terms
    are averaged over owned (positive) cells.
    """
    n, _, gh, gw = pv.shape
    wo, wb, wc = LOSS_WEIGHTS
    cells = n * gh * gw
    pos = t.obj > 0
    npos = max(int(pos.sum()), 1)
    z = pv[:, 0]
    bce = np.maximum(z, 0) - z * t.obj + np.log1p(np.exp(-np.abs(z)))
    g = np.zeros_like(pv)
    g[:, 0] = wo * (_sigmoid(z) - t.obj) / cells
    resid = (pv[:, 1:5] - t.box) * pos[:, None]
    ad.note_kink(resid[np.broadcast_to(pos[:, None], resid.shape)])
    l1 = np.abs(resid).sum()
    g[:, 1:5] = wb * np.sign(resid) / npos
    logits = pv[:, 5:]
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    cls_idx = np.where(pos, t.cls, 0)
    picked = np.take_along_axis(logits, cls_idx[:, None], axis=1)[:, 0]
    ce = ((lse - picked) * pos).sum()
    soft = np.exp(logits - lse[:, None])
    onehot = np.zeros_like(soft)
    np.put_along_axis(onehot, cls_idx[:, None], 1.0, axis=1)
    g[:, 5:] = wc * (soft - onehot) * pos[:, None] / npos
    total = wo * bce.sum() / cells + (wb * l1 + wc * ce) / npos
    return total, g


def detection_loss(preds, gts_batch: Sequence[Sequence[DetBox]]):
    """Objectness BCE (all cells) + 5 * box L1 + class CE (owned cells)."""
    pv = ad.value(preds)
    n, _, gh, gw = pv.shape
    if len(gts_batch) != n:
        raise ValueError(f"{len(gts_batch)} ground-truth lists for a batch of {n}")
    total, grad = _loss_terms(pv.astype(np.float64), encode_targets(gts_batch, gh, gw))
    out = np.asarray(total, dtype=pv.dtype)
    if not isinstance(preds, ad.Var):
        return out
    grad = grad.astype(pv.dtype)
    return preds.tape.record("detection_loss", out, (preds,), lambda g: (g * grad,))


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def decode(preds, conf_thresh: float = 0.5, iou_thresh: float = 0.5,
           image_size: Optional[Tuple[int, int]] = None) -> List[List[DetBox]]:
    """Per-image boxes with score = sigmoid(obj) * max class prob, after per-class NMS."""
    pv = np.asarray(ad.value(preds), dtype=np.float64)
    n, ch, gh, gw = pv.shape
    h, w = image_size or (gh * STRIDE, gw * STRIDE)
    logits = pv[:, 5:]
    soft = np.exp(logits - logits.max(axis=1, keepdims=True))
    soft /= soft.sum(axis=1, keepdims=True)
    score = _sigmoid(pv[:, 0]) * soft.max(axis=1)
    label = soft.argmax(axis=1)
    out = []
    for b in range(n):
        boxes = []
        for i, j in zip(*np.nonzero(score[b] > conf_thresh)):
            dx, dy, lw, lh = pv[b, 1:5, i, j]
            cx, cy = (j + 0.5 + dx) * STRIDE, (i + 0.5 + dy) * STRIDE
            bw, bh = np.exp(min(lw, 10.0)) * STRIDE, np.exp(min(lh, 10.0)) * STRIDE
            x1, x2 = np.clip([cx - bw / 2, cx + bw / 2], 0, w)
            y1, y2 = np.clip([cy - bh / 2, cy + bh / 2], 0, h)
            boxes.append(DetBox(float(x1), float(y1), float(x2), float(y2),
                                int(label[b, i, j]), float(np.clip(score[b, i, j], 0.0, 1.0))))
        out.append(batched_nms(boxes, iou_thresh))
    return out


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 0.01
    batch_size: int = 8
    steps: int = 3000
    patience: Optional[int] = 10
    eval_every: int = 100
    val_images: int = 32
    train_images: Optional[int] = None  # fixed pool size; None draws fresh scenes
    clip_norm: Optional[float] = 10.0  # global gradient-norm cap; None disables

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.steps < 0 or self.eval_every < 1:
            raise ValueError("steps must be >= 0 and eval_every >= 1")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError(f"clip_norm must be > 0, got {self.clip_norm}")


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainResult:
    params: ToyDetectorParams
    loss_history: List[float]
    val_history: List[Tuple[int, float]]
    best_step: int
    stopped_early: bool


def _train_indices(cfg: TrainConfig, step: int) -> np.ndarray:
    start = step * cfg.batch_size
    idx = np.arange(start, start + cfg.batch_size)
    if cfg.train_images:
        idx %= cfg.train_images
    return idx


def loss_and_grads(p: ToyDetectorParams, images, gts_batch):
    tape = ad.Tape()
    bound = tree.map_arrays(p, lambda name, a: tape.leaf(a, name))
    loss = detection_loss(detector_forward(images, bound), gts_batch)
    grads = ad.backward(tape, loss)
    return float(loss.value), tree.map_arrays(bound, lambda _, v: grads[v])


def grad_norm(grads: ToyDetectorParams) -> float:
    return float(np.sqrt(sum(np.sum(np.square(a, dtype=np.float64)) for _, a in tree.named_arrays(grads))))


def sgd_step(p: ToyDetectorParams, grads: ToyDetectorParams, lr: float) -> ToyDetectorParams:
    g = dict(tree.named_arrays(grads))
    return tree.map_arrays(p, lambda name, a: (a - lr * g[name]).astype(a.dtype, copy=False))


def val_loss(p: ToyDetectorParams, scene: SceneConfig, n_images: int, batch: int = 16) -> float:
    total = 0.0
    for s in range(0, n_images, batch):
        imgs, gts = gen_batch(scene, range(VAL_OFFSET + s, VAL_OFFSET + min(s + batch, n_images)))
        total += float(detection_loss(detector_forward(imgs, p), gts)) * len(gts)
    return total / max(n_images, 1)


def train(cfg: TrainConfig, scene: SceneConfig, p: ToyDetectorParams, start_step: int = 0,
          callback=None) -> TrainResult:
    """Plain SGD; early stops on validation loss and returns the best parameters."""
    history: List[float] = []
    val_hist: List[Tuple[int, float]] = []
    best, best_params, best_step, bad = np.inf, p, start_step, 0
    stopped = False
    for step in range(start_step, start_step + cfg.steps):
        imgs, gts = gen_batch(scene, _train_indices(cfg, step))
        loss, grads = loss_and_grads(p, imgs, gts)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss {loss} at step {step}")
        history.append(loss)
        lr = cfg.lr
        if cfg.clip_norm is not None:
            norm = grad_norm(grads)
            if norm > cfg.clip_norm:
                lr *= cfg.clip_norm / norm
        p = sgd_step(p, grads, lr)
        done = step + 1
        if callback is not None:
            callback(done, loss)
        if cfg.patience is not None and (done % cfg.eval_every == 0 or done == start_step + cfg.steps):
            v = val_loss(p, scene, cfg.val_images)
            val_hist.append((done, v))
            log.debug("step %d loss %.4f val %.4f", done, loss, v)
            if v < best:
                best, best_params, best_step, bad = v, p, done, 0
            else:
                bad += 1
                if bad >= cfg.patience:
                    stopped = True
                    break
    if cfg.patience is None or not val_hist:
        best_params, best_step = p, start_step + len(history)
    return TrainResult(best_params, history, val_hist, best_step, stopped)


def evaluate_model(p: ToyDetectorParams, scene: SceneConfig, n_images: int = 64,
                   conf_thresh: float = 0.05, iou_thresh: float = 0.5, batch: int = 16,
                   offset: int = VAL_OFFSET) -> EvalReport:
    dets, gts = {}, {}
    for s in range(0, n_images, batch):
        ids = list(range(offset + s, offset + min(s + batch, n_images)))
        imgs, gt_batch = gen_batch(scene, ids)
        preds = detector_forward(imgs, p)
        for i, boxes, g in zip(ids, decode(preds, conf_thresh, iou_thresh), gt_batch):
            dets[f"img{i}"] = boxes
            gts[f"img{i}"] = g
    return evaluate(dets, gts, classes=range(scene.num_classes))


def scene_to_dict(scene: SceneConfig) -> dict:
    d = asdict(scene)
    d["radii"] = [list(r) for r in scene.radii]
    d["intensities"] = list(scene.intensities)
    d["objects"] = list(scene.objects)
    return d
