"""Deterministic random evaluation cases shared by several test modules."""
import numpy as np

from fusiondet.metrics_eval import DetBox


def random_box(rng, size=32.0):
    x1, y1 = rng.uniform(0, size, 2)
    w, h = rng.uniform(1, size / 2, 2)
    return (float(x1), float(y1), float(x1 + w), float(y1 + h))


def eval_case(seed, n_images=4, n_classes=3):
    """Returns ``(dets, gts)`` as {image: [(x1, y1, x2, y2, cls, score)]}.

    Detections are jittered copies of ground truth mixed with clutter and
    coarse scores, so ties and duplicates occur.  Class ``n_classes - 1``
    sometimes has detections but no ground truth.
    """
    rng = np.random.default_rng(seed)
    dets, gts = {}, {}
    for i in range(n_images):
        img = f"im{i}"
        g = []
        for _ in range(rng.integers(0, 5)):
            g.append(random_box(rng) + (int(rng.integers(0, n_classes - 1)), 1.0))
        d = []
        for b in g:
            for _ in range(rng.integers(0, 3)):
                j = rng.normal(0, 1.5, 4)
                x1, y1 = b[0] + j[0], b[1] + j[1]
                d.append((x1, y1, max(x1, b[2] + j[2]), max(y1, b[3] + j[3]), b[4],
                          float(rng.integers(0, 11)) / 10))
        for _ in range(rng.integers(0, 4)):
            d.append(random_box(rng) + (int(rng.integers(0, n_classes)), float(rng.integers(0, 11)) / 10))
        if g:
            gts[img] = g
        if d:
            dets[img] = d
    return dets, gts


def to_boxes(table):
    return {img: [DetBox(*r[:4], class_id=r[4], score=r[5]) for r in rows] for img, rows in table.items()}
