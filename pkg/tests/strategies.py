"""Hypothesis strategies for the persistence formats."""
import numpy as np
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fusiondet.metrics_eval import DetBox

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)

tensors = st.one_of(
    hnp.arrays(st.sampled_from([np.float32, np.float64]),
               hnp.array_shapes(min_dims=0, max_dims=5, min_side=0, max_side=4),
               elements=st.floats(width=32, allow_nan=True, allow_infinity=True)),
)

image_ids = st.text(st.characters(categories=("L", "N"), include_characters="_-./"), min_size=1, max_size=12)


@st.composite
def det_boxes(draw, with_score=True):
    x1, y1 = draw(finite), draw(finite)
    w = draw(st.floats(0, 1e6))
    h = draw(st.floats(0, 1e6))
    x2, y2 = x1 + w, y1 + h
    if not np.isfinite([x2, y2]).all():
        x2, y2 = x1, y1
    score = draw(st.floats(0, 1)) if with_score else 1.0
    return DetBox(x1, y1, x2, y2, class_id=draw(st.integers(0, 10 ** 6)), score=score)


records = st.lists(st.tuples(image_ids, det_boxes()), max_size=8)
gt_records = st.lists(st.tuples(image_ids, det_boxes(with_score=False)), max_size=8)

checkpoints = st.tuples(
    st.dictionaries(st.text(min_size=1, max_size=10), tensors, max_size=5),
    st.dictionaries(st.text(max_size=6), st.one_of(st.integers(-10 ** 9, 10 ** 9), st.text(max_size=6),
                                                   st.lists(st.integers(0, 9), max_size=3)), max_size=4),
)
