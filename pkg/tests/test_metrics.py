import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dropgen_lab.errors import ContractViolation
from dropgen_lab.metrics import argmax_labels, dice_per_sample, dice_score


def test_identical_maps_score_one():
    y = np.array([0, 1, 2, 2, 1, 0])
    res = dice_score(y, y, 3, include_background=True)
    assert res.per_class == (1.0, 1.0, 1.0) and res.mean == 1.0


def test_disjoint_foregrounds_score_zero():
    pred = np.array([1, 1, 0, 0])
    true = np.array([0, 0, 1, 1])
    assert dice_score(pred, true, 2).per_class[1] == 0.0


def test_partial_overlap_set_count():
    true = np.array([1, 1, 1, 1, 0, 0, 0, 0])
    pred = np.array([1, 1, 0, 0, 0, 0, 0, 0])
    res = dice_score(pred, true, 2)
    assert res.mean == pytest.approx(2 * 2 / (2 + 4))
    assert round(res.mean, 4) == 0.6667


def test_class_absent_from_both_left_out_of_mean():
    pred = np.array([1, 1, 0])
    true = np.array([1, 0, 0])
    res = dice_score(pred, true, 3)
    assert np.isnan(res.per_class[2])
    assert res.mean == res.per_class[1]
    assert dice_score(pred, true, 3, empty_as_one=True).mean == (res.per_class[1] + 1.0) / 2


def test_labels_out_of_range_rejected():
    with pytest.raises(ContractViolation):
        dice_score(np.array([0, 3]), np.array([0, 1]), 3)


def test_argmax_ties_pick_lowest_index():
    logits = np.zeros((1, 3, 2))
    logits[0, 1:, 1] = 5.0
    assert argmax_labels(logits).tolist() == [[0, 1]]


labels = arrays(np.int64, st.integers(1, 20), elements=st.integers(0, 3))


@given(st.data())
def test_property_dice_symmetric(data):
    a = data.draw(labels)
    b = data.draw(arrays(np.int64, a.shape, elements=st.integers(0, 3)))
    ra, rb = dice_score(a, b, 4), dice_score(b, a, 4)
    assert np.array_equal(np.array(ra.per_class), np.array(rb.per_class), equal_nan=True)
    assert ra.mean == rb.mean
    assert 0.0 <= ra.mean <= 1.0


@given(st.data())
def test_property_batched_dice_matches_loop(data):
    n = data.draw(st.integers(1, 5))
    a = data.draw(arrays(np.int64, (n, 6), elements=st.integers(0, 2)))
    b = data.draw(arrays(np.int64, (n, 6), elements=st.integers(0, 2)))
    mean, _ = dice_per_sample(a, b, 3)
    assert mean == pytest.approx(np.mean([dice_score(a[i], b[i], 3).mean for i in range(n)]),
                                 abs=1e-12)
