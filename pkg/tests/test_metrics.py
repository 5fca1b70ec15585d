import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fuzzyseg.metrics import count_components, mean_iou, metrics, pooled_metrics, region_counts

label_maps = arrays(np.int64, (6, 5), elements=st.integers(0, 4))


def test_identical_maps():
    t = np.random.default_rng(0).integers(0, 5, (8, 8))
    for c in range(5):
        m = metrics(t, t, c)
        assert (m.tpr, m.fpr, m.iou) == (1.0, 0.0, 1.0)


def test_disjoint_equal_regions():
    truth = np.zeros((4, 4), int)
    pred = np.zeros((4, 4), int)
    truth[:2, :2] = 1
    pred[2:, 2:] = 1
    m = metrics(pred, truth, 1)
    assert (m.tpr, m.fpr, m.iou) == (0.0, 1.0, 0.0)


def test_half_overlapping_squares():
    truth = np.zeros((4, 4), int)
    pred = np.zeros((4, 4), int)
    truth[0:2, 0:2] = 1
    pred[0:2, 1:3] = 1
    m = metrics(pred, truth, 1)
    assert m.tpr == 0.5 and m.fpr == 0.5
    assert m.iou == pytest.approx(1 / 3)
    assert region_counts(pred, truth, 1) == (2, 6, 4)


def test_absent_class():
    z = np.zeros((3, 3), int)
    m = metrics(z, z, 1)
    assert m.tpr is None and m.fpr is None and m.iou == 1.0
    pred = z.copy()
    pred[0, 0] = 1
    m = metrics(pred, z, 1)
    assert m.tpr is None and m.iou == 0.0


def test_shape_mismatch():
    with pytest.raises(ValueError, match="differ in shape"):
        metrics(np.zeros((2, 2)), np.zeros((2, 3)), 0)


def test_mean_iou_two_image_hand_count():
    preds = [np.array([[0, 1], [1, 1]]), np.array([[2, 2], [3, 4]])]
    truths = [np.array([[0, 1], [0, 1]]), np.array([[2, 3], [3, 4]])]
    per_class, miou = mean_iou(preds, truths)
    np.testing.assert_allclose(per_class, [1 / 2, 2 / 3, 1 / 2, 1 / 2, 1.0])
    assert miou == pytest.approx(19 / 30)


def test_mean_iou_perfect_and_missing_classes():
    t = np.zeros((4, 4), int)
    t[1:3, 1:3] = 3
    per_class, miou = mean_iou([t], [t])
    np.testing.assert_array_equal(per_class, 1.0)
    assert miou == 1.0


def test_mean_iou_needs_pairs():
    with pytest.raises(ValueError, match="non-empty"):
        mean_iou([], [])


@settings(max_examples=100, deadline=None)
@given(label_maps, label_maps, st.integers(0, 4))
def test_iou_identity(pred, truth, c):
    m = metrics(pred, truth, c)
    if m.tpr is not None:
        assert m.iou == pytest.approx(m.tpr / (1 + m.fpr), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(label_maps, label_maps), min_size=1, max_size=5), st.randoms())
def test_mean_iou_permutation_invariant(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    a = mean_iou([p for p, _ in pairs], [t for _, t in pairs])
    b = mean_iou([p for p, _ in shuffled], [t for _, t in shuffled])
    np.testing.assert_array_equal(a[0], b[0])


def test_pooled_metrics_counts():
    t1 = np.array([[1, 1], [0, 0]])
    p1 = np.array([[1, 0], [0, 0]])
    t2 = np.array([[0, 0], [0, 0]])
    p2 = np.array([[0, 1], [0, 0]])
    m = pooled_metrics([p1, p2], [t1, t2], 1)
    assert m.tpr == 0.5 and m.fpr == 0.5 and m.iou == pytest.approx(1 / 3)


def test_components_use_four_connectivity():
    diagonal = np.eye(3, dtype=bool)
    assert count_components(diagonal) == 3
    assert count_components(np.ones((2, 2), bool)) == 1
    assert count_components(np.zeros((2, 2), bool)) == 0
