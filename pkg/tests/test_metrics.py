"""Tests for the dice/IoU metrics."""

import numpy as np
import pytest

from memseg.metrics import dice, iou


def test_identical_nonempty_masks():
    m = np.zeros((4, 4), dtype=np.uint8)
    m[1:3, 1:3] = 1
    assert dice(m, m) == 1.0
    assert iou(m, m) == 1.0


def test_disjoint_nonempty_masks():
    a = np.zeros((4, 4), dtype=np.uint8)
    b = np.zeros((4, 4), dtype=np.uint8)
    a[0, 0] = 1
    b[3, 3] = 1
    assert dice(a, b) == 0.0
    assert iou(a, b) == 0.0


def test_half_overlap_counts():
    # |A| = |B| = 4, |A n B| = 2 -> DSC 0.5, IoU 1/3
    a = np.zeros((4, 4), dtype=np.uint8)
    b = np.zeros((4, 4), dtype=np.uint8)
    a[0, 0:4] = 1
    b[0, 2:4] = 1
    b[1, 0:2] = 1
    assert dice(a, b) == 0.5
    assert iou(a, b) == pytest.approx(1.0 / 3.0, abs=1e-15)


def test_both_empty_defined_as_one():
    z = np.zeros((3, 3), dtype=np.uint8)
    assert dice(z, z) == 1.0
    assert iou(z, z) == 1.0


def test_non_binary_rejected():
    with pytest.raises(ValueError):
        dice(np.array([[0, 2]]), np.array([[0, 1]]))
    with pytest.raises(ValueError):
        iou(np.array([[0.5, 0.0]]), np.array([[0, 1]]))


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        dice(np.zeros((2, 2), dtype=np.uint8), np.zeros((3, 3), dtype=np.uint8))


def test_symmetry_and_identities_randomized():
    rng = np.random.default_rng(0)
    for _ in range(300):
        a = (rng.uniform(size=(6, 6)) < 0.4).astype(np.uint8)
        b = (rng.uniform(size=(6, 6)) < 0.4).astype(np.uint8)
        d, i = dice(a, b), iou(a, b)
        assert d == dice(b, a)
        assert i == iou(b, a)
        assert d >= i
        # dice == 2*iou / (1 + iou) exactly
        assert abs(d - 2.0 * i / (1.0 + i)) < 1e-12
        assert 0.0 <= d <= 1.0 and 0.0 <= i <= 1.0
