import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from twrmcae.core import ShapeError, make_rng
from twrmcae.evaluation import (
    accuracy,
    confusion_matrix,
    convergence_epochs,
    knn_predict,
    mse,
    multiclass_accuracy,
    psnr,
    psnr_from_mse,
    softmax_probe,
)


def test_mse_examples():
    a = make_rng(0).uniform(0, 1, (3, 4, 4))
    assert mse(a, a) == 0.0
    assert mse(np.ones((1, 1, 1)), np.zeros((1, 1, 1))) == 1.0
    b = make_rng(1).uniform(0, 1, (3, 4, 4))
    assert mse(2 * a, 2 * b) == pytest.approx(4 * mse(a, b), rel=1e-12)
    with pytest.raises(ShapeError):
        mse(a, a[:2])


def test_psnr_examples():
    assert psnr_from_mse(0.01) == pytest.approx(20.0, abs=1e-12)
    a = np.full((3, 2, 2), 0.4)
    assert psnr(a, a) == math.inf
    assert psnr_from_mse(100.0, 255.0) == pytest.approx(20 * math.log10(25.5), abs=1e-12)
    assert psnr_from_mse(100.0, 255.0) == pytest.approx(28.13, abs=5e-3)
    with pytest.raises(ValueError):
        psnr_from_mse(0.1, 0.0)


@given(st.floats(1e-9, 1e3), st.floats(1e-9, 1e3))
def test_psnr_strictly_decreasing_in_mse(e1, e2):
    if e1 < e2 * (1 - 1e-12):
        assert psnr_from_mse(e1) > psnr_from_mse(e2)


def test_accuracy_examples():
    assert accuracy(tp=5, tn=3, fp=1, fn=1) == 0.8
    assert accuracy(tp=7, tn=9) == 1.0
    cm = np.zeros((7, 7), dtype=int)
    np.fill_diagonal(cm, 18)
    cm[0, 0] = 18
    cm[np.arange(7), (np.arange(7) + 1) % 7] = 2
    assert cm.sum() == 140 and np.trace(cm) == 126
    assert multiclass_accuracy(cm) == pytest.approx(0.9, abs=1e-15)
    with pytest.raises(ValueError):
        accuracy()
    with pytest.raises(ValueError):
        accuracy(tp=-1, tn=2)


@given(st.lists(st.integers(0, 4), min_size=1, max_size=50), st.integers(0, 2**31))
def test_accuracy_in_unit_interval(true, seed):
    pred = make_rng(seed).integers(0, 5, len(true))
    acc = multiclass_accuracy(confusion_matrix(true, pred, 5))
    assert 0.0 <= acc <= 1.0


def test_knn_identical_point_and_single_label():
    rng = make_rng(2)
    x = rng.standard_normal((10, 4))
    y = np.arange(10) % 3
    np.testing.assert_array_equal(knn_predict(x, y, x[4:5], k=1), [y[4]])
    np.testing.assert_array_equal(knn_predict(x, np.full(10, 6), rng.standard_normal((5, 4)), k=3), 6)
    with pytest.raises(ValueError):
        knn_predict(x, y, x, k=0)


def brute_force_nearest(train_x, train_y, test_x):
    out = []
    for t in test_x:
        best, lab = np.inf, None
        for p, y in zip(train_x, train_y):
            d = math.sqrt(sum((a - b) ** 2 for a, b in zip(t, p)))
            if d < best:
                best, lab = d, y
        out.append(lab)
    return np.array(out)


def test_knn_separated_clusters():
    rng = make_rng(3)
    centres = np.array([[0.0, 0.0, 0.0], [50.0, 50.0, 50.0]])
    train_y = np.repeat([0, 1], 20)
    train_x = centres[train_y] + rng.standard_normal((40, 3))
    test_y = np.repeat([0, 1], 10)
    test_x = centres[test_y] + rng.standard_normal((20, 3))
    pred = knn_predict(train_x, train_y, test_x, k=5)
    np.testing.assert_array_equal(pred, brute_force_nearest(train_x, train_y, test_x))
    assert np.mean(pred == test_y) == 1.0


@given(st.integers(0, 2**31))
def test_knn_permutation_invariant(seed):
    rng = make_rng(seed)
    # integer grid points make distance ties common so the tie-breaks are exercised
    x = rng.integers(0, 3, (15, 2)).astype(float)
    y = rng.integers(0, 3, 15)
    q = rng.integers(0, 3, (6, 2)).astype(float)
    perm = rng.permutation(15)
    np.testing.assert_array_equal(knn_predict(x, y, q, 4), knn_predict(x[perm], y[perm], q, 4))


def test_convergence_epochs_examples():
    assert convergence_epochs([0.7] * 6) == 1
    assert convergence_epochs([0.5, 0.8, 0.9, 0.9, 0.9]) == 3
    assert convergence_epochs([0.1, 0.2, 0.3, 0.4, 0.5]) == 5
    with pytest.raises(ValueError):
        convergence_epochs([])


def test_softmax_probe_learns_separable_classes():
    rng = make_rng(4)
    y = np.repeat([0, 1, 2], 20)
    x = np.eye(3)[y] * 5 + rng.standard_normal((60, 3)) * 0.1
    curve = softmax_probe(x[::2], y[::2], x[1::2], y[1::2], 3, epochs=10)
    assert len(curve) == 10 and curve[-1] == 1.0
    assert curve == softmax_probe(x[::2], y[::2], x[1::2], y[1::2], 3, epochs=10)
