import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from buildfuse.jaccard import (
    gain,
    jaccard_image,
    jaccard_loss,
    jaccard_loss_grad,
    soft_jaccard_loss,
)


def central_difference(f, x: np.ndarray, idx, h: float = 1e-3) -> float:
    xp, xm = x.copy(), x.copy()
    xp[idx] += h
    xm[idx] -= h
    return (f(xp) - f(xm)) / (2 * h)


def test_both_empty_is_one():
    z = np.zeros((8, 8))
    assert jaccard_image(z, z) == 1.0
    assert jaccard_loss(z, z) == 0.0


def test_binary_example():
    assert jaccard_image([1, 1, 0, 0], [0, 1, 1, 0]) == pytest.approx(1 / 3, abs=1e-15)


def test_identity():
    y = (np.random.default_rng(0).random((8, 8)) > 0.5).astype(float)
    y[0, 0] = 1
    assert jaccard_image(y, y) == 1.0
    assert jaccard_loss(y, y) == 0.0


def test_empty_truth_nonempty_prediction_is_zero():
    assert jaccard_image(np.zeros(4), np.array([0, 0.3, 0, 0])) == 0.0


@pytest.mark.parametrize("p", [0.1, 0.25, 0.5, 0.9])
@pytest.mark.parametrize("shape", [(4, 4), (7, 3)])
def test_constant_prediction_against_full_truth(p, shape):
    # sum(y*y^) = pN, sum(y*+y^) = N + pN  ->  J = pN / (N + pN - pN) = p
    y = np.ones(shape)
    assert jaccard_loss(y, np.full(shape, p)) == pytest.approx(1 - p, abs=1e-12)


def test_shape_mismatch_and_nonfinite():
    with pytest.raises(ValueError):
        jaccard_image(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        jaccard_image(np.array([np.nan]), np.array([0.0]))


def test_grad_matches_finite_differences():
    rng = np.random.default_rng(1)
    y_star = (rng.random((8, 8)) > 0.5).astype(np.float64)
    y_hat = rng.uniform(0.05, 0.95, (8, 8))
    grad = jaccard_loss_grad(y_star, y_hat)
    errs = []
    for _ in range(100):
        idx = (int(rng.integers(8)), int(rng.integers(8)))
        fd = central_difference(lambda v: jaccard_loss(y_star, v), y_hat, idx)
        errs.append(abs(grad[idx] - fd) / max(abs(grad[idx]), abs(fd)))
    assert np.mean(np.asarray(errs) < 1e-4) >= 0.99


def test_torch_loss_agrees_with_closed_form():
    rng = np.random.default_rng(2)
    y_star = (rng.random((1, 1, 8, 8)) > 0.5).astype(np.float64)
    y_hat = torch.tensor(rng.uniform(0.05, 0.95, (1, 1, 8, 8)), requires_grad=True)
    loss = soft_jaccard_loss(torch.tensor(y_star), y_hat)
    loss.backward()
    assert float(loss.detach()) == pytest.approx(jaccard_loss(y_star, y_hat.detach().numpy()), abs=1e-14)
    np.testing.assert_allclose(
        y_hat.grad.numpy()[0, 0], jaccard_loss_grad(y_star[0, 0], y_hat.detach().numpy()[0, 0]), rtol=1e-10
    )


def test_torch_loss_empty_case_and_batch_mean():
    z = torch.zeros(2, 1, 4, 4)
    assert float(soft_jaccard_loss(z, z)) == 0.0
    ones = torch.ones(1, 1, 4, 4)
    batch_truth = torch.cat([ones, ones])
    batch_pred = torch.cat([ones, torch.full((1, 1, 4, 4), 0.5)])
    assert float(soft_jaccard_loss(batch_truth, batch_pred)) == pytest.approx(0.25)


class TestGain:
    @pytest.mark.parametrize(
        "new, base, expected_pct",
        [(0.8639, 0.8559, 0.93), (0.7080, 0.6805, 4.04), (0.5794, 0.5627, 2.97), (0.6290, 0.5855, 7.43)],
    )
    def test_reported_gains(self, new, base, expected_pct):
        assert 100 * gain(new, base) == pytest.approx(expected_pct, abs=0.01)

    def test_zero_gain(self):
        assert gain(0.42, 0.42) == 0.0

    @pytest.mark.parametrize("base", [0.0, -0.5])
    def test_non_positive_baseline(self, base):
        with pytest.raises(ValueError):
            gain(0.5, base)


maps = arrays(np.float64, (5, 5), elements=st.floats(0, 1))
binary = arrays(np.int8, (5, 5), elements=st.integers(0, 1))


@settings(max_examples=200, deadline=None)
@given(a=maps, b=maps)
def test_symmetry_bounds_duality(a, b):
    j = jaccard_image(a, b)
    assert j == jaccard_image(b, a)
    assert 0.0 <= j <= 1.0
    assert jaccard_loss(a, b) + j == 1.0


@settings(max_examples=200, deadline=None)
@given(a=binary, b=binary, r=st.integers(0, 4), c=st.integers(0, 4))
def test_monotone_on_binary_maps(a, b, r, c):
    j = jaccard_image(a, b)
    b2 = b.copy()
    b2[r, c] = 1
    if a[r, c] == 1:
        assert jaccard_image(a, b2) >= j
    else:
        assert jaccard_image(a, b2) <= j


@settings(max_examples=100, deadline=None)
@given(a=binary, b=binary)
def test_one_iff_equal_on_binary(a, b):
    assert (jaccard_image(a, b) == 1.0) == bool(np.array_equal(a, b))
