"""Adam update rules."""
import numpy as np
import pytest

from hqseg.optim import Adam
from hqseg.tensor import Tensor


def test_zero_gradient_leaves_parameters_unchanged():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    opt = Adam([("p", p)])
    p.grad = np.zeros(3)
    before = p.data.copy()
    opt.step()
    assert np.array_equal(p.data, before)


def test_missing_gradient_counts_as_zero():
    p = Tensor(np.array([0.5]), requires_grad=True)
    opt = Adam([("p", p)])
    opt.step()
    assert np.array_equal(p.data, [0.5])


def test_first_step_moves_by_lr_times_sign():
    p = Tensor(np.array([1.0, 1.0]), requires_grad=True)
    opt = Adam([("p", p)], lr=1e-3)
    p.grad = np.array([0.37, -4.2])
    opt.step()
    # bias-corrected first step: delta = -lr * g / (|g| + eps') ~= -lr*sign(g)
    assert np.allclose(p.data, [1.0 - 1e-3, 1.0 + 1e-3], atol=1e-6)


def test_quadratic_converges_monotonically_after_warmup():
    p = Tensor(np.array([5.0]), requires_grad=True)
    opt = Adam([("p", p)], lr=0.1)
    dist = []
    for _ in range(60):
        p.grad = 2.0 * (p.data - 1.0)  # d/dp (p-1)^2
        opt.step()
        dist.append(abs(p.data[0] - 1.0))
    assert all(b <= a + 1e-12 for a, b in zip(dist[5:], dist[6:]))
    assert dist[-1] < 0.5


def test_shape_mismatch_rejected():
    p = Tensor(np.zeros(3), requires_grad=True)
    opt = Adam([("p", p)])
    p.grad = np.zeros(4)
    with pytest.raises(ValueError, match="gradient shape"):
        opt.step()


def test_state_round_trip():
    p = Tensor(np.array([2.0]), requires_grad=True)
    opt = Adam([("p", p)], lr=0.05)
    for _ in range(3):
        p.grad = np.array([1.3])
        opt.step()
    arrays = {k: v.copy() for k, v in opt.state_arrays().items()}
    clone = Adam([("p", p)], lr=0.05)
    clone.load_state_arrays(arrays)
    assert clone.step_count == 3
    assert np.array_equal(clone.m["p"], opt.m["p"])
    assert np.array_equal(clone.v["p"], opt.v["p"])


def test_invalid_lr():
    with pytest.raises(ValueError, match="lr"):
        Adam([], lr=0.0)
