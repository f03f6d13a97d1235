import numpy as np
import pytest

from mbbr import autodiff as ad
from mbbr.errors import DimensionError
from mbbr.optim import Adam, AdamState, adam_step


def reference_adam(theta, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8, decoupled=False):
    """Scalar Adam written out step by step."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        if not decoupled:
            g = g + wd * theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat, vhat = m / (1 - b1 ** t), v / (1 - b2 ** t)
        if decoupled:
            theta = theta - lr * wd * theta
        theta = theta - lr * mhat / (np.sqrt(vhat) + eps)
    return theta


@pytest.mark.parametrize("decoupled", [False, True])
def test_adam_matches_hand_formula(decoupled):
    grads = [0.5, -1.5, 2.0, 0.1]
    p = np.array([1.2])
    state = AdamState(learning_rate=0.01, weight_decay=0.1, decoupled=decoupled)
    for g in grads:
        adam_step([p], [np.array([g])], state)
    assert p[0] == pytest.approx(reference_adam(1.2, grads, 0.01, 0.1, decoupled=decoupled), rel=1e-13)


def test_first_step_moves_by_learning_rate():
    # With bias correction the first update is lr * sign(g) (up to eps).
    p = np.array([0.0, 0.0])
    adam_step([p], [np.array([3.0, -0.001])], AdamState(learning_rate=0.1, weight_decay=0.0))
    np.testing.assert_allclose(p, [-0.1, 0.1], rtol=1e-4)


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        adam_step([np.zeros(3)], [np.zeros(4)], AdamState())


def test_missing_gradient_counts_as_zero():
    a, b = ad.parameter([1.0]), ad.parameter([1.0])
    opt = Adam([a, b], lr=0.1, weight_decay=0.0)
    ad.backward(ad.tsum(a * 2.0))
    opt.step()
    assert a.data[0] < 1.0 and b.data[0] == 1.0


def test_defaults():
    s = Adam([ad.parameter([0.0])]).state
    assert (s.learning_rate, s.weight_decay, s.beta1, s.beta2, s.epsilon) == (2e-3, 1e-4, 0.9, 0.999, 1e-8)
    assert not s.decoupled


def test_minimises_quadratic():
    x = ad.parameter([5.0, -3.0])
    opt = Adam([x], lr=0.1, weight_decay=0.0)
    for _ in range(500):
        opt.zero_grad()
        ad.backward(ad.tsum(x * x))
        opt.step()
    assert np.abs(x.data).max() < 1e-2
