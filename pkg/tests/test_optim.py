import numpy as np
import pytest

from conftest import hp
from sarfuse.optim import Adam, NonFiniteError, bce_loss
from sarfuse.tensor import Parameter, ShapeError, backward, grad_check, sigmoid


def test_half_probability_gives_ln2():
    assert bce_loss(hp(np.full((1, 1, 4, 4), 0.5)), np.ones((1, 1, 4, 4))).item() == pytest.approx(np.log(2), rel=1e-12)
    assert bce_loss(hp(np.full((2, 2), 0.5)), np.zeros((2, 2))).item() == pytest.approx(np.log(2), rel=1e-12)


def test_perfect_prediction_bound():
    y = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert bce_loss(hp(y), y).item() <= -np.log(1 - 1e-7) * 1.0001


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        bce_loss(hp(np.full((2, 2), 0.5)), np.zeros((2, 3)))


@pytest.mark.parametrize("seed", range(25))
def test_logit_gradient(seed):
    r = np.random.default_rng(seed)
    z = hp(r.normal(0, 2, (2, 1, 3, 3)))
    y = (r.uniform(size=z.shape) > 0.5).astype(float)
    loss = bce_loss(sigmoid(z), y)
    backward(loss)
    np.testing.assert_allclose(z.grad, (1 / (1 + np.exp(-z.data)) - y) / y.size, rtol=1e-9, atol=1e-15)
    z.grad = None
    assert grad_check(lambda t: bce_loss(sigmoid(t), y), [z]).passed


def test_adam_first_step():
    p = Parameter(np.array([1.0]), precision="high")
    p.grad = np.array([1.0])
    Adam([p], lr=1e-3).step()
    assert p.data[0] == pytest.approx(1.0 - 1e-3, abs=1e-10)
    assert p.grad is None


def test_adam_zero_grad_is_null_update():
    p = Parameter(np.array([2.0, -1.0]), precision="high")
    opt = Adam([p])
    p.grad = np.array([1.0, 1.0])
    opt.step()
    before = p.data.copy()
    m_before = opt.m[0].copy()
    p.grad = np.zeros(2)
    opt.step()
    # zero gradient but nonzero momentum still moves; with fresh moments nothing moves
    np.testing.assert_allclose(opt.m[0], 0.9 * m_before)
    q = Parameter(np.array([3.0]), precision="high")
    fresh = Adam([q])
    q.grad = np.zeros(1)
    fresh.step()
    assert q.data[0] == 3.0
    assert not np.array_equal(before, p.data)


def test_adam_matches_reference_formula():
    r = np.random.default_rng(0)
    p = Parameter(r.normal(size=5), precision="high")
    x, m, v = p.data.copy(), np.zeros(5), np.zeros(5)
    opt = Adam([p], lr=0.01)
    for t in range(1, 11):
        g = r.normal(size=5)
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p.data, x, rtol=1e-12)


def test_adam_deterministic():
    def run():
        r = np.random.default_rng(5)
        p = Parameter(np.ones(3, np.float32))
        opt = Adam([p])
        for _ in range(20):
            p.grad = r.normal(size=3).astype(np.float32)
            opt.step()
        return p.data.tobytes()
    assert run() == run()


def test_adam_keeps_dtype():
    p = Parameter(np.ones(3, np.float32))
    p.grad = np.ones(3, np.float32)
    Adam([p]).step()
    assert p.data.dtype == np.float32


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_non_finite_gradient_aborts(bad):
    p = Parameter(np.ones(2), precision="high", name="w")
    p.grad = np.array([1.0, bad])
    with pytest.raises(NonFiniteError, match="w"):
        Adam([p]).step()
    assert np.array_equal(p.data, np.ones(2))
