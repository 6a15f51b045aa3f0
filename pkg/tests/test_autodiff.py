import numpy as np
import pytest

from m2vae import autodiff as ad


def numeric_grad(f, arrays, h=1e-6):
    """Central differences of scalar f(*arrays) wrt every entry of every array."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        for i in np.ndindex(a.shape):
            old = a[i]
            a[i] = old + h
            up = f(*arrays)
            a[i] = old - h
            down = f(*arrays)
            a[i] = old
            g[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def check(op, *shapes, positive=(), seed=0, tol=1e-6):
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=s) for s in shapes]
    for i in positive:
        arrays[i] = np.abs(arrays[i]) + 0.5
    probe = None

    def value(*arrs):
        nonlocal probe
        out = op(*[ad.Tensor(a) for a in arrs]).data
        if probe is None:
            probe = np.random.default_rng(seed + 1).normal(size=out.shape)
        return float(np.sum(out * probe))

    value(*arrays)
    with ad.Tape() as tape:
        leaves = {str(i): ad.Tensor(a.copy(), requires_grad=True) for i, a in enumerate(arrays)}
        out = op(*leaves.values())
        loss = ad.sum_(ad.mul(out, probe))
    got = ad.backward(tape, loss, leaves)
    want = numeric_grad(value, arrays)
    for i, w in enumerate(want):
        np.testing.assert_allclose(got[str(i)], w, rtol=tol, atol=tol)


def test_quadratic():
    w0 = np.array([1.5, -2.0, 0.25])
    with ad.Tape() as tape:
        w = ad.Tensor(w0, requires_grad=True)
        loss = (w * w).sum()
    g = ad.backward(tape, loss, {"w": w})
    np.testing.assert_array_equal(g["w"], 2 * w0)


def test_constant_objective_has_zero_gradient():
    with ad.Tape() as tape:
        w = ad.Tensor(np.ones((2, 3)), requires_grad=True)
        c = ad.Tensor(np.array(4.0))
        loss = c * c
    g = ad.backward(tape, loss, {"w": w})
    np.testing.assert_array_equal(g["w"], np.zeros((2, 3)))


def test_backward_needs_scalar():
    with ad.Tape() as tape:
        w = ad.Tensor(np.ones(3), requires_grad=True)
        y = w * w
    with pytest.raises(ValueError):
        ad.backward(tape, y)


def test_shared_subexpression_accumulates():
    with ad.Tape() as tape:
        x = ad.Tensor(np.array(3.0), requires_grad=True)
        y = x * x
        z = y + y * x
    g = ad.backward(tape, z, {"x": x})
    assert g["x"] == pytest.approx(2 * 3 + 3 * 9)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_raises():
    with pytest.raises(FloatingPointError, match="exp"):
        ad.exp(ad.Tensor(np.array([1000.0])))


def test_stop_gradient_blocks_path():
    with ad.Tape() as tape:
        x = ad.Tensor(np.array([2.0]), requires_grad=True)
        loss = (ad.stop_gradient(x) * x).sum()
    assert ad.backward(tape, loss, {"x": x})["x"][0] == pytest.approx(2.0)


@pytest.mark.parametrize("op,shapes", [
    (ad.add, [(3, 4), (4,)]),
    (ad.mul, [(3, 4), (1, 4)]),
    (ad.matmul, [(3, 4), (4, 2)]),
    (ad.neg, [(5,)]),
    (lambda a: ad.sum_(a, axis=0), [(3, 4)]),
    (ad.tanh, [(3, 4)]),
    (ad.sigmoid, [(3, 4)]),
    (ad.exp, [(3, 4)]),
    (lambda a, b: ad.concat([a, b]), [(3, 2), (3, 4)]),
    (lambda a: ad.clip(a, -0.5, 0.5), [(20,)]),
    (ad.gaussian_kl, [(3, 4)] * 4),
    (ad.kl_standard, [(3, 4), (3, 4)]),
    (ad.gaussian_log_prob, [(3, 4)] * 3),
])
def test_primitive_gradients(op, shapes):
    check(op, *shapes)


def test_relu_gradient_away_from_kink():
    check(ad.relu, (4, 5), seed=3)


def test_bernoulli_log_prob_gradient():
    rng = np.random.default_rng(4)
    x = (rng.random((3, 4)) < 0.5).astype(float)
    check(lambda logits: ad.bernoulli_log_prob(ad.Tensor(x), logits), (3, 4))


def test_composite_mlp_gradient():
    def net(x, w1, b1, w2):
        return ad.matmul(ad.tanh(ad.add(ad.matmul(x, w1), b1)), w2)
    check(net, (5, 3), (3, 4), (4,), (4, 2))
