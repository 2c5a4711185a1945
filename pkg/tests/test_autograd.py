import math

import numpy as np
import pytest

from molfusion import autograd as ag
from molfusion.autograd import IndexOutOfRange, NotScalar, Parameter, ShapeMismatch, Tensor


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        up, dn = x.copy(), x.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (f(up) - f(dn)) / (2 * h)
    return g


def check(build, *shapes, seed=0, positive=False):
    """Compare reverse-mode grads of ``build(*tensors)`` with central differences."""
    rng = np.random.default_rng(seed)
    xs = [rng.normal(size=s) for s in shapes]
    if positive:
        xs = [np.abs(x) + 0.5 for x in xs]
    params = [Parameter(x, f"x{i}") for i, x in enumerate(xs)]
    grads = ag.grad_of(build(*params), params)
    for k, x in enumerate(xs):
        def f(v, k=k):
            args = [Tensor(v) if j == k else Tensor(xs[j]) for j in range(len(xs))]
            return build(*args).item()
        np.testing.assert_allclose(grads[k], fd_grad(f, x.copy()), rtol=1e-6, atol=1e-8)


def test_forward_examples():
    np.testing.assert_allclose(ag.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(ag.sub(Tensor([[1.0, 2.0]]), Tensor([[0.5, 1.0]])).data, [[0.5, 1.0]])
    x = np.random.default_rng(0).normal(size=(3, 4))
    assert np.array_equal(ag.matmul(Tensor(np.eye(3)), Tensor(x)).data, x)
    assert np.array_equal(ag.transpose(ag.transpose(Tensor(x))).data, x)


def test_mse_examples():
    assert ag.mse(Tensor([[0.3]]), Tensor([[0.5]])).item() == pytest.approx(0.04, abs=1e-15)
    assert ag.mse(Tensor(np.eye(2)), Tensor([[1, 0.5], [0.5, 1]])).item() == 0.125
    assert ag.mse(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2)))).item() == 0.0
    with pytest.raises(ShapeMismatch):
        ag.mse(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 3))))


def test_cross_entropy_examples():
    assert ag.cross_entropy(Tensor(np.zeros((4, 7))), [0, 3, 6, 2]).item() == pytest.approx(math.log(7), abs=1e-12)
    logits = np.zeros((3, 5))
    logits[np.arange(3), [1, 2, 4]] = 20.0
    assert ag.cross_entropy(Tensor(logits), [1, 2, 4]).item() < 1e-8
    assert ag.cross_entropy(Tensor([[0.0, math.log(3)]]), [1]).item() == pytest.approx(-math.log(0.75), abs=1e-12)
    with pytest.raises(IndexOutOfRange):
        ag.cross_entropy(Tensor(np.zeros((1, 3))), [3])


def test_softmax_stability_and_normalisation():
    x = np.random.default_rng(1).normal(size=(5, 9)) * 300
    s = ag.softmax(Tensor(x)).data
    assert np.all(np.isfinite(s))
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)
    assert ag.cross_entropy(Tensor(x), np.arange(5)).item() >= 0


def test_backward_examples():
    x = Parameter(3.0, "x")
    ag.backward(ag.square(x))
    assert x.grad == 6.0
    y = Parameter(np.ones(3), "y")
    z = Parameter(np.ones(3), "z")
    assert np.array_equal(ag.grad_of(ag.sum_(ag.square(y)), [y, z])[1], np.zeros(3))
    with pytest.raises(NotScalar):
        ag.backward(ag.square(y))


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        ag.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ShapeMismatch):
        ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@pytest.mark.parametrize("name, build, shapes, positive", [
    ("add", lambda a, b: ag.sum_(ag.mul(ag.add(a, b), a)), [(3, 4), (3, 4)], False),
    ("broadcast", lambda a, b: ag.sum_(ag.square(ag.add(a, b))), [(3, 4), (4,)], False),
    ("sub", lambda a, b: ag.sum_(ag.square(ag.sub(a, b))), [(2, 5), (2, 5)], False),
    ("scale", lambda a: ag.sum_(ag.square(ag.scale(a, -2.5))), [(4,)], False),
    ("relu_tanh", lambda a: ag.sum_(ag.mul(ag.relu(a), ag.tanh(a))), [(3, 3)], False),
    ("log", lambda a: ag.sum_(ag.log(a)), [(5,)], True),
    ("matmul", lambda a, b: ag.sum_(ag.square(ag.matmul(a, b))), [(3, 4), (4, 2)], False),
    ("batched", lambda a, b: ag.sum_(ag.tanh(ag.matmul(a, b))), [(2, 3, 4), (2, 4, 5)], False),
    ("permute", lambda a: ag.sum_(ag.mul(ag.transpose(a, (1, 0, 2)), ag.transpose(a, (1, 0, 2)))), [(2, 3, 4)], False),
    ("reshape", lambda a: ag.sum_(ag.tanh(ag.reshape(a, (6, 2)))), [(3, 4)], False),
    ("concat", lambda a, b: ag.sum_(ag.square(ag.concat([a, b], axis=1))), [(2, 3), (2, 2)], False),
    ("slice", lambda a: ag.sum_(ag.square(a[1:, :2])), [(3, 4)], False),
    ("gather", lambda a: ag.sum_(ag.square(ag.gather_rows(a, [2, 0, 2]))), [(3, 4)], False),
    ("segment", lambda a: ag.sum_(ag.square(ag.segment_sum(a, np.array([0, 1, 0, 2]), 3))), [(4, 3)], False),
    ("mean", lambda a: ag.sum_(ag.square(ag.mean(a, axis=0))), [(4, 3)], False),
    ("softmax", lambda a: ag.sum_(ag.mul(ag.softmax(a), ag.softmax(a))), [(3, 5)], False),
    ("log_softmax", lambda a: ag.sum_(ag.square(ag.log_softmax(a))), [(3, 5)], False),
    ("layer_norm", lambda a, g, b: ag.sum_(ag.tanh(ag.layer_norm(a, g, b))), [(3, 6), (6,), (6,)], False),
    ("mse", lambda a, b: ag.mse(a, b), [(4, 4), (4, 4)], False),
    ("cross_entropy", lambda a: ag.cross_entropy(a, np.array([0, 2, 1])), [(3, 4)], False),
])
def test_gradients_match_finite_differences(name, build, shapes, positive):
    check(build, *shapes, positive=positive)


def test_mse_graph_random_inputs():
    rng = np.random.default_rng(5)
    target = rng.uniform(size=(4, 4))
    for seed in range(3):
        check(lambda s, g: ag.mse(ag.scale(ag.matmul(s, ag.transpose(g)), 10.0), Tensor(target)),
              (4, 8), (4, 8), seed=seed)


def test_no_grad_builds_no_graph():
    x = Parameter(np.ones(3), "x")
    with ag.no_grad():
        y = ag.square(x)
    assert not y.requires_grad and y._parents == ()
    assert ag.grad_enabled()


def test_adam_examples():
    p = {"w": np.array([1.0, -2.0])}
    state = ag.AdamState()
    ag.adam_step(p, {"w": np.zeros(2)}, state, lr=0.1)
    assert np.array_equal(p["w"], [1.0, -2.0])

    p = {"w": np.array(0.0)}
    ag.adam_step(p, {"w": np.array(1.0)}, ag.AdamState(), lr=0.1)
    assert p["w"] == pytest.approx(-0.1, abs=1e-8)

    def run():
        rng = np.random.default_rng(9)
        w = Parameter(rng.normal(size=(3, 3)), "w")
        opt = ag.Adam({"w": w}, lr=0.05)
        for _ in range(10):
            opt.zero_grad()
            ag.backward(ag.sum_(ag.square(ag.tanh(w))))
            opt.step()
        return w.data
    assert np.array_equal(run(), run())
