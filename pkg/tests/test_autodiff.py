import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from vibmil import autodiff as ad


def rand(rng, *shape, lo=-1.0, hi=1.0):
    return ad.Tensor(rng.uniform(lo, hi, size=shape))


def away_from(rng, shape, points, margin=0.1, lo=-2.0, hi=2.0):
    """Uniform samples kept at least ``margin`` away from the kinks in ``points``."""
    x = rng.uniform(lo, hi, size=shape)
    for p in points:
        close = np.abs(x - p) < margin
        x[close] = p + np.sign(x[close] - p + 1e-12) * margin * 1.5
    return ad.Tensor(x)


# Each case builds (scalar function, inputs) for one op from a seeded generator.
# A random weighting makes the reduction to a scalar non-trivial.
def _weighted(y, rng):
    w = ad.Tensor(rng.normal(size=y.shape))
    return ad.sum(y * w)


def case_add(rng):
    return (lambda a, b: _weighted(ad.add(a, b), np.random.default_rng(1))), [rand(rng, 3, 4), rand(rng, 3, 4)]


def case_sub(rng):
    return (lambda a, b: _weighted(ad.sub(a, b), np.random.default_rng(1))), [rand(rng, 3, 4), rand(rng, 3, 4)]


def case_mul(rng):
    return (lambda a, b: _weighted(ad.mul(a, b), np.random.default_rng(1))), [rand(rng, 3, 4), rand(rng, 3, 4)]


def case_scalar_broadcast(rng):
    return (lambda a, s: _weighted(a * s + s, np.random.default_rng(1))), [rand(rng, 2, 3), rand(rng)]


def case_scale(rng):
    return (lambda a: _weighted(ad.scale(a, -2.5), np.random.default_rng(1))), [rand(rng, 5)]


def case_sigmoid(rng):
    return (lambda a: _weighted(ad.sigmoid(a), np.random.default_rng(1))), [rand(rng, 4, 3, lo=-4, hi=4)]


def case_tanh(rng):
    return (lambda a: _weighted(ad.tanh(a), np.random.default_rng(1))), [rand(rng, 4, 3, lo=-3, hi=3)]


def case_relu(rng):
    return (lambda a: _weighted(ad.relu(a), np.random.default_rng(1))), [away_from(rng, (4, 3), [0.0])]


def case_log(rng):
    return (lambda a: _weighted(ad.log(a), np.random.default_rng(1))), [rand(rng, 6, lo=0.2, hi=3.0)]


def case_exp(rng):
    return (lambda a: _weighted(ad.exp(a), np.random.default_rng(1))), [rand(rng, 6, lo=-2, hi=2)]


def case_clip(rng):
    return (lambda a: _weighted(ad.clip(a, -0.5, 0.7), np.random.default_rng(1))), [away_from(rng, (8,), [-0.5, 0.7])]


def case_matmul(rng):
    return (lambda a, b: _weighted(ad.matmul(a, b), np.random.default_rng(1))), [rand(rng, 3, 4), rand(rng, 4, 2)]


def case_reshape(rng):
    return (lambda a: _weighted(ad.reshape(a, (2, 6)), np.random.default_rng(1))), [rand(rng, 3, 4)]


def case_tile_rows(rng):
    return (lambda v: _weighted(ad.tile_rows(v, 3), np.random.default_rng(1))), [rand(rng, 4)]


def case_tile_cols(rng):
    return (lambda v: _weighted(ad.tile_cols(v, 3), np.random.default_rng(1))), [rand(rng, 4)]


def case_softmax(rng):
    axis = int(rng.integers(0, 2))
    return (lambda a: _weighted(ad.softmax(a, axis=axis), np.random.default_rng(1))), [rand(rng, 3, 4, lo=-3, hi=3)]


def case_sum(rng):
    axis = [None, 0, 1][int(rng.integers(0, 3))]
    return (lambda a: _weighted(ad.sum(a, axis=axis), np.random.default_rng(1))), [rand(rng, 3, 4)]


def case_mean(rng):
    axis = [None, 0, 1][int(rng.integers(0, 3))]
    return (lambda a: _weighted(ad.mean(a, axis=axis), np.random.default_rng(1))), [rand(rng, 3, 4)]


def case_max(rng):
    axis = [None, 0, 1][int(rng.integers(0, 3))]
    # distinct values spaced well beyond the finite-difference step
    x = rng.permutation(12).reshape(3, 4) * 0.1 + rng.uniform(0, 0.01, size=(3, 4))
    return (lambda a: _weighted(ad.max(a, axis=axis), np.random.default_rng(1))), [ad.Tensor(x)]


def case_cross_entropy(rng):
    label = int(rng.integers(0, 3))
    return (lambda z: ad.cross_entropy(z, label)), [rand(rng, 3, lo=-3, hi=3)]


CASES = {name[5:]: fn for name, fn in dict(globals()).items() if name.startswith("case_")}


def test_every_registered_op_has_a_gradient_case():
    covered = set(CASES) - {"scalar_broadcast"}
    assert set(ad.registered_ops()) <= covered


@pytest.mark.parametrize("name", sorted(CASES))
def test_finite_differences_100_seeds(name):
    worst = 0.0
    for seed in range(100):
        f, inputs = CASES[name](np.random.default_rng([seed, 17]))
        worst = max(worst, ad.finite_diff_check(f, inputs))
    assert worst < 1e-4


class TestCreate:
    def test_zeros(self):
        np.testing.assert_array_equal(ad.create([2, 2]).data, [[0, 0], [0, 0]])

    def test_explicit(self):
        np.testing.assert_array_equal(ad.create([3], "explicit", values=[1, 2, 3]).data, [1, 2, 3])

    def test_constant(self):
        np.testing.assert_array_equal(ad.create([2], "constant", value=4.5).data, [4.5, 4.5])

    def test_uniform_is_reproducible(self):
        a = ad.create([4], "uniform", low=0, high=1, seed=7)
        b = ad.create([4], "uniform", low=0, high=1, seed=7)
        assert a.data.tobytes() == b.data.tobytes()
        assert np.all((a.data >= 0) & (a.data < 1))

    def test_requires_grad_defaults_false(self):
        assert not ad.create([1]).requires_grad

    @pytest.mark.parametrize("kwargs", [
        {"shape": []}, {"shape": [0, 2]}, {"shape": [2], "init": "explicit", "values": [1, 2, 3]},
        {"shape": [2], "init": "uniform"},
    ])
    def test_rejects_bad_shapes(self, kwargs):
        with pytest.raises(ValueError):
            ad.create(**kwargs)


class TestForward:
    def test_matmul_identity(self):
        a = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(ad.matmul(ad.Tensor(a), ad.Tensor(np.eye(3))).data, a)

    def test_matmul_hand_sum(self):
        out = ad.matmul(ad.Tensor([[1.0, 2.0], [3.0, 4.0]]), ad.Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_matmul_dimension_mismatch(self):
        with pytest.raises(ValueError):
            ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))

    def test_binary_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.add(ad.Tensor(np.ones(3)), ad.Tensor(np.ones(4)))

    def test_sigmoid_relu(self):
        assert ad.sigmoid(ad.Tensor(0.0)).item() == 0.5
        np.testing.assert_array_equal(ad.relu(ad.Tensor([-1.0, 2.0])).data, [0.0, 2.0])

    def test_sigmoid_extremes_are_finite(self):
        out = ad.sigmoid(ad.Tensor([-800.0, 800.0])).data
        np.testing.assert_array_equal(out, [0.0, 1.0])

    def test_log_domain(self):
        with pytest.raises(ValueError):
            ad.log(ad.Tensor([1.0, 0.0]))

    def test_softmax_examples(self):
        np.testing.assert_allclose(ad.softmax(ad.Tensor([0.0, 0.0])).data, [0.5, 0.5])
        np.testing.assert_allclose(ad.softmax(ad.Tensor([1000.0, 1000.0])).data, [0.5, 0.5])
        np.testing.assert_allclose(ad.softmax(ad.Tensor([math.log(2), 0.0])).data, [2 / 3, 1 / 3], rtol=1e-15)

    def test_reductions(self):
        assert ad.mean(ad.Tensor([1.0, 2.0, 3.0])).item() == 2.0
        assert ad.sum(ad.Tensor([[1.0, 2.0], [3.0, 4.0]])).item() == 10.0
        np.testing.assert_array_equal(ad.max(ad.Tensor([[1.0, 5.0], [3.0, 4.0]]), axis=0).data, [3.0, 5.0])

    def test_cross_entropy_examples(self):
        assert ad.cross_entropy(ad.Tensor([0.0, 0.0]), 0).item() == pytest.approx(math.log(2), abs=1e-12)
        assert ad.cross_entropy(ad.Tensor([20.0, -20.0]), 0).item() == pytest.approx(0.0, abs=1e-15)
        # ln(e + e^2) - 2 = ln(1 + e^-1)
        assert ad.cross_entropy(ad.Tensor([1.0, 2.0]), 1).item() == pytest.approx(0.313262, abs=1e-6)
        assert ad.cross_entropy(ad.Tensor([1e4, -1e4]), 1).item() == pytest.approx(2e4)

    @pytest.mark.parametrize("logits,label", [([1.0], 0), ([1.0, 2.0], 2), ([1.0, 2.0], -1)])
    def test_cross_entropy_errors(self, logits, label):
        with pytest.raises(ValueError):
            ad.cross_entropy(ad.Tensor(logits), label)


class TestBackward:
    def test_sum_gives_ones(self):
        w = ad.parameter(np.arange(4.0).reshape(2, 2))
        ad.backward(ad.sum(w))
        np.testing.assert_array_equal(w.grad, np.ones((2, 2)))

    def test_max_tie_goes_to_lowest_index(self):
        x = ad.parameter([0.2, 0.9, 0.9])
        y = ad.max(x)
        ad.backward(y)
        assert y.item() == 0.9
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])

    def test_disconnected_tensor_has_no_grad(self):
        a, b = ad.parameter([1.0, 2.0]), ad.parameter([3.0])
        ad.backward(ad.sum(a))
        assert b.grad is None

    def test_non_grad_tensor_never_accumulates(self):
        a, c = ad.parameter([1.0, 2.0]), ad.Tensor([3.0, 4.0])
        ad.backward(ad.sum(a * c))
        assert c.grad is None
        np.testing.assert_array_equal(a.grad, [3.0, 4.0])

    def test_non_scalar_loss(self):
        with pytest.raises(ValueError):
            ad.backward(ad.parameter([1.0, 2.0]) * 2.0)

    def test_twice_is_exactly_double(self):
        rng = np.random.default_rng(3)
        w = ad.parameter(rng.normal(size=(4, 3)))
        x = ad.Tensor(rng.normal(size=(5, 4)))
        loss = ad.sum(ad.tanh(x @ w))
        ad.backward(loss)
        once = w.grad.copy()
        ad.backward(loss)
        np.testing.assert_array_equal(w.grad, 2 * once)

    def test_shared_subexpression_accumulates(self):
        x = ad.parameter([3.0])
        y = x * x + x
        ad.backward(ad.sum(y))
        np.testing.assert_array_equal(x.grad, [7.0])

    def test_no_grad_records_nothing(self):
        x = ad.parameter([1.0])
        with ad.no_grad():
            y = ad.sigmoid(x)
        assert y.node is None and not y.requires_grad
        assert ad.grad_enabled()

    def test_no_grad_is_thread_local(self):
        seen = []
        with ad.no_grad():
            t = threading.Thread(target=lambda: seen.append(ad.grad_enabled()))
            t.start()
            t.join()
        assert seen == [True]

    def test_composite_mlp_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        x = ad.Tensor(rng.normal(size=(6, 5)))
        w1, b1 = rand(rng, 5, 4), rand(rng, 4)
        w2, b2 = rand(rng, 4, 3), rand(rng, 3)

        def f(w1, b1, w2, b2):
            h = ad.tanh(x @ w1 + ad.tile_rows(b1, 6))
            logits = ad.mean(h @ w2 + ad.tile_rows(b2, 6), axis=0)
            return ad.cross_entropy(logits, 2)

        assert ad.finite_diff_check(f, [w1, b1, w2, b2]) < 1e-4


class TestFiniteDiffOracle:
    def test_linear_is_exact(self):
        c = ad.Tensor(np.array([1.5, -2.0, 0.25]))
        assert ad.finite_diff_check(lambda a: ad.sum(a * c), [ad.Tensor([0.3, 0.1, -0.7])]) <= 1e-10

    def test_sigmoid_matmul_chain(self):
        rng = np.random.default_rng(5)
        x = ad.Tensor(rng.normal(size=(3, 4)))
        err = ad.finite_diff_check(lambda w: ad.sum(ad.sigmoid(x @ w)), [rand(rng, 4, 2)])
        assert err < 1e-6

    def test_sigmoid_derivative_at_one(self):
        assert ad.finite_diff_check(lambda a: ad.sum(ad.sigmoid(a)), [ad.Tensor([1.0])]) < 1e-6

    def test_detects_corrupted_rule(self, monkeypatch):
        rule = ad.backward_rule("sigmoid")
        monkeypatch.setitem(ad._BACKWARD, "sigmoid", lambda node, g: tuple(2 * v for v in rule(node, g)))
        rng = np.random.default_rng(5)
        err = ad.finite_diff_check(lambda w: ad.sum(ad.sigmoid(w)), [rand(rng, 4)])
        assert err > 1e-2

    def test_matmul_gradient_against_differences(self):
        rng = np.random.default_rng(2)
        a, b = rand(rng, 3, 4), rand(rng, 4, 5)
        assert ad.finite_diff_check(lambda a, b: ad.sum(ad.matmul(a, b)), [a, b]) < 1e-6


class TestSerialization:
    @pytest.mark.parametrize("shape", [(1,), (3,), (2, 3), (2, 1, 4)])
    def test_round_trip(self, shape):
        x = np.random.default_rng(0).normal(size=shape)
        buf = ad.tensor_to_bytes(x)
        assert len(buf) == 8 + 8 * len(shape) + 8 * x.size
        y, end = ad.tensor_from_bytes(buf)
        assert end == len(buf)
        np.testing.assert_array_equal(x, y)

    def test_layout(self):
        buf = ad.tensor_to_bytes(np.array([[1.0, 2.0]]))
        assert buf[:8] == (2).to_bytes(8, "little")
        assert buf[8:24] == (1).to_bytes(8, "little") + (2).to_bytes(8, "little")
        assert np.frombuffer(buf[24:], "<f8").tolist() == [1.0, 2.0]

    def test_truncated(self):
        with pytest.raises(ValueError):
            ad.tensor_from_bytes(ad.tensor_to_bytes(np.ones(3))[:-1])


finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6), elements=finite),
       st.integers(0, 1))
def test_softmax_sums_to_one(x, axis):
    out = ad.softmax(ad.Tensor(x), axis=axis).data
    np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(max_dims=3, max_side=5), elements=finite))
def test_serialization_round_trip_property(x):
    y, _ = ad.tensor_from_bytes(ad.tensor_to_bytes(x))
    assert y.tobytes() == np.ascontiguousarray(x).tobytes()
