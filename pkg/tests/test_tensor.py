"""Tests for the autodiff tensor core."""

import numpy as np
import pytest

from core import tensor as T
from core.params import ParamStore
from core.tensor import GradMap, Tape, Tensor, backward, global_norm, per_sample_grads
from utils.errors import ContractError, DimensionError, NumericError

TOL = 1e-5


@pytest.fixture
def gen():
    return np.random.default_rng(0)


class TestElementwiseGradients:
    def test_add_sub_mul(self, gen, gradcheck):
        a, b = gen.standard_normal((3, 4)), gen.standard_normal((3, 4))
        assert gradcheck(lambda x, y: T.sum(T.mul(T.add(x, y), T.sub(x, y))), a, b) < TOL

    def test_leading_batch_broadcast(self, gen, gradcheck):
        a, b = gen.standard_normal((5, 3)), gen.standard_normal(3)
        assert gradcheck(lambda x, y: T.sum(T.mul(x, y)), a, b) < TOL

    @pytest.mark.parametrize("op", [T.exp, T.tanh, T.sigmoid, T.silu, T.relu])
    def test_unary(self, op, gen, gradcheck):
        a = gen.standard_normal((4, 3))
        assert gradcheck(lambda x: T.sum(T.mul(op(x), op(x))), a) < TOL

    def test_scalar_ops(self, gen, gradcheck):
        a = gen.uniform(0.5, 2.0, (3, 3))
        assert gradcheck(lambda x: T.mean(T.pow_scalar(T.div_scalar(x * 3.0 + 1.0, 2.0), 3)), a) < TOL


class TestStructuralGradients:
    def test_reductions_with_axes(self, gen, gradcheck):
        a = gen.standard_normal((2, 3, 4))
        w = gen.standard_normal((2, 4))

        def fn(x):
            return T.sum(T.mul(T.mean(x, axis=1), Tensor(w)))

        assert gradcheck(fn, a) < TOL

    def test_reshape_transpose_concat(self, gen, gradcheck):
        a, b = gen.standard_normal((2, 3, 4)), gen.standard_normal((2, 1, 4))
        w = gen.standard_normal((4, 2, 4))

        def fn(x, y):
            joined = T.concat([x, y], axis=1)
            return T.sum(T.mul(T.transpose(joined, (2, 0, 1)), Tensor(w)))

        assert gradcheck(fn, a, b) < TOL

    def test_expand_and_take_rows(self, gen, gradcheck):
        table = gen.standard_normal((4, 3))
        w = gen.standard_normal((5, 3))

        def fn(t):
            rows = T.take_rows(t, [0, 2, 2, 3, 0])
            return T.sum(T.mul(rows, Tensor(w)))

        assert gradcheck(fn, table) < TOL

        v = gen.standard_normal((2, 1, 3))
        w2 = gen.standard_normal((2, 4, 3))
        assert gradcheck(lambda x: T.sum(T.mul(T.expand(x, (2, 4, 3)), Tensor(w2))), v) < TOL

    def test_matmul_variants(self, gen, gradcheck):
        assert gradcheck(lambda x, y: T.sum(T.tanh(T.matmul(x, y))),
                         gen.standard_normal((3, 4)), gen.standard_normal((4, 2))) < TOL
        assert gradcheck(lambda x, y: T.sum(T.tanh(T.matmul(x, y))),
                         gen.standard_normal((2, 3, 4)), gen.standard_normal((2, 4, 2))) < TOL
        assert gradcheck(lambda x, y: T.sum(T.tanh(T.matmul(x, y))),
                         gen.standard_normal((2, 3, 4)), gen.standard_normal((4, 2))) < TOL

    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0)])
    def test_conv2d(self, stride, padding, gen, gradcheck):
        x = gen.standard_normal((2, 3, 5, 5))
        k = gen.standard_normal((4, 3, 3, 3))
        b = gen.standard_normal(4)
        assert gradcheck(lambda a, kk, bb: T.sum(T.tanh(T.conv2d(a, kk, bb, stride, padding))),
                         x, k, b, entries=8) < TOL

    def test_conv2d_matches_direct_loop(self, gen):
        x = gen.standard_normal((1, 2, 4, 4))
        k = gen.standard_normal((3, 2, 3, 3))
        out = T.conv2d(Tensor(x), Tensor(k), padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        expected = np.zeros((1, 3, 4, 4))
        for o in range(3):
            for i in range(4):
                for j in range(4):
                    expected[0, o, i, j] = np.sum(xp[0, :, i:i + 3, j:j + 3] * k[o])
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_upsample_softmax_group_norm(self, gen, gradcheck):
        w = gen.standard_normal((1, 4, 4, 4))
        assert gradcheck(lambda x: T.sum(T.mul(T.upsample_nearest(x, 2), Tensor(w))),
                         gen.standard_normal((1, 4, 2, 2))) < TOL
        w2 = gen.standard_normal((3, 5))
        assert gradcheck(lambda x: T.sum(T.mul(T.softmax(x), Tensor(w2))),
                         gen.standard_normal((3, 5))) < TOL
        w3 = gen.standard_normal((2, 4, 3, 3))
        assert gradcheck(lambda x: T.sum(T.mul(T.group_norm(x, 2), Tensor(w3))),
                         gen.standard_normal((2, 4, 3, 3))) < TOL

    def test_losses(self, gen, gradcheck):
        target = gen.standard_normal((4, 3))
        assert gradcheck(lambda x: T.mse(x, Tensor(target)), gen.standard_normal((4, 3))) < TOL
        labels = np.array([0, 2, 1, 2])
        assert gradcheck(lambda x: T.cross_entropy(x, labels), gen.standard_normal((4, 3))) < TOL


class TestForwardValues:
    def test_softmax_rows_sum_to_one(self, gen):
        y = T.softmax(Tensor(gen.standard_normal((6, 9)) * 10)).data
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)

    def test_group_norm_statistics(self, gen):
        y = T.group_norm(Tensor(gen.standard_normal((2, 4, 3, 3)) * 5 + 2), 2).data
        grouped = y.reshape(2, 2, -1)
        np.testing.assert_allclose(grouped.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(grouped.var(axis=-1), 1.0, atol=1e-4)


class TestErrors:
    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
        with pytest.raises(DimensionError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        with pytest.raises(DimensionError):
            T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((3, 1, 3, 3))))

    def test_tensor_division_rejected(self):
        with pytest.raises(ContractError):
            Tensor(np.ones(2)) / Tensor(np.ones(2))

    def test_non_finite_output(self):
        with pytest.raises(NumericError):
            T.exp(Tensor(np.array([1000.0])))

    def test_backward_needs_scalar_on_tape(self):
        x = Tensor(np.ones(3), requires_grad=True, name="x")
        with Tape() as tape:
            y = T.mul(x, x)
            with pytest.raises(ContractError):
                tape.backward(y)
        with Tape() as other:
            pass
        with Tape():
            loss = T.sum(T.mul(x, x))
        with pytest.raises(ContractError):
            other.backward(loss)


class TestTape:
    def test_frozen_params_are_omitted(self):
        store = ParamStore()
        a = store.add("a", np.ones(3), group="unet")
        b = store.add("b", np.ones(3) * 2, group="unet")
        store.set_trainable(["a"])
        with Tape() as tape:
            loss = T.sum(T.mul(a, b))
            grads = tape.backward(loss, store.trainable())
        assert list(grads) == ["a"]
        np.testing.assert_array_equal(grads["a"], np.full(3, 2.0))

    def test_unreached_param_gets_zeros(self):
        a = Tensor(np.ones(2), requires_grad=True, name="a")
        b = Tensor(np.ones(2), requires_grad=True, name="b")
        with Tape():
            loss = T.sum(T.mul(a, a))
        grads = backward(loss, {"a": a, "b": b})
        np.testing.assert_array_equal(grads["b"], np.zeros(2))

    def test_repeated_use_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True, name="x")
        with Tape() as tape:
            loss = T.sum(T.add(T.mul(x, x), x))
            grads = tape.backward(loss)
        assert grads["x"][0] == pytest.approx(7.0)

    def test_identical_inputs_give_identical_gradients(self, gen):
        data = gen.standard_normal((3, 4))

        def run():
            x = Tensor(data.copy(), requires_grad=True, name="x")
            with Tape() as tape:
                loss = T.sum(T.tanh(T.matmul(x, T.transpose(x))))
                return tape.backward(loss)["x"]

        np.testing.assert_array_equal(run(), run())


class TestGradMap:
    def test_global_norm(self):
        grads = GradMap({"b": np.array([3.0]), "a": np.array([[4.0]])})
        assert grads.norm == pytest.approx(5.0)
        assert list(grads) == ["a", "b"]
        np.testing.assert_array_equal(grads.flatten(), [4.0, 3.0])
        assert global_norm({}) == 0.0

    def test_scaled(self):
        grads = GradMap({"a": np.array([3.0, 4.0])}).scaled(0.5)
        assert grads.norm == pytest.approx(2.5)


class TestPerSampleGrads:
    def _setup(self, gen):
        store = ParamStore()
        w = store.add("w", gen.standard_normal((3, 2)), group="unet")
        xs = gen.standard_normal((7, 1, 3))

        def loss_fn(i):
            return T.sum(T.tanh(T.matmul(Tensor(xs[i]), w)))

        return store, loss_fn

    def test_workers_do_not_change_results(self, gen):
        store, loss_fn = self._setup(gen)
        serial = per_sample_grads(loss_fn, list(range(7)), store.trainable(), workers=1)
        threaded = per_sample_grads(loss_fn, list(range(7)), store.trainable(), workers=3)
        for a, b in zip(serial, threaded):
            np.testing.assert_array_equal(a["w"], b["w"])

    def test_matches_single_backward(self, gen):
        store, loss_fn = self._setup(gen)
        grads = per_sample_grads(loss_fn, [4], store.trainable())
        with Tape() as tape:
            expected = tape.backward(loss_fn(4), store.trainable())
        np.testing.assert_array_equal(grads[0]["w"], expected["w"])

    def test_empty_batch(self, gen):
        store, loss_fn = self._setup(gen)
        with pytest.raises(ContractError):
            per_sample_grads(loss_fn, [], store.trainable())
