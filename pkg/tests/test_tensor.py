import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from biped import tensor as T
from biped.errors import ContractError, DimensionError
from biped.gradcheck import op_cases, run_cases
from biped.tensor import Tensor

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def leaf(x):
    return Tensor(x, requires_grad=True)


class TestForward:
    def test_small_examples(self):
        m = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.matmul(m, Tensor(np.eye(2))).data, m.data)
        np.testing.assert_array_equal(T.matmul(m, Tensor([[1.0], [1.0]])).data, [[3.0], [7.0]])
        np.testing.assert_array_equal(T.softsign(Tensor([0.0, 1.0, -3.0])).data, [0.0, 0.5, -0.75])
        np.testing.assert_allclose(T.softmax(Tensor([1.0, 0.0])).data, [0.731059, 0.268941], atol=1e-6)
        assert float(Tensor([2.0, 4.0, 6.0]).mean().data) == 4.0
        x = Tensor(np.arange(6.0))
        parts = [x[:2], x[2:]]
        np.testing.assert_array_equal(T.concat(parts, axis=0).data, x.data)

    def test_conv2d_identity_and_sum(self, rng):
        img = Tensor(rng.normal(size=(1, 1, 3, 4)))
        same = T.conv2d(img, Tensor(np.ones((1, 1, 1, 1))), Tensor([0.0]))
        np.testing.assert_array_equal(same.data, img.data)
        ones = T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 2, 2))), Tensor([0.0]))
        np.testing.assert_array_equal(ones.data, [[[[4.0]]]])

    def test_arithmetic_broadcasts(self):
        a = Tensor(np.arange(6.0).reshape(2, 3))
        b = Tensor([10.0, 20.0, 30.0])
        np.testing.assert_array_equal((a + b).data, a.data + b.data)
        np.testing.assert_array_equal((a * 2 - b / 10).data, a.data * 2 - b.data / 10)

    def test_incompatible_shapes_raise(self):
        with pytest.raises(DimensionError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones(4))
        with pytest.raises(DimensionError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_linear_uses_out_by_in_weights(self):
        x = np.array([[1.0, 2.0]])
        w = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        out = T.linear(Tensor(x), Tensor(w), Tensor([0.5, 0.5, 0.5]))
        np.testing.assert_allclose(out.data, [[1.5, 2.5, 3.5]])

    def test_conv2d_matches_direct_loop(self, rng):
        x = rng.normal(size=(2, 3, 9, 8))
        k = rng.normal(size=(4, 3, 3, 2))
        b = rng.normal(size=4)
        out = T.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=2).data
        ho, wo = (9 - 3) // 2 + 1, (8 - 2) // 2 + 1
        ref = np.zeros((2, 4, ho, wo))
        for n in range(2):
            for o in range(4):
                for i in range(ho):
                    for j in range(wo):
                        patch = x[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 2]
                        ref[n, o, i, j] = (patch * k[o]).sum() + b[o]
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_conv2d_paths_agree(self, rng, monkeypatch):
        x = Tensor(rng.normal(size=(3, 2, 11, 13)), requires_grad=True)
        k = Tensor(rng.normal(size=(5, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=5), requires_grad=True)
        w = rng.normal(size=(3, 5, 5, 6))
        out1 = T.conv2d(x, k, b, 2)
        g1 = T.backward((out1 * w).sum())
        monkeypatch.setattr(T, "_IM2COL_LIMIT", 0)
        out2 = T.conv2d(x, k, b, 2)
        g2 = T.backward((out2 * w).sum())
        np.testing.assert_allclose(out1.data, out2.data, atol=1e-12)
        for t in (x, k, b):
            np.testing.assert_allclose(g1[t], g2[t], atol=1e-10)

    def test_sigmoid_is_stable_at_extremes(self):
        out = T.sigmoid(Tensor([-800.0, 0.0, 800.0])).data
        np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])

    def test_logcosh_matches_definition_and_asymptote(self):
        x = np.array([-3.0, -0.2, 0.0, 1.0, 2.5])
        np.testing.assert_allclose(T.logcosh_elem(Tensor(x)).data, np.log(np.cosh(x)), atol=1e-15)
        big = T.logcosh_elem(Tensor([1000.0])).data[0]
        assert big == pytest.approx(1000.0 - math.log(2.0), abs=1e-12)

    def test_softmax_rows_sum_to_one(self, rng):
        p = T.softmax(Tensor(rng.normal(size=(4, 7)) * 30), axis=1).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-14)

    def test_take_rows_and_pick(self):
        table = Tensor(np.arange(12.0).reshape(4, 3))
        np.testing.assert_array_equal(T.take_rows(table, [[3, 0]]).data, [[[9, 10, 11], [0, 1, 2]]])
        np.testing.assert_array_equal(T.pick(table, np.array([2, 0, 1, 2])).data, [2, 3, 7, 11])
        with pytest.raises(DimensionError):
            T.take_rows(table, [4])

    def test_elementwise_dispatch(self):
        x = Tensor([0.3])
        assert T.elementwise("tanh", x).data[0] == pytest.approx(math.tanh(0.3))
        assert T.elementwise("mul", x, Tensor([2.0])).data[0] == pytest.approx(0.6)


class TestBackward:
    def test_simple_expression(self):
        x = leaf([2.0, -1.0])
        y = leaf([3.0, 4.0])
        grads = T.backward((x * y + x * x).sum())
        np.testing.assert_array_equal(grads[x], [3.0 + 4.0, 4.0 - 2.0])
        np.testing.assert_array_equal(grads[y], [2.0, -1.0])

    def test_square_sum_gradient(self, rng):
        x = leaf(rng.normal(size=5))
        np.testing.assert_allclose(T.backward((x * x).sum())[x], 2 * x.data)
        assert T.grad_check(lambda v: v.sum(), Tensor(rng.normal(size=5))) < 1e-10

    def test_shared_subexpression_accumulates(self):
        x = leaf(3.0)
        z = x * x
        grads = T.backward(z + z * 2.0)
        assert grads[x] == pytest.approx(18.0)

    def test_unbroadcast_sums_over_expanded_axes(self):
        b = leaf(np.zeros((1, 3)))
        a = Tensor(np.ones((4, 3)))
        grads = T.backward((a + b).sum())
        np.testing.assert_array_equal(grads[b], [[4.0, 4.0, 4.0]])

    def test_repeated_getitem_indices_accumulate(self):
        x = leaf(np.arange(3.0))
        grads = T.backward(x[[0, 0, 2]].sum())
        np.testing.assert_array_equal(grads[x], [2.0, 0.0, 1.0])

    def test_grad_attribute_accumulates_across_calls(self):
        x = leaf(1.0)
        T.backward(x * 3.0)
        T.backward(x * 3.0)
        assert x.grad == pytest.approx(6.0)

    def test_no_grad_records_nothing(self):
        x = leaf(1.0)
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad
        with pytest.raises(ContractError):
            T.backward(y)

    def test_backward_needs_scalar(self):
        with pytest.raises(ContractError):
            T.backward(leaf(np.ones(3)) * 2.0)

    def test_tape_is_topological(self):
        x = leaf(1.0)
        a = x * 2.0
        b = a + x
        c = b * a
        order = T.Tape.from_output(c).nodes
        pos = {id(n): i for i, n in enumerate(order)}
        for node in order:
            for p in node._parents:
                if p.requires_grad:
                    assert pos[id(p)] < pos[id(node)]

    def test_deep_chain_does_not_recurse(self):
        x = leaf(1.0)
        y = x
        for _ in range(5000):
            y = y * 1.0
        assert T.backward(y)[x] == pytest.approx(1.0)

    def test_clip_blocks_gradient_outside_range(self):
        x = leaf([-2.0, 0.0, 2.0])
        grads = T.backward(T.clip(x, -1.0, 1.0).sum())
        np.testing.assert_array_equal(grads[x], [0.0, 1.0, 0.0])


class TestGradCheck:
    def test_every_op_passes(self):
        for r in run_cases(op_cases(seed=3)):
            assert r.passed, r.line()

    def test_corrupted_rule_is_detected(self, monkeypatch):
        # negative control: a sigmoid whose backward forgets the (1 - y) factor
        def bad_sigmoid(a):
            return T._unary(a, T._sigmoid, lambda x, y: y, "sigmoid")

        monkeypatch.setattr(T, "sigmoid", bad_sigmoid)
        x = Tensor(np.linspace(-2, 2, 7))
        assert T.grad_check(lambda t: T.sigmoid(t).sum(), x) > 1e-1

    def test_kink_stencils_are_skipped_not_hidden(self):
        x = Tensor(np.array([1e-5, 0.5, -0.7]))
        rep = T.grad_check_report(lambda t: T.relu(t).sum(), x, eps=1e-4)
        assert (rep.checked, rep.skipped) == (2, 1)
        assert rep.error < 1e-9
        raw = T.grad_check_report(lambda t: T.relu(t).sum(), x, eps=1e-4, skip_kinks=False)
        assert raw.error > 0.1

    def test_rejects_nonpositive_eps(self):
        with pytest.raises(ContractError):
            T.grad_check(lambda t: t.sum(), Tensor([1.0]), eps=0.0)


class TestProperties:
    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.integers(1, 12), elements=finite))
    def test_sigmoid_in_unit_interval_and_symmetric(self, x):
        s = T.sigmoid(Tensor(x)).data
        assert np.all((s >= 0) & (s <= 1))
        np.testing.assert_allclose(s + T.sigmoid(Tensor(-x)).data, 1.0, atol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite),
           st.floats(-100, 100))
    def test_softmax_shift_invariant(self, x, c):
        p = T.softmax(Tensor(x), axis=1).data
        q = T.softmax(Tensor(x + c), axis=1).data
        np.testing.assert_allclose(p, q, atol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.integers(1, 8), elements=finite))
    def test_logcosh_bounds(self, r):
        v = T.logcosh_elem(Tensor(r)).data
        assert np.all(v >= 0)
        assert np.all(v <= r * r / 2 + 1e-12)
        assert np.all(v >= np.abs(r) - math.log(2) - 1e-12)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4)), elements=finite),
           arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4)), elements=finite))
    def test_sum_of_product_gradient_is_other_factor(self, a, b):
        if a.shape != b.shape:
            b = np.resize(b, a.shape)
        x, y = leaf(a), leaf(b)
        g = T.backward((x * y).sum())
        np.testing.assert_array_equal(g[x], b)
        np.testing.assert_array_equal(g[y], a)
