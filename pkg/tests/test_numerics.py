import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dcap import numerics as nx
from dcap.errors import AxisError, ContractError, DimensionError, NumericalError
from dcap.verify import PRIMITIVE_TOL, gradient_check, primitive_gradient_errors


def T(x, grad=False):
    return nx.Tensor(np.asarray(x, dtype=float), requires_grad=grad)


finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


class TestMatmul:
    def test_identity(self):
        a = [[1.0, 2.0], [3.0, 4.0]]
        out = nx.matmul(T(np.eye(2)), T(a))
        np.testing.assert_array_equal(out.data, a)

    def test_hand_value(self):
        assert nx.matmul(T([[1, 2]]), T([[3], [4]])).data.tolist() == [[11.0]]

    def test_mismatch_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            nx.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4, 2), elements=finite),
           arrays(np.float64, (2, 5), elements=finite))
    def test_associative(self, a, b, c):
        left = nx.matmul(nx.matmul(T(a), T(b)), T(c)).data
        right = nx.matmul(T(a), nx.matmul(T(b), T(c))).data
        assert np.allclose(left, right, rtol=1e-9, atol=1e-9)

    def test_batched_gradient(self):
        rng = np.random.default_rng(1)
        a, b = T(rng.normal(size=(3, 2, 4)), True), T(rng.normal(size=(4, 3)), True)
        err = gradient_check(lambda: nx.reduce(nx.reduce(nx.reduce(
            nx.matmul(a, b), 2), 1), 0), [a, b])
        assert max(err.values()) < PRIMITIVE_TOL


class TestSoftmax:
    def test_zero_row(self):
        np.testing.assert_allclose(nx.softmax_rows(T([[0, 0]])).data, [[0.5, 0.5]])

    def test_large_magnitude(self):
        np.testing.assert_allclose(nx.softmax_rows(T([[1000, 1000]])).data, [[0.5, 0.5]])

    def test_ln3(self):
        np.testing.assert_allclose(nx.softmax_rows(T([[0, math.log(3)]])).data, [[0.25, 0.75]], atol=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
                  elements=st.floats(-700, 700, allow_nan=False)))
    def test_rows_sum_to_one(self, a):
        y = nx.softmax_rows(T(a)).data
        assert np.all(y >= 0)
        assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-12)


class TestElementwise:
    def test_mul(self):
        assert nx.mul(T([1, 2, 3]), T([4, 5, 6])).data.tolist() == [4, 10, 18]

    def test_add_zero_and_self_sub(self):
        x = T([1.5, -2.0, 3.0])
        np.testing.assert_array_equal(nx.add(x, T(np.zeros(3))).data, x.data)
        np.testing.assert_array_equal(nx.sub(x, x).data, np.zeros(3))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            nx.add(T([1, 2]), T([1, 2, 3]))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            nx.elementwise(T([1]), T([1]), "div")


class TestReduce:
    def test_sum_rows(self):
        assert nx.reduce(T([[1, 2], [3, 4]]), axis=1).data.tolist() == [3, 7]

    def test_mean_constant(self):
        assert nx.reduce(T([[2, 2], [2, 2]]), axis=0, kind="mean").data.tolist() == [2, 2]

    def test_zeros(self):
        np.testing.assert_array_equal(nx.reduce(T(np.zeros((3, 4))), axis=0).data, np.zeros(4))

    def test_axis_out_of_range(self):
        with pytest.raises(AxisError):
            nx.reduce(T([[1, 2]]), axis=2)


class TestConcat:
    def test_two_parts(self):
        out = nx.concat([T([[1], [2]]), T([[3], [4]])], axis=1)
        assert out.data.tolist() == [[1, 3], [2, 4]]

    def test_single_part(self):
        x = T([[1, 2]])
        np.testing.assert_array_equal(nx.concat([x]).data, x.data)

    def test_ragged(self):
        with pytest.raises(DimensionError):
            nx.concat([T([[1, 2]]), T([[1, 2, 3]])], axis=0)

    def test_dense_input_width(self):
        # flattened n*d embedding plus one length-n(n-1)/2 vector per layer
        parts = [T(np.ones(80)), T(np.ones(10)), T(np.ones(10))]
        assert nx.concat(parts).shape == (100,)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(1, 3))
    def test_split_inverts_concat(self, sizes, rows):
        rng = np.random.default_rng(sum(sizes))
        parts = [T(rng.normal(size=(rows, s))) for s in sizes]
        back = nx.split(nx.concat(parts, axis=1), sizes, axis=1)
        for p, q in zip(parts, back):
            np.testing.assert_array_equal(p.data, q.data)


class TestTape:
    def test_sum_of_squares(self):
        w = T([1, 2], True)
        with nx.Tape() as tape:
            root = nx.reduce(nx.mul(w, w), axis=0)
        np.testing.assert_allclose(tape.backward(root)[w], [2, 4])

    def test_constant_root(self):
        w = T([1, 2], True)
        with nx.Tape() as tape:
            root = nx.reduce(T([3.0, 4.0]), axis=0)
        assert np.all(tape.backward(root, wrt=[w])[w] == 0)

    def test_non_scalar_root(self):
        w = T([1, 2], True)
        with nx.Tape() as tape:
            y = nx.mul(w, w)
        with pytest.raises(ContractError):
            tape.backward(y)

    def test_no_recording_outside_tape(self):
        w = T([1, 2], True)
        with nx.Tape() as tape:
            pass
        nx.mul(w, w)
        assert len(tape) == 0

    def test_fan_out_accumulates(self):
        w = T([3.0], True)
        with nx.Tape() as tape:
            root = nx.reduce(nx.add(nx.mul(w, w), nx.scale(w, 2.0)), axis=0)
        np.testing.assert_allclose(tape.backward(root)[w], [8.0])


class TestTensorContract:
    def test_rank_limit(self):
        with pytest.raises(DimensionError):
            T(np.ones((1, 1, 1, 1)))

    def test_zero_extent(self):
        with pytest.raises(DimensionError):
            T(np.ones((0, 3)))

    def test_non_finite_forward(self):
        with pytest.raises(NumericalError):
            nx.log(T([0.0]))


def test_every_primitive_gradient():
    errors = primitive_gradient_errors(seed=3)
    assert errors, "no primitives checked"
    bad = {k: v for k, v in errors.items() if v >= PRIMITIVE_TOL}
    assert not bad


def test_clip_gradient_zero_outside():
    a = T([-2.0, 0.5, 2.0], True)
    with nx.Tape() as tape:
        root = nx.reduce(nx.clip(a, -1.0, 1.0), axis=0)
    assert tape.backward(root)[a].tolist() == [0.0, 1.0, 0.0]
