import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcap import numerics as nx
from dcap.attention import MultiHeadParams
from dcap.crossnet import (
    adaptive_avg_pool,
    inner_product,
    layer_forward,
    n_pairs,
    outer_product,
    pair_index,
    pair_products,
    pool_output_length,
    stack_layers,
    sum_embedding_axis,
)
from dcap.errors import ConfigurationError, ContractError, DimensionError
from dcap.verify import frozen_forward, naive_reference_layer, raw_weights, reference_max_deviation


def T(x):
    return nx.Tensor(np.asarray(x, dtype=float))


class TestProducts:
    def test_inner_hand(self):
        assert inner_product(T([1, 2, 3]), T([4, 5, 6])).data.tolist() == [4, 10, 18]

    def test_inner_identity_and_annihilator(self):
        a = T([1.5, -2.0])
        assert inner_product(a, T([1, 1])).data.tolist() == a.data.tolist()
        assert not inner_product(a, T([0, 0])).data.any()

    def test_outer_hand(self):
        assert outer_product(T([1, 2]), T([3, 4])).data.tolist() == [7, 14]

    def test_outer_zero(self):
        assert not outer_product(T([1, 2]), T([0, 0])).data.any()

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            inner_product(T([1, 2]), T([1, 2, 3]))
        with pytest.raises(DimensionError):
            outer_product(T([1, 2]), T([1, 2, 3]))


class TestPairs:
    def test_order(self):
        assert pair_index(3) == [(0, 1), (0, 2), (1, 2)]

    @pytest.mark.parametrize("n", range(2, 9))
    def test_count_and_uniqueness(self, n):
        pairs = pair_index(n)
        assert len(pairs) == n_pairs(n) == n * (n - 1) // 2
        assert len(set(pairs)) == len(pairs)
        assert all(i < j for i, j in pairs)
        assert pairs == sorted(pairs)

    def test_hand_expansion(self):
        Z = X = T([[1, 0], [0, 1], [1, 1]])
        assert pair_products(Z, X, "inner").data.tolist() == [[0, 0], [1, 0], [0, 1]]

    def test_rows_match_pairwise_ops(self):
        rng = np.random.default_rng(0)
        Z, X = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        P = pair_products(T(Z), T(X), "outer").data
        for k, (i, j) in enumerate(pair_index(4)):
            np.testing.assert_allclose(P[k], Z[i] * X[j].sum())

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            pair_products(T(np.ones((3, 2))), T(np.ones((4, 2))))


class TestReduceAndPool:
    def test_sum_axis(self):
        assert sum_embedding_axis(T([[1, 2], [3, 4]])).data.tolist() == [3, 7]

    def test_sum_zero_and_single_column(self):
        assert not sum_embedding_axis(T(np.zeros((3, 2)))).data.any()
        assert sum_embedding_axis(T([[5], [6]])).data.tolist() == [5, 6]

    def test_pool_pairs(self):
        out = adaptive_avg_pool(T([[1, 2], [3, 4], [5, 6], [7, 8]]), 2)
        assert out.data.tolist() == [[2, 3], [6, 7]]

    def test_pool_identity(self):
        P = np.random.default_rng(1).normal(size=(5, 3))
        np.testing.assert_array_equal(adaptive_avg_pool(T(P), 5).data, P)

    def test_pool_too_many_rows(self):
        with pytest.raises(ConfigurationError):
            adaptive_avg_pool(T(np.ones((3, 2))), 4)

    def test_output_length_formula(self):
        assert pool_output_length(10, 4, 3, 0) == 3

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 30), st.integers(1, 30), st.integers(1, 4))
    def test_pool_preserves_constants_and_mass_order(self, m, n, d):
        if n > m:
            return
        c = np.full((m, d), 3.25)
        np.testing.assert_allclose(adaptive_avg_pool(T(c), n).data, c[:n], atol=1e-14)


def _params(d, h, layers, seed):
    rng = np.random.default_rng(seed)
    return [MultiHeadParams.init(d, h, rng) for _ in range(layers)]


class TestLayer:
    def test_composition(self):
        from dcap.attention import multi_head

        rng = np.random.default_rng(3)
        X = T(rng.normal(size=(3, 2)))
        (params,) = _params(2, 1, 1, 3)
        tr = layer_forward(X, X, params)
        Z, _ = multi_head(X, params)
        P = pair_products(Z, X, "inner")
        np.testing.assert_array_equal(tr.Z.data, Z.data)
        np.testing.assert_array_equal(tr.P.data, P.data)
        np.testing.assert_array_equal(tr.Y.data, sum_embedding_axis(P).data)
        np.testing.assert_array_equal(tr.X_next.data, adaptive_avg_pool(P, 3).data)

    def test_movielens_shapes(self):
        X = T(np.random.default_rng(0).normal(size=(5, 16)))
        traces = stack_layers(X, _params(16, 4, 2, 0))
        assert len(traces) == 2
        for tr in traces:
            assert tr.Y.shape == (10,)
            assert tr.X_next.shape == (5, 16)

    def test_zero_layers(self):
        with pytest.raises(ConfigurationError):
            stack_layers(T(np.ones((3, 2))), [])

    def test_single_layer_stack_equals_layer(self):
        X = T(np.random.default_rng(5).normal(size=(4, 4)))
        (p,) = _params(4, 2, 1, 5)
        np.testing.assert_array_equal(stack_layers(X, [p])[0].Y.data, layer_forward(X, X, p).Y.data)

    def test_later_layers_use_original_embedding(self):
        rng = np.random.default_rng(6)
        X = T(rng.normal(size=(4, 4)))
        ps = _params(4, 2, 2, 6)
        traces = stack_layers(X, ps, "outer")
        manual = layer_forward(traces[0].X_next, X, ps[1], "outer")
        np.testing.assert_array_equal(traces[1].P.data, manual.P.data)


class TestHomogeneity:
    def test_t_one(self):
        X = np.random.default_rng(1).normal(size=(4, 4))
        ps = _params(4, 2, 2, 1)
        ys = frozen_forward(X, ps, t=1.0)
        for y, tr in zip(ys, stack_layers(T(X), ps)):
            np.testing.assert_allclose(y, tr.Y.data, rtol=0, atol=0)

    @pytest.mark.parametrize("kind", ["inner", "outer"])
    @pytest.mark.parametrize("layer,factor", [(1, 4.0), (2, 8.0), (3, 16.0)])
    def test_scale_by_two(self, kind, layer, factor):
        X = np.random.default_rng(2).normal(size=(5, 4))
        ps = _params(4, 2, 3, 2)
        base = frozen_forward(X, ps, kind)[layer - 1]
        scaled = frozen_forward(X, ps, kind, t=2.0)[layer - 1]
        np.testing.assert_allclose(scaled, factor * base, rtol=1e-12, atol=1e-12)

    def test_layer_norm_refused(self):
        with pytest.raises(ContractError):
            frozen_forward(np.ones((3, 2)), _params(2, 1, 1, 0), layer_norm=True)


class TestReference:
    @pytest.mark.parametrize("kind", ["inner", "outer"])
    def test_small_instance(self, kind):
        rng = np.random.default_rng(11)
        (p,) = _params(2, 1, 1, 11)
        X = rng.normal(size=(3, 2))
        assert reference_max_deviation(X, X, p, kind) < 1e-10

    def test_zero_input(self):
        (p,) = _params(2, 1, 1, 0)
        ref = naive_reference_layer([[0, 0]] * 3, [[0, 0]] * 3, raw_weights(p))
        assert all(v == 0 for row in ref["P"] for v in row)
        assert ref["Y"] == [0.0, 0.0, 0.0]

    @settings(max_examples=25, deadline=None)
    @given(st.integers(3, 5), st.sampled_from([(1, 1), (2, 1), (2, 2), (4, 2), (4, 4)]),
           st.sampled_from(["inner", "outer"]), st.integers(0, 10_000))
    def test_random(self, n, dh, kind, seed):
        d, h = dh
        rng = np.random.default_rng(seed)
        p = MultiHeadParams.init(d, h, rng)
        Xl, X0 = rng.uniform(-2, 2, (n, d)), rng.uniform(-2, 2, (n, d))
        assert reference_max_deviation(Xl, X0, p, kind) < 1e-10
