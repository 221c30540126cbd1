import numpy as np
import pytest

from hamil import tensor as T
from hamil.aggregators import (AggregatorSpec, AggUnitParams, AttentionParams,
                               aggregate, aggregate_pair, attention_aggregate,
                               canonical_order, hamil_a_aggregate,
                               hamil_aggregate, instance_scores, pool_aggregate,
                               ramil_aggregate)
from hamil.hierclust import MergeQueue, MergeTriplet, QueueIntegrityError, build_hierarchy
from hamil.tensor import Tensor

from conftest import numeric_grad, relative_error


def make_unit(mode="1d", layers=1, k=7, bn=False, seed=0):
    spec = AggregatorSpec(kind="hamil", layers=layers, kernel_size=k,
                          use_batchnorm=bn)
    return AggUnitParams(spec, mode, np.random.default_rng(seed))


class TestAggregatePair:
    def test_1d_mean_kernel(self, rng):
        params = AggUnitParams.mean_kernel(AggregatorSpec(kernel_size=1), "1d")
        a, b = Tensor(rng.standard_normal(6)), Tensor(rng.standard_normal(6))
        out = aggregate_pair(a, b, params)
        np.testing.assert_allclose(out.data, (a.data + b.data) / 2, atol=1e-15)

    def test_2d_centered_mean_kernel(self, rng):
        params = AggUnitParams.mean_kernel(AggregatorSpec(kernel_size=7), "2d")
        a = Tensor(rng.standard_normal((3, 5, 5)))
        b = Tensor(rng.standard_normal((3, 5, 5)))
        out = aggregate_pair(a, b, params)
        np.testing.assert_allclose(out.data, (a.data + b.data) / 2, atol=1e-15)

    def test_shape_mismatch(self, rng):
        params = make_unit("1d")
        with pytest.raises(T.ShapeError):
            aggregate_pair(Tensor(rng.standard_normal(4)),
                           Tensor(rng.standard_normal(5)), params)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            AggregatorSpec(kernel_size=4)

    def test_output_shape_matches_input(self, rng):
        p1 = make_unit("1d", layers=3, k=5)
        out = aggregate_pair(Tensor(rng.standard_normal(9)),
                             Tensor(rng.standard_normal(9)), p1)
        assert out.data.shape == (9,)
        p2 = make_unit("2d", layers=2, k=3)
        out = aggregate_pair(Tensor(rng.standard_normal((4, 6, 6))),
                             Tensor(rng.standard_normal((4, 6, 6))), p2)
        assert out.data.shape == (4, 6, 6)

    @pytest.mark.parametrize("mode,shape", [("1d", (8,)), ("2d", (2, 5, 5))])
    def test_gradients_on_inputs_and_params(self, rng, mode, shape):
        params = make_unit(mode, layers=2, k=3, seed=3)
        av = rng.standard_normal(shape)
        bv = rng.standard_normal(shape)

        def loss_wrt_a(v):
            return T.sum_all(aggregate_pair(Tensor(v), Tensor(bv), params)).item()

        a = Tensor(av, requires_grad=True)
        out = T.sum_all(aggregate_pair(a, Tensor(bv), params))
        out.backward()
        assert relative_error(a.grad, numeric_grad(loss_wrt_a, av)) < 1e-5

        w = params.weights[0]
        wv = w.data.copy()

        def loss_wrt_w(v):
            w.data = v
            val = T.sum_all(aggregate_pair(Tensor(av), Tensor(bv), params)).item()
            w.data = wv
            return val

        for p in params.weights + params.biases:
            p.grad = None
        out = T.sum_all(aggregate_pair(Tensor(av), Tensor(bv), params))
        out.backward()
        assert relative_error(w.grad, numeric_grad(loss_wrt_w, wv)) < 1e-5


class TestHamilReplay:
    def test_single_instance_identity(self, rng):
        x = Tensor(rng.standard_normal(5))
        out = hamil_aggregate([x], MergeQueue(()), make_unit())
        np.testing.assert_array_equal(out.data, x.data)

    def test_mean_kernel_three_instances(self, rng):
        params = AggUnitParams.mean_kernel(AggregatorSpec(kernel_size=1), "1d")
        xs = [Tensor(rng.standard_normal(4)) for _ in range(3)]
        queue = MergeQueue((MergeTriplet(1, 2, 4), MergeTriplet(3, 4, 5)))
        out = hamil_aggregate(xs, queue, params)
        expected = ((xs[0].data + xs[1].data) / 2 + xs[2].data) / 2
        np.testing.assert_allclose(out.data, expected, atol=1e-15)

    def test_matches_hand_unrolled_composition(self, rng):
        params = make_unit("1d", layers=1, k=3, seed=5)
        for _ in range(20):
            m = int(rng.integers(2, 6))
            xs = [Tensor(rng.standard_normal(6)) for _ in range(m)]
            queue = build_hierarchy([x.data for x in xs])
            out = hamil_aggregate(xs, queue, params)
            slots = {i + 1: xs[i] for i in range(m)}
            for t in queue:
                slots[t.new] = aggregate_pair(slots[t.left], slots[t.right], params)
            np.testing.assert_array_equal(out.data, slots[max(slots)].data)

    def test_malformed_queue(self, rng):
        xs = [Tensor(rng.standard_normal(3)) for _ in range(3)]
        bad = MergeQueue((MergeTriplet(1, 5, 6), MergeTriplet(2, 3, 7)))
        with pytest.raises(QueueIntegrityError):
            hamil_aggregate(xs, bad, make_unit())


class TestHamilA:
    def test_two_instances_exact_mean(self, rng):
        xs = [Tensor(rng.standard_normal(5)) for _ in range(2)]
        out = hamil_a_aggregate(xs, MergeQueue((MergeTriplet(1, 2, 3),)))
        np.testing.assert_array_equal(out.data, (xs[0].data + xs[1].data) * 0.5)

    def test_equals_hamil_with_mean_kernel(self, rng):
        params = AggUnitParams.mean_kernel(AggregatorSpec(kernel_size=7), "1d")
        for _ in range(20):
            m = int(rng.integers(1, 7))
            xs = [Tensor(rng.standard_normal(10)) for _ in range(m)]
            queue = build_hierarchy([x.data for x in xs])
            a = hamil_a_aggregate(xs, queue)
            b = hamil_aggregate(xs, queue, params)
            np.testing.assert_allclose(a.data, b.data, atol=1e-12)

    def test_unrolled_oracle(self, rng):
        for _ in range(10):
            m = int(rng.integers(2, 6))
            xs = [Tensor(rng.standard_normal(4)) for _ in range(m)]
            queue = build_hierarchy([x.data for x in xs])
            out = hamil_a_aggregate(xs, queue)
            slots = {i + 1: x.data for i, x in enumerate(xs)}
            for t in queue:
                slots[t.new] = (slots[t.left] + slots[t.right]) * 0.5
            np.testing.assert_array_equal(out.data, slots[max(slots)])


class TestRamil:
    def test_single_instance_identity(self, rng):
        x = Tensor(rng.standard_normal(4))
        out = ramil_aggregate([x], np.random.default_rng(0), make_unit())
        np.testing.assert_array_equal(out.data, x.data)

    def test_fixed_seed_reproducible(self, rng):
        xs = [Tensor(rng.standard_normal(5)) for _ in range(4)]
        params = make_unit(seed=2)
        a = ramil_aggregate(xs, np.random.default_rng(11), params)
        b = ramil_aggregate(xs, np.random.default_rng(11), params)
        np.testing.assert_array_equal(a.data, b.data)

    def test_order_changes_output_vs_hamil(self):
        # mean-kernel folding is order sensitive: left-deep random fold of
        # three distinct values differs from the hierarchy's grouping
        params = AggUnitParams.mean_kernel(AggregatorSpec(kernel_size=1), "1d")
        xs = [Tensor([0.0]), Tensor([1.0]), Tensor([100.0])]
        queue = build_hierarchy([x.data for x in xs])
        hamil_out = hamil_aggregate(xs, queue, params)   # ((0+1)/2+100)/2
        assert abs(hamil_out.item() - 50.25) < 1e-12
        seen = set()
        for seed in range(10):
            out = ramil_aggregate(xs, np.random.default_rng(seed), params)
            seen.add(round(out.item(), 9))
        assert any(abs(v - 50.25) > 1e-9 for v in seen)


class TestPooling:
    def test_single_instance_identity(self, rng):
        x = Tensor(rng.standard_normal(5))
        for kind in ("max_pool", "mean_pool", "sum_pool", "lse_pool"):
            out = pool_aggregate([x], kind)
            np.testing.assert_allclose(out.data, x.data, atol=1e-12)

    def test_mean_example(self):
        out = pool_aggregate([Tensor([0.0, 2.0]), Tensor([2.0, 0.0])], "mean_pool")
        np.testing.assert_array_equal(out.data, [1.0, 1.0])

    def test_empty_bag(self):
        with pytest.raises(ValueError, match="empty"):
            pool_aggregate([], "max_pool")

    def test_permutation_invariance(self, rng):
        xs = [Tensor(rng.standard_normal(6)) for _ in range(5)]
        for kind in ("max_pool", "mean_pool", "sum_pool", "lse_pool"):
            ref = pool_aggregate(xs, kind, r=3.0).data
            for _ in range(10):
                perm = rng.permutation(5)
                out = pool_aggregate([xs[i] for i in perm], kind, r=3.0).data
                np.testing.assert_allclose(out, ref, atol=1e-12)


class TestAttention:
    def test_identical_instances_returns_instance(self, rng):
        x = rng.standard_normal(6)
        params = AttentionParams(6, 16, gated=False, rng=np.random.default_rng(0))
        out = attention_aggregate([Tensor(x)] * 4, params)
        np.testing.assert_allclose(out.data, x, atol=1e-12)

    @pytest.mark.parametrize("gated", [False, True])
    def test_weights_sum_to_one(self, rng, gated):
        params = AttentionParams(6, 16, gated=gated, rng=np.random.default_rng(1))
        xs = [Tensor(rng.standard_normal(6)) for _ in range(5)]
        X = T.stack(xs, axis=0)
        h = T.tanh(T.matmul(X, params.V))
        if gated:
            h = T.mul(h, T.sigmoid(T.matmul(X, params.U)))
        w = T.softmax(T.reshape(T.matmul(h, params.w), (5,))).data
        assert np.all(w >= 0)
        assert abs(w.sum() - 1.0) < 1e-12

    @pytest.mark.parametrize("gated", [False, True])
    def test_permutation_invariance(self, rng, gated):
        params = AttentionParams(4, 8, gated=gated, rng=np.random.default_rng(2))
        xs = [Tensor(rng.standard_normal(4)) for _ in range(6)]
        ref = attention_aggregate(xs, params).data
        for _ in range(10):
            perm = rng.permutation(6)
            out = attention_aggregate([xs[i] for i in perm], params).data
            np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_empty_bag(self):
        params = AttentionParams(4, 8, gated=False, rng=np.random.default_rng(0))
        with pytest.raises(ValueError, match="empty"):
            attention_aggregate([], params)


class TestInstanceScores:
    def test_instance_equal_to_aggregate(self, rng):
        x = Tensor(rng.standard_normal(5))
        assert instance_scores([x], x) == [1.0]

    def test_orthogonal_and_antiparallel(self):
        agg = Tensor([1.0, 0.0])
        scores = instance_scores([Tensor([0.0, 1.0]), Tensor([-2.0, 0.0])], agg)
        assert abs(scores[0]) < 1e-12
        assert abs(scores[1] + 1.0) < 1e-12

    def test_zero_vector_guard(self):
        assert instance_scores([Tensor([0.0, 0.0])], Tensor([1.0, 1.0])) == [0.0]


class TestDispatchAndTraining:
    def test_aggregate_output_shape_all_kinds(self, rng):
        xs = [Tensor(rng.standard_normal(8)) for _ in range(4)]
        for kind in ("hamil", "hamil_a", "ramil", "max_pool", "mean_pool",
                     "sum_pool", "lse_pool", "attention", "gated_attention"):
            spec = AggregatorSpec(kind=kind, kernel_size=3)
            unit = AggUnitParams(spec, "1d", np.random.default_rng(0)) \
                if kind in ("hamil", "ramil") else None
            attn = AttentionParams(8, 16, kind == "gated_attention",
                                   np.random.default_rng(0)) \
                if "attention" in kind else None
            out, queue = aggregate(xs, spec, unit=unit, attn=attn,
                                   rng=np.random.default_rng(0))
            assert out.data.shape == (8,)
            assert (queue is not None) == (kind in ("hamil", "hamil_a"))

    def test_canonical_order_permutation_invariant(self, rng):
        feats = [rng.standard_normal(5) for _ in range(6)]
        base = canonical_order(feats)
        canon = [tuple(feats[i]) for i in base]
        for _ in range(10):
            perm = rng.permutation(6)
            shuffled = [feats[i] for i in perm]
            got = [tuple(shuffled[i]) for i in canonical_order(shuffled)]
            assert got == canon

    def test_ramil_eval_without_rng_is_deterministic(self, rng):
        spec = AggregatorSpec(kind="ramil", kernel_size=3)
        unit = AggUnitParams(spec, "1d", np.random.default_rng(1))
        xs = [Tensor(rng.standard_normal(5)) for _ in range(4)]
        a, _ = aggregate(xs, spec, unit=unit, training=False)
        b, _ = aggregate(xs, spec, unit=unit, training=False)
        np.testing.assert_array_equal(a.data, b.data)
        with pytest.raises(ValueError, match="rng"):
            aggregate(xs, spec, unit=unit, training=True)

    def test_gradient_reaches_unit_params_after_training_step(self, rng):
        spec = AggregatorSpec(kind="hamil", kernel_size=3)
        unit = AggUnitParams(spec, "1d", np.random.default_rng(4))
        xs = [Tensor(rng.standard_normal(6), requires_grad=True) for _ in range(3)]
        out, _ = aggregate(xs, spec, unit=unit)
        T.sum_all(out).backward()
        assert np.linalg.norm(unit.weights[0].grad) > 0
        assert all(x.grad is not None for x in xs)
