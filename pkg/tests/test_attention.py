import numpy as np
import pytest

from mmfuser import tensor as tt
from mmfuser.attention import (
    DeformableParams,
    MultiHeadParams,
    avg_pool_matrix,
    deformable_attention,
    global_attention,
    linear_sra_attention,
    make_reference_grid,
)
from mmfuser.tensor import ShapeError, Tensor, constant

from references import ref_deformable_attention, ref_global_attention


class TestReferenceGrid:
    def test_single_cell(self):
        g = make_reference_grid(1, 1)
        assert np.array_equal(g.coords, [[0.5, 0.5]])

    def test_two_by_two(self):
        g = make_reference_grid(2, 2)
        expect = np.array([[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]])
        assert np.allclose(g.coords, expect, atol=1e-15)

    def test_column_grid(self):
        g = make_reference_grid(3, 1)
        assert np.allclose(g.coords[:, 0], 0.5)
        assert np.allclose(g.coords[:, 1], [1 / 6, 3 / 6, 5 / 6], atol=1e-15)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            make_reference_grid(0, 3)


class TestGlobalAttention:
    def test_single_key_ignores_query(self, rng):
        p = MultiHeadParams("p", 6, 2, rng)
        kv = rng.normal(size=(1, 6))
        out1 = global_attention(constant(rng.normal(size=(4, 6))), constant(kv), p).data
        out2 = global_attention(constant(rng.normal(size=(4, 6))), constant(kv), p).data
        expect = (kv @ p.wv.value.data) @ p.wo.value.data
        assert np.allclose(out1, np.tile(expect, (4, 1)), atol=1e-12)
        assert np.allclose(out1, out2, atol=1e-15)

    def test_identical_keys_give_mean_of_values(self, rng):
        d, m = 4, 2
        p = MultiHeadParams("p", d, m, rng)
        for w in (p.wq, p.wk, p.wv, p.wo):
            w.assign(np.eye(d))
        key = rng.normal(size=(1, d))
        kv = np.tile(key, (5, 1))
        q = rng.normal(size=(3, d))
        out = global_attention(constant(q), constant(kv), p).data
        assert np.allclose(out, np.tile(key, (3, 1)), atol=1e-12)

    def test_matches_bruteforce_reference(self, rng):
        p = MultiHeadParams("p", 8, 2, rng)
        q = rng.normal(size=(5, 8))
        kv = rng.normal(size=(5, 8))
        out = global_attention(constant(q), constant(kv), p).data
        ref = ref_global_attention(q, kv, p)
        assert np.max(np.abs(out - ref)) < 1e-10

    def test_kv_permutation_equivariance(self, rng):
        p = MultiHeadParams("p", 8, 4, rng)
        q = rng.normal(size=(6, 8))
        kv = rng.normal(size=(9, 8))
        perm = rng.permutation(9)
        out1 = global_attention(constant(q), constant(kv), p).data
        out2 = global_attention(constant(q), constant(kv[perm]), p).data
        assert np.max(np.abs(out1 - out2)) < 1e-12

    def test_dim_not_divisible_by_heads(self, rng):
        with pytest.raises(ShapeError):
            MultiHeadParams("p", 6, 4, rng)


class TestLinearSra:
    def test_pool_one_is_bitwise_global(self, rng):
        p = MultiHeadParams("p", 8, 2, rng)
        grid = make_reference_grid(2, 3)
        q = constant(rng.normal(size=(4, 8)))
        kv = constant(rng.normal(size=(6, 8)))
        a = linear_sra_attention(q, kv, grid, 1, p).data
        b = global_attention(q, kv, p).data
        assert np.array_equal(a, b)

    def test_full_pool_equals_single_mean_key(self, rng):
        p = MultiHeadParams("p", 8, 2, rng)
        grid = make_reference_grid(2, 2)
        q = constant(rng.normal(size=(4, 8)))
        kv = rng.normal(size=(4, 8))
        out = linear_sra_attention(q, constant(kv), grid, 2, p).data
        single = global_attention(q, constant(kv.mean(axis=0, keepdims=True)), p).data
        assert np.allclose(out, single, atol=1e-12)

    def test_pool_matrix_two_by_two_blocks(self, rng):
        pm = avg_pool_matrix(4, 4, 2)
        x = rng.normal(size=(16, 3))
        pooled = pm @ x
        blocks = [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]]
        expect = np.stack([x[b].mean(axis=0) for b in blocks])
        assert np.allclose(pooled, expect, atol=1e-15)

    def test_ragged_pool_covers_grid(self):
        pm = avg_pool_matrix(3, 5, 2)
        assert pm.shape == (2 * 3, 15)
        assert np.allclose(pm.sum(axis=1), 1.0)

    def test_multi_level_pooling_is_per_level(self, rng):
        p = MultiHeadParams("p", 4, 2, rng)
        grid = make_reference_grid(2, 2)
        lv1, lv2 = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
        q = constant(rng.normal(size=(4, 4)))
        out = linear_sra_attention(q, constant(np.concatenate([lv1, lv2])), grid, 2, p).data
        pooled = np.stack([lv1.mean(axis=0), lv2.mean(axis=0)])
        expect = global_attention(q, constant(pooled), p).data
        assert np.allclose(out, expect, atol=1e-12)


def _zeroed_deformable(params: DeformableParams) -> DeformableParams:
    params.offset_w.assign(np.zeros(params.offset_w.value.shape))
    params.offset_b.assign(np.zeros(params.offset_b.value.shape))
    params.weight_w.assign(np.zeros(params.weight_w.value.shape))
    params.weight_b.assign(np.zeros(params.weight_b.value.shape))
    return params


class TestDeformableAttention:
    def test_zero_init_reduces_to_colocated_mean(self, rng):
        d, m, k, nl = 8, 4, 3, 2
        grid = make_reference_grid(2, 2)
        p = _zeroed_deformable(DeformableParams("d", d, nl, rng, heads=m, points=k))
        p.out_proj.assign(np.eye(d))
        q = rng.normal(size=(4, d))
        levels = [rng.normal(size=(4, d)) for _ in range(nl)]
        out = deformable_attention(constant(q), [constant(x) for x in levels], grid, p).data
        expect = np.mean([x @ p.value_proj.value.data for x in levels], axis=0)
        assert np.max(np.abs(out - expect)) < 1e-12

    def test_single_level_single_point_is_colocated_value(self, rng):
        d = 6
        grid = make_reference_grid(3, 2)
        p = _zeroed_deformable(DeformableParams("d", d, 1, rng, heads=2, points=1))
        q = rng.normal(size=(6, d))
        lv = rng.normal(size=(6, d))
        out = deformable_attention(constant(q), [constant(lv)], grid, p).data
        expect = (lv @ p.value_proj.value.data) @ p.out_proj.value.data
        assert np.max(np.abs(out - expect)) < 1e-12

    def test_matches_scalar_reference(self, rng):
        d, m, k, nl = 4, 2, 2, 2
        grid = make_reference_grid(2, 2)
        p = DeformableParams("d", d, nl, rng, heads=m, points=k)
        p.offset_w.assign(rng.normal(size=p.offset_w.value.shape) * 0.2)
        p.weight_w.assign(rng.normal(size=p.weight_w.value.shape) * 0.5)
        q = rng.normal(size=(4, d))
        levels = [rng.normal(size=(4, d)) for _ in range(nl)]
        out = deformable_attention(constant(q), [constant(x) for x in levels], grid, p).data
        ref = ref_deformable_attention(q, levels, 2, 2, p)
        assert np.max(np.abs(out - ref)) < 1e-10

    def test_attention_weights_sum_to_one(self, rng):
        d, m, k, nl = 8, 4, 4, 3
        p = DeformableParams("d", d, nl, rng, heads=m, points=k)
        p.weight_w.assign(rng.normal(size=p.weight_w.value.shape))
        q = rng.normal(size=(5, d))
        wts = q @ p.weight_w.value.data + p.weight_b.value.data
        wts = wts.reshape(5, m, nl * k)
        sm = np.exp(wts - wts.max(axis=-1, keepdims=True))
        sm /= sm.sum(axis=-1, keepdims=True)
        assert np.max(np.abs(sm.sum(axis=-1) - 1.0)) < 1e-12

    def test_level_shape_mismatch_rejected(self, rng):
        grid = make_reference_grid(2, 2)
        p = DeformableParams("d", 4, 2, rng, heads=2, points=2)
        q = constant(rng.normal(size=(4, 4)))
        with pytest.raises(ShapeError):
            deformable_attention(
                q, [constant(rng.normal(size=(4, 4))), constant(rng.normal(size=(6, 4)))], grid, p
            )

    def test_ring_bias_has_unit_cell_directions(self, rng):
        p = DeformableParams("d", 8, 2, rng, heads=4, points=4)
        bias = p.offset_b.value.data.reshape(4, 2, 4, 2)
        norms = np.linalg.norm(bias, axis=-1)
        assert np.allclose(norms, 1.0, atol=1e-12)
        # K distinct directions per head
        for m in range(4):
            dirs = {tuple(np.round(bias[m, 0, k], 9)) for k in range(4)}
            assert len(dirs) == 4


class TestComplexityContract:
    def _count(self, fn):
        tt.op_count_reset()
        fn()
        return tt.op_count()

    def test_deformable_cost_per_query_independent_of_key_count(self, rng):
        d, m, k = 8, 2, 2
        counts = {}
        for hw in (4, 8):  # N_k differs 4x
            grid = make_reference_grid(hw, hw)
            p = DeformableParams("d", d, 1, rng, heads=m, points=k)
            q = constant(rng.normal(size=(hw * hw, d)))
            lv = constant(rng.normal(size=(hw * hw, d)))
            counts[hw] = self._count(lambda: deformable_attention(q, [lv], grid, p))
        per_query_small = counts[4] / 16
        per_query_big = counts[8] / 64
        assert per_query_big == pytest.approx(per_query_small, rel=1e-12)

    def test_sra_cost_per_query_bounded_as_keys_grow(self, rng):
        d, m = 8, 2
        counts = {}
        for hw, pool in ((4, 2), (8, 4)):  # pooled size fixed at 2x2
            grid = make_reference_grid(hw, hw)
            p = MultiHeadParams("p", d, m, rng)
            q = constant(rng.normal(size=(hw * hw, d)))
            kv = constant(rng.normal(size=(hw * hw, d)))
            counts[hw] = self._count(lambda: linear_sra_attention(q, kv, grid, pool, p))
        assert counts[8] / 64 <= counts[4] / 16 * 1.01

    def test_global_cost_per_query_grows_with_key_count(self, rng):
        d, m = 8, 2
        counts = {}
        for hw in (4, 8):
            p = MultiHeadParams("p", d, m, rng)
            q = constant(rng.normal(size=(hw * hw, d)))
            kv = constant(rng.normal(size=(hw * hw, d)))
            counts[hw] = self._count(lambda: global_attention(q, kv, p))
        assert counts[8] / 64 > counts[4] / 16 * 2.0


class TestGradients:
    def test_deformable_gradients_flow_through_sampling(self, rng):
        from mmfuser.harness import GRADCHECK_CASES, _check

        build, params = GRADCHECK_CASES["deformable_attention"](rng)
        assert _check(build, params) < 1e-5

    def test_global_and_sra_gradients(self, rng):
        from mmfuser.harness import GRADCHECK_CASES, _check

        for name in ("global_attention", "linear_sra_attention"):
            build, params = GRADCHECK_CASES[name](rng)
            assert _check(build, params) < 1e-5
