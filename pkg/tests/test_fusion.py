import numpy as np
import pytest

from mmfuser import tensor as tt
from mmfuser.attention import AttnVariant, make_reference_grid
from mmfuser.fusion import (
    ConcatParams,
    ConfigurationError,
    FeatureMap,
    FeatureStack,
    FpnParams,
    FusionMethod,
    LayerSelection,
    MMFuserParams,
    WeightedAvgParams,
    fuse,
    fuse_average,
    fuse_concat,
    fuse_fpn,
    fuse_weighted_average,
    mmfuser_forward,
    select_layers,
)
from mmfuser.tensor import ShapeError, Tape, Tensor, backward, constant, finite_diff_grad

from references import ref_fpn

GRID = (2, 2)
N, D = 4, 8


def fm(rng, layer, data=None, grid=GRID, d=D):
    h, w = grid
    data = rng.normal(size=(h * w, d)) if data is None else data
    return FeatureMap(constant(data), grid, layer)


class TestTypes:
    def test_feature_map_grid_mismatch(self, rng):
        with pytest.raises(ShapeError):
            FeatureMap(constant(rng.normal(size=(5, D))), GRID, 1)

    def test_stack_requires_increasing_layers(self, rng):
        with pytest.raises(ShapeError):
            FeatureStack([fm(rng, 4), fm(rng, 2)])

    def test_stack_rejects_shape_disagreement(self, rng):
        with pytest.raises(ShapeError):
            FeatureStack([fm(rng, 1), fm(rng, 2, d=D // 2)])

    def test_selection_rejects_duplicates(self):
        with pytest.raises(ConfigurationError):
            LayerSelection(q_index=11, kv_indices=(1, 4, 4, 9))

    def test_selection_rejects_q_in_kv_by_default(self):
        with pytest.raises(ConfigurationError):
            LayerSelection(q_index=4, kv_indices=(1, 4, 6))
        LayerSelection(q_index=4, kv_indices=(1, 4, 6), allow_q_in_kv=True)

    def test_selection_requires_nonempty_kv(self):
        with pytest.raises(ConfigurationError):
            LayerSelection(q_index=4, kv_indices=())


class TestSelectLayers:
    def _encoder_outputs(self, rng, depth=12):
        return [fm(rng, i) for i in range(1, depth + 1)]

    def test_default_combo(self, rng):
        outs = self._encoder_outputs(rng)
        sel = LayerSelection(q_index=11, kv_indices=(1, 4, 6, 9))
        q, stack = select_layers(outs, sel)
        assert q.layer_index == 11
        assert [m.layer_index for m in stack.maps] == [1, 4, 6, 9]

    def test_shallow_combo(self, rng):
        outs = self._encoder_outputs(rng)
        q, stack = select_layers(outs, LayerSelection(q_index=11, kv_indices=(1, 2, 3, 4)))
        assert len(stack) == 4

    def test_missing_index_names_it(self, rng):
        outs = self._encoder_outputs(rng, depth=6)
        with pytest.raises(ConfigurationError, match="9"):
            select_layers(outs, LayerSelection(q_index=5, kv_indices=(1, 9)))


class TestMMFuserForward:
    @pytest.mark.parametrize("variant", list(AttnVariant))
    def test_identity_at_init(self, rng, variant):
        params = MMFuserParams(D, 2, rng, variant=variant, heads=2, points=2)
        q = fm(rng, 11)
        stack = FeatureStack([fm(rng, 3), fm(rng, 6)])
        out = mmfuser_forward(q, stack, params)
        assert np.array_equal(out.tokens.data, q.tokens.data)
        assert out.grid == q.grid

    def test_identity_at_init_many_random_inputs(self, rng):
        params = MMFuserParams(D, 2, rng, heads=2, points=2)
        for _ in range(50):
            q = fm(rng, 11)
            stack = FeatureStack([fm(rng, 3), fm(rng, 6)])
            out = mmfuser_forward(q, stack, params)
            assert np.array_equal(out.tokens.data, q.tokens.data)

    def test_degenerate_cross_attention_composition(self, rng):
        # gamma1=1, gamma2=0, single-level/single-point zero-offset cross
        # attention with identity value/output projections reduces Eq-style
        # output to query + layernorm(kv tokens) at the co-located cell.
        params = MMFuserParams(D, 1, rng, heads=2, points=1, ln_eps=1e-5)
        params.gamma1.assign(np.ones(D))
        params.cross.offset_w.assign(np.zeros(params.cross.offset_w.value.shape))
        params.cross.offset_b.assign(np.zeros(params.cross.offset_b.value.shape))
        params.cross.weight_w.assign(np.zeros(params.cross.weight_w.value.shape))
        params.cross.weight_b.assign(np.zeros(params.cross.weight_b.value.shape))
        params.cross.value_proj.assign(np.eye(D))
        params.cross.out_proj.assign(np.eye(D))
        qdata = rng.normal(size=(N, D))
        kvdata = rng.normal(size=(N, D))
        out = mmfuser_forward(
            fm(rng, 11, qdata), FeatureStack([fm(rng, 3, kvdata)]), params
        )
        mu = kvdata.mean(axis=-1, keepdims=True)
        var = kvdata.var(axis=-1, keepdims=True)
        expect = qdata + (kvdata - mu) / np.sqrt(var + 1e-5)
        assert np.max(np.abs(out.tokens.data - expect)) < 1e-12

    def test_output_shape_matches_query(self, rng):
        params = MMFuserParams(D, 3, rng, heads=4, points=2)
        params.gamma1.assign(rng.normal(size=D))
        q = fm(rng, 11)
        stack = FeatureStack([fm(rng, i) for i in (1, 4, 7)])
        out = mmfuser_forward(q, stack, params)
        assert out.tokens.shape == q.tokens.shape

    def test_grid_mismatch_rejected(self, rng):
        params = MMFuserParams(D, 1, rng, heads=2, points=1)
        q = FeatureMap(constant(rng.normal(size=(6, D))), (2, 3), 11)
        stack = FeatureStack([fm(rng, 3)])
        with pytest.raises(ShapeError):
            mmfuser_forward(q, stack, params)

    def test_gate_scaling_interpolates_linearly(self, rng):
        params = MMFuserParams(D, 2, rng, heads=2, points=2)
        gamma = rng.normal(size=D)
        q = fm(rng, 11)
        stack = FeatureStack([fm(rng, 3), fm(rng, 6)])
        params.gamma1.assign(gamma)
        full = mmfuser_forward(q, stack, params).tokens.data
        for t in (0.0, 0.25, 0.5, 0.75, 1.0):
            params.gamma1.assign(t * gamma)
            out = mmfuser_forward(q, stack, params).tokens.data
            expect = q.tokens.data + t * (full - q.tokens.data)
            assert np.max(np.abs(out - expect)) < 1e-12

    def test_cross_only_composition_drops_self_attention(self, rng):
        params = MMFuserParams(D, 2, rng, heads=2, points=2, self_enabled=False)
        assert params.gamma2 is None and params.self_attn is None
        params.gamma1.assign(np.ones(D))
        q = fm(rng, 11)
        stack = FeatureStack([fm(rng, 3), fm(rng, 6)])
        out = mmfuser_forward(q, stack, params)
        assert out.tokens.shape == q.tokens.shape


class TestBaselines:
    def test_concat_constructed_identity(self, rng):
        data = rng.normal(size=(N, D))
        stack = FeatureStack([fm(rng, 1, data), fm(rng, 2, data)])
        proj = np.vstack([np.eye(D), np.zeros((D, D))])
        out = fuse_concat(stack, constant(proj))
        assert np.allclose(out.tokens.data, data, atol=1e-15)

    def test_concat_zero_projection(self, rng):
        stack = FeatureStack([fm(rng, 1), fm(rng, 2)])
        out = fuse_concat(stack, constant(np.zeros((2 * D, D))))
        assert np.array_equal(out.tokens.data, np.zeros((N, D)))

    def test_concat_against_hand_computation(self, rng):
        maps = [rng.normal(size=(2, 4)) for _ in range(3)]
        stack = FeatureStack(
            [FeatureMap(constant(m), (1, 2), i + 1) for i, m in enumerate(maps)]
        )
        proj = rng.normal(size=(12, 4))
        out = fuse_concat(stack, constant(proj))
        expect = np.concatenate(maps, axis=-1) @ proj
        assert np.max(np.abs(out.tokens.data - expect)) < 1e-12

    def test_concat_order_sensitivity_witness(self, rng):
        a, b = rng.normal(size=(N, D)), rng.normal(size=(N, D))
        proj = rng.normal(size=(2 * D, D))
        out1 = fuse_concat(FeatureStack([fm(rng, 1, a), fm(rng, 2, b)]), constant(proj))
        out2 = fuse_concat(FeatureStack([fm(rng, 1, b), fm(rng, 2, a)]), constant(proj))
        assert not np.allclose(out1.tokens.data, out2.tokens.data)

    def test_average_idempotent_on_identical_maps(self, rng):
        data = rng.normal(size=(N, D))
        out = fuse_average(FeatureStack([fm(rng, 1, data), fm(rng, 2, data)]))
        assert np.allclose(out.tokens.data, data, atol=1e-15)

    def test_average_of_opposites_is_zero(self, rng):
        data = rng.normal(size=(N, D))
        out = fuse_average(FeatureStack([fm(rng, 1, data), fm(rng, 2, -data)]))
        assert np.max(np.abs(out.tokens.data)) < 1e-15

    def test_average_permutation_invariant(self, rng):
        maps = [rng.normal(size=(N, D)) for _ in range(3)]
        s1 = FeatureStack([fm(rng, i + 1, m) for i, m in enumerate(maps)])
        s2 = FeatureStack([fm(rng, i + 1, m) for i, m in enumerate(maps[::-1])])
        assert np.array_equal(
            fuse_average(s1).tokens.data, fuse_average(s2).tokens.data
        )

    def test_weighted_uniform_equals_average(self, rng):
        stack = FeatureStack([fm(rng, i) for i in (1, 2, 3)])
        out = fuse_weighted_average(stack, WeightedAvgParams(3))
        assert np.allclose(out.tokens.data, fuse_average(stack).tokens.data, atol=1e-15)

    def test_weighted_one_hot_selects(self, rng):
        maps = [rng.normal(size=(N, D)) for _ in range(3)]
        stack = FeatureStack([fm(rng, i + 1, m) for i, m in enumerate(maps)])
        wp = WeightedAvgParams(3)
        wp.w.assign(np.array([0.0, 1.0, 0.0]))
        out = fuse_weighted_average(stack, wp)
        assert np.array_equal(out.tokens.data, maps[1])

    def test_weighted_zero_weights(self, rng):
        stack = FeatureStack([fm(rng, 1), fm(rng, 2)])
        wp = WeightedAvgParams(2)
        wp.w.assign(np.zeros(2))
        out = fuse_weighted_average(stack, wp)
        assert np.array_equal(out.tokens.data, np.zeros((N, D)))

    def test_linearity_of_average_and_weighted(self, rng):
        alpha, beta = 0.7, -1.3
        f = [rng.normal(size=(N, D)) for _ in range(2)]
        g = [rng.normal(size=(N, D)) for _ in range(2)]
        wp = WeightedAvgParams(2)
        wp.w.assign(rng.normal(size=2))

        def wavg(maps):
            return fuse_weighted_average(
                FeatureStack([fm(rng, i + 1, m) for i, m in enumerate(maps)]), wp
            ).tokens.data

        mixed = wavg([alpha * f[i] + beta * g[i] for i in range(2)])
        assert np.max(np.abs(mixed - (alpha * wavg(f) + beta * wavg(g)))) < 1e-12


class TestFpn:
    def _identity_params(self, levels, rng):
        fp = FpnParams(levels, D, rng)
        for i in range(levels):
            fp.lateral_w[i].assign(np.eye(D))
            fp.lateral_b[i].assign(np.zeros(D))
            kernel = np.zeros((9, D, D))
            kernel[4] = np.eye(D)
            fp.smooth_w[i].assign(kernel.reshape(9 * D, D))
            fp.smooth_b[i].assign(np.zeros(D))
        return fp

    def test_identity_construction_passes_deepest(self, rng):
        data = rng.normal(size=(N, D))
        stack = FeatureStack([fm(rng, 1), fm(rng, 2, data)])
        fp = self._identity_params(2, rng)
        fp.mix.w.assign(np.array([0.0, 1.0]))
        out = fuse_fpn(stack, fp)
        assert np.allclose(out.tokens.data, data, atol=1e-12)

    def test_zero_mix_weights_give_zero(self, rng):
        stack = FeatureStack([fm(rng, 1), fm(rng, 2)])
        fp = FpnParams(2, D, rng)
        fp.mix.w.assign(np.zeros(2))
        out = fuse_fpn(stack, fp)
        assert np.max(np.abs(out.tokens.data)) < 1e-15

    def test_against_straight_line_oracle(self, rng):
        d, grid = 3, (2, 2)
        maps = [rng.normal(size=(4, d)) for _ in range(2)]
        stack = FeatureStack(
            [FeatureMap(constant(m), grid, i + 1) for i, m in enumerate(maps)]
        )
        fp = FpnParams(2, d, rng)
        out = fuse_fpn(stack, fp)
        expect = ref_fpn(
            maps,
            2,
            2,
            [p.value.data for p in fp.lateral_w],
            [p.value.data for p in fp.lateral_b],
            [p.value.data for p in fp.smooth_w],
            [p.value.data for p in fp.smooth_b],
            fp.mix.w.value.data,
        )
        assert np.max(np.abs(out.tokens.data - expect)) < 1e-12

    def test_needs_two_levels(self, rng):
        with pytest.raises(ShapeError):
            fuse_fpn(FeatureStack([fm(rng, 1)]), FpnParams(1, D, rng))


class TestFuseDispatch:
    def test_last_layer_returns_query_untouched(self, rng):
        q = fm(rng, 11)
        out = fuse(FusionMethod.LAST_LAYER_ONLY, q, None, None)
        assert out is q

    def test_average_includes_query_map(self, rng):
        data = rng.normal(size=(N, D))
        q = fm(rng, 11, data)
        stack = FeatureStack([fm(rng, 1, data), fm(rng, 4, data)])
        out = fuse(FusionMethod.AVERAGE, q, stack, None)
        assert np.allclose(out.tokens.data, data, atol=1e-15)

    def test_mmfuser_at_init_equals_last_layer(self, rng):
        q = fm(rng, 11)
        stack = FeatureStack([fm(rng, 1), fm(rng, 4)])
        params = MMFuserParams(D, 2, rng, heads=2, points=2)
        a = fuse(FusionMethod.MMFUSER, q, stack, params)
        b = fuse(FusionMethod.LAST_LAYER_ONLY, q, stack, None)
        assert np.array_equal(a.tokens.data, b.tokens.data)

    def test_output_shape_uniform_across_methods(self, rng):
        q = fm(rng, 11)
        stack = FeatureStack([fm(rng, 1), fm(rng, 4)])
        params = {
            FusionMethod.CONCAT: ConcatParams(3, D, rng),
            FusionMethod.WEIGHTED_AVERAGE: WeightedAvgParams(3),
            FusionMethod.FPN: FpnParams(3, D, rng),
            FusionMethod.MMFUSER: MMFuserParams(D, 2, rng, heads=2, points=2),
            FusionMethod.AVERAGE: None,
            FusionMethod.LAST_LAYER_ONLY: None,
        }
        for method, p in params.items():
            out = fuse(method, q, stack, p)
            assert out.tokens.shape == (N, D), method
            assert out.grid == GRID

    def test_missing_params_rejected(self, rng):
        q = fm(rng, 11)
        stack = FeatureStack([fm(rng, 1)])
        with pytest.raises(ConfigurationError):
            fuse(FusionMethod.CONCAT, q, stack, None)


class TestFusionGradients:
    @pytest.mark.parametrize("variant", list(AttnVariant))
    def test_mmfuser_block_gradcheck_all_variants(self, rng, variant):
        d = 4
        params = MMFuserParams(
            d, 2, rng, variant=variant, heads=2, points=1, sra_pool=2, gamma_init=0.4
        )
        if variant == AttnVariant.DEFORMABLE:
            params.cross.offset_w.assign(rng.normal(size=params.cross.offset_w.value.shape) * 0.05)
            params.cross.weight_w.assign(rng.normal(size=params.cross.weight_w.value.shape) * 0.3)
        from mmfuser.tensor import Param

        q = Param("q", rng.normal(size=(4, d)))
        s1 = Param("s1", rng.normal(size=(4, d)))
        s2 = Param("s2", rng.normal(size=(4, d)))
        wl = constant(rng.normal(size=(4, d)))

        def build():
            with Tape() as tape:
                out = mmfuser_forward(
                    FeatureMap(q.value, GRID, 9),
                    FeatureStack([FeatureMap(s1.value, GRID, 2), FeatureMap(s2.value, GRID, 5)]),
                    params,
                )
                loss = tt.tsum(tt.mul(out.tokens, wl))
            return loss, tape

        from mmfuser.harness import _check

        assert _check(build, [q, s1, s2, *params.params()]) < 1e-5
