import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmfuser import tensor as tt
from mmfuser.tensor import Param, ShapeError, Tape, Tensor, backward, finite_diff_grad

from references import ref_matmul


def rel_err(a, b, floor=1e-8):
    return float(np.max(np.abs(a - b) / np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))))


class TestTensorInvariants:
    def test_element_count_matches_shape(self, rng):
        t = Tensor(rng.normal(size=(3, 4, 5)))
        assert t.size == 60 and t.shape == (3, 4, 5)

    def test_nan_construction_rejected(self):
        with pytest.raises(ValueError):
            Tensor([1.0, float("nan")])

    def test_inf_construction_rejected(self):
        with pytest.raises(ValueError):
            Tensor([[1.0, float("inf")]])

    def test_op_producing_nonfinite_raises(self):
        big = Tensor([[1e200, 1e200]])
        with pytest.raises(ValueError):
            tt.matmul(big, Tensor([[1e200], [1e200]]))

    def test_data_is_immutable(self, rng):
        t = Tensor(rng.normal(size=(2, 2)))
        with pytest.raises(ValueError):
            t.data[0, 0] = 5.0


class TestParam:
    def test_grad_zero_initialized_same_shape(self, rng):
        p = Param("p", rng.normal(size=(3, 2)))
        assert p.grad.shape == (3, 2)
        assert np.array_equal(p.grad, np.zeros((3, 2)))

    def test_assign_preserves_grad_buffer(self, rng):
        p = Param("p", rng.normal(size=(2,)))
        with Tape() as tape:
            loss = tt.tsum(p.value)
        backward(loss, tape)
        p.assign(np.zeros(2))
        assert np.array_equal(p.grad, np.ones(2))


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = tt.matmul(a, Tensor(np.eye(2)))
        assert np.array_equal(out.data, a.data)

    def test_small_product_against_triple_loop(self):
        a = Tensor([[1.0, 2.0]])
        b = Tensor([[3.0], [4.0]])
        out = tt.matmul(a, b)
        assert np.array_equal(out.data, np.array([[11.0]]))
        assert np.array_equal(out.data, ref_matmul(a.data, b.data))

    def test_zero_matrix(self, rng):
        a = Tensor(rng.normal(size=(3, 4)))
        out = tt.matmul(a, Tensor(np.zeros((4, 2))))
        assert np.array_equal(out.data, np.zeros((3, 2)))

    def test_random_against_triple_loop(self, rng):
        a = rng.normal(size=(4, 6))
        b = rng.normal(size=(6, 3))
        out = tt.matmul(Tensor(a), Tensor(b))
        assert rel_err(out.data, ref_matmul(a, b)) < 1e-12

    def test_shape_mismatch_names_both_shapes(self, rng):
        a, b = Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(4, 2)))
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
            tt.matmul(a, b)


class TestSoftmax:
    def test_symmetry(self):
        out = tt.softmax_last(Tensor([0.0, 0.0]))
        assert np.array_equal(out.data, [0.5, 0.5])

    def test_large_values_stable(self):
        out = tt.softmax_last(Tensor([1000.0, 1000.0, 1000.0]))
        assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)

    def test_closed_form(self):
        out = tt.softmax_last(Tensor([0.0, math.log(3.0)]))
        assert np.allclose(out.data, [0.25, 0.75], atol=1e-15)

    @given(
        st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=9),
        st.integers(min_value=1, max_value=4),
    )
    def test_rows_are_distributions(self, row, reps):
        x = Tensor(np.array([row] * reps))
        out = tt.softmax_last(x).data
        assert np.all(out >= 0.0) and np.all(out <= 1.0)
        assert np.max(np.abs(out.sum(axis=-1) - 1.0)) < 1e-12


class TestLayerNorm:
    def test_constant_token_maps_to_zero(self):
        x = Tensor([[3.0, 3.0, 3.0, 3.0]])
        out = tt.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)), 1e-5)
        assert np.allclose(out.data, 0.0)

    def test_standardizes(self, rng):
        x = Tensor(rng.normal(2.0, 3.0, size=(5, 16)))
        out = tt.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)), 1e-5).data
        assert np.max(np.abs(out.mean(axis=-1))) < 1e-12
        assert np.max(np.abs(out.var(axis=-1) - 1.0)) < 1e-3  # eps effect only

    def test_zero_gain_yields_bias(self, rng):
        x = Tensor(rng.normal(size=(4, 3)))
        b = rng.normal(size=3)
        out = tt.layer_norm(x, Tensor(np.zeros(3)), Tensor(b), 1e-5).data
        assert np.array_equal(out, np.tile(b, (4, 1)))

    def test_eps_must_be_positive(self, rng):
        x = Tensor(rng.normal(size=(2, 3)))
        with pytest.raises(ValueError):
            tt.layer_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), 0.0)


class TestBilinearSample:
    def test_cell_centers_exact_bitwise(self, rng):
        m = Tensor(rng.normal(size=(3, 5, 4)))
        pts = np.array([[(j + 0.5) / 5, (i + 0.5) / 3] for i in range(3) for j in range(5)])
        out = tt.bilinear_sample(m, Tensor(pts))
        assert np.array_equal(out.data, m.data.reshape(15, 4))

    def test_midpoint_is_mean_of_adjacent(self, rng):
        m = Tensor(rng.normal(size=(2, 4, 3)))
        pt = np.array([[1.0 / 4, 0.5 / 2]])  # between centers (0,0) and (0,1)
        out = tt.bilinear_sample(m, Tensor(pt)).data[0]
        assert np.allclose(out, 0.5 * (m.data[0, 0] + m.data[0, 1]), atol=1e-15)

    def test_far_out_of_range_clamps_to_corner(self, rng):
        m = Tensor(rng.normal(size=(4, 4, 2)))
        out = tt.bilinear_sample(m, Tensor(np.array([[-5.0, -5.0]])))
        assert np.array_equal(out.data[0], m.data[0, 0])


class TestConcat:
    def test_channel_concat_shape(self, rng):
        a, b = Tensor(rng.normal(size=(6, 4))), Tensor(rng.normal(size=(6, 4)))
        assert tt.concat([a, b], axis=-1).shape == (6, 8)

    def test_single_identity(self, rng):
        a = Tensor(rng.normal(size=(3, 2)))
        assert np.array_equal(tt.concat([a], axis=0).data, a.data)

    def test_token_axis_concat(self, rng):
        parts = [Tensor(rng.normal(size=(5, 3))) for _ in range(4)]
        assert tt.concat(parts, axis=0).shape == (20, 3)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            tt.concat([Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(2, 4)))], axis=0)

    @given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 4))
    def test_concat_split_round_trip_bitwise(self, n1, n2, d):
        r = np.random.default_rng(n1 * 100 + n2 * 10 + d)
        a = Tensor(r.normal(size=(n1, d)))
        b = Tensor(r.normal(size=(n2, d)))
        cat = tt.concat([a, b], axis=0)
        pa, pb = tt.split(cat, [n1, n2], axis=0)
        assert np.array_equal(pa.data, a.data) and np.array_equal(pb.data, b.data)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        p = Param("p", rng.normal(size=(3, 4)))
        with Tape() as tape:
            loss = tt.tsum(p.value)
        backward(loss, tape)
        assert np.array_equal(p.grad, np.ones((3, 4)))

    def test_square_gives_two_p(self, rng):
        p = Param("p", rng.normal(size=(5,)))
        with Tape() as tape:
            loss = tt.tsum(tt.mul(p.value, p.value))
        backward(loss, tape)
        assert np.allclose(p.grad, 2.0 * p.value.data, atol=1e-14)

    def test_chain_matches_finite_difference(self, rng):
        a = Param("a", rng.normal(size=(3, 4)))
        b = Param("b", rng.normal(size=(4, 5)))
        g = Param("g", rng.normal(size=(5,)))
        c = Param("c", rng.normal(size=(5,)))
        wl = tt.constant(rng.normal(size=(3, 5)))

        def build():
            with Tape() as tape:
                y = tt.matmul(a.value, b.value)
                y = tt.layer_norm(y, g.value, c.value, 1e-5)
                y = tt.softmax_last(y)
                loss = tt.tsum(tt.mul(y, wl))
            return loss, tape

        loss, tape = build()
        backward(loss, tape)
        for p in (a, b, g, c):
            fd = finite_diff_grad(lambda: build()[0].item(), p, 1e-5)
            assert rel_err(p.grad, fd) < 1e-5

    def test_loss_must_be_scalar(self, rng):
        p = Param("p", rng.normal(size=(3,)))
        with Tape() as tape:
            y = tt.scale(p.value, 2.0)
        with pytest.raises(ShapeError):
            backward(y, tape)

    def test_accumulation_is_linear(self, rng):
        init = rng.normal(size=(4,))
        wf = tt.constant(rng.normal(size=(4,)))
        wg = tt.constant(rng.normal(size=(4,)))

        def grad_of(weights_list):
            p = Param("p", init)
            for w in weights_list:
                with Tape() as tape:
                    loss = tt.tsum(tt.mul(tt.gelu(p.value), w))
                backward(loss, tape)
            return p.grad

        gf = grad_of([wf])
        gg = grad_of([wg])
        gfg = grad_of([wf, wg])
        assert np.max(np.abs(gfg - (gf + gg))) < 1e-12

    def test_grads_sum_across_multiple_uses(self, rng):
        p = Param("p", rng.normal(size=(3,)))
        with Tape() as tape:
            loss = tt.tsum(tt.add(p.value, p.value))
        backward(loss, tape)
        assert np.array_equal(p.grad, 2.0 * np.ones(3))


class TestFiniteDiff:
    def test_sum_gradient(self, rng):
        p = Param("p", rng.normal(size=(4,)))
        fd = finite_diff_grad(lambda: float(p.value.data.sum()), p, 1e-5)
        assert np.max(np.abs(fd - 1.0)) < 1e-9

    def test_square_at_three(self):
        p = Param("p", np.array([3.0]))
        fd = finite_diff_grad(lambda: float(p.value.data[0] ** 2), p, 1e-5)
        assert abs(fd[0] - 6.0) < 1e-8

    def test_h_must_be_positive(self):
        p = Param("p", np.array([1.0]))
        with pytest.raises(ValueError):
            finite_diff_grad(lambda: 0.0, p, 0.0)


class TestOpCount:
    def test_matmul_counts_flops(self, rng):
        tt.op_count_reset()
        tt.matmul(Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(4, 5))))
        assert tt.op_count() == 2 * 3 * 4 * 5
