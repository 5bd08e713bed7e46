import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from duq import diffcore as dc
from duq.diffcore import Tape


def grad_of(fn, *params):
    with Tape() as tape:
        loss = fn()
    grads = tape.backward(loss)
    return [grads[p] for p in params]


def check_against_fd(fn, params, rtol=1e-4, atol=1e-6):
    analytic = grad_of(fn, *params)
    for p, g in zip(params, analytic):
        numeric = dc.numerical_gradient(lambda: fn().item(), p)
        assert dc.gradients_close(g, numeric, rtol, atol), (p.name, dc.max_relative_error(g, numeric))


class TestMatmul:
    def test_identity(self):
        m = np.arange(9.0).reshape(3, 3)
        npt.assert_array_equal(dc.matmul(np.eye(3), m).data, m)

    def test_hand_arithmetic(self):
        out = dc.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
        npt.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(dc.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            dc.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        a = dc.parameter(rng.standard_normal((4, 4)), "a")
        b = dc.parameter(rng.standard_normal((4, 4)), "b")
        g = grad_of(lambda: dc.sum(dc.matmul(a, b)), a)[0]
        numeric = dc.numerical_gradient(lambda: float((a.data @ b.data).sum()), a)
        assert dc.max_relative_error(g, numeric) < 1e-6
        # analytic form: g . b^T with g = ones
        npt.assert_allclose(g, np.ones((4, 4)) @ b.data.T, rtol=1e-12)


class TestElementwise:
    def test_softplus_at_zero(self):
        assert dc.softplus(np.array(0.0)).item() == pytest.approx(0.6931471805599453, abs=1e-15)

    def test_sigmoid_at_zero(self):
        assert dc.sigmoid(np.array(0.0)).item() == 0.5

    def test_softplus_derivative_is_sigmoid(self):
        x = dc.parameter(2.0, "x")
        g = grad_of(lambda: dc.softplus(x), x)[0]
        numeric = dc.numerical_gradient(lambda: dc.softplus(x).item(), x)
        assert float(g) == pytest.approx(0.8807970779778823, rel=1e-12)
        assert float(numeric) == pytest.approx(0.8807970779, rel=1e-8)

    @pytest.mark.parametrize("x", [-100.0, -30.0, 0.0, 30.0, 100.0, 700.0])
    def test_softplus_positive_and_finite(self, x):
        y = dc.softplus(np.array(x)).item()
        assert y > 0 and np.isfinite(y)
        assert y == pytest.approx(np.logaddexp(0.0, x), rel=1e-12)

    def test_log_rejects_non_positive(self):
        with pytest.raises(ValueError, match="non-positive"):
            dc.log(np.array([1.0, 0.0]))

    def test_shape_rules(self):
        a = np.ones((2, 3))
        npt.assert_array_equal((dc.constant(a) + 1.0).data, 2 * a)
        with pytest.raises(dc.ShapeError):
            dc.add(a, np.ones(3))

    def test_dispatch(self):
        npt.assert_allclose(dc.elementwise("square", np.array([3.0])).data, [9.0])
        with pytest.raises(ValueError):
            dc.elementwise("cosh", np.array(1.0))

    @pytest.mark.parametrize("op", ["sigmoid", "tanh", "softplus", "square", "abs"])
    def test_unary_gradcheck(self, op):
        rng = np.random.default_rng(1)
        x = dc.parameter(rng.uniform(-2, 2, size=(3, 4)) + 0.05, op)
        check_against_fd(lambda: dc.sum(dc.elementwise(op, x)), [x])

    def test_log_gradcheck(self):
        x = dc.parameter(np.random.default_rng(2).uniform(0.5, 3, size=5), "x")
        check_against_fd(lambda: dc.sum(dc.log(x)), [x])

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
    def test_binary_gradcheck(self, op):
        rng = np.random.default_rng(3)
        a = dc.parameter(rng.uniform(0.5, 2, size=(2, 3)), "a")
        b = dc.parameter(rng.uniform(0.5, 2, size=(2, 3)), "b")
        s = dc.parameter(1.7, "s")
        check_against_fd(lambda: dc.sum(dc.elementwise(op, a, b)), [a, b])
        check_against_fd(lambda: dc.sum(dc.elementwise(op, a, s)), [a, s])
        check_against_fd(lambda: dc.sum(dc.elementwise(op, s, b)), [s, b])


class TestStructural:
    def test_concat_single_part(self):
        assert dc.concat([np.ones((2, 3))], axis=1).shape == (2, 3)

    def test_concat_extents_add(self):
        assert dc.concat([np.ones((2, 3)), np.ones((2, 4))], axis=1).shape == (2, 7)

    def test_concat_rejects_mismatch(self):
        with pytest.raises(dc.ShapeError):
            dc.concat([np.ones((2, 3)), np.ones((3, 3))], axis=1)

    def test_concat_then_split_round_trip(self):
        rng = np.random.default_rng(4)
        a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 4))
        pa, pb = dc.split(dc.concat([a, b], axis=1), 1, [3, 4])
        npt.assert_array_equal(pa.data, a)
        npt.assert_array_equal(pb.data, b)
        ta = dc.take(dc.concat([a, b], axis=1), 1, 0, 3)
        npt.assert_array_equal(ta.data, a)

    def test_concat_gradient_slices_back(self):
        a = dc.parameter(np.ones((2, 2)), "a")
        b = dc.parameter(np.ones((2, 1)), "b")
        w = np.arange(6.0).reshape(2, 3)
        ga, gb = grad_of(lambda: dc.sum(dc.concat([a, b], axis=1) * w), a, b)
        npt.assert_array_equal(ga, w[:, :2])
        npt.assert_array_equal(gb, w[:, 2:])

    def test_split_partial_use(self):
        x = dc.parameter(np.arange(6.0).reshape(3, 2), "x")
        g = grad_of(lambda: dc.sum(dc.split(x, 0, [1, 2])[1]), x)[0]
        npt.assert_array_equal(g, [[0, 0], [1, 1], [1, 1]])

    def test_structural_gradcheck(self):
        rng = np.random.default_rng(5)
        x = dc.parameter(rng.standard_normal((4, 3)), "x")
        v = dc.parameter(rng.standard_normal(3), "v")
        w = rng.standard_normal((2, 6))

        def fn():
            parts = dc.split(x, 0, [1, 3])
            r = dc.reshape(dc.concat([parts[1], dc.tile_rows(v, 1)], axis=0), (2, 6))
            return dc.sum(dc.square(r * w)) + dc.sum(dc.take(x, 1, 1, 3))

        check_against_fd(fn, [x, v])


class TestGatherRows:
    def test_first_row(self):
        t = np.arange(6.0).reshape(3, 2)
        npt.assert_array_equal(dc.gather_rows(t, [0]).data, t[:1])

    def test_repeated_ids_accumulate(self):
        t = dc.parameter(np.zeros((3, 2)), "t")
        g = grad_of(lambda: dc.sum(dc.gather_rows(t, [1, 1])), t)[0]
        npt.assert_array_equal(g[1], [2.0, 2.0])
        npt.assert_array_equal(g[[0, 2]], 0.0)

    def test_out_of_range_names_id(self):
        with pytest.raises(IndexError, match="id 5"):
            dc.gather_rows(np.zeros((5, 2)), [0, 5])

    def test_embedding_gradcheck(self):
        rng = np.random.default_rng(6)
        t = dc.parameter(rng.standard_normal((5, 2)), "table")
        ids = [0, 3, 3, 4, 1, 3]
        w = rng.standard_normal((6, 2))
        g = grad_of(lambda: dc.sum(dc.square(dc.gather_rows(t, ids) * w)), t)[0]
        numeric = dc.numerical_gradient(lambda: float(((t.data[ids] * w) ** 2).sum()), t)
        assert dc.max_relative_error(g, numeric) < 1e-6


class TestReduce:
    def test_sum(self):
        assert dc.sum(np.array([1.0, 2.0, 3.0])).item() == 6.0

    def test_mean_of_constant(self):
        assert dc.mean(np.full((3, 4), 2.5)).item() == 2.5

    def test_mean_gradient(self):
        x = dc.parameter(np.ones(8), "x")
        npt.assert_allclose(grad_of(lambda: dc.mean(x), x)[0], np.full(8, 1 / 8))

    def test_axis_gradcheck(self):
        x = dc.parameter(np.random.default_rng(7).standard_normal((3, 4)), "x")
        w = np.arange(4.0)
        check_against_fd(lambda: dc.sum(dc.mean(x, axis=0) * w), [x])
        check_against_fd(lambda: dc.sum(dc.square(dc.sum(x, axis=1))), [x])

    def test_bad_axis(self):
        with pytest.raises(dc.ShapeError):
            dc.sum(np.ones((2, 2)), axis=2)


class TestBackward:
    def test_square(self):
        x = dc.parameter(3.0, "x")
        assert float(grad_of(lambda: x * x, x)[0]) == 6.0

    def test_unreachable_parameter_is_zero(self):
        x = dc.parameter(3.0, "x")
        p = dc.parameter(np.ones((2, 2)), "p")
        g = grad_of(lambda: x * x, p)[0]
        npt.assert_array_equal(g, np.zeros((2, 2)))

    def test_non_scalar_rejected(self):
        x = dc.parameter(np.ones(3), "x")
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(dc.ShapeError):
            tape.backward(y)

    def test_reuse_accumulates(self):
        x = dc.parameter(2.0, "x")
        # x used three times: d(x*x + x)/dx = 2x + 1
        assert float(grad_of(lambda: x * x + x, x)[0]) == 5.0

    def test_no_recording_outside_tape(self):
        x = dc.parameter(2.0, "x")
        y = x * x
        with pytest.raises(ValueError):
            dc.backward(y)

    def test_replay_is_bitwise_identical(self):
        rng = np.random.default_rng(8)
        w = dc.parameter(rng.standard_normal((3, 3)), "w")
        x = rng.standard_normal((5, 3))
        with Tape() as tape:
            loss = dc.sum(dc.tanh(dc.matmul(x, w)))
        g1 = tape.backward(loss)[w].copy()
        g2 = tape.backward(loss)[w]
        assert np.array_equal(g1, g2)

    def test_tape_records_in_order(self):
        x = dc.parameter(1.0, "x")
        with Tape() as tape:
            y = dc.sigmoid(x)
            z = dc.square(y)
        assert [n.outs[0] for n in tape.nodes] == [y, z]


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    a=st.floats(-3, 3),
    b=st.floats(-3, 3),
)
def test_backward_is_linear_in_the_loss(seed, a, b):
    rng = np.random.default_rng(seed)
    w = dc.parameter(rng.standard_normal((3, 2)), "w")
    x = rng.standard_normal((4, 3))

    def l1():
        return dc.sum(dc.sigmoid(dc.matmul(x, w)))

    def l2():
        return dc.sum(dc.square(dc.matmul(x, w)))

    combined = grad_of(lambda: a * l1() + b * l2(), w)[0]
    separate = a * grad_of(l1, w)[0] + b * grad_of(l2, w)[0]
    npt.assert_allclose(combined, separate, rtol=0, atol=1e-12 * (1 + np.abs(separate).max()))


@settings(max_examples=20, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    rows=st.integers(1, 4),
    cols=st.integers(1, 4),
    op=st.sampled_from(["sigmoid", "tanh", "softplus", "square", "mul", "add", "sub", "div"]),
)
def test_random_shapes_gradcheck(seed, rows, cols, op):
    rng = np.random.default_rng(seed)
    a = dc.parameter(rng.uniform(0.3, 2.0, size=(rows, cols)), "a")
    b = dc.parameter(rng.uniform(0.3, 2.0, size=(rows, cols)), "b")
    w = rng.standard_normal((rows, cols))
    args = (a, b) if op in ("mul", "add", "sub", "div") else (a,)
    check_against_fd(lambda: dc.sum(dc.elementwise(op, *args) * w), list(args))


@settings(max_examples=50, deadline=None)
@given(st.floats(-100, 100))
def test_softplus_strictly_positive(x):
    assert dc.softplus(np.array(x)).item() > 0


def test_split_into_one_piece():
    x = dc.parameter(np.arange(4.0).reshape(2, 2), "x")
    g = grad_of(lambda: dc.sum(dc.square(dc.split(x, 1, [2])[0])), x)[0]
    npt.assert_array_equal(g, 2 * x.data)
