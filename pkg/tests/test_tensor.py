import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import finite_difference, relative_error
from ebsal import tensor as T
from ebsal.tensor import DimensionError, NonFiniteError, Tape, Tensor


class TestMatmul:
    def test_identity(self, rng):
        x = rng.normal(size=(3, 5))
        out = T.matmul(Tensor(np.eye(3)), Tensor(x))
        np.testing.assert_array_equal(out.data, x)

    def test_hand_value(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_grad_vs_finite_differences(self, rng):
        a0 = rng.normal(size=(4, 3))
        b0 = rng.normal(size=(3, 5))

        a = Tensor(a0, requires_grad=True)
        b = Tensor(b0, requires_grad=True)
        T.backward(T.tensor_sum(T.matmul(a, b)))

        fd_a = finite_difference(lambda x: float(np.sum(x @ b0)), a0)
        fd_b = finite_difference(lambda x: float(np.sum(a0 @ x)), b0)
        assert relative_error(a.grad, fd_a) < 1e-6
        assert relative_error(b.grad, fd_b) < 1e-6

    def test_stacked_operands(self, rng):
        a = rng.normal(size=(6, 2, 4, 3))
        b = rng.normal(size=(6, 2, 3, 5))
        out = T.matmul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data, a @ b)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


class TestConv2d:
    def test_one_by_one_identity(self, rng):
        x = rng.normal(size=(1, 1, 6, 6)) ** 2  # keep positive, arbitrary
        out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
        np.testing.assert_allclose(out.data, x)

    def test_averaging_kernel_on_constant_image(self):
        x = np.full((1, 1, 8, 8), 3.25)
        k = np.full((1, 1, 3, 3), 1.0 / 9.0)
        out = T.conv2d(Tensor(x), Tensor(k), padding=1)
        interior = out.data[0, 0, 1:-1, 1:-1]
        np.testing.assert_allclose(interior, 3.25)

    def test_grad_vs_finite_differences(self, rng):
        x0 = rng.normal(size=(1, 2, 5, 5))
        k0 = rng.normal(size=(3, 2, 3, 3))

        x = Tensor(x0, requires_grad=True)
        k = Tensor(k0, requires_grad=True)
        T.backward(T.square_norm(T.conv2d(x, k, stride=1, padding=1)))

        def loss(which):
            def f(v):
                xx, kk = (v, k0) if which == "x" else (x0, v)
                out = _conv_reference(xx, kk, stride=1, padding=1)
                return float((out**2).sum())

            return f

        assert relative_error(x.grad, finite_difference(loss("x"), x0)) < 1e-5
        assert relative_error(k.grad, finite_difference(loss("k"), k0)) < 1e-5

    def test_strided_conv_matches_reference(self, rng):
        x = rng.normal(size=(2, 3, 9, 9))
        k = rng.normal(size=(4, 3, 3, 3))
        out = T.conv2d(Tensor(x), Tensor(k), stride=2, padding=1)
        np.testing.assert_allclose(out.data, _conv_reference(x, k, stride=2, padding=1))

    def test_non_integral_output_rejected(self):
        x = Tensor(np.zeros((1, 1, 8, 8)))
        k = Tensor(np.zeros((1, 1, 3, 3)))
        with pytest.raises(DimensionError):
            T.conv2d(x, k, stride=2, padding=1)

    def test_even_kernel_rejected(self):
        with pytest.raises(DimensionError):
            T.conv2d(Tensor(np.zeros((1, 1, 8, 8))), Tensor(np.zeros((1, 1, 4, 4))))


def _conv_reference(x, k, stride, padding):
    """Straight-line cross-correlation, no shared code with the engine."""
    B, C, H, W = x.shape
    O, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for b in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[b, o, i, j] = (patch * k[o]).sum()
    return out


class TestElementwise:
    def test_gelu_zero(self):
        assert T.gelu(Tensor([0.0])).data[0] == 0.0

    def test_gelu_matches_gaussian_cdf_form(self, rng):
        from scipy.stats import norm

        x = rng.normal(size=32)
        np.testing.assert_allclose(T.gelu(Tensor(x)).data, x * norm.cdf(x), atol=1e-12)

    def test_softmax_constant_vector(self):
        out = T.softmax(Tensor(np.full(7, 3.3)))
        np.testing.assert_allclose(out.data, np.full(7, 1.0 / 7.0))

    def test_softmax_axis_out_of_range(self):
        with pytest.raises(DimensionError):
            T.softmax(Tensor(np.zeros((2, 3))), axis=2)

    def test_square_norm(self):
        assert T.square_norm(Tensor([3.0, 4.0])).item() == 25.0

    def test_add_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    @pytest.mark.parametrize(
        "op",
        [
            lambda x: T.gelu(x),
            lambda x: T.sigmoid(x),
            lambda x: T.softmax(x, axis=-1),
            lambda x: T.tensor_mean(x, axis=0),
            lambda x: T.upsample_nearest(T.reshape(x, (1, 1) + x.shape), 2),
            lambda x: T.global_avg_pool(T.reshape(x, (1, 1) + x.shape)),
            lambda x: T.pad2d(x, ((1, 2), (0, 1))),
            lambda x: T.transpose(x, (1, 0)),
            lambda x: T.narrow(x, 0, 1, 2),
        ],
    )
    def test_grads_vs_finite_differences(self, op, rng):
        x0 = rng.normal(size=(4, 6))
        # weight the output so the scalarization is not permutation-blind
        w = rng.normal(size=op(Tensor(x0)).shape)

        x = Tensor(x0, requires_grad=True)
        T.backward(T.tensor_sum(T.mul(op(x), Tensor(w))))
        fd = finite_difference(lambda v: float((_eval(op, v) * w).sum()), x0)
        assert relative_error(x.grad, fd) < 1e-4


def _eval(op, arr):
    with T.no_grad():
        return op(Tensor(arr)).data


class TestBackwardSemantics:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        T.backward(T.tensor_sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_half_square_norm_gives_x(self, rng):
        x0 = rng.normal(size=8)
        x = Tensor(x0, requires_grad=True)
        T.backward(T.scale(T.square_norm(x), 0.5))
        np.testing.assert_allclose(x.grad, x0)

    def test_mlp_loss_vs_finite_differences(self, rng):
        w1_0 = rng.normal(size=(5, 7)) * 0.4
        b1_0 = rng.normal(size=7) * 0.1
        w2_0 = rng.normal(size=(7, 1)) * 0.4
        x0 = rng.normal(size=(6, 5))
        target = rng.normal(size=(6, 1))

        def loss_value(w1v, b1v, w2v):
            h = w1v, b1v
            pre = x0 @ w1v + b1v
            from scipy.stats import norm

            act = pre * norm.cdf(pre)
            out = act @ w2v
            return float(((out - target) ** 2).sum())

        w1 = Tensor(w1_0, requires_grad=True)
        b1 = Tensor(b1_0, requires_grad=True)
        w2 = Tensor(w2_0, requires_grad=True)
        out = T.matmul(T.gelu(T.add(T.matmul(Tensor(x0), w1), b1)), w2)
        T.backward(T.square_norm(T.sub(out, Tensor(target))))

        for param, value, idx in (
            (w1, w1_0, 0),
            (b1, b1_0, 1),
            (w2, w2_0, 2),
        ):
            args = [w1_0, b1_0, w2_0]

            def f(v, idx=idx):
                args2 = list(args)
                args2[idx] = v
                return loss_value(*args2)

            assert relative_error(param.grad, finite_difference(f, value)) < 1e-5

    def test_grad_accumulates_until_reset(self, rng):
        x = Tensor(rng.normal(size=4), requires_grad=True)
        T.backward(T.tensor_sum(x))
        T.backward(T.tensor_sum(x))
        np.testing.assert_array_equal(x.grad, np.full(4, 2.0))
        x.zero_grad()
        assert x.grad is None

    def test_diamond_graph_counts_both_paths(self):
        x = Tensor([2.0], requires_grad=True)
        y = T.add(x, x)
        T.backward(T.tensor_sum(y))
        np.testing.assert_array_equal(x.grad, [2.0])

    def test_non_scalar_loss_rejected(self, rng):
        x = Tensor(rng.normal(size=3), requires_grad=True)
        with pytest.raises(DimensionError):
            T.backward(T.scale(x, 2.0))

    def test_detached_loss_rejected(self):
        with pytest.raises(T.TensorError):
            T.backward(T.tensor_sum(Tensor([1.0, 2.0])))

    def test_tape_topological_order(self, rng):
        x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        y = T.matmul(x, x)
        z = T.tensor_sum(T.add(y, x))
        tape = Tape(z)
        position = {id(node): i for i, node in enumerate(tape.nodes)}
        for node in tape.nodes:
            for parent in node._parents:
                if id(parent) in position:
                    assert position[id(parent)] < position[id(node)]


class TestNumericalHygiene:
    def test_nan_input_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, np.nan])

    def test_overflow_during_forward_rejected(self):
        x = Tensor([1e308])
        with pytest.raises(NonFiniteError):
            T.mul(x, x)

    def test_forward_deterministic(self, rng):
        x = rng.normal(size=(4, 4))
        a = T.softmax(T.matmul(Tensor(x), Tensor(x))).data
        b = T.softmax(T.matmul(Tensor(x), Tensor(x))).data
        assert np.array_equal(a, b)


@settings(max_examples=30, deadline=None)
@given(
    sizes=st.lists(st.integers(1, 4), min_size=1, max_size=3),
    cols=st.integers(1, 5),
    data=st.data(),
)
def test_concat_split_roundtrip(sizes, cols, data):
    parts = [
        np.array(
            data.draw(
                st.lists(
                    st.lists(
                        st.floats(-10, 10, allow_nan=False, width=32),
                        min_size=cols,
                        max_size=cols,
                    ),
                    min_size=s,
                    max_size=s,
                )
            )
        ).reshape(s, cols)
        for s in sizes
    ]
    joined = T.concat([Tensor(p) for p in parts], axis=0)
    back = T.split(joined, sizes, axis=0)
    for original, piece in zip(parts, back):
        np.testing.assert_array_equal(piece.data, original)


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(2, 6),
    values=st.lists(st.floats(-30, 30, allow_nan=False, width=32), min_size=2, max_size=6),
)
def test_softmax_rows_sum_to_one(n, values):
    row = np.array(values[: max(2, min(len(values), n))], dtype=np.float64)
    out = T.softmax(Tensor(row)).data
    assert abs(out.sum() - 1.0) < 1e-9
    assert (out >= 0).all()


def test_frozen_context_blocks_parameter_grads(rng):
    w = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    with T.frozen([w]):
        T.backward(T.square_norm(T.matmul(x, w)))
    assert w.grad is None
    assert x.grad is not None
    assert w.requires_grad  # restored


def test_no_grad_detaches_outputs(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    with T.no_grad():
        y = T.scale(x, 2.0)
    assert not y.requires_grad
