import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panomamba import tensor as T
from panomamba.tensor import ContractError, DomainError, ShapeError, Tape, Tensor


def randt(shape, seed=0, scale=1.0, grad=False):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(size=shape) * scale, requires_grad=grad)


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 0.0], [0.0, 1.0]])
        b = Tensor([[3.0, 4.0], [5.0, 6.0]])
        assert np.array_equal((a @ b).data, b.data)

    def test_hand_computed(self):
        out = Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])
        assert out.data.tolist() == [[11.0]]

    def test_gradcheck_5x7_7x3(self):
        x, w = randt((5, 7), 1), randt((7, 3), 2)
        err = T.gradcheck(lambda x, w: ((x @ w) * (x @ w)).sum(), [x, w])
        assert err <= 1e-6

    def test_shape_error_names_both(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(randt((2, 3)), randt((2, 3)))


class TestUnary:
    def test_sigmoid_at_zero(self):
        assert float(T.sigmoid(Tensor(0.0)).data) == 0.5

    def test_softplus_at_zero(self):
        assert abs(float(T.softplus(Tensor(0.0)).data) - np.log(2.0)) < 1e-15

    def test_silu_at_zero(self):
        assert float(T.silu(Tensor(0.0)).data) == 0.0

    def test_reciprocal_domain_error(self):
        with pytest.raises(DomainError):
            T.reciprocal(Tensor([1.0, 0.0]))

    def test_sqrt_domain_error(self):
        with pytest.raises(DomainError):
            T.sqrt(Tensor([-1.0]))

    def test_unknown_name_rejected(self):
        with pytest.raises(ContractError):
            T.map_unary(Tensor([1.0]), "tanh")


class TestBinary:
    def test_additive_identity(self):
        out = Tensor([1.0, 2.0, 3.0]) + Tensor([0.0, 0.0, 0.0])
        assert out.data.tolist() == [1.0, 2.0, 3.0]

    def test_divide(self):
        out = Tensor([2.0, 4.0]) / Tensor([2.0, 2.0])
        assert out.data.tolist() == [1.0, 2.0]

    def test_broadcast_gradcheck_both_operands(self):
        x, y = randt((4, 3), 3), randt((3,), 4)
        err = T.gradcheck(lambda x, y: (x * y).sum(), [x, y])
        assert err <= 1e-6

    def test_incompatible_shapes(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((2, 4)))

    def test_leading_broadcast(self):
        out = Tensor(np.ones((2, 3, 4))) * Tensor(np.full((3, 4), 2.0))
        assert out.shape == (2, 3, 4)
        assert np.all(out.data == 2.0)


class TestReduce:
    def test_sum(self):
        assert float(Tensor([1.0, 2.0, 3.0]).sum().data) == 6.0

    def test_mean_of_constant(self):
        assert float(Tensor(np.full((3, 5), 2.5)).mean().data) == 2.5

    def test_mean_axis_gradcheck(self):
        err = T.gradcheck(lambda x: (x.mean(axes=1) * x.mean(axes=1)).sum(), [randt((3, 4), 5)])
        assert err <= 1e-6

    def test_bad_axis(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 2))).sum(axes=5)


class TestBackward:
    def test_grad_of_sum_is_ones(self):
        p = randt((3, 4), 6, grad=True)
        with Tape():
            T.backward(p.sum())
        assert np.array_equal(p.grad, np.ones((3, 4)))

    def test_grad_of_sum_of_squares(self):
        p = randt((5,), 7, grad=True)
        with Tape():
            T.backward((p * p).sum())
        assert np.allclose(p.grad, 2 * p.data, rtol=0, atol=1e-15)

    def test_two_consumers_accumulate(self):
        p = Tensor(np.ones(3), requires_grad=True)
        with Tape():
            T.backward(p.sum() + p.sum())
        assert np.array_equal(p.grad, np.full(3, 2.0))

    def test_non_scalar_root_rejected(self):
        p = randt((3,), 8, grad=True)
        with Tape():
            out = p * p
            with pytest.raises(ContractError):
                T.backward(out)

    def test_mlp_composite_gradcheck(self):
        rng = np.random.default_rng(9)
        w1 = Tensor(rng.normal(size=(6, 8)) * 0.4)
        w2 = Tensor(rng.normal(size=(8, 1)) * 0.4)
        x = Tensor(rng.normal(size=(4, 6)))

        def loss(w1, w2):
            h = T.silu(x @ w1)
            return (h @ w2).mean()

        assert T.gradcheck(loss, [w1, w2]) <= 1e-6


class TestGradcheckContract:
    def test_linear_function_tiny_error(self):
        assert T.gradcheck(lambda x: x.sum(), [randt((6,), 10)]) <= 1e-10

    def test_sigmoid_at_zero_vector(self):
        assert T.gradcheck(lambda x: T.sigmoid(x).sum(), [Tensor(np.zeros(5))]) <= 1e-7

    def test_eps_bounds(self):
        with pytest.raises(ContractError):
            T.gradcheck(lambda x: x.sum(), [randt((2,), 0)], eps=0.5)

    def test_non_scalar_f_rejected(self):
        with pytest.raises(ContractError):
            T.gradcheck(lambda x: x * x, [randt((2,), 0)])


# every registered op family passes gradcheck on 10 random seeds
@pytest.mark.parametrize("seed", range(10))
def test_registered_ops_gradcheck(seed):
    rng = np.random.default_rng(seed)
    t = lambda *s: Tensor(rng.normal(size=s))
    # constants pre-drawn: the probed function must be deterministic
    m32, m64, w54, w55, w24, w34 = t(3, 2), t(6, 4), t(5, 4), t(5,), t(2, 2), t(3, 4)
    pos4 = Tensor(rng.uniform(1, 2, 4))
    pos5 = Tensor(rng.uniform(0.5, 2, 5))
    checks = [
        lambda: T.gradcheck(lambda a, b: (a @ b).sum(), [t(3, 4), t(4, 2)], eps=1e-5),
        lambda: T.gradcheck(lambda a, b: (a + b).sum(), [t(3, 4), t(4)], eps=1e-5),
        lambda: T.gradcheck(lambda a, b: (a - b).sum(), [t(3, 4), t(4)], eps=1e-5),
        lambda: T.gradcheck(lambda a, b: (a * b).sum(), [t(3, 4), t(4)], eps=1e-5),
        lambda: T.gradcheck(lambda a, b: (a / b).sum(), [t(3, 4), pos4], eps=1e-5),
        lambda: T.gradcheck(lambda a: T.exp(a).sum(), [t(5)], eps=1e-5),
        lambda: T.gradcheck(lambda a: T.sigmoid(a).sum(), [t(5)], eps=1e-5),
        lambda: T.gradcheck(lambda a: T.softplus(a).sum(), [t(5)], eps=1e-5),
        lambda: T.gradcheck(lambda a: T.silu(a).sum(), [t(5)], eps=1e-5),
        lambda: T.gradcheck(lambda a: T.neg(a).sum(), [t(5)], eps=1e-5),
        lambda: T.gradcheck(lambda a: T.reciprocal(a).sum(), [pos5], eps=1e-5),
        lambda: T.gradcheck(lambda a: T.sqrt(a).sum(), [pos5], eps=1e-5),
        lambda: T.gradcheck(lambda a: a.sum(axes=0).mean(), [t(3, 4)], eps=1e-5),
        lambda: T.gradcheck(lambda a: a.mean(axes=(0, 1)), [t(3, 4)], eps=1e-5),
        lambda: T.gradcheck(lambda a: (a.reshape(6, 2) * m64[:, :2]).sum(), [t(3, 4)], eps=1e-5),
        lambda: T.gradcheck(lambda a: (a.transpose((1, 0)) @ m32).sum(), [t(3, 4)], eps=1e-5),
        lambda: T.gradcheck(lambda a: (a.flip(0) * w55).sum(), [t(5)], eps=1e-5),
        lambda: T.gradcheck(lambda a: (T.concat([a, a], axis=0) * m64).sum(), [t(3, 4)], eps=1e-5),
        lambda: T.gradcheck(lambda a: (a[1:3, :2] * w24).sum(), [t(4, 4)], eps=1e-5),
        lambda: T.gradcheck(lambda a: (T.gather_rows(a, np.array([0, 2, 2])) * w34).sum(), [t(3, 4)], eps=1e-5),
    ]
    worst = max(c() for c in checks)
    assert worst <= 1e-4


class TestDtypes:
    def test_default_is_float64(self):
        assert Tensor([1, 2]).dtype == np.float64

    def test_float32_opt_in_preserved(self):
        x = Tensor(np.ones(3, dtype=np.float32))
        assert T.silu(x).dtype == np.float32
        assert (x + x).dtype == np.float32


class TestNoGrad:
    def test_no_recording_inside_no_grad(self):
        p = randt((3,), 11, grad=True)
        with Tape() as tape:
            with T.no_grad():
                _ = (p * p).sum()
            assert len(tape.entries) == 0

    def test_detach_cuts_graph(self):
        p = randt((3,), 12, grad=True)
        with Tape():
            q = (p * p).detach()
            out = (q * p).sum()
            T.backward(out)
        assert np.allclose(p.grad, q.data)  # only the direct factor


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=16))
@settings(max_examples=50, deadline=None)
def test_sigmoid_range_and_symmetry(vals):
    x = Tensor(np.array(vals))
    y = T.sigmoid(x).data
    assert np.all((y > 0) & (y < 1))
    y_neg = T.sigmoid(T.neg(x)).data
    assert np.allclose(y + y_neg, 1.0, atol=1e-12)


@given(
    st.integers(1, 4), st.integers(1, 4), st.integers(1, 4),
    st.integers(0, 2**31 - 1),
)
@settings(max_examples=40, deadline=None)
def test_broadcast_add_matches_numpy(m, n, k, seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(m, n, k)))
    b = Tensor(rng.normal(size=(n, k)))
    assert np.array_equal((a + b).data, a.data + b.data)
