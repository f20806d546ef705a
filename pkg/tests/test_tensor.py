import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from frdiff import nn
from frdiff import tensor as T
from frdiff.tensor import ContractError, DimensionError, Tape, Tensor

from oracles import central_diff, close


def tape_grads(fn, arrays, weights):
    with Tape() as tape:
        leaves = [tape.watch(a) for a in arrays]
        out = fn(*leaves)
        loss = (out * Tensor(weights)).sum()
        return tape.gradient(loss, leaves), out


def check_grads(fn, arrays, rng, tol=1e-6):
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    out_shape = fn(*[Tensor(a) for a in arrays]).shape
    weights = rng.standard_normal(out_shape)
    grads, _ = tape_grads(fn, arrays, weights)
    for idx, (a, g) in enumerate(zip(arrays, grads)):

        def scalar(v, idx=idx):
            args = [Tensor(v) if j == idx else Tensor(arrays[j]) for j in range(len(arrays))]
            return float((fn(*args).data * weights).sum())

        fd = central_diff(scalar, a)
        assert close(g, fd, tol), f"input {idx}: max diff {np.abs(g - fd).max():.3g}"


def test_matmul_identity_and_dot():
    a = Tensor(np.eye(2))
    b = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(T.matmul(a, b).data, b.data)
    np.testing.assert_array_equal(T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11.0]])


def test_matmul_gradient_example():
    a = np.ones((2, 2))
    b = np.array([[2.0, 0.0], [0.0, 2.0]])
    fd = central_diff(lambda v: float((v @ b).sum()), a)
    np.testing.assert_allclose(fd, [[2, 2], [2, 2]], atol=1e-8)
    with Tape() as tape:
        ta = tape.watch(a)
        (g,) = tape.gradient(T.matmul(ta, Tensor(b)).sum(), [ta])
    np.testing.assert_allclose(g, fd, atol=1e-6)


def test_matmul_shape_errors():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_elementwise_only_scalar_broadcast():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones(3))
    y = Tensor(np.ones((2, 3))) * Tensor(np.array(2.0))
    np.testing.assert_array_equal(y.data, 2 * np.ones((2, 3)))


def test_conv2d_trivial_cases():
    x = Tensor(np.random.default_rng(0).standard_normal((1, 5, 5)))
    assert np.all(T.conv2d(x, Tensor(np.zeros((3, 1, 3, 3)))).data == 0)
    np.testing.assert_array_equal(T.conv2d(x, Tensor(np.ones((1, 1, 1, 1)))).data, x.data)


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 4, 4))
    k = rng.standard_normal((3, 2, 3, 3))
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros((3, 4, 4))
    for o in range(3):
        for i in range(4):
            for j in range(4):
                ref[o, i, j] = (k[o] * xp[:, i : i + 3, j : j + 3]).sum()
    np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(k)).data, ref, atol=1e-12)


def test_conv2d_channel_mismatch():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_groupnorm_trivial_cases():
    x = Tensor(np.full((4, 2, 2), 3.0))
    y = nn.groupnorm(x, 2, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_allclose(y.data, 0.0, atol=1e-12)
    r = Tensor(np.random.default_rng(0).standard_normal((4, 2, 2)))
    y = nn.groupnorm(r, 2, Tensor(np.zeros(4)), Tensor(np.full(4, 5.0)))
    np.testing.assert_allclose(y.data, 5.0)
    with pytest.raises(DimensionError):
        nn.groupnorm(Tensor(np.ones((3, 2, 2))), 2, Tensor(np.ones(3)), Tensor(np.zeros(3)))


def test_softmax_uniform():
    y = T.softmax(Tensor(np.full((2, 5), 0.7)))
    np.testing.assert_allclose(y.data, 0.2)


def test_self_attention_zero_value_projection():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((2, 6, 4)))
    w = [Tensor(rng.standard_normal((4, 4))) for _ in range(4)]
    y = nn.self_attention(x, w[0], w[1], Tensor(np.zeros((4, 4))), w[3])
    assert np.all(y.data == 0)


@pytest.mark.parametrize("x,expected", [(0.88, 1.0), (0.12, 0.0), (0.5, 1.0), (0.4999, 0.0)])
def test_round_ste_forward(x, expected):
    assert T.round_ste(Tensor(np.array(x))).item() == expected


def test_round_ste_gradient_is_identity():
    with Tape() as tape:
        a = tape.watch(np.array([0.3, 0.8]))
        w = Tensor(np.array([2.0, -3.0]))
        (g_ste,) = tape.gradient((T.round_ste(a) * w).sum(), [a])
    with Tape() as tape:
        a = tape.watch(np.array([0.3, 0.8]))
        (g_id,) = tape.gradient((a * w).sum(), [a])
    np.testing.assert_array_equal(g_ste, g_id)


def test_backward_requires_scalar():
    with Tape() as tape:
        a = tape.watch(np.ones(3))
        with pytest.raises(ContractError):
            tape.backward(a * 2.0)


def test_backward_deterministic():
    rng = np.random.default_rng(3)
    x, k = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((3, 3, 3, 3))

    def run():
        with Tape() as tape:
            tx, tk = tape.watch(x), tape.watch(k)
            y = nn.silu(T.conv2d(tx, tk))
            return tape.gradient((y * y).sum(), [tx, tk])

    g1, g2 = run(), run()
    for a, b in zip(g1, g2):
        assert a.tobytes() == b.tobytes()


def test_no_tape_means_no_recording():
    a = Tensor(np.ones(2))
    assert (a * 3.0 + a).grad_id is None


def _gen_cases(rng):
    """(name, fn, input arrays) triples for the gradient suite."""
    r = rng.standard_normal
    yield "add", lambda a, b: a + b, [r((3, 4)), r((3, 4))]
    yield "sub_scalar", lambda a, b: a - b, [r((3, 4)), r(())]
    yield "mul", lambda a, b: a * b, [r((3, 4)), r((3, 4))]
    yield "mul_scalar", lambda a, b: b * a, [r((2, 3)), r((1,))]
    yield "div", lambda a, b: a / b, [r((3, 2)), 2.0 + np.abs(r((3, 2)))]
    yield "matmul", T.matmul, [r((3, 4)), r((4, 2))]
    yield "matmul_batched", T.matmul, [r((2, 3, 4)), r((2, 4, 5))]
    yield "matmul_shared", T.matmul, [r((2, 3, 4)), r((4, 5))]
    yield "exp", T.exp, [r((3, 3))]
    yield "tanh", T.tanh, [r((3, 3))]
    yield "sigmoid", T.sigmoid, [r((3, 3))]
    yield "relu", T.relu, [r((4, 4)) + 0.05]
    yield "sqrt", T.sqrt, [1.0 + np.abs(r((3,)))]
    yield "sum_axis", lambda a: T.tsum(a, 1), [r((2, 3, 4))]
    yield "mean", lambda a: T.tmean(a, (0, 2)), [r((2, 3, 4))]
    yield "transpose", lambda a: T.transpose(a, (2, 0, 1)), [r((2, 3, 4))]
    yield "broadcast", lambda a: T.broadcast_to(a, (2, 3, 4)), [r((3, 1))]
    yield "concat", lambda a, b: T.concat([a, b], 1), [r((2, 3)), r((2, 2))]
    yield "take", lambda a: a[1:, :2], [r((3, 4))]
    yield "softmax", T.softmax, [r((3, 5))]
    yield "normalize", lambda a: T.normalize(a, (1, 2)), [r((2, 3, 4))]
    yield "conv3x3", T.conv2d, [r((2, 4, 4)), r((3, 2, 3, 3))]
    yield "conv3x3_batched", T.conv2d, [r((2, 2, 3, 3)), r((2, 2, 3, 3))]
    yield "conv1x1", T.conv2d, [r((2, 3, 3)), r((4, 2, 1, 1))]
    yield "groupnorm", lambda x, g, b: nn.groupnorm(x, 2, g, b), [r((4, 2, 2)), r((4,)), r((4,))]
    yield "layernorm", nn.layernorm, [r((2, 3, 5)), r((5,)), r((5,))]
    yield "silu", nn.silu, [r((3, 4))]
    yield "gelu", nn.gelu, [r((3, 4))]
    yield "self_attention", nn.self_attention, [r((2, 4, 3))] + [r((3, 3)) for _ in range(4)]
    yield "cross_attention", nn.cross_attention, [r((2, 4, 3)), r((2, 2, 3))] + [r((3, 3)) for _ in range(4)]
    yield "mlp", nn.mlp, [r((2, 3)), r((3, 5)), r((5,)), r((5, 3)), r((3,))]
    yield "patchify", lambda x: nn.patchify(x, 2), [r((2, 2, 4, 4))]


CASES = list(_gen_cases(np.random.default_rng(42)))


@pytest.mark.parametrize("name,fn,arrays", CASES, ids=[c[0] for c in CASES])
def test_gradient_matches_finite_differences(name, fn, arrays):
    check_grads(fn, arrays, np.random.default_rng(7))


@settings(max_examples=20, deadline=None)
@given(
    c=st.integers(1, 3),
    h=st.integers(1, 4),
    w=st.integers(1, 4),
    co=st.integers(1, 3),
    seed=st.integers(0, 2**16),
)
def test_conv2d_gradient_random_shapes(c, h, w, co, seed):
    rng = np.random.default_rng(seed)
    check_grads(T.conv2d, [rng.standard_normal((c, h, w)), rng.standard_normal((co, c, 3, 3))], rng)


@settings(max_examples=20, deadline=None)
@given(groups=st.sampled_from([1, 2]), hw=st.integers(1, 3), seed=st.integers(0, 2**16))
def test_groupnorm_gradient_random_shapes(groups, hw, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, hw, hw + 1))
    fn = lambda a, g, b: nn.groupnorm(a, groups, g, b)
    check_grads(fn, [x, rng.standard_normal(4), rng.standard_normal(4)], rng)
