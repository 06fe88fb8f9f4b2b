import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmcce import autodiff as ad
from cmcce.autodiff import ContractError, DimensionError, Linear, Value, grad_check, parameter


def fd_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar f at x (independent of the autodiff path)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b, floor=1e-6):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


# ------------------------------------------------------------ matmul

def test_matmul_identity():
    out = ad.matmul(ad.const(np.eye(2)), ad.const([[3.0], [4.0]]))
    assert out.data.tolist() == [[3.0], [4.0]]


def test_matmul_hand_arithmetic():
    assert ad.matmul(ad.const([[1.0, 2.0]]), ad.const([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(ad.const(np.ones((2, 3))), ad.const(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a0, b = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4, 2))
    a = Value(a0.copy(), requires_grad=True)
    ad.sum_all(ad.matmul(a, ad.const(b))).backward()
    numeric = fd_grad(lambda x: float((x @ b).sum()), a0.copy())
    assert rel_err(a.grad, numeric) <= 1e-6


# -------------------------------------------------------- elementwise

def test_tanh_and_sigmoid_at_zero():
    z = ad.const(np.zeros(3))
    assert np.all(ad.tanh(z).data == 0.0)
    assert np.all(ad.sigmoid(z).data == 0.5)


def test_tanh_derivative_at_zero_is_one():
    x = Value(np.zeros(1), requires_grad=True)
    ad.sum_all(ad.tanh(x)).backward()
    assert x.grad[0] == 1.0
    assert abs(fd_grad(lambda v: float(np.tanh(v).sum()), np.zeros(1))[0] - 1.0) < 1e-9


def test_sigmoid_is_stable_for_large_inputs():
    out = ad.sigmoid(ad.const([-800.0, 800.0]))
    assert np.all(np.isfinite(out.data))
    assert out.data.tolist() == [0.0, 1.0]


@pytest.mark.parametrize("op", [ad.add, ad.sub, ad.mul])
def test_binary_shape_mismatch(op):
    with pytest.raises(DimensionError):
        op(ad.const(np.ones(3)), ad.const(np.ones(4)))


def test_vector_over_rows_broadcast_gradient():
    rng = np.random.default_rng(1)
    m0, v0 = rng.uniform(-1, 1, (3, 2)), rng.uniform(-1, 1, 2)
    v = Value(v0.copy(), requires_grad=True)
    ad.sum_all(ad.square(ad.add(ad.const(m0), v))).backward()
    numeric = fd_grad(lambda x: float(((m0 + x) ** 2).sum()), v0.copy())
    assert rel_err(v.grad, numeric) <= 1e-6


# --------------------------------------------------- property: all ops

UNARY = {
    "tanh": (ad.tanh, np.tanh),
    "sigmoid": (ad.sigmoid, lambda x: 1 / (1 + np.exp(-x))),
    "scale": (lambda v: ad.scale(v, -1.7), lambda x: -1.7 * x),
    "square": (ad.square, np.square),
    "one_minus": (ad.one_minus, lambda x: 1 - x),
    "mean_rows": (ad.mean_rows, lambda x: x.mean(axis=0)),
    "transpose": (ad.transpose, lambda x: x.T),
    "take_rows": (lambda v: ad.take_rows(v, [0, 2, 0]), lambda x: x[[0, 2, 0]]),
    "row": (lambda v: ad.row(v, 1), lambda x: x[1]),
}

BINARY = {
    "add": (ad.add, np.add),
    "sub": (ad.sub, np.subtract),
    "mul": (ad.mul, np.multiply),
}


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_op_gradients(name, seed):
    op, ref = UNARY[name]
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(-1, 1, (3, 4))
    w = rng.uniform(-1, 1, ref(x0).shape)
    x = Value(x0.copy(), requires_grad=True)
    ad.sum_all(ad.mul(op(x), ad.const(w))).backward()
    numeric = fd_grad(lambda v: float((ref(v) * w).sum()), x0.copy())
    assert rel_err(x.grad, numeric) <= 1e-4


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_op_gradients(name, seed):
    op, ref = BINARY[name]
    rng = np.random.default_rng(seed)
    a0, b0 = rng.uniform(-1, 1, (2, 3)), rng.uniform(-1, 1, (2, 3))
    w = rng.uniform(-1, 1, (2, 3))
    a, b = Value(a0.copy(), requires_grad=True), Value(b0.copy(), requires_grad=True)
    ad.sum_all(ad.mul(op(a, b), ad.const(w))).backward()
    assert rel_err(a.grad, fd_grad(lambda v: float((ref(v, b0) * w).sum()), a0.copy())) <= 1e-4
    assert rel_err(b.grad, fd_grad(lambda v: float((ref(a0, v) * w).sum()), b0.copy())) <= 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_abs_gradient_away_from_zero(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(0.1, 1, 6) * rng.choice([-1, 1], 6)
    x = Value(x0.copy(), requires_grad=True)
    ad.sum_all(ad.absolute(x)).backward()
    assert rel_err(x.grad, fd_grad(lambda v: float(np.abs(v).sum()), x0.copy())) <= 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_concat_stack_vstack_slice_gradients(seed):
    rng = np.random.default_rng(seed)
    a0, b0 = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3)
    w = rng.uniform(-1, 1, (4, 6))

    def ref(a, b):
        c = np.concatenate([a, b])
        m = np.vstack([np.stack([c, c * 2]), np.stack([c[::-1], c])])
        return float((m * w).sum() + (c[1:4] ** 2).sum())

    a, b = Value(a0.copy(), requires_grad=True), Value(b0.copy(), requires_grad=True)
    c = ad.concat([a, b])
    m = ad.vstack([ad.stack([c, ad.scale(c, 2.0)]),
                   ad.stack([ad.matmul(ad.const(np.eye(6)[::-1]), c), c])])
    loss = ad.add(ad.sum_all(ad.mul(m, ad.const(w))), ad.sum_all(ad.square(ad.slice_vec(c, 1, 4))))
    loss.backward()
    assert rel_err(a.grad, fd_grad(lambda v: ref(v, b0), a0.copy())) <= 1e-4
    assert rel_err(b.grad, fd_grad(lambda v: ref(a0, v), b0.copy())) <= 1e-4


# ------------------------------------------------------------- softmax

def test_softmax_examples():
    assert ad.softmax(ad.const([0.0, 0.0])).data.tolist() == [0.5, 0.5]
    np.testing.assert_allclose(ad.softmax(ad.const([np.log(2.0), 0.0])).data, [2 / 3, 1 / 3], rtol=0, atol=1e-15)


def test_softmax_is_stable_for_large_scores():
    out = ad.softmax(ad.const([1000.0, 1000.0, -1000.0]))
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data, [0.5, 0.5, 0.0])


def test_softmax_mask_zeroes_entries():
    out = ad.softmax(ad.const([5.0, 1.0, 1.0]), mask=np.array([False, True, True]))
    assert out.data.tolist() == [0.0, 0.5, 0.5]


@pytest.mark.parametrize("seed", range(20))
def test_softmax_jvp_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(-1, 1, 5)
    v = rng.uniform(-1, 1, 5)
    # Jacobian rows by reverse mode, one backward pass per output
    jac = np.zeros((5, 5))
    for i in range(5):
        x = Value(x0.copy(), requires_grad=True)
        ad.sum_all(ad.mul(ad.softmax(x), ad.const(np.eye(5)[i]))).backward()
        jac[i] = x.grad

    def sm(z):
        e = np.exp(z - z.max())
        return e / e.sum()

    h = 1e-5
    numeric = (sm(x0 + h * v) - sm(x0 - h * v)) / (2 * h)
    analytic = jac @ v
    assert np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric) <= 1e-6


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.randoms(use_true_random=False))
def test_softmax_sums_to_one_and_is_permutation_equivariant(xs, rnd):
    x = np.array(xs)
    y = ad.softmax(ad.const(x)).data
    assert np.all(y >= 0)
    assert abs(y.sum() - 1.0) <= 1e-12
    perm = list(range(len(xs)))
    rnd.shuffle(perm)
    np.testing.assert_allclose(ad.softmax(ad.const(x[perm])).data, y[perm], rtol=0, atol=1e-15)


# ------------------------------------------------------------ backward

def test_backward_of_sum_gives_ones():
    p = parameter("p", np.arange(6.0).reshape(2, 3))
    ad.sum_all(p.node).backward()
    assert np.array_equal(p.node.grad, np.ones((2, 3)))


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        ad.tanh(Value(np.ones(3), requires_grad=True)).backward()


def test_backward_accumulates_without_zeroing():
    p = parameter("p", np.ones(3))
    loss = ad.sum_all(ad.square(p.node))
    loss.backward()
    first = p.node.grad.copy()
    loss.backward()
    assert np.array_equal(p.node.grad, 2 * first)


def test_backward_shared_subexpression():
    # y = x*x + x*x uses the same node along two paths
    x = Value(np.array([3.0]), requires_grad=True)
    sq = ad.mul(x, x)
    ad.sum_all(ad.add(sq, sq)).backward()
    assert x.grad[0] == 12.0


def test_backward_fills_intermediate_grads_with_matching_shapes():
    x = Value(np.ones((2, 3)), requires_grad=True)
    mid = ad.tanh(x)
    loss = ad.sum_all(mid)
    loss.backward()
    assert mid.grad.shape == mid.shape
    assert x.grad.shape == x.shape


def test_linear_mse_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    layer = Linear(3, 2, rng)
    layer.bias.node.data[...] = rng.uniform(-1, 1, 2)
    x, y = rng.uniform(-1, 1, (4, 3)), rng.uniform(-1, 1, (4, 2))

    def loss():
        return ad.mean_all(ad.square(ad.sub(layer(ad.const(x)), ad.const(y))))

    loss().backward()
    w0 = layer.weight.data.copy()

    def ref(w):
        return float((((x @ w.T + layer.bias.data) - y) ** 2).mean())

    assert rel_err(layer.weight.node.grad, fd_grad(ref, w0)) < 1e-5


def test_zero_grad_then_backward_is_deterministic():
    rng = np.random.default_rng(4)
    layer = Linear(3, 3, rng)
    x = ad.const(rng.uniform(-1, 1, 3))
    grads = []
    for _ in range(2):
        layer.zero_grad()
        ad.sum_all(ad.tanh(layer(x))).backward()
        grads.append(layer.weight.node.grad.copy())
    assert np.array_equal(grads[0], grads[1])


def test_forward_backward_bit_identical_across_runs():
    def run():
        rng = np.random.default_rng(11)
        layer = Linear(4, 4, rng)
        out = ad.sum_all(ad.tanh(layer(ad.const(rng.uniform(-1, 1, (3, 4))))))
        out.backward()
        return out.data.tobytes(), layer.weight.node.grad.tobytes()

    assert run() == run()


# ---------------------------------------------------------- grad_check

def test_grad_check_linear_layer_passes():
    rng = np.random.default_rng(5)
    layer = Linear(3, 2, rng)
    x = ad.const(rng.uniform(-1, 1, (4, 3)))
    report = grad_check(lambda: ad.sum_all(ad.tanh(layer(x))), layer.named_parameters(), 1e-4)
    assert report.passed
    assert set(report.errors) == {"weight", "bias"}


def test_grad_check_detects_a_wrong_gradient():
    p = parameter("p", np.array([0.3, -0.2]))

    def broken():
        out = ad.square(p.node)
        out._backward = lambda g: ((p.node, g),)  # wrong: should be 2x * g
        return ad.sum_all(out)

    assert not grad_check(broken, [p], 1e-3).passed


def test_grad_check_needs_parameters():
    with pytest.raises(ContractError):
        grad_check(lambda: ad.const(0.0), [], 1e-3)


def test_module_parameter_names_are_unique_and_ordered():
    rng = np.random.default_rng(0)

    class Two(ad.Module):
        def __init__(self):
            self.first = Linear(2, 2, rng)
            self.second = Linear(2, 2, rng)

    names = [p.name for p in Two().named_parameters()]
    assert names == ["first.weight", "first.bias", "second.weight", "second.bias"]


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("shapes", [((3, 4), (4, 2)), ((3, 4), (4,)), ((4,), (4, 2)), ((4,), (4,))])
def test_matmul_gradients_all_ranks(shapes, seed):
    rng = np.random.default_rng(seed)
    a0, b0 = rng.uniform(-1, 1, shapes[0]), rng.uniform(-1, 1, shapes[1])
    w = rng.uniform(-1, 1, np.shape(a0 @ b0))
    a, b = Value(a0.copy(), requires_grad=True), Value(b0.copy(), requires_grad=True)
    ad.sum_all(ad.mul(ad.matmul(a, b), ad.const(w))).backward()
    assert rel_err(a.grad, fd_grad(lambda v: float(((v @ b0) * w).sum()), a0.copy())) <= 1e-4
    assert rel_err(b.grad, fd_grad(lambda v: float(((a0 @ v) * w).sum()), b0.copy())) <= 1e-4
