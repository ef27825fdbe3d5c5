import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adept_lab import autograd as ag
from adept_lab.autograd import Tensor
from adept_lab.errors import ContractError, DimensionError


def uniform(rng, *shape, requires_grad=True):
    return Tensor(rng.uniform(-1, 1, size=shape), requires_grad=requires_grad)


def central_difference(f, x, eps=1e-5):
    """Independent numeric gradient of a numpy -> float function."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        g[idx] = (f(xp) - f(xm)) / (2 * eps)
    return g


def test_matmul_identity_and_zero():
    out = ag.matmul(Tensor(np.eye(2)), Tensor([[3, 4], [5, 6]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])
    out = ag.matmul(Tensor([[1, 2]]), Tensor([[0], [0]]))
    np.testing.assert_array_equal(out.data, [[0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a, b = uniform(rng, 3, 4), uniform(rng, 4, 2)
    ag.backward(ag.sum(ag.matmul(a, b)))
    num_a = central_difference(lambda x: (x @ b.data).sum(), a.data)
    num_b = central_difference(lambda x: (a.data @ x).sum(), b.data)
    rel = lambda g, n: np.max(np.abs(g - n) / np.maximum(np.maximum(abs(g), abs(n)), 1e-12))
    assert rel(a.grad, num_a) < 1e-6
    assert rel(b.grad, num_b) < 1e-6


def test_exact_rows_matmul_is_row_count_independent():
    rng = np.random.default_rng(1)
    w = Tensor(rng.standard_normal((16, 7)))
    e = rng.standard_normal((9, 16))
    f = rng.standard_normal((3, 16))
    alone = ag.matmul(Tensor(e), w, exact_rows=True).data
    stacked = ag.matmul(Tensor(np.vstack([f, e])), w, exact_rows=True).data[3:]
    np.testing.assert_array_equal(alone, stacked)


def test_row_softmax_examples():
    np.testing.assert_array_equal(ag.row_softmax(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    out = ag.row_softmax(Tensor([[1000.0, 1000.0, 1000.0]])).data
    np.testing.assert_allclose(out, [[1 / 3] * 3], rtol=0, atol=1e-15)


def test_row_softmax_against_high_precision_oracle():
    mpmath.mp.dps = 50
    exps = [mpmath.exp(v) for v in (1, 2, 3)]
    total = mpmath.fsum(exps)
    expected = [float(e / total) for e in exps]
    out = ag.row_softmax(Tensor([[1.0, 2.0, 3.0]])).data[0]
    np.testing.assert_allclose(out, expected, rtol=1e-15, atol=0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)),
              elements=st.floats(-15, 15)))
def test_row_softmax_rows_sum_to_one(x):
    y = ag.row_softmax(Tensor(x)).data
    assert np.all(np.abs(y.sum(axis=-1) - 1.0) <= 1e-12)
    assert np.all((y > 0) & (y < 1) | (y.shape[-1] == 1))


def test_relu_concat_cross_entropy_examples():
    np.testing.assert_array_equal(ag.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    loss = ag.cross_entropy(Tensor(np.zeros((1, 4))), [2])
    assert loss.item() == pytest.approx(math.log(4), abs=1e-15)
    assert round(loss.item(), 6) == 1.386294
    a = Tensor(np.arange(6.0).reshape(2, 3))
    b = Tensor(np.arange(15.0).reshape(5, 3) + 100)
    out = ag.concat_rows(a, b)
    assert out.shape == (7, 3)
    np.testing.assert_array_equal(out.data, np.vstack([a.data, b.data]))


def test_shape_and_label_errors():
    with pytest.raises(DimensionError):
        ag.concat_rows(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))
    with pytest.raises(IndexError):
        ag.cross_entropy(Tensor(np.zeros((1, 3))), [3])
    with pytest.raises(IndexError):
        ag.row_select(Tensor(np.ones((4, 2))), [4])


def test_backward_of_sum_is_all_ones():
    x = Tensor(np.random.default_rng(2).standard_normal((2, 3, 4)), requires_grad=True)
    ag.backward(ag.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_cross_entropy_gradient_at_uniform_logits():
    c, label = 5, 3
    logits = Tensor(np.zeros((1, c)), requires_grad=True)
    ag.backward(ag.cross_entropy(logits, [label]))
    expected = np.full((1, c), 1 / c)
    expected[0, label] -= 1
    np.testing.assert_allclose(logits.grad, expected, atol=1e-16)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        ag.backward(ag.scale(x, 2.0))


def test_frozen_inputs_get_no_grad():
    rng = np.random.default_rng(3)
    w = uniform(rng, 3, 3, requires_grad=False)
    x = uniform(rng, 2, 3)
    ag.backward(ag.sum(ag.matmul(x, w)))
    assert w.grad is None and x.grad is not None


def test_row_select_routes_gradient_to_selected_rows_only():
    table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    out = ag.row_select(table, [2, 0, 2])
    ag.backward(ag.sum(out))
    np.testing.assert_array_equal(table.grad, [[1, 1, 1], [0, 0, 0], [2, 2, 2], [0, 0, 0]])


def test_graph_nodes_are_in_creation_order_and_visited_once():
    rng = np.random.default_rng(4)
    x = uniform(rng, 2, 2)
    y = ag.add(x, x)
    z = ag.matmul(y, y)
    nodes = ag.graph_nodes(ag.sum(z))
    seqs = [n.seq for n in nodes]
    assert seqs == sorted(seqs) and len(set(seqs)) == len(seqs) == 3
    ag.backward(ag.sum(z))
    # d/dx sum((2x)(2x)) by finite differences
    num = central_difference(lambda v: ((2 * v) @ (2 * v)).sum(), x.data)
    np.testing.assert_allclose(x.grad, num, rtol=1e-7, atol=1e-9)


def test_grad_check_linear_function_is_exact():
    rng = np.random.default_rng(5)
    x = uniform(rng, 3, 4)
    w = Tensor(rng.uniform(-1, 1, (4, 2)))
    assert ag.grad_check(lambda: ag.sum(ag.matmul(x, w)), [x]) < 1e-10


def test_grad_check_softmax_cross_entropy_chain():
    rng = np.random.default_rng(6)
    x = uniform(rng, 4, 5)
    w = uniform(rng, 5, 3)
    f = lambda: ag.cross_entropy(ag.matmul(ag.row_softmax(x), w), [0, 2, 1, 1])
    assert ag.grad_check(f, [x, w], eps=1e-5) < 1e-6


def test_grad_check_relu_away_from_kink():
    rng = np.random.default_rng(7)
    eps = 1e-5
    raw = rng.uniform(-1, 1, (4, 4))
    raw = np.where(np.abs(raw) < 10 * eps, 20 * eps, raw)
    x = Tensor(raw, requires_grad=True)
    w = Tensor(rng.uniform(-1, 1, (4, 4)))
    f = lambda: ag.sum(ag.matmul(ag.relu(x), w))
    assert ag.grad_check(f, [x], eps=eps) < 1e-6


def _op_cases():
    rng = np.random.default_rng(8)
    u = lambda *s: uniform(rng, *s)
    w3 = Tensor(rng.uniform(-1, 1, (3,)))

    def weighted(t):
        coeff = Tensor(np.random.default_rng(99).uniform(-1, 1, t.shape))
        return ag.sum(ag.mul(t, coeff))

    a, b = u(3, 4), u(4, 2)
    c, d = u(3, 4), u(4)
    e = u(2, 3, 4)
    f, g = u(2, 3), u(3, 3)
    h = u(3, 3)
    gain, bias = u(3), u(3)
    tab = u(5, 3)
    lg = u(4, 3)
    xs = u(2, 2, 3)
    return {
        "matmul": (lambda: weighted(ag.matmul(a, b)), [a, b]),
        "matmul_batched": (lambda: weighted(ag.matmul(e, b)), [e, b]),
        "matmul_exact_rows": (lambda: weighted(ag.matmul(c, b, exact_rows=True)), [c, b]),
        "add_broadcast": (lambda: weighted(ag.add(c, d)), [c, d]),
        "sub": (lambda: weighted(ag.sub(c, d)), [c, d]),
        "mul": (lambda: weighted(ag.mul(c, d)), [c, d]),
        "scale": (lambda: weighted(ag.scale(c, -2.5)), [c]),
        "transpose": (lambda: weighted(ag.transpose(e)), [e]),
        "reshape": (lambda: weighted(ag.reshape(e, (6, 4))), [e]),
        "broadcast_to": (lambda: weighted(ag.broadcast_to(d, (3, 4))), [d]),
        "concat_rows": (lambda: weighted(ag.concat_rows(f, g)), [f, g]),
        "slice_rows": (lambda: weighted(ag.slice_rows(g, 1, 3)), [g]),
        "row_select": (lambda: weighted(ag.row_select(tab, [[1, 1], [4, 0]])), [tab]),
        "row_softmax": (lambda: weighted(ag.row_softmax(h)), [h]),
        "layer_norm": (lambda: weighted(ag.layer_norm(xs, gain, bias)), [xs, gain, bias]),
        "cross_entropy": (lambda: ag.cross_entropy(lg, [0, 2, 1, 2]), [lg]),
        "mul_vector": (lambda: weighted(ag.mul(xs, w3)), [xs]),
    }


@pytest.mark.parametrize("name", sorted(_op_cases()))
def test_every_op_passes_grad_check(name):
    f, params = _op_cases()[name]
    assert ag.grad_check(f, params, eps=1e-5) < 1e-6


def test_backward_is_deterministic():
    def run():
        rng = np.random.default_rng(11)
        x, w = uniform(rng, 5, 4), uniform(rng, 4, 3)
        ag.backward(ag.cross_entropy(ag.matmul(ag.relu(x), w), [0, 1, 2, 0, 1]))
        return x.grad.copy(), w.grad.copy()

    (x1, w1), (x2, w2) = run(), run()
    assert x1.tobytes() == x2.tobytes() and w1.tobytes() == w2.tobytes()
