import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ctxvlp import autodiff as ad
from ctxvlp.autodiff import DiffTensor, Tape


def leaf(x):
    return DiffTensor(np.asarray(x, dtype=float), trainable=True)


def numeric_grad(f, x, h=1e-6):
    """Plain central differences on a numpy function, independent of the tape."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def tape_grad(build, *values):
    ts = [leaf(v) for v in values]
    with Tape() as tape:
        out = build(*ts)
        grads = tape.backward(out)
    return out, [grads.get(t, np.zeros_like(t.values)) for t in ts]


# ---------------------------------------------------------------- values and closed-form grads

def test_square_sum_gradient_is_two_x():
    _, (g,) = tape_grad(lambda w: ad.sum_(ad.mul(w, w)), [1.0, 2.0, -3.0])
    np.testing.assert_array_equal(g, [2.0, 4.0, -6.0])


def test_shared_input_gradients_accumulate():
    # f = x*x + 3x -> 2x + 3
    _, (g,) = tape_grad(lambda x: ad.sum_(ad.add(ad.mul(x, x), ad.scale(x, 3.0))), [0.5, -1.0])
    np.testing.assert_allclose(g, [4.0, 1.0], rtol=0, atol=1e-15)


def test_operator_sugar_matches_functions():
    a, b = np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[0.5, -1.0], [2.0, 0.25]])
    ta, tb = DiffTensor(a), DiffTensor(b)
    np.testing.assert_array_equal((ta + tb).values, a + b)
    np.testing.assert_array_equal((ta - tb).values, a - b)
    np.testing.assert_array_equal((ta * tb).values, a * b)
    np.testing.assert_array_equal((ta / tb).values, a / b)
    np.testing.assert_array_equal((ta @ tb).values, a @ b)
    np.testing.assert_array_equal((-ta).values, -a)
    np.testing.assert_array_equal(ta.T.values, a.T)
    np.testing.assert_array_equal(ta[1].values, a[1])
    np.testing.assert_array_equal((2.0 - ta).values, 2.0 - a)


def test_softmax_known_values():
    out = ad.softmax(DiffTensor([0.0, math.log(3.0)])).values
    np.testing.assert_allclose(out, [0.25, 0.75], rtol=0, atol=1e-15)


def test_log_softmax_equals_log_of_softmax():
    x = np.random.default_rng(0).standard_normal((3, 5)) * 4
    np.testing.assert_allclose(ad.log_softmax(DiffTensor(x)).values,
                               np.log(ad.softmax(DiffTensor(x)).values), atol=1e-12)


def test_softmax_survives_large_logits():
    out = ad.softmax(DiffTensor([1000.0, 1000.0, -1000.0])).values
    np.testing.assert_allclose(out, [0.5, 0.5, 0.0], atol=1e-15)


def test_gelu_reference_points():
    out = ad.gelu(DiffTensor([0.0, 1.0, -1.0])).values
    # tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    ref = [0.0, 0.5 * (1 + math.tanh(math.sqrt(2 / math.pi) * 1.044715)),
           -0.5 * (1 - math.tanh(math.sqrt(2 / math.pi) * 1.044715))]
    np.testing.assert_allclose(out, ref, atol=1e-15)


def test_sigmoid_is_stable_and_symmetric():
    x = np.array([-800.0, -3.0, 0.0, 3.0, 800.0])
    out = ad.sigmoid(DiffTensor(x)).values
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out + out[::-1], 1.0, atol=1e-15)
    assert out[2] == 0.5


def test_layer_norm_output_statistics():
    x = np.random.default_rng(1).standard_normal((4, 7)) * 3 + 2
    out = ad.layer_norm(DiffTensor(x), np.ones(7), np.zeros(7)).values
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)   # eps 1e-5 in the variance


def test_l2_normalize_unit_rows_and_zero_floor():
    x = np.array([[3.0, 4.0], [0.0, 0.0]])
    out = ad.l2_normalize(DiffTensor(x)).values
    np.testing.assert_allclose(out[0], [0.6, 0.8], atol=1e-15)
    np.testing.assert_array_equal(out[1], [0.0, 0.0])


def test_take_repeats_rows_and_scatters_back():
    _, (g,) = tape_grad(lambda x: ad.sum_(ad.take(x, [0, 0, 2], axis=0)), np.ones((3, 2)))
    np.testing.assert_array_equal(g, [[2, 2], [0, 0], [1, 1]])


def test_split_then_concat_is_identity():
    x = np.arange(12.0).reshape(3, 4)
    parts = ad.split(DiffTensor(x), [1, 3], axis=1)
    np.testing.assert_array_equal(ad.concat(parts, axis=1).values, x)


# ---------------------------------------------------------------- gradients vs an independent oracle

RNG = np.random.default_rng(42)

UNARY = {
    "exp": (ad.exp, np.exp),
    "log": (ad.log, np.log),
    "sigmoid": (ad.sigmoid, lambda x: 1 / (1 + np.exp(-x))),
    "gelu": (ad.gelu, lambda x: 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))),
    "softmax": (ad.softmax, lambda x: np.exp(x) / np.exp(x).sum(-1, keepdims=True)),
    "log_softmax": (ad.log_softmax, lambda x: x - np.log(np.exp(x).sum(-1, keepdims=True))),
    "l2_normalize": (ad.l2_normalize, lambda x: x / np.linalg.norm(x, axis=-1, keepdims=True)),
    "transpose": (ad.transpose, lambda x: np.swapaxes(x, -1, -2)),
    "reshape": (lambda t: ad.reshape(t, (-1,)), lambda x: x.reshape(-1)),
    "mean": (lambda t: ad.mean(t, axis=0), lambda x: x.mean(axis=0)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients_match_central_differences(name):
    op, ref = UNARY[name]
    x = RNG.uniform(0.2, 1.5, size=(3, 4))
    w = RNG.standard_normal(ref(x).shape)   # random projection gives a scalar
    _, (g,) = tape_grad(lambda t: ad.sum_(ad.mul(op(t), w)), x)
    expected = numeric_grad(lambda v: float((ref(v) * w).sum()), x)
    np.testing.assert_allclose(g, expected, rtol=1e-6, atol=1e-8)


BINARY = {
    "add_broadcast": (ad.add, np.add, (3, 4), (4,)),
    "sub_broadcast": (ad.sub, np.subtract, (3, 4), (3, 1)),
    "mul": (ad.mul, np.multiply, (3, 4), (3, 4)),
    "div": (ad.div, np.divide, (3, 4), (1, 4)),
    "matmul_shared": (ad.matmul, np.matmul, (2, 3, 4), (4, 5)),
    "matmul_batched": (ad.matmul, np.matmul, (2, 3, 4), (2, 4, 5)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_gradients_match_central_differences(name):
    op, ref, sa, sb = BINARY[name]
    a, b = RNG.uniform(0.5, 1.5, sa), RNG.uniform(0.5, 1.5, sb)
    w = RNG.standard_normal(ref(a, b).shape)
    _, (ga, gb) = tape_grad(lambda x, y: ad.sum_(ad.mul(op(x, y), w)), a, b)
    np.testing.assert_allclose(ga, numeric_grad(lambda v: float((ref(v, b) * w).sum()), a), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(gb, numeric_grad(lambda v: float((ref(a, v) * w).sum()), b), rtol=1e-6, atol=1e-8)


def test_layer_norm_gradients_all_inputs():
    x, g0, b0 = RNG.standard_normal((2, 3, 5)), RNG.uniform(0.5, 1.5, 5), RNG.standard_normal(5)
    w = RNG.standard_normal((2, 3, 5))

    def ref(x, g, b):
        xc = x - x.mean(-1, keepdims=True)
        return xc / np.sqrt((xc ** 2).mean(-1, keepdims=True) + 1e-5) * g + b

    _, (gx, gg, gb) = tape_grad(lambda x, g, b: ad.sum_(ad.mul(ad.layer_norm(x, g, b), w)), x, g0, b0)
    np.testing.assert_allclose(gx, numeric_grad(lambda v: (ref(v, g0, b0) * w).sum(), x), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(gg, numeric_grad(lambda v: (ref(x, v, b0) * w).sum(), g0), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(gb, numeric_grad(lambda v: (ref(x, g0, v) * w).sum(), b0), rtol=1e-6, atol=1e-8)


def test_index_with_repeated_advanced_indices_accumulates():
    x = RNG.standard_normal((4, 3))
    rows, cols = np.array([0, 0, 3]), np.array([1, 1, 2])
    _, (g,) = tape_grad(lambda t: ad.sum_(ad.index(t, (rows, cols))), x)
    expected = np.zeros((4, 3))
    expected[0, 1], expected[3, 2] = 2, 1
    np.testing.assert_array_equal(g, expected)


def test_clip_passes_gradient_only_inside():
    _, (g,) = tape_grad(lambda t: ad.sum_(ad.clip(t, 0.0, 1.0)), [-0.5, 0.5, 1.5])
    np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])


def test_grad_check_on_composite_expression():
    a, b = leaf(RNG.standard_normal((3, 4))), leaf(RNG.standard_normal((4, 2)))
    w = RNG.standard_normal((3, 2))
    fn = lambda: ad.sum_(ad.mul(ad.log_softmax(ad.gelu(ad.matmul(a, b))), w))
    assert ad.grad_check(fn, [a, b]) < 1e-5


def test_fault_injection_is_caught_by_grad_check():
    a = leaf(RNG.standard_normal((3, 3)))
    fn = lambda: ad.sum_(ad.exp(ad.scale(a, 0.5)))
    ad._FAULTS["exp"] = 1.5
    try:
        err = ad.grad_check(fn, [a])
    finally:
        ad._FAULTS.clear()
    assert err > 0.1
    assert ad.grad_check(fn, [a]) < 1e-6


# ---------------------------------------------------------------- tape contract

def test_nothing_is_recorded_outside_a_tape():
    w = leaf([1.0, 2.0])
    out = ad.mul(w, w)
    assert out.node_id is None and out._tape is None


def test_constants_are_not_recorded():
    with Tape() as tape:
        ad.exp(DiffTensor([1.0]))
    assert len(tape) == 0


def test_no_tape_suspends_recording():
    w = leaf([1.0])
    with Tape() as tape:
        with ad.no_tape():
            ad.exp(w)
        assert len(tape) == 0
        ad.exp(w)
    assert len(tape) == 2   # leaf registration and the exp


def test_backward_requires_scalar_loss():
    w = leaf([1.0, 2.0])
    with Tape() as tape:
        out = ad.mul(w, w)
        with pytest.raises(ad.ContractError):
            tape.backward(out)


def test_backward_rejects_foreign_loss():
    w = leaf([1.0])
    with Tape():
        out = ad.sum_(ad.exp(w))
    with Tape() as other, pytest.raises(ad.ContractError):
        other.backward(out)


def test_unreached_leaf_gets_no_gradient():
    w, unused = leaf([1.0]), leaf([2.0])
    with Tape() as tape:
        ad.exp(unused)
        grads = tape.backward(ad.sum_(ad.exp(w)))
    assert unused not in grads and w in grads


def test_errors_on_bad_shapes_and_domains():
    with pytest.raises(ad.DimensionError):
        ad.matmul(DiffTensor(np.ones((2, 3))), DiffTensor(np.ones((2, 3))))
    with pytest.raises(ad.DimensionError):
        ad.add(DiffTensor(np.ones((2, 3))), DiffTensor(np.ones((4,))))
    with pytest.raises(ad.DimensionError):
        ad.reshape(DiffTensor(np.ones(6)), (4, 2))
    with pytest.raises(ad.NumericError):
        ad.log(DiffTensor([1.0, 0.0]))
    with pytest.raises(ad.NumericError):
        ad.softmax(DiffTensor([1.0, np.nan]))
    with pytest.raises(ad.ContractError):
        ad.grad_check(lambda: DiffTensor(1.0), [], step=0)


# ---------------------------------------------------------------- properties

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=finite), st.floats(-50, 50))
def test_softmax_rows_sum_to_one_and_ignore_shifts(x, c):
    p = ad.softmax(DiffTensor(x)).values
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(ad.softmax(DiffTensor(x + c)).values, p, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 4), elements=finite), arrays(np.float64, (4,), elements=finite))
def test_broadcast_gradients_have_operand_shapes(a, b):
    _, (ga, gb) = tape_grad(lambda x, y: ad.sum_(ad.add(x, y)), a, b)
    assert ga.shape == a.shape and gb.shape == b.shape
    np.testing.assert_array_equal(gb, np.full(4, 2.0))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)))
def test_softmax_gradient_of_total_mass_is_zero(x):
    _, (g,) = tape_grad(lambda t: ad.sum_(ad.softmax(t)), x)
    np.testing.assert_allclose(g, 0.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-5, 5)).filter(lambda v: np.all(np.linalg.norm(v, axis=1) > 1e-3)))
def test_l2_normalize_gradient_is_orthogonal_to_input(x):
    w = np.arange(12.0).reshape(4, 3)
    _, (g,) = tape_grad(lambda t: ad.sum_(ad.mul(ad.l2_normalize(t), w)), x)
    np.testing.assert_allclose((g * x).sum(axis=1), 0.0, atol=1e-9)
