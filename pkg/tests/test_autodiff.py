import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from hypothesis.extra import numpy as hnp

from rvt import autodiff as ad
from rvt.autodiff import Tensor, ShapeError

from _util import OP_CASES, TOL, check_op, composite_check

SEEDS = range(20)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradient_matches_finite_differences(name, seed):
    gen = np.random.default_rng(seed)
    op, arrays = OP_CASES[name](gen)
    assert check_op(op, arrays, gen) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_composite_encoder_head_gradient(seed):
    assert composite_check(seed) < TOL


def test_every_exported_op_has_a_gradient_case():
    skip = {"Tensor", "ShapeError", "tensor", "zeros", "backward", "no_grad",
            "set_check_finite", "topological_order", "scaled_dot_product_attention"}
    ops = set(ad.__all__) - skip
    assert ops <= set(OP_CASES)
    assert {"attention", "getitem"} <= set(OP_CASES)


def test_sigmoid_at_zero():
    x = Tensor(np.zeros(1), requires_grad=True)
    ad.backward(ad.sigmoid(x)[0])
    assert x.grad[0] == 0.25


def test_gradient_accumulates_over_shared_use():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x * x + x
    ad.backward(y[0])
    assert x.grad[0] == 7.0


def test_backward_requires_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(x * 2.0)


def test_backward_requires_graph():
    with pytest.raises(RuntimeError):
        ad.backward(Tensor(np.ones(1)))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad


def test_shape_errors_name_op_and_shapes():
    with pytest.raises(ShapeError, match=r"add.*\(2, 3\).*\(4,\)"):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))
    with pytest.raises(ShapeError, match="matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        ad.avg_pool2d(Tensor(np.ones((1, 1, 5, 5))), 2)


def test_non_finite_detection_can_be_switched_off():
    prev = ad.set_check_finite(True)
    try:
        with pytest.raises(FloatingPointError, match="log"):
            ad.log(Tensor(np.array([-1.0])))
        ad.set_check_finite(False)
        with np.errstate(invalid="ignore"):
            assert np.isnan(ad.log(Tensor(np.array([-1.0]))).data[0])
    finally:
        ad.set_check_finite(prev)


finite = st.floats(-30, 30, allow_nan=False, allow_infinity=False)


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6), elements=finite))
def test_softmax_rows_sum_to_one(x):
    s = ad.softmax(Tensor(x)).data
    assert np.all(np.abs(s.sum(axis=-1) - 1.0) <= 1e-12)
    assert np.all(s >= 0)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 9)),
                  elements=st.floats(-10, 10)),
       st.floats(0.5, 5.0))
def test_layer_norm_moments(x, spread):
    x = x + np.arange(x.shape[1]) * spread
    assume(np.all(x.std(axis=1) > 1e-3))
    y = ad.layer_norm(Tensor(x)).data
    assert np.all(np.abs(y.mean(axis=1)) < 1e-10)
    assert np.all(np.abs(y.var(axis=1) - 1.0) < 1e-8)


def test_layer_norm_over_three_axes():
    gen = np.random.default_rng(0)
    y = ad.layer_norm(Tensor(gen.normal(size=(2, 3, 4, 5))), 3).data.reshape(2, -1)
    assert np.all(np.abs(y.mean(axis=1)) < 1e-10)
    assert np.all(np.abs(y.var(axis=1) - 1.0) < 1e-8)


def test_forward_is_deterministic():
    gen = np.random.default_rng(3)
    q, k, v = (gen.normal(size=(2, 4, 3)) for _ in range(3))
    a = ad.scaled_dot_product_attention(Tensor(q), Tensor(k), Tensor(v)).data
    b = ad.scaled_dot_product_attention(Tensor(q), Tensor(k), Tensor(v)).data
    assert a.tobytes() == b.tobytes()


def test_conv2d_matches_direct_loop():
    gen = np.random.default_rng(1)
    x = gen.normal(size=(2, 3, 5, 6))
    w = gen.normal(size=(4, 3, 3, 3))
    b = gen.normal(size=4)
    got = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 5, 6))
    for n in range(2):
        for o in range(4):
            for i in range(5):
                for j in range(6):
                    ref[n, o, i, j] = (xp[n, :, i:i + 3, j:j + 3] * w[o]).sum() + b[o]
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_attention_matches_closed_form():
    gen = np.random.default_rng(2)
    q, k, v = (gen.normal(size=(3, 4)) for _ in range(3))
    s = q @ k.T / 2.0
    e = np.exp(s - s.max(axis=1, keepdims=True))
    ref = (e / e.sum(axis=1, keepdims=True)) @ v
    got = ad.scaled_dot_product_attention(Tensor(q), Tensor(k), Tensor(v)).data
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_topological_order_puts_parents_first():
    a = Tensor(np.ones(2), requires_grad=True)
    b = a * 2.0
    c = b + a
    d = c.sum()
    order = ad.topological_order(d)
    pos = {id(t): i for i, t in enumerate(order)}
    assert pos[id(a)] < pos[id(b)] < pos[id(c)] < pos[id(d)]
