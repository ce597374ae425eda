"""Finite-difference checks for every reverse-mode op."""
from __future__ import annotations

import numpy as np
import pytest

from force_lab import autodiff as ad


def finite_difference(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar fn over every coordinate."""
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + h
        up = fn(x)
        xf[i] = orig - h
        down = fn(x)
        xf[i] = orig
        flat[i] = (up - down) / (2.0 * h)
    return grad


def check_gradient(build, x0: np.ndarray, rtol: float = 1e-6, atol: float = 1e-8):
    """`build` maps a Tensor leaf to a scalar Tensor; compare vs FD."""
    x = ad.leaf(x0.copy())
    out = build(x)
    out.backward()
    analytic = x.grad

    def scalar(v):
        return float(build(ad.leaf(v)).value)

    numeric = finite_difference(scalar, x0.copy())
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


RNG = np.random.default_rng(42)


def test_add_mul_broadcast():
    x0 = RNG.normal(size=(3, 4))
    c = RNG.normal(size=(4,))
    check_gradient(lambda x: ad.total(ad.mul(ad.add(x, c), x)), x0)


def test_sub_div():
    x0 = RNG.normal(size=(3, 4)) + 3.0
    c = RNG.normal(size=(3, 4)) + 5.0
    check_gradient(lambda x: ad.total(ad.div(ad.sub(x, c), ad.add(x, 1.0))), x0)


def test_rsub_rdiv_operators():
    x0 = RNG.normal(size=(5,)) + 4.0
    check_gradient(lambda x: ad.total(2.0 - x) + ad.total(3.0 / x), x0)


def test_matmul_both_sides():
    a0 = RNG.normal(size=(3, 4))
    b = RNG.normal(size=(4, 2))
    check_gradient(lambda a: ad.total(ad.matmul(a, b)), a0)
    c = RNG.normal(size=(2, 3))
    check_gradient(lambda a: ad.total(ad.matmul(c, a)), a0)


def test_matmul_tensor_tensor():
    x0 = RNG.normal(size=(3, 3))
    check_gradient(lambda x: ad.total(ad.matmul(x, ad.transpose2d(x))), x0)


def test_relu():
    x0 = RNG.normal(size=(4, 4)) * 2.0
    # keep coordinates away from the kink
    x0[np.abs(x0) < 1e-3] = 0.5
    check_gradient(lambda x: ad.total(ad.relu(x)), x0)


def test_exp_log():
    x0 = np.abs(RNG.normal(size=(6,))) + 0.5
    check_gradient(lambda x: ad.total(ad.log(ad.exp(x) + 1.0)), x0)


def test_softmax():
    x0 = RNG.normal(size=(3, 5)) * 3.0
    w = RNG.normal(size=(3, 5))
    check_gradient(lambda x: ad.total(ad.mul(ad.softmax(x), w)), x0)


def test_log_softmax():
    x0 = RNG.normal(size=(3, 5)) * 3.0
    w = RNG.normal(size=(3, 5))
    check_gradient(lambda x: ad.total(ad.mul(ad.log_softmax(x), w)), x0)


def test_log_softmax_normalizes():
    x0 = RNG.normal(size=(2, 7)) * 10.0
    out = ad.log_softmax(ad.leaf(x0))
    np.testing.assert_allclose(np.exp(out.value).sum(axis=-1), 1.0, atol=1e-12)


def test_layer_norm():
    x0 = RNG.normal(size=(3, 8)) * 2.0
    gain = RNG.normal(size=(8,)) + 1.0
    bias = RNG.normal(size=(8,))
    check_gradient(lambda x: ad.total(ad.mul(ad.layer_norm(x, gain, bias), gain)), x0, rtol=1e-5)


def test_maximum_const():
    x0 = np.array([0.5, 2.0, -1.0, 3.0])
    check_gradient(lambda x: ad.total(ad.mul(ad.maximum_const(x, 1.0), x)), x0)


def test_getitem_slice():
    x0 = RNG.normal(size=(5, 4))
    check_gradient(lambda x: ad.total(x[1:3, ::2]), x0)


def test_gather_pairs():
    x0 = RNG.normal(size=(4, 6))
    rows = np.array([0, 2, 3])
    cols = np.array([5, 5, 1])
    check_gradient(lambda x: ad.total(ad.gather_pairs(x, rows, cols)), x0)


def test_gather_pairs_repeated_entry():
    x0 = RNG.normal(size=(3, 3))
    rows = np.array([1, 1])
    cols = np.array([2, 2])
    check_gradient(lambda x: ad.total(ad.gather_pairs(x, rows, cols)), x0)


def test_concat_rows_mixed_constant():
    x0 = RNG.normal(size=(2, 3))
    c = RNG.normal(size=(4, 3))
    w = RNG.normal(size=(6, 3))
    check_gradient(lambda x: ad.total(ad.mul(ad.concat_rows([x, c]), w)), x0)


def test_reshape_transpose():
    x0 = RNG.normal(size=(2, 3, 4))
    w = RNG.normal(size=(4, 6))

    def build(x):
        y = ad.transpose(x, (2, 0, 1))
        return ad.total(ad.mul(ad.reshape(y, (4, 6)), w))

    check_gradient(build, x0)


def test_diamond_reuse_accumulates():
    # the same node used twice must receive both adjoint contributions
    x0 = RNG.normal(size=(3,))
    check_gradient(lambda x: ad.total(ad.mul(x, x) + ad.mul(x, 2.0)), x0)


def test_backward_requires_scalar():
    x = ad.leaf(np.ones((2, 2)))
    with pytest.raises(ValueError):
        ad.add(x, 1.0).backward()


def test_composite_expression():
    x0 = np.abs(RNG.normal(size=(4, 4))) + 0.5
    a = RNG.normal(size=(4, 4))

    def build(x):
        h = ad.relu(ad.matmul(x, a))
        s = ad.softmax(ad.add(h, x))
        num = ad.total(ad.mul(s, x))
        den = ad.maximum_const(ad.total(ad.mul(x, x)), 1e-3)
        return ad.div(num, den)

    check_gradient(build, x0, rtol=1e-5)
