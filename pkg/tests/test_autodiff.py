"""Finite-difference checks for the reverse-mode engine."""

from __future__ import annotations

import numpy as np

from contseg import autodiff as ad


def fd_grad(fn, x, h=1e-6):
    """Central finite differences of a scalar function of one array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xflat = x.reshape(-1)
    for k in range(x.size):
        orig = xflat[k]
        xflat[k] = orig + h
        hi = fn(x)
        xflat[k] = orig - h
        lo = fn(x)
        xflat[k] = orig
        flat[k] = (hi - lo) / (2.0 * h)
    return grad


def analytic_grad(build, x):
    """Gradient of a scalar Var built by `build` from a leaf wrapping x."""
    leaf = ad.Var(np.array(x, dtype=np.float64))
    out = build(leaf)
    ad.backward([(out, np.array(1.0))])
    return leaf.grad


def check(build, fn, x, tol=1e-7):
    a = analytic_grad(build, x)
    f = fd_grad(fn, np.array(x, dtype=np.float64))
    err = np.max(np.abs(a - f)) / max(1.0, np.max(np.abs(f)))
    assert err < tol, f"gradient mismatch: {err}"


def test_arithmetic_chain():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 3))

    def build(v):
        y = (v * 2.0 + 1.0) * v - v / 3.0
        return ad.vsum(y * y)

    def fn(x):
        y = (x * 2.0 + 1.0) * x - x / 3.0
        return float((y * y).sum())

    check(build, fn, x)


def test_broadcast_add_and_mul():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 4))
    row = rng.normal(size=(4,))

    def build(v):
        return ad.vsum((v + row) * row)

    def fn(x):
        return float(((x + row) * row).sum())

    check(build, fn, x)

    # gradient with respect to the broadcast side
    def build_row(v):
        return ad.vsum((x + v) * v)

    def fn_row(r):
        return float(((x + r) * r).sum())

    check(build_row, fn_row, row)


def test_matmul():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 5))

    check(lambda v: ad.vsum(ad.matmul(v, b) * 0.5), lambda x: float((x @ b).sum() * 0.5), a)
    check(lambda v: ad.vsum(ad.matmul(a, v) * 0.5), lambda x: float((a @ x).sum() * 0.5), b)


def test_elementwise_nonlinearities():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(6,))
    weights = rng.normal(size=(6,))

    check(lambda v: ad.vsum(ad.tanh(v) * weights), lambda x: float((np.tanh(x) * weights).sum()), x)
    check(lambda v: ad.vsum(ad.sigmoid(v) * weights),
          lambda x: float(((1 / (1 + np.exp(-x))) * weights).sum()), x)
    check(lambda v: ad.vsum(ad.exp(v) * weights), lambda x: float((np.exp(x) * weights).sum()), x)

    positive = np.abs(x) + 0.5
    check(lambda v: ad.vsum(ad.log(v) * weights), lambda x: float((np.log(x) * weights).sum()),
          positive)


def test_clamped_log_gradient_is_zero_under_floor():
    x = np.array([1e-15, 0.5, 2.0])
    leaf = ad.Var(x)
    out = ad.vsum(ad.clamped_log(leaf, 1e-12))
    ad.backward([(out, np.array(1.0))])
    assert leaf.grad[0] == 0.0
    assert np.isclose(leaf.grad[1], 2.0)
    assert np.isclose(leaf.grad[2], 0.5)


def test_power():
    rng = np.random.default_rng(4)
    x = rng.uniform(0.1, 2.0, size=(5,))
    check(lambda v: ad.vsum(ad.power(v, 2.0)), lambda x: float((x ** 2.0).sum()), x)
    check(lambda v: ad.vsum(ad.power(v, 3.5)), lambda x: float((x ** 3.5).sum()), x)


def test_softmax_rows_and_columns():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 6))
    w = rng.normal(size=(4, 6))

    for axis in (0, 1):
        def build(v, axis=axis):
            return ad.vsum(ad.softmax(v, axis=axis) * w)

        def fn(x, axis=axis):
            e = np.exp(x - x.max(axis=axis, keepdims=True))
            s = e / e.sum(axis=axis, keepdims=True)
            return float((s * w).sum())

        check(build, fn, x)


def test_take_and_reshape_and_transpose():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(5, 4))
    w = rng.normal(size=(4,))

    check(lambda v: ad.vsum(v[2] * w), lambda x: float((x[2] * w).sum()), x)
    check(lambda v: ad.vsum(v[:, 1] * w[:3] if False else v[:, 1]),
          lambda x: float(x[:, 1].sum()), x)
    check(lambda v: ad.vsum(ad.reshape(v, (2, 10)) * 1.5), lambda x: float(x.sum() * 1.5), x)
    check(lambda v: ad.vsum(ad.transpose(v) * 2.0), lambda x: float(x.sum() * 2.0), x)


def test_take_accumulates_over_repeated_use():
    x = np.array([1.0, 2.0, 3.0])
    leaf = ad.Var(x)
    out = leaf[0] * leaf[0] + leaf[0]
    ad.backward([(out, np.array(1.0))])
    assert np.isclose(leaf.grad[0], 2.0 * 1.0 + 1.0)
    assert leaf.grad[1] == 0.0


def test_sum_axes_and_mean():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(3, 5))
    w = rng.normal(size=(3,))

    check(lambda v: ad.vsum(ad.vsum(v, axis=1) * w),
          lambda x: float((x.sum(axis=1) * w).sum()), x)
    check(lambda v: ad.vmean(v) * 4.0, lambda x: float(x.mean() * 4.0), x)


def test_conv3x3():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(2, 5, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=(3,))
    mix = rng.normal(size=(3, 5, 6))

    def conv_np(x, w, b):
        c_out = w.shape[0]
        padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        out = np.zeros((c_out, x.shape[1], x.shape[2]))
        for o in range(c_out):
            for c in range(x.shape[0]):
                for dy in range(3):
                    for dx in range(3):
                        out[o] += w[o, c, dy, dx] * padded[c, dy:dy + x.shape[1],
                                                           dx:dx + x.shape[2]]
            out[o] += b[o]
        return out

    # forward agrees with the direct sliding-window computation
    got = ad.conv3x3(ad.Var(x), ad.Var(w), ad.Var(b)).value
    assert np.allclose(got, conv_np(x, w, b), atol=1e-12)

    check(lambda v: ad.vsum(ad.conv3x3(v, ad.Var(w), ad.Var(b)) * mix),
          lambda x: float((conv_np(x, w, b) * mix).sum()), x)
    check(lambda v: ad.vsum(ad.conv3x3(ad.Var(x), v, ad.Var(b)) * mix),
          lambda w: float((conv_np(x, w, b) * mix).sum()), w)
    check(lambda v: ad.vsum(ad.conv3x3(ad.Var(x), ad.Var(w), v) * mix),
          lambda b: float((conv_np(x, w, b) * mix).sum()), b)


def test_backward_from_two_seeds_accumulates():
    x = np.array([1.0, 2.0])
    leaf = ad.Var(x)
    a = ad.vsum(leaf * 2.0)
    b = ad.vsum(leaf * leaf)
    ad.backward([(a, np.array(1.0)), (b, np.array(1.0))])
    assert np.allclose(leaf.grad, 2.0 + 2.0 * x)


def test_backward_resets_stale_gradients():
    leaf = ad.Var(np.array([1.0, 1.0]))
    out = ad.vsum(leaf * 3.0)
    ad.backward([(out, np.array(1.0))])
    ad.backward([(out, np.array(1.0))])
    assert np.allclose(leaf.grad, [3.0, 3.0])


def test_diamond_dependency():
    x = np.array(2.0)
    leaf = ad.Var(x)
    shared = leaf * leaf          # x^2
    out = shared * 3.0 + shared   # 4 x^2
    ad.backward([(out, np.array(1.0))])
    assert np.isclose(float(leaf.grad), 8.0 * 2.0)
