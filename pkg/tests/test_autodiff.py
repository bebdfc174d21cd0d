import numpy as np
import pytest

from pfskd import autodiff as ad
from pfskd.autodiff import Tape, gradcheck


def test_record_add_value(rng):
    tape = Tape()
    x, y = tape.leaf(rng.standard_normal(3)), tape.leaf(rng.standard_normal(3))
    assert np.array_equal(ad.add(x, y).value, x.value + y.value)


def test_matmul_adjoint(rng):
    tape = Tape()
    a, b = tape.leaf(rng.standard_normal((3, 4))), tape.leaf(rng.standard_normal((4, 2)))
    g = rng.standard_normal((3, 2))
    tape.backward(ad.sum_(ad.mul(ad.matmul(a, b), g)))
    np.testing.assert_allclose(a.grad, g @ b.value.T)
    np.testing.assert_allclose(b.grad, a.value.T @ g)


def test_simple_gradients(rng):
    tape = Tape()
    x = tape.leaf(rng.standard_normal((2, 3)))
    tape.backward(ad.sum_(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))
    tape = Tape()
    x = tape.leaf(rng.standard_normal((2, 3)))
    tape.backward(ad.sum_(ad.mul(x, x)))
    np.testing.assert_allclose(x.grad, 2 * x.value)


def test_backward_needs_scalar(rng):
    tape = Tape()
    x = tape.leaf(rng.standard_normal(3))
    with pytest.raises(ValueError):
        tape.backward(ad.mul(x, x))


def test_ops_without_vars_run_tape_free(rng):
    x = rng.standard_normal((2, 2))
    out = ad.exp(ad.add(x, 1.0))
    assert isinstance(out, np.ndarray)


def test_random_op_chain_finite(rng):
    tape = Tape()
    x = tape.leaf(rng.standard_normal((3, 4)))
    y = x
    unary = [ad.exp, ad.relu, lambda v: ad.scale(v, 0.5), ad.abs_, lambda v: ad.softmax(v, axis=1),
             lambda v: ad.add(v, 1.0), lambda v: ad.log(ad.add(ad.abs_(v), 1.0)), ad.neg]
    for k in rng.integers(0, len(unary), 50):
        y = unary[k](y)
        y = ad.div(y, ad.add(ad.max_(ad.abs_(y), axis=1, keepdims=True), 1.0))
    tape.backward(ad.sum_(y))
    assert np.isfinite(x.grad).all()


def test_gradcheck_constant_function(rng):
    # rows sum to 1, so the gradient vanishes; compare absolute values
    x = rng.standard_normal((3, 4))
    f = lambda v: ad.sum_(ad.softmax_rows(v))  # noqa: E731
    tape = Tape()
    v = tape.leaf(x)
    tape.backward(f(v))
    h = 1e-5
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        num = (f(xp) - f(xm)) / (2 * h)
        assert abs(v.grad[i]) < 1e-12
        assert abs(num - v.grad[i]) <= 1e-6
    assert gradcheck(f, [x]).passed


def test_gradcheck_classification_loss(rng):
    from pfskd.losses import LossConfig, kd_pixel_loss
    from pfskd.gradsuite import frozen_gap_weights
    zs, zt = rng.standard_normal((1, 4, 3, 3)), rng.standard_normal((1, 4, 3, 3))
    labels = rng.integers(0, 4, (1, 3, 3))
    cfg = LossConfig()
    w0 = frozen_gap_weights(zs, zt, labels, cfg)
    rep = gradcheck(lambda z: kd_pixel_loss(z, zt, labels, cfg, weights=w0), [zs])
    assert rep.passed


def test_gradcheck_catches_broken_adjoint(rng):
    def bad_square(x):
        return ad.record("bad", ad.value(x) ** 2, [x], lambda g, n: [3.0 * g * ad.value(x)])
    rep = gradcheck(lambda v: ad.sum_(bad_square(v)), [rng.standard_normal(4) + 2])
    assert not rep.passed


def test_reports_to_csv_header(rng):
    rep = gradcheck(lambda v: ad.sum_(ad.exp(v)), [rng.standard_normal(2)], name="exp")
    text = ad.reports_to_csv([rep])
    assert text.splitlines()[0] == "op_name,shape,max_rel_err,pass"
    assert text.splitlines()[1].startswith("exp,2,")
