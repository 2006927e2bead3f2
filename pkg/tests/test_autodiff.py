"""Gradient-engine tests: every primitive against central differences, the
backward contract, and the Adam/optimizer examples."""

import zlib

import numpy as np
import pytest

from nerfsep import autodiff as ad
from nerfsep.autodiff import (Tensor, backward, finite_difference_check, no_grad,
                              parameter)
from nerfsep.optim import AdamHyper, DecaySchedule, ParamStore, adam_step


def _fd_scalar(build, params, h=1e-5):
    """Max rel error of d(sum of squares of build(params)) for given leaf dict."""
    def f():
        out = build()
        return ad.tsum(ad.mul(out, out))
    return finite_difference_check(f, params, h=h)


# -- per-primitive vjp agreement (the module invariant) -------------------------

PRIMITIVES = [
    ("add", lambda a, b: ad.add(a, b), 2, None),
    ("sub", lambda a, b: ad.sub(a, b), 2, None),
    ("mul", lambda a, b: ad.mul(a, b), 2, None),
    ("div", lambda a, b: ad.div(a, b), 2, (0.5, 2.0)),
    ("matmul", None, 2, None),
    ("sum", lambda a: ad.tsum(a, axis=1), 1, None),
    ("sum_all", lambda a: ad.tsum(a), 1, None),
    ("mean", lambda a: ad.tmean(a, axis=0), 1, None),
    ("exp", lambda a: ad.exp(a), 1, None),
    ("log", lambda a: ad.log(a), 1, (0.5, 3.0)),
    ("sin", lambda a: ad.sin(a), 1, None),
    ("cos", lambda a: ad.cos(a), 1, None),
    ("relu", lambda a: ad.relu(a), 1, None),
    ("clip", lambda a: ad.clip(a, -0.5, 0.5), 1, None),
    ("pow", lambda a: ad.power(a, 1.7), 1, (0.5, 3.0)),
    ("sqrt", lambda a: ad.sqrt(a), 1, (0.5, 3.0)),
    ("reshape", lambda a: ad.reshape(a, (6, 2)), 1, None),
    ("repeat_rows", lambda a: ad.repeat_rows(a, 3), 1, None),
    ("concat", lambda a, b: ad.concat([a, b], axis=1), 2, None),
    ("gather", lambda a: ad.gather(a, np.array([2, 0, 2, 1]), axis=0), 1, None),
]


@pytest.mark.parametrize("name,fn,arity,domain", PRIMITIVES, ids=[p[0] for p in PRIMITIVES])
def test_primitive_vjp_matches_finite_differences(name, fn, arity, domain):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    lo, hi = domain if domain else (-1.5, 1.5)
    if name == "matmul":
        a = parameter(rng.uniform(lo, hi, (4, 5)))
        b = parameter(rng.uniform(lo, hi, (5, 3)))
        err = _fd_scalar(lambda: ad.matmul(a, b), {"a": a, "b": b})
    elif name == "relu":
        # keep inputs away from the kink where the subgradient is one-sided
        a = parameter(np.where(np.abs(rng.uniform(lo, hi, (3, 4))) < 0.05, 0.2,
                               rng.uniform(lo, hi, (3, 4))))
        err = _fd_scalar(lambda: fn(a), {"a": a})
    elif name == "clip":
        vals = rng.uniform(-1.5, 1.5, (3, 4))
        vals[np.abs(np.abs(vals) - 0.5) < 0.05] = 0.2  # stay off the boundary
        a = parameter(vals)
        err = _fd_scalar(lambda: fn(a), {"a": a})
    elif arity == 2:
        a = parameter(rng.uniform(lo, hi, (3, 4)))
        b = parameter(rng.uniform(lo, hi, (3, 4)))
        err = _fd_scalar(lambda: fn(a, b), {"a": a, "b": b})
    else:
        a = parameter(rng.uniform(lo, hi, (3, 4)))
        err = _fd_scalar(lambda: fn(a), {"a": a})
    assert err < 1e-6


def test_batched_matmul_vjp():
    rng = np.random.default_rng(7)
    a = parameter(rng.normal(0, 1, (5, 3, 3)))
    b = parameter(rng.normal(0, 1, (5, 3, 2)))
    err = _fd_scalar(lambda: ad.matmul(a, b), {"a": a, "b": b})
    assert err < 1e-6


def test_broadcast_binary_vjp():
    rng = np.random.default_rng(8)
    a = parameter(rng.normal(0, 1, (4, 1, 3)))
    b = parameter(rng.normal(0, 1, (1, 5, 3)))
    err = _fd_scalar(lambda: ad.mul(a, b), {"a": a, "b": b})
    assert err < 1e-6


def test_float32_mode_loosened_tolerance():
    rng = np.random.default_rng(9)
    w1 = parameter(rng.normal(0, 0.5, (4, 6)).astype(np.float32))
    w2 = parameter(rng.normal(0, 0.5, (6, 1)).astype(np.float32))
    x = np.asarray(rng.normal(0, 1, (5, 4)), dtype=np.float32)

    def f():
        h = ad.relu(ad.matmul(Tensor(x), w1))
        return ad.tmean(ad.matmul(h, w2))

    err = finite_difference_check(f, {"w1": w1, "w2": w2}, h=1e-2)
    assert err < 1e-3
    assert f().dtype == np.float32  # no silent promotion


# -- backward contract ----------------------------------------------------------

def test_square_gradient():
    x = parameter(np.asarray(3.0))
    assert backward(ad.mul(x, x))[x] == pytest.approx(6.0)


def test_exp_zero():
    x = parameter(np.asarray(0.0))
    out = ad.exp(x)
    assert out.item() == 1.0
    assert backward(out)[x] == pytest.approx(1.0)


def test_random_mlp_against_finite_differences():
    rng = np.random.default_rng(11)
    params = {
        "W1": parameter(rng.normal(0, 0.4, (5, 8))),
        "b1": parameter(rng.normal(0, 0.4, 8)),
        "W2": parameter(rng.normal(0, 0.4, (8, 8))),
        "b2": parameter(rng.normal(0, 0.4, 8)),
        "W3": parameter(rng.normal(0, 0.4, (8, 1))),
    }
    x = np.asarray(rng.normal(0, 1, (6, 5)))

    def f():
        h = ad.relu(ad.add(ad.matmul(Tensor(x), params["W1"]), params["b1"]))
        h = ad.relu(ad.add(ad.matmul(h, params["W2"]), params["b2"]))
        return ad.tmean(ad.matmul(h, params["W3"]))

    assert finite_difference_check(f, params, h=1e-5) < 1e-6


def test_backward_rejects_non_scalar():
    x = parameter(np.ones(3))
    with pytest.raises(ValueError):
        backward(ad.mul(x, x))


def test_untouched_leaf_gets_zero_via_store():
    store = ParamStore()
    a = store.add("a", np.asarray([2.0]))
    store.add("b", np.asarray([5.0]))
    grads = store.gradients(ad.tsum(ad.mul(a, a)))
    assert grads["a"] == pytest.approx([4.0])
    assert np.array_equal(grads["b"], np.zeros(1))


def test_backward_linearity():
    rng = np.random.default_rng(12)
    x = parameter(rng.normal(0, 1, (4,)))
    f1 = ad.tsum(ad.sin(x))
    f2 = ad.tsum(ad.mul(x, x))
    g1, g2 = backward(f1)[x], backward(f2)[x]
    g_sum = backward(ad.add(f1, f2))[x]
    np.testing.assert_allclose(g_sum, g1 + g2, rtol=1e-12)


def test_backward_purity():
    rng = np.random.default_rng(13)
    x = parameter(rng.normal(0, 1, (4, 3)))
    out = ad.tsum(ad.exp(ad.sin(ad.mul(x, x))))
    g1 = backward(out)[x]
    g2 = backward(out)[x]
    np.testing.assert_array_equal(g1, g2)


def test_clip_gradient_zero_outside_identity_inside():
    x = parameter(np.asarray([-2.0, -0.5, 0.0, 0.5, 2.0]))
    g = backward(ad.tsum(ad.clip(x, -0.5, 0.5)))[x]
    # boundaries take the interior branch
    np.testing.assert_array_equal(g, [0.0, 1.0, 1.0, 1.0, 0.0])


def test_no_grad_blocks_recording():
    x = parameter(np.asarray(2.0))
    with no_grad():
        y = ad.mul(x, x)
    assert not y.requires_grad


def test_fd_check_sum_of_squares_nearly_exact():
    rng = np.random.default_rng(14)
    p = parameter(rng.normal(0, 1, (6,)))
    err = finite_difference_check(lambda: ad.tsum(ad.mul(p, p)), {"p": p}, h=1e-5)
    assert err < 1e-9


def test_fd_check_constant_function_zero_error():
    p = parameter(np.ones(3))
    err = finite_difference_check(lambda: Tensor(np.asarray(1.5)), {"p": p}, h=1e-5)
    assert err == 0.0


def test_fd_check_reports_non_finite():
    p = parameter(np.asarray([0.0]))
    with pytest.raises(FloatingPointError, match="p"):
        finite_difference_check(lambda: ad.log(p), {"p": p}, h=1e-3)


# -- optimizer -------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params_unchanged():
    store = ParamStore()
    p = store.add("w", np.asarray([1.0, -2.0]))
    before = p.data.copy()
    adam_step(store, {"w": np.zeros(2)}, AdamHyper(learning_rate=1e-3), 0)
    np.testing.assert_array_equal(p.data, before)


def test_adam_first_step_magnitude_is_lr():
    # g=1: bias-corrected m_hat = v_hat = 1, update = lr / (1 + eps)
    store = ParamStore()
    p = store.add("w", np.asarray([0.0]))
    adam_step(store, {"w": np.ones(1)}, AdamHyper(learning_rate=1e-3), 0)
    assert p.data[0] == pytest.approx(-1e-3, rel=1e-6)


def test_adam_missing_gradient_is_an_error():
    store = ParamStore()
    store.add("w", np.zeros(2))
    with pytest.raises(KeyError, match="w"):
        adam_step(store, {}, AdamHyper(), 0)


def test_decay_schedule_hits_end_rate_at_horizon():
    sched = DecaySchedule(start=5e-4, end=5e-5, horizon=500_000)
    assert sched.rate_at(0) == pytest.approx(5e-4)
    assert sched.rate_at(500_000) == pytest.approx(5e-5)
    assert sched.rate_at(250_000) == pytest.approx(np.sqrt(5e-4 * 5e-5))


def test_adam_lr_scale_group():
    store = ParamStore()
    p = store.add("w", np.asarray([0.0]), lr_scale=0.1)
    adam_step(store, {"w": np.ones(1)}, AdamHyper(learning_rate=1e-3), 0)
    assert p.data[0] == pytest.approx(-1e-4, rel=1e-6)


def test_adam_hyper_validation():
    with pytest.raises(ValueError):
        AdamHyper(beta1=1.0)
    with pytest.raises(ValueError):
        AdamHyper(epsilon=0.0)
