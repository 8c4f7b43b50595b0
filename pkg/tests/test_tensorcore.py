import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clforge.tensorcore import (
    Tensor, NonFiniteError, concat, collect_grads, finite_diff_check, no_grad,
    LOG_EPS,
)


def numeric_grad(fn, arr, h=1e-6):
    """Central-difference gradient of scalar fn() w.r.t. a raw array."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = fn()
        flat[i] = orig - h
        lo = fn()
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * h)
    return g


def check_op(build, arrs, tol=1e-4, h=1e-6):
    """build(tensors) -> scalar Tensor; compares backward against numeric."""
    tensors = [Tensor(a, requires_grad=True) for a in arrs]
    loss = build(tensors)
    loss.backward()
    for t, a in zip(tensors, arrs):
        def f():
            with no_grad():
                return build([Tensor(x) for x in arrs]).item()
        num = numeric_grad(f, a, h=h)
        assert t.grad is not None
        err = np.abs(t.grad - num) / (np.abs(t.grad) + 1e-8)
        assert err.max() < tol, f"grad mismatch: {err.max():.3e}"


def make_weighted(rng, shape):
    """Fixed random projection to a scalar, so grads are generically nonzero."""
    w = rng.normal(size=shape)
    return lambda t: (t * Tensor(w)).sum()


OPS = [
    "add", "add_bcast", "sub", "mul", "mul_bcast", "div", "matmul",
    "sigmoid", "relu", "log", "sqrt", "square", "sum", "sum_axis0",
    "sum_axis1", "mean", "reshape", "permute", "getitem", "slice", "concat",
]


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(OPS))
def test_op_gradients_match_finite_differences(seed, op):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-2.0, 2.0, size=(3, 4))
    b = rng.uniform(-2.0, 2.0, size=(3, 4))
    v = rng.uniform(-2.0, 2.0, size=(4,))

    if op == "add":
        w = make_weighted(rng, (3, 4))
        check_op(lambda ts: w(ts[0] + ts[1]), [a, b])
    elif op == "add_bcast":
        w = make_weighted(rng, (3, 4))
        check_op(lambda ts: w(ts[0] + ts[1]), [a, v])
    elif op == "sub":
        w = make_weighted(rng, (3, 4))
        check_op(lambda ts: w(ts[0] - ts[1]), [a, b])
    elif op == "mul":
        w = make_weighted(rng, (3, 4))
        check_op(lambda ts: w(ts[0] * ts[1]), [a, b])
    elif op == "mul_bcast":
        w = make_weighted(rng, (3, 4))
        check_op(lambda ts: w(ts[0] * ts[1]), [a, v])
    elif op == "div":
        denom = np.sign(b) * (np.abs(b) + 0.5)
        w = make_weighted(rng, (3, 4))
        check_op(lambda ts: w(ts[0] / ts[1]), [a, denom])
    elif op == "matmul":
        m = rng.uniform(-2, 2, size=(4, 5))
        w = make_weighted(rng, (3, 5))
        check_op(lambda ts: w(ts[0] @ ts[1]), [a, m])
    elif op == "sigmoid":
        w = make_weighted(rng, (3, 4))
        check_op(lambda ts: w(ts[0].sigmoid()), [a])
    elif op == "relu":
        # keep inputs away from the kink where FD is undefined
        shifted = np.where(np.abs(a) < 0.05, 0.5, a)
        w = make_weighted(rng, (3, 4))
        check_op(lambda ts: w(ts[0].relu()), [shifted])
    elif op == "log":
        w = make_weighted(rng, (3, 4))
        check_op(lambda ts: w(ts[0].log()), [np.abs(a) + 0.1])
    elif op == "sqrt":
        w = make_weighted(rng, (3, 4))
        check_op(lambda ts: w(ts[0].sqrt()), [np.abs(a) + 0.1])
    elif op == "square":
        w = make_weighted(rng, (3, 4))
        check_op(lambda ts: w(ts[0].square()), [a])
    elif op == "sum":
        check_op(lambda ts: ts[0].sum(), [a])
    elif op == "sum_axis0":
        w = make_weighted(rng, (4,))
        check_op(lambda ts: w(ts[0].sum(axis=0)), [a])
    elif op == "sum_axis1":
        w = make_weighted(rng, (3,))
        check_op(lambda ts: w(ts[0].sum(axis=1)), [a])
    elif op == "mean":
        w = make_weighted(rng, (3,))
        check_op(lambda ts: w(ts[0].mean(axis=1)), [a])
    elif op == "reshape":
        w = make_weighted(rng, (2, 6))
        check_op(lambda ts: w(ts[0].reshape((2, 6))), [a])
    elif op == "permute":
        w = make_weighted(rng, (4, 3))
        check_op(lambda ts: w(ts[0].permute((1, 0))), [a])
    elif op == "getitem":
        w = make_weighted(rng, (4,))
        check_op(lambda ts: w(ts[0][1]), [a])
    elif op == "slice":
        w = make_weighted(rng, (2, 4))
        check_op(lambda ts: w(ts[0][0:2]), [a])
    elif op == "concat":
        w = make_weighted(rng, (6, 4))
        check_op(lambda ts: w(concat([ts[0], ts[1]], axis=0)), [a, b])


def test_composite_mlp_gradcheck():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(5, 8))
    w1 = Tensor(rng.normal(size=(8, 16)) * 0.3, requires_grad=True)
    w2 = Tensor(rng.normal(size=(16, 4)) * 0.3, requires_grad=True)
    tgt = rng.uniform(0, 1, size=(5, 4))

    def fn():
        h = (Tensor(x) @ w1).relu()
        p = (h @ w2).sigmoid()
        return -(Tensor(tgt) * p.log()
                 + (1.0 - Tensor(tgt)) * (1.0 - p).log()).mean()

    err = finite_diff_check(fn, {"w1": w1, "w2": w2}, h=1e-5)
    assert err < 1e-4


def test_backward_linearity():
    rng = np.random.default_rng(3)
    w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    x1 = Tensor(rng.normal(size=(2, 4)))
    x2 = Tensor(rng.normal(size=(2, 4)))

    def loss(x):
        return (x @ w).square().sum()

    (loss(x1) + loss(x2)).backward()
    combined = w.grad.copy()

    w.grad = None
    loss(x1).backward()
    g1 = w.grad.copy()
    w.grad = None
    loss(x2).backward()
    g2 = w.grad.copy()
    np.testing.assert_allclose(combined, g1 + g2, rtol=0, atol=1e-12)


def test_constant_loss_gives_zero_grads():
    w = Tensor(np.ones((3, 3)), requires_grad=True)
    loss = Tensor(2.5)
    loss.backward()
    grads = collect_grads({"w": w})
    assert np.all(grads["w"] == 0.0)


def test_disconnected_param_gets_zero_grad():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    u = Tensor(np.ones((2, 2)), requires_grad=True)
    (w.square().sum()).backward()
    grads = collect_grads({"w": w, "u": u})
    assert np.all(grads["u"] == 0.0)
    assert np.all(grads["w"] == 2.0)


def test_second_backward_raises():
    w = Tensor(np.ones((2,)), requires_grad=True)
    loss = w.square().sum()
    loss.backward()
    with pytest.raises(RuntimeError):
        loss.backward()


def test_shape_mismatch_raises():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((3, 2)))
    with pytest.raises(ValueError):
        a + b
    with pytest.raises(ValueError):
        a @ Tensor(np.ones((2, 2)))
    with pytest.raises(ValueError):
        Tensor(np.ones((2, 3, 4))) @ Tensor(np.ones((4, 2)))


def test_non_finite_output_raises():
    a = Tensor(np.ones((2,)))
    z = Tensor(np.zeros((2,)))
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        with pytest.raises(NonFiniteError):
            a / z
        with pytest.raises(NonFiniteError):
            Tensor([np.inf])
        big = Tensor(np.full((2,), 700.0))
        with pytest.raises(NonFiniteError):
            # overflow in an unguarded chain must not pass silently
            (big * big * big).square().square().square().square().square() \
                .square().square().square().square().square()


def test_guarded_ops_stay_finite_on_working_range():
    x = Tensor(np.linspace(-50, 50, 101))
    s = x.sigmoid()
    assert np.all(np.isfinite(s.data))
    # log of a fully saturated sigmoid is floored, not -inf
    lo = s.log()
    assert np.all(np.isfinite(lo.data))
    assert lo.data.min() >= np.log(LOG_EPS) - 1e-9
    hi = (1.0 - s).log()
    assert np.all(np.isfinite(hi.data))


def test_log_floor_value():
    t = Tensor(np.array([0.0, 1e-30, 1.0]))
    out = t.log()
    np.testing.assert_allclose(out.data[:2], np.log(LOG_EPS))
    np.testing.assert_allclose(out.data[2], 0.0)


def test_no_grad_blocks_graph():
    w = Tensor(np.ones((2,)), requires_grad=True)
    with no_grad():
        out = w.square().sum()
    assert out.requires_grad is False
    out.backward()  # constant: no-op
    assert w.grad is None


def test_finite_diff_check_rejects_nondeterministic_fn():
    rng = np.random.default_rng(0)
    w = Tensor(np.ones((2,)), requires_grad=True)

    def fn():
        return (w * Tensor(rng.normal(size=(2,)))).sum()

    with pytest.raises(ValueError):
        finite_diff_check(fn, {"w": w})


def test_float64_and_row_major():
    t = Tensor([[1, 2], [3, 4]])
    assert t.data.dtype == np.float64
    assert t.data.flags["C_CONTIGUOUS"]


def test_concat_empty_raises():
    with pytest.raises(ValueError):
        concat([])
