import io
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from caplab import autodiff as ad
from caplab.autodiff import GradientError, ShapeError, Tensor
from caplab.gradcheck import TOLERANCE, build_cases, run_gradchecks

finite = st.floats(-3, 3, allow_nan=False, width=64)


def small(shape):
    return arrays(np.float64, shape, elements=finite)


def test_softmax_of_zeros_is_uniform():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_identity_matmul(rng):
    a = rng.standard_normal((3, 3))
    with ad.precision(np.float64):
        np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)


def test_gelu_and_relu_fixed_points():
    assert ad.gelu(Tensor([0.0])).data[0] == 0.0
    assert ad.relu(Tensor([-1.0])).data[0] == 0.0


def test_square_gradient_at_three():
    x = Tensor([3.0], requires_grad=True)
    ad.backward(ad.sum_(ad.square(x)))
    np.testing.assert_allclose(x.grad, [6.0])


def test_sum_of_softmax_has_zero_gradient(rng):
    with ad.precision(np.float64):
        z = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        ad.backward(ad.sum_(ad.softmax(z)))
    np.testing.assert_allclose(z.grad, 0.0, atol=1e-12)


def test_accumulation_is_additive(rng):
    x = Tensor(rng.standard_normal(5), requires_grad=True)
    loss = ad.sum_(ad.square(x))
    ad.backward(loss, retain_graph=True)
    once = x.grad.copy()
    ad.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * once)
    x.zero_grad()
    assert x.grad is None or not np.any(x.grad)


def test_backward_rejects_non_scalar_and_detached():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        ad.backward(ad.square(x))
    with pytest.raises(GradientError):
        ad.backward(Tensor(1.0))


def test_released_graph_cannot_be_replayed():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = ad.sum_(ad.square(x))
    ad.backward(loss)
    with pytest.raises(GradientError):
        ad.backward(loss)


def test_cleared_tape_makes_outputs_stale():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = ad.sum_(ad.square(x))
    ad.clear_tape()
    with pytest.raises(GradientError):
        ad.backward(loss)


def test_shape_errors_name_both_operands():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_empty_axis_errors():
    with pytest.raises(ShapeError):
        ad.softmax(Tensor(np.ones((2, 0))))
    with pytest.raises(ShapeError):
        ad.mean(Tensor(np.ones((2, 0))), axis=1)


def test_no_implicit_broadcast_but_explicit_works():
    with pytest.raises(ShapeError):
        ad.mul(Tensor(np.ones((1, 4))), Tensor(np.ones((3, 4))))
    out = ad.mul(ad.broadcast_to(Tensor(np.ones((1, 4))), (3, 4)), Tensor(np.ones((3, 4))))
    assert out.dims == (3, 4)


def test_scalar_scale_via_operator():
    t = Tensor([1.0, 2.0]) * 3
    np.testing.assert_allclose(t.data, [3.0, 6.0])


def test_grad_leaves_dot_grad_untouched(rng):
    x = Tensor(rng.standard_normal(4), requires_grad=True)
    y = Tensor(rng.standard_normal(4), requires_grad=True)
    g = ad.grad(ad.sum_(ad.mul(x, x)), [x, y])
    np.testing.assert_allclose(g[0], 2 * x.data, rtol=1e-6)
    np.testing.assert_array_equal(g[1], 0.0)
    assert x.grad is None


def test_log_is_clamped_and_finite():
    x = Tensor([0.0, 1e-30, 1.0], requires_grad=True)
    out = ad.log(x)
    assert np.all(np.isfinite(out.data))
    ad.backward(ad.sum_(out))
    assert np.all(np.isfinite(x.grad))
    assert x.grad[0] == 0.0


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = ad.square(x)
    assert y._node is None


def test_tapes_are_thread_confined():
    seen = {}

    def work():
        seen["tape"] = ad.get_tape()

    t = threading.Thread(target=work)
    t.start()
    t.join()
    assert seen["tape"] is not ad.get_tape()


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_every_primitive_and_loss_passes_gradcheck(dtype):
    results = run_gradchecks((dtype,))
    assert {r.name for r in results} == set(build_cases())
    bad = [(r.name, r.max_rel_error) for r in results if not r.passed]
    assert not bad
    assert all(r.tol == TOLERANCE[dtype] for r in results)


def test_gradcheck_reports_constant_function_as_zero():
    with ad.precision(np.float64):
        rep = ad.grad_check(lambda x: Tensor(2.5), np.ones(3))
    assert rep.passed
    np.testing.assert_array_equal(rep.analytic, 0.0)


def test_gradcheck_kl_on_identical_distributions():
    from caplab.objectives import kl_loss

    p = np.array([[0.2, 0.3, 0.5]])
    with ad.precision(np.float64):
        rep = ad.grad_check(lambda z: kl_loss(Tensor(p), ad.softmax(z)), np.log(p))
    assert rep.passed and np.all(np.isfinite(rep.analytic))


def test_gradcheck_rejects_nondeterministic_function():
    state = {"n": 0}

    def f(x):
        state["n"] += 1
        return ad.scale(ad.sum_(x), state["n"])

    with pytest.raises(GradientError):
        ad.grad_check(f, np.ones(2))


def test_matmul_chain_gradient_in_64bit(rng):
    b = rng.standard_normal((5, 3))
    c = rng.standard_normal((3, 2))
    with ad.precision(np.float64):
        rep = ad.grad_check(lambda a: ad.sum_(ad.matmul(ad.matmul(a, Tensor(b)), Tensor(c))),
                            rng.standard_normal((4, 5)), h=1e-5, tol=1e-5)
    assert rep.passed


@settings(max_examples=40, deadline=None)
@given(small((3, 4)), small((3, 4)), st.floats(-2, 2), st.floats(-2, 2))
def test_backward_is_linear(x0, w, a, b):
    with ad.precision(np.float64):
        x = Tensor(x0, requires_grad=True)
        f = lambda: ad.sum_(ad.mul(ad.gelu(x), Tensor(w)))  # noqa: E731
        g = lambda: ad.sum_(ad.square(x))  # noqa: E731
        combo = ad.grad(ad.add(ad.scale(f(), a), ad.scale(g(), b)), [x])[0]
        sep = a * ad.grad(f(), [x])[0] + b * ad.grad(g(), [x])[0]
    np.testing.assert_allclose(combo, sep, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_are_distributions(z):
    with ad.precision(np.float64):
        s = ad.softmax(Tensor(z)).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(s >= 0) and np.all(s <= 1)


@settings(max_examples=30, deadline=None)
@given(small((4, 6)))
def test_forward_is_deterministic(x):
    w, b = np.linspace(0.5, 1.5, 6), np.linspace(-1, 1, 6)
    run = lambda: ad.gelu(ad.layer_norm(Tensor(x), Tensor(w), Tensor(b))).data  # noqa: E731
    np.testing.assert_array_equal(run(), run())


def test_tensor_record_roundtrip(rng):
    a = rng.standard_normal((2, 3, 4)).astype(np.float32)
    buf = io.BytesIO()
    ad.write_tensors(buf, [("w", a), ("b", np.zeros(3, np.float32))])
    raw = buf.getvalue()
    # u32 count, then the first record header: name_len, name, rank, dims
    assert raw[4:8] == (1).to_bytes(4, "little") and raw[8:9] == b"w"
    assert raw[9:13] == (3).to_bytes(4, "little")
    buf.seek(0)
    out = ad.read_tensors(buf)
    np.testing.assert_array_equal(out["w"], a)
    assert list(out) == ["w", "b"]
