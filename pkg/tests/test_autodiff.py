"""Per-operation gradient checks for the tape engine.

Every op gets a central finite-difference comparison; the whole-pipeline
checks live with the integration tests.
"""

import numpy as np
import pytest

from artiplane import autodiff as ad
from artiplane.autodiff import Tensor


def numeric_grad(f, x, step=1e-6):
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        hi = f()
        flat[i] = keep - step
        lo = f()
        flat[i] = keep
        gf[i] = (hi - lo) / (2 * step)
    return g


def check_op(build, x0, tol=1e-7):
    """build(tensor) -> scalar Tensor; compares tape grad to central FD."""
    x = Tensor(x0.copy(), requires_grad=True)
    loss = build(x)
    ad.backward(loss)
    got = x.grad.copy()

    def feval():
        with ad.no_grad():
            return float(build(Tensor(x.data)).data)

    want = numeric_grad(feval, x.data)
    assert np.allclose(got, want, rtol=tol, atol=tol), f"max err {np.abs(got - want).max()}"


RNG = np.random.Generator(np.random.Philox(7))


@pytest.mark.parametrize("name,build", [
    ("add", lambda x: ad.sum(x + Tensor(RNG.standard_normal(x.shape)))),
    ("add_scalar", lambda x: ad.sum(x + 2.5)),
    ("mul", lambda x: ad.sum(x * Tensor(RNG.standard_normal(x.shape)))),
    ("mul_broadcast", lambda x: ad.sum(x * Tensor(RNG.standard_normal((x.shape[0], 1))))),
    ("pow", lambda x: ad.sum((x + 3.0) ** 2.0)),
    ("exp", lambda x: ad.sum(ad.exp(x))),
    ("log", lambda x: ad.sum(ad.log(x + 3.0))),
    ("sigmoid", lambda x: ad.sum(ad.sigmoid(x))),
    ("softplus", lambda x: ad.sum(ad.softplus(x))),
    ("cumsum", lambda x: ad.sum(ad.cumsum(x, 1) * Tensor(RNG.standard_normal(x.shape)))),
    ("reshape", lambda x: ad.sum(ad.reshape(x, (-1,)) * Tensor(RNG.standard_normal(x.size)))),
    ("getcols", lambda x: ad.sum(ad.getcols(x, 1, 3) * 2.0)),
    ("getitem", lambda x: ad.sum(x[:, 2] * 3.0)),
    ("mean", lambda x: ad.mean(x * x)),
    ("clip", lambda x: ad.sum(ad.clip(x, -0.5, 0.5))),
])
def test_elementwise_grads(name, build):
    check_op(build, RNG.standard_normal((5, 4)))


def test_relu_grad_off_kink():
    x0 = RNG.standard_normal((6, 3)) + np.sign(RNG.standard_normal((6, 3))) * 0.1
    check_op(lambda x: ad.sum(ad.relu(x) * Tensor(RNG.standard_normal(x.shape))), x0)


def test_matmul_grads():
    a0 = RNG.standard_normal((4, 3))
    b_const = RNG.standard_normal((3, 5))
    check_op(lambda a: ad.sum(ad.matmul(a, Tensor(b_const)) * 1.5), a0)
    w0 = RNG.standard_normal((5, 3))
    a_const = RNG.standard_normal((7, 3))
    check_op(lambda w: ad.sum(ad.matmul(Tensor(a_const), ad.reshape(w, (3, 5)))),
             w0.T.copy())


def test_linear_matches_unfused():
    x = Tensor(RNG.standard_normal((8, 6)), requires_grad=True)
    w = Tensor(RNG.standard_normal((4, 6)), requires_grad=True)
    b = Tensor(RNG.standard_normal(4), requires_grad=True)
    out = ad.linear(x, w, b, relu_act=True)
    ref = np.maximum(x.data @ w.data.T + b.data, 0.0)
    assert np.allclose(out.data, ref)
    ad.backward(ad.sum(out * Tensor(RNG.standard_normal(out.shape))))
    assert x.grad is not None and w.grad is not None and b.grad is not None


def test_linear_grads_fd():
    x_const = RNG.standard_normal((6, 4))
    co = RNG.standard_normal((6, 3))
    w0 = RNG.standard_normal((3, 4))
    check_op(lambda w: ad.sum(ad.linear(Tensor(x_const), w, Tensor(np.zeros(3))) * Tensor(co)), w0)
    b0 = RNG.standard_normal(3)
    check_op(lambda b: ad.sum(ad.linear(Tensor(x_const), Tensor(w0), b, relu_act=False) * Tensor(co)), b0)
    x0 = RNG.standard_normal((6, 4))
    check_op(lambda x: ad.sum(ad.linear(x, Tensor(w0), Tensor(np.ones(3))) * Tensor(co)), x0)


def test_gather_scatter_grads():
    idx = np.array([0, 2, 2, 5, 1])
    co = RNG.standard_normal((5, 3))
    check_op(lambda x: ad.sum(ad.gather_rows(x, idx) * Tensor(co)),
             RNG.standard_normal((6, 3)))
    co2 = RNG.standard_normal((4, 3))
    check_op(lambda x: ad.sum(ad.index_add(4, np.array([0, 3, 3, 1, 2]), x) * Tensor(co2)),
             RNG.standard_normal((5, 3)))


def test_concatenate_grads():
    b_const = RNG.standard_normal((4, 2))
    co = RNG.standard_normal((4, 5))
    check_op(lambda x: ad.sum(ad.concatenate([x, Tensor(b_const)], axis=1) * Tensor(co)),
             RNG.standard_normal((4, 3)))


def test_plane_gather_grads_plane_and_coords():
    res = 8
    plane0 = RNG.standard_normal((res * res, 3))
    px = RNG.uniform(0.3, res - 1.3, 20)
    py = RNG.uniform(0.3, res - 1.3, 20)
    co = RNG.standard_normal((20, 3))
    check_op(lambda p: ad.sum(ad.plane_gather(p, px, py, res) * Tensor(co)), plane0)

    # coordinate gradients (keep away from texel-boundary kinks)
    px0 = np.floor(RNG.uniform(1, res - 2, 16)) + RNG.uniform(0.2, 0.8, 16)
    py0 = np.floor(RNG.uniform(1, res - 2, 16)) + RNG.uniform(0.2, 0.8, 16)
    plane_c = Tensor(RNG.standard_normal((res * res, 2)))
    co2 = RNG.standard_normal((16, 2))
    check_op(lambda x: ad.sum(ad.plane_gather(plane_c, x, py0, res) * Tensor(co2)), px0,
             tol=1e-5)
    check_op(lambda y: ad.sum(ad.plane_gather(plane_c, px0, y, res) * Tensor(co2)), py0,
             tol=1e-5)


def test_plane_gather_single_column():
    res = 6
    plane = Tensor(RNG.standard_normal((res * res, 5)), requires_grad=True)
    px = RNG.uniform(0, res - 1, 11)
    py = RNG.uniform(0, res - 1, 11)
    full = ad.plane_gather(plane, px, py, res)
    one = ad.plane_gather(plane, px, py, res, col=3)
    assert np.allclose(one.data[:, 0], full.data[:, 3], atol=1e-12)
    ad.backward(ad.sum(one))
    g = plane.grad
    assert g is not None
    assert np.all(g[:, [0, 1, 2, 4]] == 0.0)
    assert np.any(g[:, 3] != 0.0)


def test_backward_accumulates_shared_nodes():
    x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    y = x * x        # used twice below
    loss = ad.sum(y + y)
    ad.backward(loss)
    assert np.allclose(x.grad, 4.0 * x.data)


def test_backward_is_linear_in_the_loss():
    x0 = RNG.standard_normal((4, 3))

    def grads(a, b):
        x = Tensor(x0.copy(), requires_grad=True)
        l1 = ad.sum(ad.sigmoid(x))
        l2 = ad.sum(x * x)
        ad.backward(l1 * a + l2 * b)
        return x.grad.copy()

    g1 = grads(1.0, 0.0)
    g2 = grads(0.0, 1.0)
    g = grads(0.7, -1.3)
    assert np.allclose(g, 0.7 * g1 - 1.3 * g2, atol=1e-10)


def test_no_grad_suppresses_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad
    with pytest.raises(RuntimeError):
        ad.backward(y)


def test_grad_ownership_no_aliasing_between_leaves():
    # two leaves receiving the same upstream gradient array must not alias
    a = Tensor(np.ones(4), requires_grad=True)
    b = Tensor(np.ones(4), requires_grad=True)
    loss = ad.sum((a + b) * 3.0)
    ad.backward(loss)
    a.grad[0] = 123.0
    assert b.grad[0] == 3.0


def test_float32_pipeline_stays_float32():
    x = Tensor(np.ones((4, 3), dtype=np.float32), requires_grad=True)
    y = ad.sigmoid(x * 2.0 + 1.0) - 0.5
    assert y.dtype == np.float32
    ad.backward(ad.sum(y * y))
    assert x.grad.dtype == np.float32
