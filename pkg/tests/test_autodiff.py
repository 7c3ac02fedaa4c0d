"""Finite-difference checks for every autodiff operation."""
import numpy as np
import pytest

from gridkp import autodiff as ad


def fd_check(func, tensors, h=1e-6, tol=1e-6, max_entries=40):
    """Central finite differences vs analytic gradients, float64 inputs."""
    loss = func()
    loss.backward()
    grads = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    rng = np.random.default_rng(99)
    for t, g in zip(tensors, grads):
        flat = t.data.reshape(-1)
        n = flat.size
        idxs = rng.choice(n, size=min(n, max_entries), replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            up = func().item()
            flat[i] = orig - h
            dn = func().item()
            flat[i] = orig
            num = (up - dn) / (2 * h)
            ana = g.reshape(-1)[i]
            denom = max(abs(num), abs(ana), 1.0)
            assert abs(num - ana) / denom < tol, f"fd={num} analytic={ana}"
    for t in tensors:
        t.zero_grad()


def leaf(rng, *shape):
    t = ad.Tensor(rng.standard_normal(shape))
    t.requires_grad = True
    return t


def test_arithmetic_broadcast():
    rng = np.random.default_rng(0)
    a = leaf(rng, 3, 4)
    b = leaf(rng, 4)
    c = leaf(rng, 3, 1)
    fd_check(lambda: ad.tsum(ad.mul(ad.add(a, b), ad.sub(a, c))), [a, b, c])
    d = ad.Tensor(rng.uniform(1.0, 2.0, (3, 4)))
    d.requires_grad = True
    fd_check(lambda: ad.tsum(ad.div(a, d)), [a, d])


def test_pointwise_ops():
    rng = np.random.default_rng(1)
    x = leaf(rng, 5, 5)
    for op in [ad.sigmoid, ad.tanh, ad.exp, ad.softplus, ad.square]:
        fd_check(lambda op=op: ad.tsum(op(x)), [x])
    # relu and clip_min away from their kinks
    y = ad.Tensor(rng.standard_normal((5, 5)) + 3.0)
    y.requires_grad = True
    fd_check(lambda: ad.tsum(ad.relu(y)), [y])
    fd_check(lambda: ad.tsum(ad.clip_min(y, 0.5)), [y])
    z = ad.Tensor(rng.uniform(0.5, 2.0, (4, 4)))
    z.requires_grad = True
    fd_check(lambda: ad.tsum(ad.log(z)), [z])


def test_matmul_and_reshape():
    rng = np.random.default_rng(2)
    a = leaf(rng, 3, 5)
    b = leaf(rng, 5, 2)
    fd_check(lambda: ad.tsum(ad.square(ad.matmul(a, b))), [a, b])
    fd_check(lambda: ad.tsum(ad.square(ad.reshape(a, (5, 3)))), [a])


def test_reductions():
    rng = np.random.default_rng(3)
    x = leaf(rng, 2, 3, 4, 4)
    fd_check(lambda: ad.tsum(ad.square(ad.tsum(x, axis=(-2, -1), keepdims=True))), [x])
    fd_check(lambda: ad.tsum(ad.square(ad.tmean(x, axis=(2, 3)))), [x])
    fd_check(lambda: ad.tmean(ad.square(x)), [x])


def test_max_spatial_away_from_ties():
    rng = np.random.default_rng(4)
    x = leaf(rng, 2, 3, 5, 5)
    fd_check(lambda: ad.tsum(ad.square(ad.max_spatial(x))), [x], h=1e-7)
    fd_check(lambda: ad.tsum(ad.square(ad.max_spatial(x, keepdims=True))), [x], h=1e-7)


def test_concat_narrow_upsample():
    rng = np.random.default_rng(5)
    a = leaf(rng, 2, 3, 4, 4)
    b = leaf(rng, 2, 2, 4, 4)
    fd_check(lambda: ad.tsum(ad.square(ad.concat([a, b], axis=1))), [a, b])
    fd_check(lambda: ad.tsum(ad.square(ad.narrow(a, 1, 1, 2))), [a])
    fd_check(lambda: ad.tsum(ad.square(ad.upsample2x(a))), [a])


@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d(stride):
    rng = np.random.default_rng(6)
    x = leaf(rng, 2, 3, 8, 8)
    w = leaf(rng, 4, 3, 3, 3)
    b = leaf(rng, 4)
    fd_check(lambda: ad.tsum(ad.square(ad.conv2d(x, w, b, stride=stride, pad=1))), [x, w, b])


def test_spatial_softmax_grad_and_normalization():
    rng = np.random.default_rng(7)
    x = leaf(rng, 2, 3, 6, 6)
    probs = ad.spatial_softmax(x)
    sums = probs.data.sum(axis=(-2, -1))
    assert np.allclose(sums, 1.0, atol=1e-12)
    tgt = np.zeros((2, 3, 6, 6))
    tgt[:, :, 2, 3] = 1.0
    fd_check(
        lambda: ad.tsum(ad.mul(ad.log(ad.clip_min(ad.spatial_softmax(x), 1e-12)), ad.Tensor(tgt))),
        [x],
    )


def test_straight_through_snap_is_identity_gradient():
    rng = np.random.default_rng(8)
    x = leaf(rng, 4, 2)
    snapped = np.round(x.data * 4) / 4
    y = ad.straight_through_snap(x, snapped)
    assert np.allclose(y.data, snapped)
    loss = ad.tsum(ad.square(y))
    loss.backward()
    # d/dx sum((x + const)^2) = 2 * (x + const) = 2 * snapped
    assert np.allclose(x.grad, 2 * snapped)


def test_no_grad_builds_no_tape():
    rng = np.random.default_rng(9)
    x = leaf(rng, 3, 3)
    with ad.no_grad():
        y = ad.tsum(ad.sigmoid(x))
    assert y._parents == ()
    assert y._backward is None


def test_backward_requires_scalar():
    x = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ValueError):
        ad.add(x, x).backward()


def test_grad_accumulates_across_reuse():
    x = ad.Tensor(np.array(3.0), requires_grad=True)
    y = ad.add(ad.mul(x, x), ad.mul(2.0, x))
    y.backward()
    assert np.isclose(x.grad, 2 * 3.0 + 2.0)
