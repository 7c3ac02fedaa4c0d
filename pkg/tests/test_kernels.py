"""Backend parity tests: the numba kernels must match the numpy reference."""
import numpy as np
import pytest

from gridkp import kernels

pytestmark = pytest.mark.skipif(not kernels.HAS_NUMBA, reason="numba unavailable")

SHAPES = [
    # (B, Ci, Co, H, W, k, stride, pad)
    (2, 3, 5, 8, 8, 3, 1, 1),
    (2, 4, 6, 16, 16, 3, 2, 1),
    (1, 2, 3, 12, 20, 3, 1, 1),
    (3, 5, 4, 10, 14, 3, 2, 1),
    (2, 3, 4, 9, 9, 3, 1, 1),
    (1, 1, 2, 7, 7, 5, 1, 2),
]


@pytest.fixture(autouse=True)
def restore_backend():
    prev = kernels.get_backend()
    yield
    kernels.set_backend(prev)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("shape", SHAPES)
def test_forward_parity(shape, dtype):
    B, Ci, Co, H, W, k, stride, pad = shape
    rng = np.random.default_rng(0)
    x = rng.standard_normal((B, Ci, H, W)).astype(dtype)
    w = rng.standard_normal((Co, Ci, k, k)).astype(dtype)
    b = rng.standard_normal(Co).astype(dtype)
    kernels.set_backend("numpy")
    ref = kernels.conv2d_forward(x, w, b, stride, pad)
    kernels.set_backend("numba")
    out = kernels.conv2d_forward(x, w, b, stride, pad)
    tol = 1e-4 if dtype == np.float32 else 1e-10
    assert out.shape == ref.shape
    assert np.allclose(out, ref, atol=tol, rtol=tol)


@pytest.mark.parametrize("shape", SHAPES)
def test_grad_parity(shape):
    B, Ci, Co, H, W, k, stride, pad = shape
    rng = np.random.default_rng(1)
    x = rng.standard_normal((B, Ci, H, W))
    w = rng.standard_normal((Co, Ci, k, k))
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    dy = rng.standard_normal((B, Co, Ho, Wo))
    kernels.set_backend("numpy")
    dx_ref = kernels.conv2d_grad_input(dy, w, stride, pad, H, W)
    dw_ref, db_ref = kernels.conv2d_grad_weights(x, dy, stride, pad, k, k)
    kernels.set_backend("numba")
    dx = kernels.conv2d_grad_input(dy, w, stride, pad, H, W)
    dw, db = kernels.conv2d_grad_weights(x, dy, stride, pad, k, k)
    assert np.allclose(dx, dx_ref, atol=1e-10)
    assert np.allclose(dw, dw_ref, atol=1e-10)
    assert np.allclose(db, db_ref, atol=1e-10)


def test_forward_matches_direct_loops():
    """Independent O(everything) loop oracle for one small case."""
    rng = np.random.default_rng(2)
    B, Ci, Co, H, W, k, stride, pad = 1, 2, 3, 6, 5, 3, 2, 1
    x = rng.standard_normal((B, Ci, H, W))
    w = rng.standard_normal((Co, Ci, k, k))
    b = rng.standard_normal(Co)
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    expect = np.zeros((B, Co, Ho, Wo))
    for bi in range(B):
        for co in range(Co):
            for oi in range(Ho):
                for oj in range(Wo):
                    acc = b[co]
                    for ci in range(Ci):
                        for di in range(k):
                            for dj in range(k):
                                ii = oi * stride + di - pad
                                jj = oj * stride + dj - pad
                                if 0 <= ii < H and 0 <= jj < W:
                                    acc += x[bi, ci, ii, jj] * w[co, ci, di, dj]
                    expect[bi, co, oi, oj] = acc
    for backend in kernels.available_backends():
        kernels.set_backend(backend)
        out = kernels.conv2d_forward(x, w, b, stride, pad)
        assert np.allclose(out, expect, atol=1e-10), backend
