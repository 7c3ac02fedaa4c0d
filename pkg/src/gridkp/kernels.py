"""2D convolution kernels: numba-jitted loops and an im2col/BLAS numpy path.

The backend is selected once at import from the ``GRIDKP_BACKEND`` environment
variable (``numba`` or ``numpy``, default ``numpy``); :func:`set_backend`
switches at runtime (used by the benchmark and tests). ``python -m
gridkp.bench`` compares both on the shapes the models use.

Both backends compute identical quantities and both are deterministic: every
output element is written by exactly one thread with a fixed accumulation
order. The numba kernels keep inner loops contiguous (stride-2 convolutions
go through column-parity copies) so LLVM can vectorize them.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
    from numba import njit, prange

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap

    prange = range


def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _pad2d(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


# ---------------------------------------------------------------------------
# numpy backend: im2col + one BLAS matmul per direction
# ---------------------------------------------------------------------------

def _im2col(xp, kh, kw, stride, Ho, Wo):
    """Padded [B, Ci, Hp, Wp] -> contiguous [B, Ho, Wo, Ci, kh, kw]."""
    v = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    v = v[:, :, ::stride, ::stride]
    return np.ascontiguousarray(v.transpose(0, 2, 3, 1, 4, 5))


def _conv2d_forward_np(x, w, b, stride, pad):
    B, Ci, H, W = x.shape
    Co, _, kh, kw = w.shape
    Ho, Wo = _out_size(H, kh, stride, pad), _out_size(W, kw, stride, pad)
    cols = _im2col(_pad2d(x, pad), kh, kw, stride, Ho, Wo).reshape(B * Ho * Wo, -1)
    y = cols @ w.reshape(Co, -1).T
    y += b
    return np.ascontiguousarray(y.reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2))


def _conv2d_grad_input_np(dy, w, stride, pad, H, W):
    B, Co, Ho, Wo = dy.shape
    _, Ci, kh, kw = w.shape
    dyf = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(-1, Co)
    dcols = (dyf @ w.reshape(Co, -1)).reshape(B, Ho, Wo, Ci, kh, kw)
    dxp = np.zeros((B, Ci, H + 2 * pad, W + 2 * pad), dy.dtype)
    for di in range(kh):
        for dj in range(kw):
            dxp[:, :, di : di + (Ho - 1) * stride + 1 : stride,
                dj : dj + (Wo - 1) * stride + 1 : stride] += \
                dcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    if pad:
        return np.ascontiguousarray(dxp[:, :, pad:-pad, pad:-pad])
    return dxp


def _conv2d_grad_weights_np(x, dy, stride, pad, kh, kw):
    B, Ci, H, W = x.shape
    _, Co, Ho, Wo = dy.shape
    cols = _im2col(_pad2d(x, pad), kh, kw, stride, Ho, Wo).reshape(B * Ho * Wo, -1)
    dyf = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(-1, Co)
    dw = (dyf.T @ cols).reshape(Co, Ci, kh, kw)
    db = dy.sum(axis=(0, 2, 3))
    return dw, db


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

@njit(parallel=True, cache=True)
def _fwd_nb(xp, w, b, stride, Ho, Wo):
    B, Ci, Hp, Wp = xp.shape
    Co, _, kh, kw = w.shape
    y = np.empty((B, Co, Ho, Wo), xp.dtype)
    # column-parity copies make the stride-2 inner loop contiguous
    use_parity = stride == 2
    if use_parity:
        xe = np.ascontiguousarray(xp[:, :, :, 0::2])
        xo = np.ascontiguousarray(xp[:, :, :, 1::2])
    else:
        xe = xp
        xo = xp
    for idx in prange(B * Co):
        bi = idx // Co
        co = idx % Co
        out = y[bi, co]
        out[:, :] = b[co]
        for ci in range(Ci):
            for di in range(kh):
                for dj in range(kw):
                    wv = w[co, ci, di, dj]
                    if use_parity:
                        xc = xe[bi, ci] if dj % 2 == 0 else xo[bi, ci]
                        base = dj // 2
                        for oi in range(Ho):
                            xrow = xc[oi * 2 + di]
                            orow = out[oi]
                            for oj in range(Wo):
                                orow[oj] += wv * xrow[base + oj]
                    else:
                        xc = xp[bi, ci]
                        for oi in range(Ho):
                            xrow = xc[oi + di]
                            orow = out[oi]
                            for oj in range(Wo):
                                orow[oj] += wv * xrow[dj + oj]
    return y


@njit(parallel=True, cache=True)
def _grad_input_nb(dy, w, stride, Hp, Wp):
    B, Co, Ho, Wo = dy.shape
    _, Ci, kh, kw = w.shape
    dxp = np.zeros((B, Ci, Hp, Wp), dy.dtype)
    use_parity = stride == 2
    Wh = (Wp + 1) // 2
    for idx in prange(B * Ci):
        bi = idx // Ci
        ci = idx % Ci
        if use_parity:
            de = np.zeros((Hp, Wh), dy.dtype)
            do = np.zeros((Hp, Wh), dy.dtype)
            for co in range(Co):
                dyc = dy[bi, co]
                for di in range(kh):
                    for dj in range(kw):
                        wv = w[co, ci, di, dj]
                        dst = de if dj % 2 == 0 else do
                        base = dj // 2
                        for oi in range(Ho):
                            drow = dst[oi * 2 + di]
                            dyrow = dyc[oi]
                            for oj in range(Wo):
                                drow[base + oj] += wv * dyrow[oj]
            dxc = dxp[bi, ci]
            for ii in range(Hp):
                for jj in range(Wh):
                    dxc[ii, 2 * jj] = de[ii, jj]
                    if 2 * jj + 1 < Wp:
                        dxc[ii, 2 * jj + 1] = do[ii, jj]
        else:
            dxc = dxp[bi, ci]
            for co in range(Co):
                dyc = dy[bi, co]
                for di in range(kh):
                    for dj in range(kw):
                        wv = w[co, ci, di, dj]
                        for oi in range(Ho):
                            drow = dxc[oi + di]
                            dyrow = dyc[oi]
                            for oj in range(Wo):
                                drow[dj + oj] += wv * dyrow[oj]
    return dxp


@njit(parallel=True, cache=True)
def _grad_weights_nb(xp, dy, stride, kh, kw):
    B, Ci, Hp, Wp = xp.shape
    _, Co, Ho, Wo = dy.shape
    dw = np.empty((Co, Ci, kh, kw), xp.dtype)
    db = np.zeros(Co, xp.dtype)
    use_parity = stride == 2
    if use_parity:
        xe = np.ascontiguousarray(xp[:, :, :, 0::2])
        xo = np.ascontiguousarray(xp[:, :, :, 1::2])
    else:
        xe = xp
        xo = xp
    for co in prange(Co):
        acc_b = 0.0
        for bi in range(B):
            dyc = dy[bi, co]
            for oi in range(Ho):
                for oj in range(Wo):
                    acc_b += dyc[oi, oj]
        db[co] = acc_b
        for ci in range(Ci):
            for di in range(kh):
                for dj in range(kw):
                    acc = 0.0
                    for bi in range(B):
                        dyc = dy[bi, co]
                        if use_parity:
                            xc = xe[bi, ci] if dj % 2 == 0 else xo[bi, ci]
                            base = dj // 2
                            for oi in range(Ho):
                                xrow = xc[oi * 2 + di]
                                dyrow = dyc[oi]
                                for oj in range(Wo):
                                    acc += dyrow[oj] * xrow[base + oj]
                        else:
                            xc = xp[bi, ci]
                            for oi in range(Ho):
                                xrow = xc[oi + di]
                                dyrow = dyc[oi]
                                for oj in range(Wo):
                                    acc += dyrow[oj] * xrow[dj + oj]
                    dw[co, ci, di, dj] = acc
    return dw, db


def _conv2d_forward_numba(x, w, b, stride, pad):
    B, Ci, H, W = x.shape
    Co, _, kh, kw = w.shape
    Ho, Wo = _out_size(H, kh, stride, pad), _out_size(W, kw, stride, pad)
    return _fwd_nb(_pad2d(x, pad), w, b, stride, Ho, Wo)


def _conv2d_grad_input_numba(dy, w, stride, pad, H, W):
    dxp = _grad_input_nb(np.ascontiguousarray(dy), w, stride, H + 2 * pad, W + 2 * pad)
    if pad:
        return np.ascontiguousarray(dxp[:, :, pad:-pad, pad:-pad])
    return dxp


def _conv2d_grad_weights_numba(x, dy, stride, pad, kh, kw):
    dw, db = _grad_weights_nb(_pad2d(x, pad), np.ascontiguousarray(dy), stride, kh, kw)
    return dw, db.astype(x.dtype)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

_IMPLS = {
    "numpy": (_conv2d_forward_np, _conv2d_grad_input_np, _conv2d_grad_weights_np),
}
if HAS_NUMBA:
    _IMPLS["numba"] = (
        _conv2d_forward_numba,
        _conv2d_grad_input_numba,
        _conv2d_grad_weights_numba,
    )

_backend = "numpy"


def set_backend(name: str) -> None:
    if name not in _IMPLS:
        available = ", ".join(sorted(_IMPLS))
        raise ValueError(f"unknown backend {name!r} (available: {available})")
    global _backend
    _backend = name


def get_backend() -> str:
    return _backend


def available_backends() -> list[str]:
    return sorted(_IMPLS)


def conv2d_forward(x, w, b, stride=1, pad=1):
    """y[b,o] = bias[o] + sum_{c,di,dj} w[o,c,di,dj] * x_padded[b,c,...]."""
    if stride == 2 and x.shape[-1] % 2:
        return _conv2d_forward_np(x, w, b, stride, pad)
    return _IMPLS[_backend][0](x, w, b, stride, pad)


def conv2d_grad_input(dy, w, stride, pad, H, W):
    """Gradient of the forward output w.r.t. the (unpadded) input."""
    if stride == 2 and W % 2:
        return _conv2d_grad_input_np(dy, w, stride, pad, H, W)
    return _IMPLS[_backend][1](dy, w, stride, pad, H, W)


def conv2d_grad_weights(x, dy, stride, pad, kh, kw):
    """Gradients of the forward output w.r.t. the kernel and bias."""
    if stride == 2 and x.shape[-1] % 2:
        return _conv2d_grad_weights_np(x, dy, stride, pad, kh, kw)
    return _IMPLS[_backend][2](x, dy, stride, pad, kh, kw)


def _init_backend() -> None:
    # numpy is the default: on typical 2-4 core hosts BLAS wins the
    # channel-heavy convLSTM shapes by ~10x (see gridkp.bench), while the
    # numba loops only break even on large-spatial thin-channel convs.
    choice = os.environ.get("GRIDKP_BACKEND", "").strip().lower()
    set_backend(choice if choice else "numpy")


_init_backend()
