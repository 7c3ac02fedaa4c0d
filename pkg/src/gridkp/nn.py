"""Layers, parameter handling, and the Adam optimizer.

Layers hold :class:`~gridkp.autodiff.Tensor` parameters and are plain
callables on tensors. Parameter collection walks attributes recursively and
yields stable dotted names, which is what the checkpoint format stores.
"""
from __future__ import annotations

import numpy as np

from gridkp import autodiff as ad
from gridkp.autodiff import Tensor


class Module:
    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out[prefix + name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(prefix + name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{prefix}{name}.{i}."))
        return out

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint is missing parameters: {sorted(missing)[:4]}...")
        for k, p in params.items():
            a = np.asarray(arrays[k], dtype=p.data.dtype)
            if a.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {k}: {a.shape} vs {p.data.shape}")
            p.data = a.copy()


def _param(data: np.ndarray) -> Tensor:
    t = Tensor(data)
    t.requires_grad = True
    return t


class Conv2d(Module):
    def __init__(self, cin, cout, rng, k=3, stride=1, pad=1, zero_init=False, dtype=np.float32):
        self.stride = stride
        self.pad = pad
        if zero_init:
            w = np.zeros((cout, cin, k, k), dtype=dtype)
        else:
            std = np.sqrt(2.0 / (cin * k * k))
            w = (rng.standard_normal((cout, cin, k, k)) * std).astype(dtype)
        self.w = _param(w)
        self.b = _param(np.zeros(cout, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class Dense(Module):
    def __init__(self, nin, nout, rng, zero_init=False, dtype=np.float32):
        if zero_init:
            w = np.zeros((nin, nout), dtype=dtype)
        else:
            std = np.sqrt(2.0 / nin)
            w = (rng.standard_normal((nin, nout)) * std).astype(dtype)
        self.w = _param(w)
        self.b = _param(np.zeros(nout, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)


class ConvLSTMCell(Module):
    """Convolutional LSTM cell, gate order (input, forget, output, candidate)."""

    def __init__(self, cin, hidden, rng, dtype=np.float32):
        self.hidden = hidden
        self.gates = Conv2d(cin + hidden, 4 * hidden, rng, dtype=dtype)
        # forget-gate bias starts at 1 so early training keeps its memory
        self.gates.b.data[hidden : 2 * hidden] = 1.0

    def __call__(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        z = self.gates(ad.concat([x, h], axis=1))
        n = self.hidden
        i = ad.sigmoid(ad.narrow(z, 1, 0, n))
        f = ad.sigmoid(ad.narrow(z, 1, n, n))
        o = ad.sigmoid(ad.narrow(z, 1, 2 * n, n))
        g = ad.tanh(ad.narrow(z, 1, 3 * n, n))
        c2 = ad.add(ad.mul(f, c), ad.mul(i, g))
        h2 = ad.mul(o, ad.tanh(c2))
        return h2, c2


class LSTMCell(Module):
    """Dense LSTM cell for 1D state vectors, same gate order as ConvLSTMCell."""

    def __init__(self, nin, hidden, rng, dtype=np.float32):
        self.hidden = hidden
        self.gates = Dense(nin + hidden, 4 * hidden, rng, dtype=dtype)
        self.gates.b.data[hidden : 2 * hidden] = 1.0

    def __call__(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        z = self.gates(ad.concat([x, h], axis=1))
        n = self.hidden
        i = ad.sigmoid(ad.narrow(z, 1, 0, n))
        f = ad.sigmoid(ad.narrow(z, 1, n, n))
        o = ad.sigmoid(ad.narrow(z, 1, 2 * n, n))
        g = ad.tanh(ad.narrow(z, 1, 3 * n, n))
        c2 = ad.add(ad.mul(f, c), ad.mul(i, g))
        h2 = ad.mul(o, ad.tanh(c2))
        return h2, c2


class Adam:
    def __init__(self, params: dict[str, Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = float(lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def state_dict(self) -> dict:
        out = {"t": self.t, "lr": self.lr}
        for k in self.params:
            out[f"m.{k}"] = self.m[k].copy()
            out[f"v.{k}"] = self.v[k].copy()
        return out

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.lr = float(state["lr"])
        for k in self.params:
            self.m[k] = np.asarray(state[f"m.{k}"]).astype(self.m[k].dtype)
            self.v[k] = np.asarray(state[f"v.{k}"]).astype(self.v[k].dtype)


class PlateauDecay:
    """Multiply the learning rate by ``factor`` when a tracked loss stalls."""

    def __init__(self, optimizer: Adam, factor: float, patience: int = 10, min_delta: float = 1e-5):
        self.opt = optimizer
        self.factor = float(factor)
        self.patience = patience
        self.min_delta = min_delta
        self.best = np.inf
        self.stale = 0

    def update(self, value: float) -> bool:
        if value < self.best - self.min_delta:
            self.best = value
            self.stale = 0
            return False
        self.stale += 1
        if self.stale >= self.patience:
            self.opt.lr *= self.factor
            self.stale = 0
            return True
        return False
