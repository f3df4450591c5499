"""Dense kernels and first-order optimizers.

All routines work on float64 numpy arrays. The activation helpers accept a
single vector or a stack of row vectors (one row per entity).
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError


def _shape_str(a) -> str:
    return "x".join(str(s) for s in np.shape(a)) or "scalar"


def affine(W: np.ndarray, x: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Return ``W x + b``; ``x`` may be a vector or an (n, cols) row stack."""
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim != 2 or x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(
            f"affine: W is {_shape_str(W)}, x is {_shape_str(x)}, b is {_shape_str(b)}"
        )
    return x @ W.T + b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # exp overflow for very negative x yields 1/inf = 0, the correctly rounded limit
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def softmax(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, stabilized by max subtraction."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability ``rate``, else ``1/(1-rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def glorot_init(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise ShapeError(f"glorot_init needs positive dims, got {rows}x{cols}")
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


def _check_grads(params: dict, grads: dict) -> None:
    for k, p in params.items():
        if k not in grads:
            raise ShapeError(f"missing gradient for parameter {k!r}")
        if grads[k].shape != p.shape:
            raise ShapeError(
                f"gradient for {k!r} is {_shape_str(grads[k])}, parameter is {_shape_str(p)}"
            )


class Adam:
    kind = "adam"

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        _check_grads(params, grads)
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class RMSprop:
    kind = "rmsprop"

    def __init__(self, lr=1e-3, rho=0.9, eps=1e-8):
        self.lr = lr
        self.rho = rho
        self.eps = eps
        self.t = 0
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        _check_grads(params, grads)
        self.t += 1
        for k, p in params.items():
            g = grads[k]
            if k not in self.v:
                self.v[k] = np.zeros_like(p)
            v = self.v[k]
            v *= self.rho
            v += (1.0 - self.rho) * (g * g)
            p -= self.lr * g / (np.sqrt(v) + self.eps)


def make_optimizer(kind: str, lr=1e-3, beta1=0.9, beta2=0.999, rho=0.9, eps=1e-8):
    kind = kind.lower()
    if kind == "adam":
        return Adam(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    if kind == "rmsprop":
        return RMSprop(lr=lr, rho=rho, eps=eps)
    raise ConfigError(f"unknown optimizer {kind!r} (expected adam or rmsprop)")


def optimizer_step(state, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
    """Apply one in-place update and return ``params`` for chaining."""
    state.step(params, grads)
    return params
