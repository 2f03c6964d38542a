"""Reverse-mode building blocks for the outcome model.

Every primitive comes as a ``*_forward`` returning ``(output, cache)`` and a
``*_backward`` mapping the upstream gradient and the cache to gradients of the
inputs (vector-Jacobian products). The model composes them by hand, so the
backward pass is an explicit reverse sweep over the same sequence of calls.

Conventions: everything is float64; matrices are 2-D with samples in rows;
affine maps are ``x @ W + b`` with ``W`` shaped ``(in, out)`` and ``b`` a
``(1, out)`` row.

GRU gate layout (columns of the stacked ``(in, 3h)`` / ``(h, 3h)`` weights and
the ``(1, 3h)`` bias) is ``[update z | reset r | candidate n]``::

    z = sigmoid(x Wx_z + h Wh_z + b_z)
    r = sigmoid(x Wx_r + h Wh_r + b_r)
    n = tanh(x Wx_n + (r * h) Wh_n + b_n)
    h' = (1 - z) * h + z * n
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """A NaN or Inf reached a place where only finite values are allowed."""


def check_finite(a: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return a


def as_tensor2(a, name: str = "tensor") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    return check_finite(arr, name)


# ---------------------------------------------------------------- affine


def affine_forward(x, W, b):
    if x.shape[-1] != W.shape[0] or b.shape[-1] != W.shape[1]:
        raise ValueError(
            f"affine shape mismatch: x{x.shape} W{W.shape} b{b.shape}"
        )
    return x @ W + b, (x, W)


def affine_backward(dy, cache):
    """Return ``(dx, dW, db)``; leading batch axes of ``x`` are summed out."""
    x, W = cache
    dx = dy @ W.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dx, x2.T @ dy2, dy2.sum(axis=0, keepdims=True)


# ---------------------------------------------------------------- activations


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_ACTIVATIONS = ("relu", "tanh", "sigmoid")


def activation_forward(x, kind: str):
    if kind == "relu":
        y = np.maximum(x, 0.0)
    elif kind == "tanh":
        y = np.tanh(x)
    elif kind == "sigmoid":
        y = sigmoid(x)
    else:
        raise ValueError(f"unknown activation {kind!r}; expected one of {_ACTIVATIONS}")
    return y, (kind, x, y)


def activation_backward(dy, cache):
    kind, x, y = cache
    if kind == "relu":
        return dy * (x > 0)
    if kind == "tanh":
        return dy * (1.0 - y * y)
    return dy * y * (1.0 - y)


# ---------------------------------------------------------------- losses


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy on raw logits and its gradient.

    Uses ``max(z, 0) - z*y + log1p(exp(-|z|))`` so large logits stay finite.
    """
    z = np.asarray(logits, dtype=np.float64).ravel()
    y = np.asarray(targets, dtype=np.float64).ravel()
    losses = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    grad = (sigmoid(z) - y) / z.size
    return float(losses.mean()), grad.reshape(np.shape(logits))


def log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def softmax_ce(logits, classes):
    """Mean softmax cross-entropy over rows and its gradient w.r.t. ``logits``."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    classes = np.atleast_1d(np.asarray(classes, dtype=np.int64))
    n, k = logits.shape
    if classes.shape != (n,):
        raise ValueError("one class id per row is required")
    if classes.min() < 0 or classes.max() >= k:
        raise ValueError(f"class id out of range [0, {k})")
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, classes].mean()
    grad = np.exp(logp)
    grad[rows, classes] -= 1.0
    return float(loss), grad / n


# ---------------------------------------------------------------- concat


def concat_forward(parts: Sequence[np.ndarray]):
    return np.concatenate(parts, axis=-1), [p.shape[-1] for p in parts]


def concat_backward(dy, widths):
    return np.split(dy, np.cumsum(widths)[:-1], axis=-1)


# ---------------------------------------------------------------- GRU cell


def gru_cell_forward(x, h_prev, Wx, Wh, b):
    """One GRU step on a batch of rows."""
    hs = h_prev.shape[-1]
    if Wx.shape != (x.shape[-1], 3 * hs) or Wh.shape != (hs, 3 * hs) or b.shape[-1] != 3 * hs:
        raise ValueError(
            f"GRU shape mismatch: x{x.shape} h{h_prev.shape} Wx{Wx.shape} Wh{Wh.shape} b{b.shape}"
        )
    xp = x @ Wx + b
    hp = h_prev @ Wh[:, : 2 * hs]
    z = sigmoid(xp[:, :hs] + hp[:, :hs])
    r = sigmoid(xp[:, hs : 2 * hs] + hp[:, hs:])
    rh = r * h_prev
    n = np.tanh(xp[:, 2 * hs :] + rh @ Wh[:, 2 * hs :])
    h_next = (1.0 - z) * h_prev + z * n
    return h_next, (x, h_prev, Wx, Wh, z, r, n, rh)


def gru_cell_backward(dh_next, cache):
    """Return ``(dx, dh_prev, dWx, dWh, db)``."""
    x, h_prev, Wx, Wh, z, r, n, rh = cache
    hs = h_prev.shape[-1]
    dz = dh_next * (n - h_prev)
    dn = dh_next * z
    dh_prev = dh_next * (1.0 - z)
    dan = dn * (1.0 - n * n)
    drh = dan @ Wh[:, 2 * hs :].T
    dr = drh * h_prev
    dh_prev = dh_prev + drh * r
    daz = dz * z * (1.0 - z)
    dar = dr * r * (1.0 - r)
    dgates_h = np.concatenate([daz, dar], axis=1)
    dh_prev = dh_prev + dgates_h @ Wh[:, : 2 * hs].T
    dxp = np.concatenate([daz, dar, dan], axis=1)
    dWh = np.concatenate([h_prev.T @ dgates_h, rh.T @ dan], axis=1)
    dWx = x.T @ dxp
    db = dxp.sum(axis=0, keepdims=True)
    dx = dxp @ Wx.T
    return dx, dh_prev, dWx, dWh, db


# ---------------------------------------------------------------- parameters


@dataclass(frozen=True)
class ParamVector:
    """Flat parameter state with a fixed ``(name, rows, cols)`` layout.

    Binary form: little-endian float64 values concatenated in layout order.
    """

    layout: tuple
    values: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64).ravel()
        expected = layout_size(self.layout)
        if values.size != expected:
            raise ValueError(f"layout holds {expected} values, got {values.size}")
        object.__setattr__(self, "layout", tuple(tuple(e) for e in self.layout))
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.size

    def to_bytes(self) -> bytes:
        return self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, layout, data: bytes) -> "ParamVector":
        return cls(layout, np.frombuffer(data, dtype="<f8").astype(np.float64))

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout


def layout_size(layout: Iterable) -> int:
    return sum(int(rows) * int(cols) for _, rows, cols in layout)


def flatten(params: dict) -> ParamVector:
    layout = tuple((name, *np.shape(a)) for name, a in params.items())
    for name, *shape in layout:
        if len(shape) != 2:
            raise ValueError(f"parameter {name!r} must be 2-D")
    values = np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in params.values()])
    return ParamVector(layout, values)


def unflatten(pv: ParamVector, layout=None) -> dict:
    if layout is not None and tuple(tuple(e) for e in layout) != pv.layout:
        raise ValueError("parameter layout mismatch")
    out, offset = {}, 0
    for name, rows, cols in pv.layout:
        size = rows * cols
        out[name] = pv.values[offset : offset + size].reshape(rows, cols).copy()
        offset += size
    return out


def save_checkpoint(path, pv: ParamVector) -> None:
    with open(path, "wb") as fh:
        fh.write(pv.to_bytes())


def load_checkpoint(path, layout) -> ParamVector:
    with open(path, "rb") as fh:
        return ParamVector.from_bytes(layout, fh.read())


# ---------------------------------------------------------------- optimizers


class SGD:
    kind = "sgd"

    def __init__(self, learning_rate: float = 1e-2):
        if learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        self.learning_rate = learning_rate
        self.step_count = 0

    def step(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        if params.shape != grads.shape:
            raise ValueError("params and grads must have the same shape")
        self.step_count += 1
        params -= self.learning_rate * grads
        return params


class Adam:
    kind = "adam"

    def __init__(self, learning_rate: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = None
        self.v = None

    def reset(self) -> None:
        self.step_count = 0
        self.m = self.v = None

    def step(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        """Bias-corrected Adam update, applied in place."""
        if params.shape != grads.shape:
            raise ValueError("params and grads must have the same shape")
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        elif self.m.shape != params.shape:
            raise ValueError("optimizer state does not match parameter layout")
        self.step_count += 1
        t = self.step_count
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grads
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grads * grads
        m_hat = self.m / (1.0 - self.beta1**t)
        v_hat = self.v / (1.0 - self.beta2**t)
        params -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
        return params


def make_optimizer(kind: str = "adam", learning_rate: float = 1e-3, **kwargs):
    kind = kind.lower()
    if kind == "adam":
        return Adam(learning_rate, **kwargs)
    if kind == "sgd":
        return SGD(learning_rate)
    raise ValueError(f"unknown optimizer {kind!r}")


# ---------------------------------------------------------------- checking


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray,
                       eps: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    flat = x.ravel()
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad.reshape(x.shape)


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(f: Callable[[np.ndarray], float], grad: np.ndarray, x: np.ndarray,
               eps: float = 1e-6) -> float:
    """Max relative error between ``grad`` and central differences of ``f`` at ``x``."""
    num = numerical_gradient(f, x, eps)
    return float(relative_error(np.asarray(grad).ravel(), num.ravel()).max())
