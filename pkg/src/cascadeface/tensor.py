"""Dense tensors and the five layer kinds the cascade networks are built from.

Layers work on batches: feature maps are ``(N, C, H, W)``, vectors ``(N, D)``.
Each layer caches what it needs during ``forward`` and returns the gradient
with respect to its input from ``backward``; parameter gradients accumulate
into the owning :class:`Tensor`.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when a tensor does not fit the layer it is fed to."""


class Tensor:
    """A named value array with an optional gradient of the same shape."""

    def __init__(self, value: np.ndarray, name: str = "", requires_grad: bool = True):
        self.value = np.ascontiguousarray(value)
        self.name = name
        self.grad = np.zeros_like(self.value) if requires_grad else None

    @property
    def dims(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def astype(self, dtype) -> None:
        self.value = self.value.astype(dtype)
        if self.grad is not None:
            self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Tensor({self.name!r}, dims={self.dims}, dtype={self.value.dtype})"


class Layer:
    kind = "Layer"

    def parameters(self) -> list[Tensor]:
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)


class Conv(Layer):
    """Valid cross-correlation with stride 1 and a per-channel bias."""

    kind = "Conv"

    def __init__(self, in_channels: int, out_channels: int, kernel: int | tuple[int, int],
                 rng: np.random.Generator | None = None, std: float | None = None,
                 name: str = "conv"):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kh, self.kw = kh, kw
        if std is None:
            std = math.sqrt(2.0 / (in_channels * kh * kw))
        rng = rng or np.random.default_rng(0)
        w = rng.normal(0.0, std, size=(out_channels, in_channels, kh, kw))
        self.weight = Tensor(w.astype(np.float32), f"{name}.weight")
        self.bias = Tensor(np.zeros(out_channels, np.float32), f"{name}.bias")
        self._cols = None
        self._in_shape = None

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"{self.weight.name}: expected (N, {self.in_channels}, H, W) input, got {x.shape}")
        n, c, h, w = x.shape
        if h < self.kh or w < self.kw:
            raise ShapeError(
                f"{self.weight.name}: input {h}x{w} smaller than kernel {self.kh}x{self.kw}")
        # (N, C, Ho, Wo, kh, kw) -> (N, Ho, Wo, C, kh, kw)
        win = sliding_window_view(x, (self.kh, self.kw), axis=(2, 3))
        ho, wo = win.shape[2], win.shape[3]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * self.kh * self.kw)
        self._cols = cols
        self._in_shape = x.shape
        wmat = self.weight.value.reshape(self.out_channels, -1)
        out = cols @ wmat.T + self.bias.value
        return np.ascontiguousarray(out.reshape(n, ho, wo, self.out_channels).transpose(0, 3, 1, 2))

    def backward(self, grad, need_input_grad: bool = True):
        n, c, h, w = self._in_shape
        ho, wo = h - self.kh + 1, w - self.kw + 1
        g = grad.transpose(0, 2, 3, 1).reshape(n * ho * wo, self.out_channels)
        if self.weight.grad is not None:
            self.weight.grad += (g.T @ self._cols).reshape(self.weight.value.shape)
            self.bias.grad += g.sum(axis=0)
        if not need_input_grad:
            return None
        wmat = self.weight.value.reshape(self.out_channels, -1)
        # (C, kh, kw, N, Ho, Wo): each tap is a contiguous (C, N, Ho, Wo) block
        gcols = (wmat.T @ g.T).reshape(c, self.kh, self.kw, n, ho, wo)
        dx = np.zeros((c, n, h, w), dtype=grad.dtype)
        for i in range(self.kh):
            for j in range(self.kw):
                dx[:, :, i:i + ho, j:j + wo] += gcols[:, i, j]
        return np.ascontiguousarray(dx.transpose(1, 0, 2, 3))


def pool_output_size(size: int, kernel: int, stride: int = 2) -> int:
    """Ceil-mode pooled extent: trailing partial windows are kept."""
    return -(-(size - kernel) // stride) + 1


class MaxPool(Layer):
    """Max pooling, stride 2, ceil mode; ties go to the first cell in row-major order."""

    kind = "MaxPool"

    def __init__(self, kernel: int, stride: int = 2):
        self.k = kernel
        self.stride = stride
        self._argmax = None
        self._in_shape = None

    def forward(self, x):
        n, c, h, w = x.shape
        if h < self.k or w < self.k:
            raise ShapeError(f"MaxPool{self.k}: input {h}x{w} smaller than kernel")
        s, k = self.stride, self.k
        ho, wo = pool_output_size(h, k, s), pool_output_size(w, k, s)
        ph, pw = (ho - 1) * s + k, (wo - 1) * s + k
        if (ph, pw) != (h, w):
            padded = np.full((n, c, ph, pw), -np.inf, dtype=x.dtype)
            padded[:, :, :h, :w] = x
        else:
            padded = x
        views = [padded[:, :, di:di + s * (ho - 1) + 1:s, dj:dj + s * (wo - 1) + 1:s]
                 for di in range(k) for dj in range(k)]
        out = views[0].copy()
        for v in views[1:]:
            np.maximum(out, v, out=out)
        # walk offsets backwards so the first row-major maximum wins
        arg = np.zeros(out.shape, dtype=np.int64)
        for o in range(len(views) - 1, 0, -1):
            arg[views[o] == out] = o
        arg[views[0] == out] = 0
        self._argmax = arg
        self._in_shape = x.shape
        return out

    def backward(self, grad):
        n, c, h, w = self._in_shape
        s, k = self.stride, self.k
        ho, wo = grad.shape[2], grad.shape[3]
        ph, pw = (ho - 1) * s + k, (wo - 1) * s + k
        di, dj = np.divmod(self._argmax, k)
        rows = np.arange(ho)[:, None] * s + di
        cols = np.arange(wo)[None, :] * s + dj
        plane = (np.arange(n * c) * (ph * pw)).reshape(n, c, 1, 1)
        flat = (plane + rows * pw + cols).ravel()
        dx = np.bincount(flat, weights=grad.ravel(), minlength=n * c * ph * pw)
        return dx.reshape(n, c, ph, pw)[:, :, :h, :w].astype(grad.dtype)


class PReLU(Layer):
    """Parametric ReLU with one learnable slope per channel (axis 1)."""

    kind = "PReLU"

    def __init__(self, channels: int, init: float = 0.25, name: str = "prelu"):
        self.channels = channels
        self.slope = Tensor(np.full(channels, init, np.float32), f"{name}.slope")
        self._x = None
        self._scale = None

    def parameters(self):
        return [self.slope]

    def _bcast(self, x):
        return self.slope.value.reshape((1, -1) + (1,) * (x.ndim - 2))

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ShapeError(f"{self.slope.name}: {self.channels} slopes for {x.shape[1]} channels")
        self._x = x
        self._scale = np.where(x > 0, np.ones((), x.dtype), self._bcast(x))
        return x * self._scale

    def backward(self, grad):
        x = self._x
        if self.slope.grad is not None:
            xneg = np.minimum(x, 0)
            if x.ndim == 4:
                self.slope.grad += np.einsum("nchw,nchw->c", xneg, grad)
            else:
                self.slope.grad += np.einsum("nc,nc->c", xneg, grad)
        return grad * self._scale


class FullyConnected(Layer):
    """Affine map ``W x + b``; flattens feature maps on entry."""

    kind = "FullyConnected"

    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None, std: float | None = None,
                 name: str = "fc"):
        if std is None:
            std = math.sqrt(2.0 / in_features)
        rng = rng or np.random.default_rng(0)
        w = rng.normal(0.0, std, size=(out_features, in_features))
        self.in_features, self.out_features = in_features, out_features
        self.weight = Tensor(w.astype(np.float32), f"{name}.weight")
        self.bias = Tensor(np.zeros(out_features, np.float32), f"{name}.bias")
        self._x = None
        self._in_shape = None

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x):
        self._in_shape = x.shape
        x = x.reshape(x.shape[0], -1)
        if x.shape[1] != self.in_features:
            raise ShapeError(
                f"{self.weight.name}: expected {self.in_features} inputs, got {x.shape[1]}")
        self._x = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, grad):
        if self.weight.grad is not None:
            self.weight.grad += grad.T @ self._x
            self.bias.grad += grad.sum(axis=0)
        return (grad @ self.weight.value).reshape(self._in_shape)


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class Softmax(Layer):
    kind = "Softmax"

    def __init__(self, axis: int = 1):
        self.axis = axis
        self._p = None

    def forward(self, x):
        if x.shape[self.axis] < 2:
            raise ShapeError("softmax needs at least two logits")
        self._p = softmax(x, self.axis)
        return self._p

    def backward(self, grad):
        p = self._p
        return p * (grad - (grad * p).sum(axis=self.axis, keepdims=True))


def grad_norm(params: Iterable[Tensor]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params))


def sgd_step(params: Iterable[Tensor], lr: float, max_norm: float | None = None) -> float:
    """Plain SGD update ``w <- w - lr * grad``; gradients are zeroed afterwards.

    With ``max_norm`` the step uses ``grad * min(1, max_norm / |grad|)``, the
    norm taken over all parameters jointly. Returns the unclipped norm.
    """
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            bad = int(np.size(p.grad) - np.count_nonzero(np.isfinite(p.grad)))
            raise FloatingPointError(f"non-finite gradient in {p.name}: {bad} bad entries")
    norm = grad_norm(params)
    scale = lr
    if max_norm is not None and norm > max_norm:
        scale = lr * max_norm / norm
    for p in params:
        p.value -= np.asarray(scale, dtype=p.value.dtype) * p.grad
        p.zero_grad()
    return norm


def finite_diff_check(loss_fn: Callable[[], float], arrays: Sequence[np.ndarray],
                      grads: Sequence[np.ndarray], step: float = 1e-5,
                      floor: float = 1e-3, kink_tol: float = 2e-6,
                      max_entries: int | None = None,
                      rng: np.random.Generator | None = None) -> float:
    """Worst relative error between analytic ``grads`` and central differences.

    ``loss_fn`` re-evaluates the scalar loss reading ``arrays`` in place, so
    each array must be the live storage the loss reads (64-bit). Relative
    error is ``|a - n| / max(|a|, |n|, floor)`` with ``n`` the central
    difference at half ``step``.

    Coordinates within one step of a PReLU kink or a max-pool tie are
    skipped. For a smooth loss the central differences at ``step`` and
    ``step / 2`` agree to second order, and the forward/backward gap halves
    with the step; a kink inside the step breaks one of the two, measured
    against ``kink_tol`` on the same relative scale. ``max_entries``
    subsamples coordinates per array.
    """
    worst = 0.0
    f0 = loss_fn()
    for arr, grad in zip(arrays, grads):
        if arr.dtype != np.float64:
            raise TypeError("finite_diff_check runs in 64-bit only")
        flat = arr.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            diffs = []
            for h in (step, step / 2):
                flat[i] = orig + h
                fp = loss_fn()
                flat[i] = orig - h
                fm = loss_fn()
                diffs.append(((fp - fm) / (2 * h), (fp - f0) / h - (f0 - fm) / h))
            flat[i] = orig
            (c1, gap1), (c2, gap2) = diffs
            scale = max(abs(c1), abs(c2), floor)
            if abs(c1 - c2) > kink_tol * scale or abs(gap1 - 2 * gap2) > kink_tol * scale:
                continue
            ana = float(gflat[i])
            err = abs(ana - c2) / max(abs(ana), abs(c2), floor)
            worst = max(worst, err)
    return worst
