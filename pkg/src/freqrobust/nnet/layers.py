"""Layers with explicit forward/backward passes.

Activations are ``(batch, height, width, channels)`` arrays so that every
convolution reduces to one matrix product over the trailing channel axis.
Convolution weights are ``(out_ch, in_ch, kh, kw)``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# functional forms


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    out = (size + 2 * pad - k) // stride + 1
    if out < 1:
        raise ShapeError(f"kernel {k} with pad {pad} does not fit input size {size}")
    return out


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, h, w, c = x.shape
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(w, kw, stride, pad)
    if kh == 1 and kw == 1 and pad == 0:
        sub = x[:, ::stride, ::stride] if stride > 1 else x
        return np.ascontiguousarray(sub).reshape(n * ho * wo, c)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    # win: (n, ho, wo, c, kh, kw); column order matches weight.reshape(out, -1)
    return win.reshape(n * ho * wo, c * kh * kw)


def conv2d_forward(x, weight, bias=None, stride: int = 1, pad: int = 0, cols=None):
    """Cross-correlation with zero padding. Returns ``(out, cols)``."""
    n, h, w, c = x.shape
    f, cin, kh, kw = weight.shape
    if c != cin:
        raise ShapeError(f"input has {c} channels, weight expects {cin}")
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(w, kw, stride, pad)
    if cols is None:
        cols = _im2col(x, kh, kw, stride, pad)
    out = cols @ weight.reshape(f, -1).T
    if bias is not None:
        out += bias
    return out.reshape(n, ho, wo, f), cols


def conv2d_backward(x_shape, weight, grad_out, cols, stride: int = 1, pad: int = 0, need_x: bool = True):
    """Gradients ``(grad_x, grad_w, grad_b)`` of :func:`conv2d_forward`."""
    n, h, w, c = x_shape
    f, _, kh, kw = weight.shape
    _, ho, wo, fo = grad_out.shape
    if fo != f:
        raise ShapeError(f"grad_out has {fo} channels, weight produces {f}")
    g = grad_out.reshape(-1, f)
    grad_w = (g.T @ cols).reshape(weight.shape)
    grad_b = g.sum(axis=0)
    if not need_x:
        return None, grad_w, grad_b
    gcols = g @ weight.reshape(f, -1)
    if kh == 1 and kw == 1 and pad == 0:
        if stride == 1:
            return gcols.reshape(n, h, w, c), grad_w, grad_b
        grad_x = np.zeros(x_shape, dtype=grad_out.dtype)
        grad_x[:, ::stride, ::stride][:, :ho, :wo] = gcols.reshape(n, ho, wo, c)
        return grad_x, grad_w, grad_b
    gcols = gcols.reshape(n, ho, wo, c, kh, kw)
    gxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=grad_out.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[..., i, j]
    grad_x = gxp[:, pad : pad + h, pad : pad + w] if pad else gxp
    return grad_x, grad_w, grad_b


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its gradient w.r.t. ``logits``."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (batch, classes), got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


# ---------------------------------------------------------------------------
# layer objects


class Layer:
    """Base: ``params`` are learnable, ``buffers`` are state saved in checkpoints."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x, train: bool = False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def children(self) -> dict[str, Layer]:
        return {}

    def named_arrays(self, prefix: str = "", buffers: bool = True):
        for k, v in self.params.items():
            yield f"{prefix}{k}", self, k, False
        if buffers:
            for k, v in self.buffers.items():
                yield f"{prefix}{k}", self, k, True
        for name, child in self.children().items():
            yield from child.named_arrays(f"{prefix}{name}.", buffers)

    def astype(self, dtype) -> Layer:
        for k in self.params:
            self.params[k] = self.params[k].astype(dtype)
        for k in self.buffers:
            self.buffers[k] = self.buffers[k].astype(dtype)
        for child in self.children().values():
            child.astype(dtype)
        return self


class Conv2D(Layer):
    def __init__(self, cin, cout, k, stride=1, pad=0, bias=False, rng=None, dtype=np.float32):
        super().__init__()
        self.stride, self.pad = stride, pad
        rng = rng if rng is not None else np.random.default_rng(0)
        std = np.sqrt(2.0 / (cin * k * k))
        self.params["weight"] = (rng.standard_normal((cout, cin, k, k)) * std).astype(dtype)
        if bias:
            self.params["bias"] = np.zeros(cout, dtype=dtype)
        self.need_input_grad = True

    def forward(self, x, train=False):
        out, cols = conv2d_forward(x, self.params["weight"], self.params.get("bias"), self.stride, self.pad)
        self._cache = (x.shape, cols)
        return out

    def backward(self, grad):
        shape, cols = self._cache
        gx, gw, gb = conv2d_backward(
            shape, self.params["weight"], grad, cols, self.stride, self.pad, self.need_input_grad
        )
        self.grads["weight"] = gw
        if "bias" in self.params:
            self.grads["bias"] = gb
        self._cache = None
        return gx


class BatchNorm(Layer):
    """Per-channel batch normalization over batch, height and width."""

    def __init__(self, c, dtype=np.float32):
        super().__init__()
        self.params["scale"] = np.ones(c, dtype=dtype)
        self.params["shift"] = np.zeros(c, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(c, dtype=dtype)
        self.buffers["running_var"] = np.ones(c, dtype=dtype)

    # Arrays are viewed as (batch, H*W*C) rows and per-channel vectors tiled
    # to row length: numpy loops are slow over a short trailing channel axis.

    @staticmethod
    def _rows(x):
        return x.reshape(x.shape[0], -1), x[0].size // x.shape[-1]

    @staticmethod
    def _per_channel(row_sum, reps):
        return row_sum.reshape(reps, -1).sum(axis=0)

    def forward(self, x, train=False):
        scale, shift = self.params["scale"], self.params["shift"]
        x2, reps = self._rows(x)
        if not train:
            inv = 1.0 / np.sqrt(self.buffers["running_var"] + BN_EPS)
            k = (inv * scale).astype(x.dtype)
            b = (shift - self.buffers["running_mean"] * k).astype(x.dtype)
            out = x2 * np.tile(k, reps)
            out += np.tile(b, reps)
            self._cache = ("eval", x2, reps)
            return out.reshape(x.shape)
        if x.shape[0] < 2:
            raise ValueError("batch norm in train mode needs a batch of at least 2")
        m = x2.shape[0] * reps
        mu = (self._per_channel(x2.sum(axis=0), reps) / m).astype(x.dtype)
        xhat = x2 - np.tile(mu, reps)
        var = self._per_channel(np.einsum("ij,ij->j", xhat, xhat), reps) / m
        inv = (1.0 / np.sqrt(var + BN_EPS)).astype(x.dtype)
        xhat *= np.tile(inv, reps)
        rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
        rm *= 1 - BN_MOMENTUM
        rm += BN_MOMENTUM * mu
        rv *= 1 - BN_MOMENTUM
        rv += BN_MOMENTUM * var * (m / (m - 1))
        self._cache = ("train", xhat, inv, reps)
        out = xhat * np.tile(scale, reps)
        out += np.tile(shift, reps)
        return out.reshape(x.shape)

    def backward(self, grad):
        if self._cache[0] == "eval":
            return self._backward_eval(grad)
        _, xhat, inv, reps = self._cache
        g2 = grad.reshape(grad.shape[0], -1)
        m = g2.shape[0] * reps
        gshift = self._per_channel(g2.sum(axis=0), reps)
        gscale = self._per_channel(np.einsum("ij,ij->j", g2, xhat), reps)
        self.grads["scale"], self.grads["shift"] = gscale, gshift
        k = self.params["scale"] * inv
        # dx = k * (g - mean(g) - xhat * mean(g * xhat))
        out = g2 * np.tile(k, reps)
        out -= xhat * np.tile(k * gscale / m, reps)
        out -= np.tile(k * gshift / m, reps)
        self._cache = None
        return out.reshape(grad.shape)

    def _backward_eval(self, grad):
        _, x2, reps = self._cache
        inv = 1.0 / np.sqrt(self.buffers["running_var"] + BN_EPS)
        xhat = (x2 - np.tile(self.buffers["running_mean"], reps)) * np.tile(inv, reps)
        g2 = grad.reshape(grad.shape[0], -1)
        self.grads["shift"] = self._per_channel(g2.sum(axis=0), reps)
        self.grads["scale"] = self._per_channel(np.einsum("ij,ij->j", g2, xhat), reps)
        self._cache = None
        return (g2 * np.tile(self.params["scale"] * inv, reps)).reshape(grad.shape)


class ReLU(Layer):
    def forward(self, x, train=False):
        out = np.maximum(x, 0)
        self._mask = out > 0
        return out

    def backward(self, grad):
        out = grad * self._mask
        self._mask = None
        return out


class MaxPool2x2(Layer):
    def forward(self, x, train=False):
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"2x2 pooling needs even spatial dims, got {h}x{w}")
        win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
        idx = win.argmax(axis=-1)
        self._cache = (x.shape, idx)
        return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        shape, idx = self._cache
        n, h, w, c = shape
        win = np.zeros(grad.shape + (4,), dtype=grad.dtype)
        np.put_along_axis(win, idx[..., None], grad[..., None], axis=-1)
        return win.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(shape)


class GlobalAvgPool(Layer):
    def forward(self, x, train=False):
        self._shape = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, grad):
        n, h, w, c = self._shape
        return np.broadcast_to(grad[:, None, None, :] / (h * w), self._shape).astype(grad.dtype)


class Linear(Layer):
    def __init__(self, din, dout, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = (rng.standard_normal((dout, din)) * np.sqrt(2.0 / din)).astype(dtype)
        self.params["bias"] = np.zeros(dout, dtype=dtype)

    def forward(self, x, train=False):
        if x.shape[-1] != self.params["weight"].shape[1]:
            raise ShapeError(f"expected {self.params['weight'].shape[1]} features, got {x.shape[-1]}")
        self._x = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, grad):
        self.grads["weight"] = grad.T @ self._x
        self.grads["bias"] = grad.sum(axis=0)
        self._x = None
        return grad @ self.params["weight"]


class Sequential(Layer):
    def __init__(self, **layers: Layer):
        super().__init__()
        self.layers = dict(layers)

    def children(self):
        return self.layers

    def forward(self, x, train=False):
        for layer in self.layers.values():
            x = layer.forward(x, train)
        return x

    def backward(self, grad):
        for layer in reversed(list(self.layers.values())):
            grad = layer.backward(grad)
        return grad
