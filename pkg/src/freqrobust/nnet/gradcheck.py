"""Central finite-difference gradient checks for float64 layers and models."""
from __future__ import annotations

from typing import Callable

import numpy as np


def numeric_grad(
    f: Callable[[], float], x: np.ndarray, h: float = 1e-5, indices=None, switches=None, retries: int = 3
) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``x`` (perturbed in place).

    ``switches`` returns a fingerprint of the piecewise-linear choices (ReLU
    masks, pooling winners) made by the last ``f()`` call. When a step flips
    one of them the difference straddles a kink, so that coordinate is redone
    with a step ten times smaller, up to ``retries`` times.
    """
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    if switches is not None:
        f()
        base = switches()
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        step = h
        for attempt in range(retries + 1):
            flat[i] = orig + step
            fp = f()
            crossed = switches is not None and switches() != base
            flat[i] = orig - step
            fm = f()
            crossed = crossed or (switches is not None and switches() != base)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * step)
            if not crossed:
                break
            step /= 10
    return grad


def switch_state(layer) -> Callable[[], bytes]:
    """Fingerprint function over every ReLU mask and max-pool choice inside ``layer``."""
    from .layers import MaxPool2x2, ReLU

    found = []

    def walk(node):
        if isinstance(node, (ReLU, MaxPool2x2)):
            found.append(node)
        for child in node.children().values():
            walk(child)

    walk(layer)

    def state() -> bytes:
        parts = []
        for node in found:
            arr = node._mask if isinstance(node, ReLU) else node._cache[1]
            parts.append(np.packbits(arr).tobytes() if arr.dtype == bool else arr.tobytes())
        return b"".join(parts)

    return state


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor sits well above central-difference round-off (~1e-10 at h=1e-5),
    so gradients that are exactly zero analytically do not count as failures.
    """
    a, n = np.asarray(analytic).ravel(), np.asarray(numeric).ravel()
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def sample_indices(size: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return np.arange(size) if size <= k else rng.choice(size, k, replace=False)


def _pick(arr: np.ndarray, idx) -> np.ndarray:
    flat = np.asarray(arr).reshape(-1)
    return flat if idx is None else flat[idx]


def check_layer(layer, x, rng, train=True, h=1e-5, max_entries=None, floor=1e-6) -> dict[str, float]:
    """Relative errors of input and parameter gradients for loss ``sum(forward(x) * w)``.

    Works for single layers and nested containers. ``max_entries`` caps how
    many coordinates of each array are perturbed. ``floor`` is passed to
    :func:`relative_error`; deep models need a larger one because entries that
    are analytically zero pick up ~1e-9 of round-off. Buffers are restored afterwards.
    """
    buffers = [sub.buffers[k] for _, sub, k, is_buf in layer.named_arrays() if is_buf]
    snapshot = [b.copy() for b in buffers]
    w = rng.standard_normal(layer.forward(x, train).shape)

    def loss():
        return float(np.sum(layer.forward(x, train) * w))

    switches = switch_state(layer)
    layer.forward(x, train)
    gx = layer.backward(w.copy())
    targets = [] if gx is None else [("input", x, gx)]
    targets += [(n, sub.params[k], sub.grads[k].copy()) for n, sub, k, _ in layer.named_arrays(buffers=False)]
    errors = {}
    for name, arr, grad in targets:
        idx = None if max_entries is None else sample_indices(arr.size, max_entries, rng)
        num = numeric_grad(loss, arr, h, idx, switches=switches)
        errors[name] = relative_error(_pick(grad, idx), _pick(num, idx), floor)
    for b, v in zip(buffers, snapshot):
        b[...] = v
    return errors
