"""Finite-difference gradient checking.

The analytic side runs at whatever dtype the caller supplies; the
finite-difference side always re-evaluates in float64 so that the oracle
is limited by truncation error, not storage precision.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .engine import Tape, Tensor


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-7) -> float:
    """Norm-wise relative error ``|a-b| / max(|a|, |b|, floor)``.

    The floor keeps structurally zero gradients (a BN shift feeding another
    train-mode BN, say) from comparing rounding noise against rounding noise.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def analytic_gradients(fn: Callable, arrays: dict, dtype=None) -> dict:
    tensors = {k: Tensor(np.array(v, dtype=dtype or v.dtype)) for k, v in arrays.items()}
    with Tape(tensors) as tape:
        out = fn(tensors)
    return tape.backward(out)


def numeric_gradient(fn: Callable, arrays: dict, name: str, coords, h: float = 1e-3) -> np.ndarray:
    base = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
    target = base[name]
    flat = target.reshape(-1)
    grads = np.empty(len(coords))
    for i, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + h
        fp = float(fn({k: Tensor(v) for k, v in base.items()}).data)
        flat[c] = orig - h
        fm = float(fn({k: Tensor(v) for k, v in base.items()}).data)
        flat[c] = orig
        grads[i] = (fp - fm) / (2 * h)
    return grads


def check_gradients(
    fn: Callable,
    arrays: dict,
    *,
    h: float = 1e-3,
    dtype=np.float64,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    names=None,
) -> dict:
    """Return ``{name: relative_error}`` for each checked input.

    ``fn`` maps a dict of tensors to a scalar tensor. With ``max_coords``,
    only that many randomly chosen coordinates per input are compared.
    """
    analytic = analytic_gradients(fn, arrays, dtype=dtype)
    rng = rng or np.random.default_rng(0)
    errors = {}
    for name in names or arrays:
        size = np.asarray(arrays[name]).size
        if max_coords is None or size <= max_coords:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=max_coords, replace=False)
        num = numeric_gradient(fn, arrays, name, coords, h=h)
        errors[name] = relative_error(analytic[name].reshape(-1)[coords], num)
    return errors
