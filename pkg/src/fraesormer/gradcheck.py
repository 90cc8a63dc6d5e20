"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError
from .tensor import Tensor


def backward_gradcheck(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    floor: float = 1e-8,
    max_checks: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Return the max relative error between tape and finite-difference gradients.

    ``f`` is re-evaluated from scratch for every perturbation, so it must
    close over ``inputs`` and read their ``.data`` at call time. When
    ``max_checks`` is set, at most that many entries per input are probed,
    chosen with ``rng``.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    for t in inputs:
        t.zero_grad()
        # perturbations below write through a flat view
        t.data = np.ascontiguousarray(t.data)
    out = f()
    if out.size != 1:
        raise ContractError(f"gradcheck needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, grad in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            rng = rng or np.random.default_rng(0)
            indices = rng.choice(flat.size, size=max_checks, replace=False)
        for idx in indices:
            orig = flat[idx]
            flat[idx] = orig + h
            fp = f().item()
            flat[idx] = orig - h
            fm = f().item()
            flat[idx] = orig
            numeric = (fp - fm) / (2 * h)
            a = grad.reshape(-1)[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, float(err))
    for t in inputs:
        t.zero_grad()
    return worst


def numerical_gradient(f: Callable[[], Tensor], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """Dense central-difference gradient of scalar ``f`` with respect to ``t``."""
    t.data = np.ascontiguousarray(t.data)
    flat = t.data.reshape(-1)
    out = np.zeros(flat.size)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + h
        fp = f().item()
        flat[idx] = orig - h
        fm = f().item()
        flat[idx] = orig
        out[idx] = (fp - fm) / (2 * h)
    return out.reshape(t.shape)
