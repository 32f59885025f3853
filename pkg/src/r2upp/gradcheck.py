"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Parameter, Tensor, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``; 0 when both vanish."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def gradient_pairs(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    eps: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Backprop and central-difference gradients of ``loss_fn()``, per tensor.

    ``loss_fn`` must rebuild the graph from the current ``.data`` of
    ``tensors`` on each call. When ``max_entries`` is set, only that many
    randomly chosen coordinates per tensor are probed. Each pair holds the
    probed coordinates of the analytic and the numeric gradient.
    """
    for t in tensors:
        t.zero_grad()
    loss_fn().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    rng = np.random.default_rng(seed)
    pairs = []
    for k, t in enumerate(tensors):
        flat = t.data.reshape(-1)
        if max_entries is None or flat.size <= max_entries:
            idx = np.arange(flat.size)
        else:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        with no_grad():
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                numeric[j] = (up - down) / (2 * eps)
        pairs.append((analytic[k].reshape(-1)[idx], numeric))
    for t in tensors:
        if isinstance(t, Parameter):
            t.zero_grad()
    return pairs


def check_gradients(loss_fn, tensors, eps=1e-5, max_entries=None, seed=0) -> dict[int, float]:
    """Relative error between backprop and finite differences per tensor position."""
    pairs = gradient_pairs(loss_fn, tensors, eps, max_entries, seed)
    return {k: relative_error(a, n) for k, (a, n) in enumerate(pairs)}
