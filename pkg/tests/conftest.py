"""Shared helpers: finite-difference gradient checking in float64 mode."""

from __future__ import annotations

import numpy as np
import pytest

from vadforge import tensor as T


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst elementwise relative error, guarded for near-zero gradients."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(a), np.abs(n)) + 1e-6
    return float((np.abs(a - n) / denom).max())


def fd_check(build_loss, tensors, eps: float = 1e-5) -> float:
    """Compare tape gradients against central finite differences.

    ``build_loss`` must rebuild the whole forward pass from the current
    tensor contents (it is re-invoked for every perturbed entry). Returns
    the worst relative error across all checked tensors. Call inside
    ``T.use_dtype(np.float64)``.
    """
    for t in tensors:
        t.zero_grad()
    loss = build_loss()
    T.backward(loss)

    def f() -> float:
        with T.no_grad():
            return build_loss().item()

    worst = 0.0
    for t in tensors:
        assert t.grad is not None, "analytic gradient missing"
        numeric = T.numeric_gradient(f, t.data, eps=eps)
        worst = max(worst, rel_error(t.grad, numeric))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def f64():
    with T.use_dtype(np.float64):
        yield
