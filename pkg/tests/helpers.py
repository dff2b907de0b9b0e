"""Finite-difference oracle and small fixtures shared by the test modules."""

from __future__ import annotations

import numpy as np

from mcvae import autodiff as ad
from mcvae.config import default_modalities
from mcvae.model import McvaeModel
from mcvae.nn import make_rng

FD_STEP = 1e-5
FD_TOL = 1e-4


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a, n = np.ravel(analytic), np.ravel(numeric)
    denom = max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def numeric_grad(fn, arr: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``fn()`` with respect to ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        up = float(fn())
        arr[i] = old - h
        down = float(fn())
        arr[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def check_inputs(fn, *arrays) -> float:
    """Largest relative error over ``arrays`` for ``fn(*tensors) -> scalar Tensor``."""
    arrays = [np.array(a, dtype=float) for a in arrays]
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    ad.backward(fn(*tensors))
    worst = 0.0
    for t, a in zip(tensors, arrays):
        num = numeric_grad(lambda: fn(*[ad.Tensor(x) for x in arrays]).data, a)
        worst = max(worst, rel_error(t.grad, num))
    return worst


def check_params(loss_fn, params: dict[str, ad.Tensor], max_entries: int = 40,
                 rng: np.random.Generator | None = None) -> float:
    """Relative error of module parameter gradients, checked on a random subset of entries."""
    rng = rng or make_rng(99)
    for p in params.values():
        p.grad = None
    ad.backward(loss_fn())
    analytic, numeric = [], []
    for name, p in params.items():
        flat = p.data.reshape(-1)
        g = np.zeros(p.data.shape) if p.grad is None else p.grad
        picks = rng.choice(flat.size, size=min(max_entries, flat.size), replace=False)
        for j in picks:
            old = flat[j]
            flat[j] = old + FD_STEP
            up = float(loss_fn().data)
            flat[j] = old - FD_STEP
            down = float(loss_fn().data)
            flat[j] = old
            analytic.append(g.reshape(-1)[j])
            numeric.append((up - down) / (2 * FD_STEP))
    return rel_error(np.array(analytic), np.array(numeric))


TINY_DIMS = (3, 5, 4, 6)


def tiny_model(dropout: float = 0.2, seed: int = 0) -> McvaeModel:
    return McvaeModel(default_modalities(TINY_DIMS), d_out=4, hidden=8, dropout=dropout, rng=make_rng(seed))


def tiny_batch(n: int = 6, seed: int = 1, full: bool = False):
    rng = make_rng(seed)
    feats = [rng.normal(size=(n, d)) for d in TINY_DIMS]
    mask = np.ones((n, 4), dtype=bool) if full else rng.random((n, 4)) < 0.7
    mask[:, 0] = True
    times = rng.exponential(5.0, size=n) + 0.1
    events = rng.random(n) < 0.7
    events[0] = True
    return feats, mask, times, events
