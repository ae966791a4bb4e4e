"""Central finite-difference checks for the tape's gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """max |analytic - numeric| scaled by the largest magnitude of either (inf-norm relative error).

    ``floor`` bounds the scale from below so that gradients that are exactly
    zero (e.g. a key bias under softmax) compare rounding noise against a
    meaningful magnitude instead of against itself.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def numeric_grad(f: Callable[[], float], array: np.ndarray, step: float = 1e-3,
                 max_entries: int | None = None, rng: np.random.Generator | None = None):
    """Central differences of scalar ``f`` w.r.t. entries of ``array`` (perturbed in place).

    With ``max_entries`` only a random subset of entries is probed; returns
    (flat indices, derivative estimates).
    """
    flat = array.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
    out = np.empty(idx.size)
    for n, k in enumerate(idx):
        orig = flat[k]
        flat[k] = orig + step
        up = f()
        flat[k] = orig - step
        down = f()
        flat[k] = orig
        out[n] = (up - down) / (2.0 * step)
    return idx, out


def check_gradients(build: Callable[[Sequence[Tensor]], Tensor], inputs: Sequence[np.ndarray],
                    step: float = 1e-3, seed: int = 0, max_entries: int | None = None) -> dict:
    """Compare tape gradients with finite differences for every input array.

    ``build`` maps float64 leaf tensors to an output tensor; the scalar
    checked is ``sum(output * R)`` for a fixed random ``R``. Returns the
    relative error per input position.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    out = build(leaves)
    weights = rng.standard_normal(out.shape)
    loss = (out * Tensor(weights, dtype=np.float64)).sum()
    backward(loss)

    def value() -> float:
        fresh = [Tensor(leaf.data, dtype=np.float64) for leaf in leaves]
        return float((build(fresh).data * weights).sum())

    errors = {}
    for pos, leaf in enumerate(leaves):
        analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
        idx, numeric = numeric_grad(value, leaf.data, step, max_entries, rng)
        errors[pos] = relative_error(analytic.reshape(-1)[idx], numeric)
    return errors
