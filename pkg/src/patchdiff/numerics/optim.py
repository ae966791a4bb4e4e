"""Adam with bias correction, operating on named parameter arrays in place."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_update(params: dict, grads: dict, state: AdamState, lr: float = 1e-4,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                step: int | None = None) -> None:
    """One Adam step on ``params`` (name -> ndarray) in place.

    ``step`` is the 1-based update count used for bias correction; it
    defaults to ``state.step + 1`` and is written back to ``state``.
    Parameters whose gradient is missing are left untouched.
    """
    step = state.step + 1 if step is None else step
    state.step = step
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype, copy=False)


class Adam:
    """Thin stateful wrapper binding Tensor parameters to :func:`adam_update`."""

    def __init__(self, params: dict, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        arrays = {k: p.data for k, p in self.params.items()}
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        adam_update(arrays, grads, self.state, self.lr, self.betas[0], self.betas[1], self.eps)
