"""Diffusion-step constants and the per-step forward/reverse arithmetic.

Steps are 1-indexed (t = 1..T) at every public entry point; arrays are
stored 0-indexed, so step ``t`` lives at index ``t - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleParams:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray
    # 1 - alpha_bar accumulated without cancellation; equals beta_1 exactly at t = 1
    one_minus_alpha_bars: np.ndarray

    def __post_init__(self):
        for a in (self.betas, self.alphas, self.alpha_bars, self.sigmas, self.one_minus_alpha_bars):
            a.setflags(write=False)

    def index(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise ScheduleError(f"step {t} outside 1..{self.T}")
        return t - 1

    @classmethod
    def from_betas(cls, betas) -> "ScheduleParams":
        betas = np.array(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ScheduleError("betas must be a non-empty 1-d array")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ScheduleError("every beta must lie in (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        complement = np.empty_like(betas)
        complement[0] = betas[0]
        for k in range(1, betas.size):
            complement[k] = complement[k - 1] + alpha_bars[k - 1] * betas[k]
        return cls(T=betas.size, betas=betas, alphas=alphas, alpha_bars=alpha_bars,
                   sigmas=np.sqrt(betas), one_minus_alpha_bars=complement)


def build_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> ScheduleParams:
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return ScheduleParams.from_betas(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def scaled_linear_endpoints(T: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                            reference_T: int = 1000) -> tuple[float, float]:
    """Rescale endpoints chosen for ``reference_T`` steps so the total noise matches at ``T``."""
    scale = reference_T / T
    return beta_start * scale, min(beta_end * scale, 0.999)


def _check(a: np.ndarray, b: np.ndarray) -> None:
    if np.shape(a) != np.shape(b):
        raise ScheduleError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def _coef(values: np.ndarray, t, sched: ScheduleParams, ndim: int):
    """Per-step constant(s), broadcastable against a batch when ``t`` is an array."""
    t_arr = np.asarray(t)
    if t_arr.ndim == 0:
        return values[sched.index(int(t_arr))]
    if np.any(t_arr < 1) or np.any(t_arr > sched.T):
        raise ScheduleError(f"steps outside 1..{sched.T}")
    return values[t_arr - 1].reshape((-1,) + (1,) * (ndim - 1))


def _cast(out, like: np.ndarray) -> np.ndarray:
    return np.asarray(out, dtype=np.result_type(like.dtype, np.float32))


def forward_step(x_prev: np.ndarray, t, eps: np.ndarray, sched: ScheduleParams) -> np.ndarray:
    """One forward transition: sqrt(1 - beta_t) * x_prev + sqrt(beta_t) * eps."""
    _check(x_prev, eps)
    beta = _coef(sched.betas, t, sched, np.ndim(x_prev))
    return _cast(np.sqrt(1.0 - beta) * x_prev + np.sqrt(beta) * eps, np.asarray(x_prev))


def q_sample(x0: np.ndarray, t, eps: np.ndarray, sched: ScheduleParams) -> np.ndarray:
    """Closed-form marginal draw: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.

    ``t`` may be an int or, for a batch, one step per leading-axis entry.
    """
    _check(x0, eps)
    ab = _coef(sched.alpha_bars, t, sched, np.ndim(x0))
    c = _coef(sched.one_minus_alpha_bars, t, sched, np.ndim(x0))
    return _cast(np.sqrt(ab) * x0 + np.sqrt(c) * eps, np.asarray(x0))


def reverse_step(x_t: np.ndarray, eps_hat: np.ndarray, t, z: np.ndarray,
                 sched: ScheduleParams) -> np.ndarray:
    """Ancestral update: (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t) + sigma_t * z."""
    _check(x_t, eps_hat)
    _check(x_t, z)
    i = sched.index(int(t))
    beta, alpha, sigma = sched.betas[i], sched.alphas[i], sched.sigmas[i]
    out = (x_t - (beta / np.sqrt(sched.one_minus_alpha_bars[i])) * eps_hat) / np.sqrt(alpha) + sigma * z
    return _cast(out, np.asarray(x_t))
