"""Patch-by-patch ancestral sampling.

Each reverse step pools the current full latent into its global content,
then denoises the N² patches one after another so that only one patch's
network activations are alive at a time.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from .data import to_pixels, write_pnm
from .numerics.tensor import Tensor, _active_counter, no_grad
from .patching import PatchGrid, assemble_condition, crop, global_content
from .schedule import ScheduleParams, reverse_step

log = logging.getLogger(__name__)

Rng = Union[np.random.Generator, Sequence[np.random.Generator]]


def draw_normal(rng: Rng, shape: tuple) -> np.ndarray:
    """Standard normal draw; a sequence of generators gives one independent stream per batch item."""
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal(shape, dtype=np.float32)
    if len(rng) != shape[0]:
        raise ValueError(f"{len(rng)} generators for a batch of {shape[0]}")
    return np.stack([r.standard_normal(shape[1:], dtype=np.float32) for r in rng])


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def sample_step(x_t: np.ndarray, t: int, denoiser: Callable, grid: PatchGrid,
                sched: ScheduleParams, rng: Rng | None = None, z: np.ndarray | None = None,
                parallel: bool = False) -> np.ndarray:
    """One reverse step x_t -> x_{t-1} on a full image (C×H×W) or batch (B×C×H×W).

    ``denoiser(x_cond, t, s)`` returns the noise estimate for one patch.
    The noise ``z`` is drawn once for the whole image (zeros at t = 1) and
    sliced per patch, so every N consumes the generator identically.
    ``parallel=True`` runs all patches as one batched call: faster, but the
    peak activation memory then matches a whole-image pass.
    """
    grid.check(x_t)
    if z is None:
        if t == 1:
            z = np.zeros(x_t.shape, dtype=np.float32)
        else:
            if rng is None:
                raise ValueError("rng is required for t > 1 when z is not given")
            z = draw_normal(rng, x_t.shape)
    g = global_content(x_t, grid)
    out = np.empty_like(x_t)
    counter = _active_counter()

    if parallel:
        batched = x_t.ndim == 4
        xb = x_t if batched else x_t[None]
        gb = g if batched else g[None]
        B = xb.shape[0]
        conds = np.concatenate([assemble_condition(crop(xb, grid, s), gb) for s in range(grid.count)])
        s_all = np.repeat(np.arange(grid.count), B)
        with no_grad():
            eps_all = _as_array(denoiser(conds, t, s_all))
        del conds
        for s in range(grid.count):
            rows, cols = grid.bounds(s)
            eps_hat = eps_all[s * B:(s + 1) * B]
            if not batched:
                eps_hat = eps_hat[0]
            out[..., rows, cols] = reverse_step(x_t[..., rows, cols], eps_hat, t, z[..., rows, cols], sched)
        return out

    for s in range(grid.count):
        if counter is not None:
            counter.mark(f"patch{s}:start")
        rows, cols = grid.bounds(s)
        patch = x_t[..., rows, cols]
        with no_grad():
            eps_hat = denoiser(assemble_condition(patch, g), t, s)
        out[..., rows, cols] = reverse_step(patch, _as_array(eps_hat), t, z[..., rows, cols], sched)
        del eps_hat
        if counter is not None:
            counter.mark(f"patch{s}:end")
    return out


@dataclass
class SampleRequest:
    count: int
    seed: int
    grid: PatchGrid
    sched: ScheduleParams
    denoiser: Callable
    image_channels: int = 1
    out_dir: str | Path | None = None
    batch_size: int = 256
    parallel: bool = False

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        cfg = getattr(self.denoiser, "config", None)
        if cfg is not None and cfg.N != self.grid.N:
            raise ValueError(f"checkpoint was trained with N={cfg.N}, request asks for N={self.grid.N}")


def sample_latents(request: SampleRequest) -> np.ndarray:
    """Run the full reverse chain; returns float latents (count×C×H×W) before clamping.

    Image ``k`` uses its own generator spawned from the seed, so results do
    not depend on ``count`` or ``batch_size``.
    """
    grid, sched = request.grid, request.sched
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(request.seed).spawn(request.count)]
    shape = (request.image_channels, grid.H, grid.W)
    results = []
    for start in range(0, request.count, request.batch_size):
        rngs = streams[start:start + request.batch_size]
        x = draw_normal(rngs, (len(rngs),) + shape)
        for t in range(sched.T, 0, -1):
            x = sample_step(x, t, request.denoiser, grid, sched, rngs, parallel=request.parallel)
        results.append(x)
        log.info("sampled %d/%d", start + len(rngs), request.count)
    return np.concatenate(results)


def sample_filename(seed: int, index: int, channels: int) -> str:
    return f"sample_{seed}_{index}.{'pgm' if channels == 1 else 'ppm'}"


def sample(request: SampleRequest) -> np.ndarray:
    """Generate ``count`` images as uint8 pixels (count×C×H×W); writes files if ``out_dir`` is set."""
    pixels = to_pixels(sample_latents(request))
    if request.out_dir is not None:
        out = Path(request.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for k, img in enumerate(pixels):
            write_pnm(out / sample_filename(request.seed, k, img.shape[0]), img)
    return pixels
