"""Patch-wise noise-prediction objective, the optimization loop and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__
from .data import Dataset
from .denoiser import Denoiser, DenoiserConfig
from .numerics import io as tensor_io
from .numerics import ops
from .numerics.optim import AdamState, adam_update
from .numerics.tensor import Tensor, backward
from .patching import PatchGrid, assemble_condition, crop, global_content
from .schedule import ScheduleParams, build_linear_schedule, q_sample, scaled_linear_endpoints

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "patchdiff-checkpoint/1"


@dataclass
class TrainConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    batch_size: int = 64
    lr: float = 1e-4
    iterations: int = 800_000
    N: int = 2
    dataset: str = "blobs"
    seed: int = 0
    checkpoint_interval: int = 10_000
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        T = overrides.pop("T", 200)
        beta_start, beta_end = scaled_linear_endpoints(T)
        base = dict(T=T, beta_start=beta_start, beta_end=beta_end, batch_size=16,
                    iterations=6000, checkpoint_interval=1000)
        base.update(overrides)
        return cls(**base)

    def schedule(self) -> ScheduleParams:
        return build_linear_schedule(self.T, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in known}
        if "adam_betas" in kw:
            kw["adam_betas"] = tuple(kw["adam_betas"])
        return cls(**kw)


@dataclass
class TrainState:
    model: Denoiser
    sched: ScheduleParams
    config: TrainConfig
    rng: np.random.Generator
    adam: AdamState = field(default_factory=AdamState)
    iteration: int = 0
    perm: Optional[np.ndarray] = None
    cursor: int = 0

    @classmethod
    def fresh(cls, model_config: DenoiserConfig, config: TrainConfig) -> "TrainState":
        if model_config.N != config.N:
            raise ValueError(f"model N={model_config.N} but training N={config.N}")
        return cls(model=Denoiser(model_config, seed=config.seed), sched=config.schedule(),
                   config=config, rng=np.random.default_rng(config.seed))


def patch_loss(x0: np.ndarray, t, eps: np.ndarray, s, model: Denoiser, grid: PatchGrid,
               sched: ScheduleParams) -> Tensor:
    """Mean squared error between the true noise on patch ``s`` and the network estimate.

    The latent is formed on the whole image, and the global content is pooled
    from that noisy latent. ``x0``/``eps`` may be single images or a batch
    with per-item ``t`` and ``s``.
    """
    x_t = q_sample(x0, t, eps, sched)
    g = global_content(x_t, grid)
    cond = assemble_condition(crop(x_t, grid, s), g)
    pred = model(cond, t, s)
    target = crop(eps, grid, s).astype(pred.dtype, copy=False)
    return ops.mse(pred, target)


def train_step(batch: np.ndarray, state: TrainState, grid: PatchGrid | None = None) -> float:
    """One optimizer update on a B×C×H×W batch; returns the batch loss."""
    cfg = state.config
    model = state.model
    if grid is None:
        grid = PatchGrid(cfg.N, batch.shape[-2], batch.shape[-1])
    B = batch.shape[0]
    rng = state.rng
    t = rng.integers(1, state.sched.T + 1, B)
    s = rng.integers(0, grid.count, B)
    eps = rng.standard_normal(batch.shape, dtype=np.float32)

    for p in model.params.values():
        p.grad = None
    loss = patch_loss(batch, t, eps, s, model, grid, state.sched)
    value = loss.item()
    backward(loss)
    arrays = {k: p.data for k, p in model.params.items()}
    grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
    adam_update(arrays, grads, state.adam, cfg.lr, cfg.adam_betas[0], cfg.adam_betas[1], cfg.adam_eps)
    state.iteration += 1
    return value


def next_batch(images: np.ndarray, state: TrainState) -> np.ndarray:
    """Draw the next mini-batch from a per-epoch shuffled order (resumable via state)."""
    n = len(images)
    B = min(state.config.batch_size, n)
    idx = []
    while len(idx) < B:
        if state.perm is None or state.cursor >= n:
            state.perm = state.rng.permutation(n)
            state.cursor = 0
        take = min(B - len(idx), n - state.cursor)
        idx.extend(state.perm[state.cursor:state.cursor + take])
        state.cursor += take
    return images[np.asarray(idx)]


def train_loop(dataset: Dataset | np.ndarray, state: TrainState, ckpt_dir=None, log_path=None,
               iterations: int | None = None,
               callback: Callable[[int, float], None] | None = None) -> TrainState:
    """Run until ``state.iteration`` reaches ``iterations`` (default: the config's total)."""
    images = dataset.images if isinstance(dataset, Dataset) else np.asarray(dataset, dtype=np.float32)
    total = state.config.iterations if iterations is None else iterations
    grid = PatchGrid(state.config.N, images.shape[-2], images.shape[-1])
    state.model.config.check_patch(grid.H_p, grid.W_p)
    writer, fh = None, None
    if log_path is not None:
        log_path = Path(log_path)
        fresh = not log_path.exists() or state.iteration == 0
        fh = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(["iteration", "loss", "wallclock_ms"])
    start = time.perf_counter()
    try:
        while state.iteration < total:
            loss = train_step(next_batch(images, state), state, grid)
            if writer is not None:
                writer.writerow([state.iteration, f"{loss:.8g}",
                                 f"{(time.perf_counter() - start) * 1e3:.1f}"])
            if callback is not None:
                callback(state.iteration, loss)
            if state.iteration % 500 == 0:
                log.info("iteration %d loss %.5f", state.iteration, loss)
            interval = state.config.checkpoint_interval
            if ckpt_dir is not None and interval and state.iteration % interval == 0:
                save_checkpoint(state, ckpt_dir)
    finally:
        if fh is not None:
            fh.close()
    if ckpt_dir is not None:
        save_checkpoint(state, ckpt_dir)
    return state


# -- checkpoints ------------------------------------------------------------

def _write_group(root: Path, sub: str, arrays: dict) -> list[dict]:
    (root / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in arrays.items():
        rel = f"{sub}/{name}.pdtn"
        tensor_io.save(root / rel, arr)
        entries.append({"name": name, "shape": list(arr.shape), "file": rel,
                        "offset": tensor_io.header_size(arr.ndim)})
    return entries


def _read_group(root: Path, entries: list[dict]) -> dict:
    out = {}
    for e in entries:
        arr = tensor_io.load(root / e["file"])
        if list(arr.shape) != list(e["shape"]):
            raise ValueError(f"checkpoint tensor {e['name']} has shape {arr.shape}, manifest says {e['shape']}")
        out[e["name"]] = arr
    return out


def save_checkpoint(state: TrainState, ckpt_dir) -> Path:
    """Write parameters, optimizer moments, schedule, configs and RNG state to ``ckpt_dir``."""
    root = Path(ckpt_dir)
    root.mkdir(parents=True, exist_ok=True)
    params = {k: p.data for k, p in state.model.params.items()}
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": __version__,
        "iteration": state.iteration,
        "denoiser_config": state.model.config.to_dict(),
        "train_config": state.config.to_dict(),
        "schedule": {"T": state.sched.T, "betas": state.sched.betas.tolist()},
        "rng_state": state.rng.bit_generator.state,
        "data_order": {"perm": None if state.perm is None else state.perm.tolist(),
                       "cursor": state.cursor},
        "params": _write_group(root, "params", params),
        "adam": {"step": state.adam.step,
                 "m": _write_group(root, "adam_m", state.adam.m),
                 "v": _write_group(root, "adam_v", state.adam.v)},
    }
    tmp = root / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1))
    tmp.replace(root / "manifest.json")
    return root / "manifest.json"


def load_checkpoint(ckpt_dir) -> TrainState:
    root = Path(ckpt_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{root}: unknown checkpoint format {manifest.get('format')!r}")
    mconfig = DenoiserConfig.from_dict(manifest["denoiser_config"])
    tconfig = TrainConfig.from_dict(manifest["train_config"])
    params = {k: Tensor(v, requires_grad=True) for k, v in _read_group(root, manifest["params"]).items()}
    sched = ScheduleParams.from_betas(manifest["schedule"]["betas"])
    rng = np.random.default_rng()
    rng.bit_generator.state = manifest["rng_state"]
    adam = AdamState(m=_read_group(root, manifest["adam"]["m"]),
                     v=_read_group(root, manifest["adam"]["v"]),
                     step=manifest["adam"]["step"])
    order = manifest["data_order"]
    perm = None if order["perm"] is None else np.asarray(order["perm"], dtype=np.int64)
    return TrainState(model=Denoiser(mconfig, params), sched=sched, config=tconfig, rng=rng,
                      adam=adam, iteration=manifest["iteration"], perm=perm, cursor=order["cursor"])
