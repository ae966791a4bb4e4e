import csv
import json
import math

import numpy as np
import pytest

from patchdiff.data import gen_blobs
from patchdiff.denoiser import Denoiser, DenoiserConfig
from patchdiff.numerics.tensor import Tensor, backward
from patchdiff.patching import PatchGrid, crop
from patchdiff.schedule import build_linear_schedule, q_sample
from patchdiff.training import (TrainConfig, TrainState, load_checkpoint, next_batch, patch_loss,
                                save_checkpoint, train_loop, train_step)

MICRO = dict(image_channels=1, base_channels=8, emb_dim=8)


def micro_state(N=2, seed=0, **overrides):
    cfg = TrainConfig.desk(N=N, seed=seed, **overrides)
    return TrainState.fresh(DenoiserConfig(N=N, **MICRO), cfg)


def test_config_profiles():
    paper = TrainConfig.paper()
    assert paper.lr == 1e-4 and paper.T == 1000 and paper.iterations == 800_000
    desk = TrainConfig.desk()
    assert desk.T == 200 and desk.batch_size == 16 and desk.iterations <= 20_000 and desk.lr == 1e-4
    assert build_linear_schedule(desk.T, desk.beta_start, desk.beta_end).alpha_bars[-1] < 0.01
    assert TrainConfig.from_dict(desk.to_dict()) == desk


def test_perfect_prediction_gives_zero_loss():
    sched = build_linear_schedule(10, 0.01, 0.1)
    grid = PatchGrid(2, 8, 8)
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((1, 8, 8)).astype(np.float32)
    eps = rng.standard_normal((1, 8, 8)).astype(np.float32)

    class Oracle:
        def __call__(self, cond, t, s):
            return Tensor(crop(eps, grid, s))

    assert patch_loss(x0, 4, eps, 3, Oracle(), grid, sched).item() == 0.0


def test_zero_output_loss_expectation():
    model = Denoiser(DenoiserConfig(N=2, zero_init_output=True, **MICRO))
    sched = build_linear_schedule(20, 0.01, 0.2)
    grid = PatchGrid(2, 8, 8)
    rng = np.random.default_rng(1)
    n = 10_000
    eps = rng.standard_normal((n, 1, 8, 8)).astype(np.float32)
    x0 = np.zeros_like(eps)
    t = rng.integers(1, 21, n)
    s = rng.integers(0, 4, n)
    # per-example losses: zero output makes each one mean(eps_patch²)
    per = (crop(eps, grid, s).astype(np.float64) ** 2).mean(axis=(1, 2, 3))
    batch_loss = patch_loss(x0[:256], t[:256], eps[:256], s[:256], model, grid, sched).item()
    assert batch_loss == pytest.approx(per[:256].mean(), rel=1e-5)
    se = per.std(ddof=1) / math.sqrt(n)
    assert abs(per.mean() - 1.0) < 3 * se


def test_single_patch_grid_is_plain_loss():
    model = Denoiser(DenoiserConfig(N=1, **MICRO), seed=2)
    sched = build_linear_schedule(10, 0.01, 0.1)
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal((1, 8, 8)).astype(np.float32)
    eps = rng.standard_normal((1, 8, 8)).astype(np.float32)
    x_t = q_sample(x0, 5, eps, sched)
    pred = model(np.concatenate([x_t, x_t]), 5, 0).data
    expected = np.mean((pred.astype(np.float64) - eps) ** 2)
    assert patch_loss(x0, 5, eps, 0, model, PatchGrid(1, 8, 8), sched).item() == pytest.approx(expected, rel=1e-5)


def test_train_step_finite_and_deterministic():
    batch = gen_blobs(4, (1, 8, 8), seed=0).images
    runs = []
    for _ in range(2):
        st = micro_state(batch_size=4)
        runs.append([train_step(batch, st) for _ in range(5)])
    assert runs[0] == runs[1]
    assert all(np.isfinite(v) and v >= 0 for v in runs[0])


def test_gradient_flow_reaches_every_parameter():
    st = micro_state(batch_size=8)
    batch = gen_blobs(8, (1, 8, 8), seed=1).images
    grid = PatchGrid(2, 8, 8)
    rng = np.random.default_rng(0)
    t = rng.integers(1, st.sched.T + 1, 8)
    s = np.arange(8) % 4
    eps = rng.standard_normal(batch.shape).astype(np.float32)
    loss = patch_loss(batch, t, eps, s, st.model, grid, st.sched)
    backward(loss)
    for name, p in st.model.params.items():
        assert p.grad is not None, name
        assert np.any(p.grad != 0), name


def test_overfit_single_image():
    img = gen_blobs(1, (1, 8, 8), seed=0).images
    st = micro_state(batch_size=8, lr=1e-3, T=50)
    batch = np.repeat(img, 8, axis=0)
    losses = [train_step(batch, st) for _ in range(2000)]
    assert np.mean(losses[-100:]) < 0.1 * np.mean(losses[:20])


def test_next_batch_epoch_permutation():
    st = micro_state(batch_size=3)
    images = np.arange(7, dtype=np.float32).reshape(7, 1, 1, 1)
    seen = np.concatenate([next_batch(images, st).ravel() for _ in range(7)])
    for epoch in range(3):
        assert sorted(seen[7 * epoch:7 * epoch + 7].tolist()) == list(range(7))


def test_checkpoint_resume_is_bit_exact(tmp_path):
    data = gen_blobs(20, (1, 8, 8), seed=2)
    full = micro_state(batch_size=4, checkpoint_interval=0)
    ref = []
    train_loop(data, full, iterations=12, callback=lambda i, l: ref.append(l))

    first = micro_state(batch_size=4, checkpoint_interval=0)
    got = []
    train_loop(data, first, iterations=5, callback=lambda i, l: got.append(l))
    save_checkpoint(first, tmp_path / "ck")
    resumed = load_checkpoint(tmp_path / "ck")
    assert resumed.iteration == 5
    train_loop(data, resumed, iterations=12, callback=lambda i, l: got.append(l))
    assert got == ref
    for k, p in full.model.params.items():
        assert np.array_equal(p.data, resumed.model.params[k].data), k


def test_checkpoint_layout(tmp_path):
    st = micro_state()
    save_checkpoint(st, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["denoiser_config"]["N"] == 2
    assert len(manifest["schedule"]["betas"]) == st.sched.T
    entry = manifest["params"][0]
    raw = (tmp_path / entry["file"]).read_bytes()
    assert raw[:4] == b"PDTN"
    assert len(raw) == entry["offset"] + 4 * int(np.prod(entry["shape"]))
    (tmp_path / entry["file"]).write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path)


def test_loop_logs_and_checkpoints(tmp_path):
    data = gen_blobs(10, (1, 8, 8), seed=3)
    st = micro_state(batch_size=2, checkpoint_interval=3)
    iters = []
    train_loop(data, st, ckpt_dir=tmp_path / "ck", log_path=tmp_path / "loss.csv", iterations=7,
               callback=lambda i, l: iters.append(i))
    assert iters == list(range(1, 8))
    rows = list(csv.DictReader(open(tmp_path / "loss.csv")))
    assert [int(r["iteration"]) for r in rows] == iters
    assert list(rows[0]) == ["iteration", "loss", "wallclock_ms"]
    assert all(float(r["wallclock_ms"]) >= 0 for r in rows)
    assert load_checkpoint(tmp_path / "ck").iteration == 7


def test_mismatched_n_rejected():
    with pytest.raises(ValueError):
        TrainState.fresh(DenoiserConfig(N=4, **MICRO), TrainConfig.desk(N=2))
