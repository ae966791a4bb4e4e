"""Peak activation memory of one denoiser forward pass: a symbolic model and a measurement.

Both count activations only (parameters and optimizer state excluded) and
assume a single image. The model walks the layer graph of the U-Net,
allocating each layer's output while its inputs are live and releasing
inputs once their last consumer has run; skip tensors stay live until the
decoder concatenates them.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .denoiser import Denoiser, DenoiserConfig
from .numerics.tensor import scoped_peak
from .patching import PatchGrid
from .sampling import sample_step
from .schedule import ScheduleParams

BYTES = 4  # float32


@dataclass
class MemoryEntry:
    N: int
    analytical_peak_bytes: int
    measured_peak_bytes: int | None = None
    # (layer, output bytes, live bytes while it runs)
    per_layer_breakdown: list = field(default_factory=list)


@dataclass
class MemoryReport:
    entries: list

    def by_n(self) -> dict:
        return {e.N: e for e in self.entries}


class LiveSet:
    """Symbolic live-tensor set; ``peak`` is the running maximum of live bytes."""

    def __init__(self):
        self.live: dict[str, int] = {}
        self.peak = 0
        self.trace: list[tuple[str, int, int]] = []
        self._n = 0

    def new(self, layer: str, nbytes: int, consumes=(), transient: int = 0) -> str:
        """Run ``layer``: its output (and any transient buffer) coexists with everything live."""
        live_now = sum(self.live.values()) + nbytes + transient
        self.trace.append((layer, nbytes, live_now))
        self.peak = max(self.peak, live_now)
        self._n += 1
        key = f"{layer}#{self._n}"
        self.live[key] = nbytes
        for c in consumes:
            del self.live[c]
        return key

    def release(self, *keys: str) -> None:
        for k in keys:
            del self.live[k]


def _resblock(ls: LiveSet, name: str, x: str, c_in: int, c_out: int, pixels: int) -> str:
    a = ls.new(f"{name}.norm1", c_in * pixels * BYTES)
    a = ls.new(f"{name}.act1", c_in * pixels * BYTES, consumes=[a])
    h = ls.new(f"{name}.conv1", c_out * pixels * BYTES, consumes=[a])
    h = ls.new(f"{name}.cond_add", c_out * pixels * BYTES, consumes=[h])
    a = ls.new(f"{name}.norm2", c_out * pixels * BYTES)
    a = ls.new(f"{name}.act2", c_out * pixels * BYTES, consumes=[a])
    ls.release(h)
    h = ls.new(f"{name}.conv2", c_out * pixels * BYTES, consumes=[a])
    if c_in != c_out:
        s = ls.new(f"{name}.skip", c_out * pixels * BYTES)
        return ls.new(f"{name}.add", c_out * pixels * BYTES, consumes=[h, s, x])
    return ls.new(f"{name}.add", c_out * pixels * BYTES, consumes=[h, x])


def _attention(ls: LiveSet, x: str, c: int, L: int) -> str:
    n = ls.new("attn.norm", c * L * BYTES)
    q = ls.new("attn.q", c * L * BYTES)
    k = ls.new("attn.k", c * L * BYTES)
    v = ls.new("attn.v", c * L * BYTES)
    s = ls.new("attn.scores", L * L * BYTES, consumes=[q, k])
    s = ls.new("attn.scale", L * L * BYTES, consumes=[s])
    w = ls.new("attn.softmax", L * L * BYTES, consumes=[s])
    h = ls.new("attn.weighted_sum", c * L * BYTES, consumes=[w, v])
    h = ls.new("attn.proj_out", c * L * BYTES, consumes=[h])
    ls.release(n)
    return ls.new("attn.residual", c * L * BYTES, consumes=[h, x])


def analytical_peak(config: DenoiserConfig, grid: PatchGrid) -> MemoryEntry:
    """Running maximum of live activation bytes over one forward pass on one patch."""
    config.check_patch(grid.H_p, grid.W_p)
    C = config.image_channels
    pixels = grid.H_p * grid.W_p
    ls = LiveSet()
    # patch channels plus the pooled global content channels
    x = ls.new("input.patch+global_content", (C + C) * pixels * BYTES)
    h = ls.new("conv_in", config.base_channels * pixels * BYTES, consumes=[x])
    ch = config.base_channels
    skips = []
    for lvl in range(config.levels):
        out = config.level_channels(lvl)
        h = _resblock(ls, f"down{lvl}", h, ch, out, pixels)
        ch = out
        if lvl < config.levels - 1:
            skips.append((h, ch))
            pixels //= 4
            h = ls.new(f"down{lvl}.pool", ch * pixels * BYTES)
    if config.attention:
        h = _attention(ls, h, ch, pixels)
    for lvl in reversed(range(config.levels - 1)):
        pixels *= 4
        h = ls.new(f"up{lvl}.upsample", ch * pixels * BYTES, consumes=[h])
        skip, skip_ch = skips.pop()
        h = ls.new(f"up{lvl}.concat", (ch + skip_ch) * pixels * BYTES, consumes=[h, skip])
        out = config.level_channels(lvl)
        h = _resblock(ls, f"up{lvl}", h, ch + skip_ch, out, pixels)
        ch = out
    a = ls.new("norm_out", ch * pixels * BYTES)
    a = ls.new("act_out", ch * pixels * BYTES, consumes=[a, h])
    ls.new("conv_out", C * pixels * BYTES, consumes=[a])
    return MemoryEntry(N=grid.N, analytical_peak_bytes=ls.peak, per_layer_breakdown=ls.trace)


def measured_peak(model: Denoiser, grid: PatchGrid, sched: ScheduleParams,
                  steps_to_measure: int = 2, seed: int = 0) -> MemoryEntry:
    """Peak counted Tensor bytes while running ``steps_to_measure`` sequential reverse steps."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((model.config.image_channels, grid.H, grid.W), dtype=np.float32)
    peak = 0
    for t in range(sched.T, max(sched.T - steps_to_measure, 0), -1):
        result = {}

        def run(x=x, t=t):
            result["x"] = sample_step(x, t, model, grid, sched, rng)

        counter = scoped_peak(run, record_events=False)
        x = result["x"]
        peak = max(peak, counter.peak_bytes)
    entry = analytical_peak(model.config, grid)
    entry.measured_peak_bytes = peak
    return entry


def profile(config: DenoiserConfig, image_hw: tuple[int, int], n_list, sched: ScheduleParams,
            steps_to_measure: int = 2, seed: int = 0, measure: bool = True) -> MemoryReport:
    """Analytical and measured peaks for each division count (fresh weights per N)."""
    entries = []
    for N in n_list:
        cfg = DenoiserConfig.from_dict({**config.to_dict(), "N": int(N)})
        grid = PatchGrid(int(N), *image_hw)
        if measure:
            entries.append(measured_peak(Denoiser(cfg, seed=seed), grid, sched, steps_to_measure, seed))
        else:
            entries.append(analytical_peak(cfg, grid))
    return MemoryReport(entries)


def _ratio_rows(entries) -> list[dict]:
    base = next((e for e in entries if e.N == 1), entries[0])

    def ratio(e):
        # measured vs measured when both exist, else analytical vs analytical
        if e.measured_peak_bytes is not None and base.measured_peak_bytes is not None:
            return e.measured_peak_bytes / base.measured_peak_bytes
        return e.analytical_peak_bytes / base.analytical_peak_bytes

    return [{"N": e.N, "analytical_bytes": e.analytical_peak_bytes,
             "measured_bytes": "" if e.measured_peak_bytes is None else e.measured_peak_bytes,
             "ratio_vs_baseline": ratio(e)} for e in entries]


def compare_report(entries) -> tuple[str, str]:
    """Render the full-vs-patch comparison as (text table, CSV)."""
    entries = list(entries.entries if isinstance(entries, MemoryReport) else entries)
    rows = _ratio_rows(entries)
    lines = [f"{'N':>3}  {'analytical [KiB]':>17}  {'measured [KiB]':>15}  {'ratio vs N=1':>12}"]
    for r in rows:
        meas = "-" if r["measured_bytes"] == "" else f"{r['measured_bytes'] / 1024:.1f}"
        lines.append(f"{r['N']:>3}  {r['analytical_bytes'] / 1024:>17.1f}  {meas:>15}  "
                     f"{r['ratio_vs_baseline']:>12.4f}")
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["N", "analytical_bytes", "measured_bytes", "ratio_vs_baseline"],
                       lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({**r, "ratio_vs_baseline": repr(float(r["ratio_vs_baseline"]))})
    return "\n".join(lines), buf.getvalue()


def parse_report_csv(text: str) -> list[dict]:
    out = []
    for r in csv.DictReader(io.StringIO(text)):
        out.append({"N": int(r["N"]), "analytical_bytes": int(r["analytical_bytes"]),
                    "measured_bytes": int(r["measured_bytes"]) if r["measured_bytes"] else None,
                    "ratio_vs_baseline": float(r["ratio_vs_baseline"])})
    return out
