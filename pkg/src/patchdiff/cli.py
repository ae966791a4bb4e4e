"""Command-line entry point: gen-data, train, sample, profile, eval.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Setting
``PATCHDIFF_DESK=1`` selects the desk-scale defaults for training.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import (Dataset, gen_blobs, gen_gradients, iter_image_files, load_dataset, read_pnm,
                   save_dataset, split, to_normalized)
from .denoiser import DenoiserConfig
from .evaluation import (blob_detection_rate, fit_stats, frechet_distance, mean_seam_score,
                         read_metric_csv, write_metric_csv)
from .memprofile import compare_report, parse_report_csv, profile
from .patching import PatchGrid
from .sampling import SampleRequest, sample, sample_filename
from .training import TrainConfig, TrainState, load_checkpoint, train_loop

log = logging.getLogger("patchdiff")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
CONFIG_ECHO = "resolved_config.ini"
VERSION_STAMP = "VERSION"

_MODEL_KEYS = {"image_channels": int, "base_channels": int, "channel_mults": "ints",
               "attention": "bool", "emb_dim": int, "zero_init_output": "bool"}
_TRAIN_KEYS = {"T": int, "beta_start": float, "beta_end": float, "batch_size": int, "lr": float,
               "iterations": int, "N": int, "dataset": str, "seed": int, "checkpoint_interval": int}
_DATA_KEYS = {"dataset": str, "count": int, "size": int, "seed": int, "path": str}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def desk_mode() -> bool:
    return os.environ.get("PATCHDIFF_DESK", "") not in ("", "0")


def _convert(kind, raw: str):
    if kind == "ints":
        return tuple(int(v) for v in raw.replace(",", " ").split())
    if kind == "bool":
        low = raw.strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise UsageError(f"not a boolean: {raw!r}")
        return low in ("1", "true", "yes", "on")
    return kind(raw)


@dataclass
class RunConfig:
    """Merged ``[model]``, ``[train]`` and ``[data]`` settings (file values, then overrides)."""

    model: DenoiserConfig
    train: TrainConfig
    data: dict = field(default_factory=dict)

    @classmethod
    def resolve(cls, path=None, overrides: dict | None = None, desk: bool | None = None) -> "RunConfig":
        desk = desk_mode() if desk is None else desk
        values = {"model": {}, "train": {}, "data": {}}
        if path is not None:
            parser = configparser.ConfigParser()
            parser.optionxform = str
            if not parser.read(path):
                raise UsageError(f"cannot read config file {path}")
            for section, keys in (("model", _MODEL_KEYS), ("train", _TRAIN_KEYS), ("data", _DATA_KEYS)):
                if not parser.has_section(section):
                    continue
                for key, raw in parser.items(section):
                    if key not in keys:
                        raise UsageError(f"unknown key [{section}] {key}")
                    try:
                        values[section][key] = _convert(keys[key], raw)
                    except ValueError as exc:
                        raise UsageError(f"bad value for [{section}] {key}: {raw!r}") from exc
            unknown = set(parser.sections()) - set(values)
            if unknown:
                raise UsageError(f"unknown config sections {sorted(unknown)}")
        for dotted, value in (overrides or {}).items():
            if value is not None:
                section, key = dotted.split(".")
                values[section][key] = value
        train_kw = values["train"]
        train = TrainConfig.desk(**train_kw) if desk else TrainConfig.paper(**train_kw)
        data = {"dataset": train.dataset, "count": 2000, "size": 32, "seed": train.seed}
        data.update(values["data"])
        model_kw = {"image_channels": 3 if data["dataset"] == "gradients" else 1, **values["model"]}
        model = DenoiserConfig(N=train.N, **model_kw)
        return cls(model, train, data)

    def to_ini(self) -> str:
        def fmt(v):
            if isinstance(v, (tuple, list)):
                return ", ".join(str(x) for x in v)
            return repr(v) if isinstance(v, float) else str(v)

        model = {k: v for k, v in self.model.to_dict().items() if k != "N"}
        train = {k: v for k, v in self.train.to_dict().items() if k not in ("adam_betas", "adam_eps")}
        lines = []
        for section, d in (("model", model), ("train", train), ("data", self.data)):
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {fmt(v)}" for k, v in d.items())
            lines.append("")
        return "\n".join(lines)


def write_run_echo(out_dir, resolved: dict | RunConfig, command: str) -> None:
    """Write the fully resolved settings and the tool version into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(resolved, RunConfig):
        text = resolved.to_ini()
    else:
        text = f"[{command}]\n" + "".join(f"{k} = {v}\n" for k, v in resolved.items())
    (out / CONFIG_ECHO).write_text(f"# command = {command}\n" + text)
    (out / VERSION_STAMP).write_text(f"patchdiff {__version__}\n")


# -- commands ---------------------------------------------------------------------

def _make_dataset(name: str, count: int, size: int, seed: int) -> Dataset:
    if name == "blobs":
        return gen_blobs(count, (1, size, size), seed)
    if name == "gradients":
        return gen_gradients(count, (3, size, size), seed)
    raise UsageError(f"unknown dataset {name!r}")


def cmd_gen_data(args) -> int:
    ds = _make_dataset(args.dataset, args.count, args.size, args.seed)
    manifest = save_dataset(ds, args.out)
    write_run_echo(args.out, {"dataset": args.dataset, "count": args.count, "size": args.size,
                              "seed": args.seed}, "gen-data")
    back = load_dataset(manifest.parent)
    ok = len(back) == args.count and back.shape == ds.shape
    print(f"wrote {len(back)} {args.dataset} images to {args.out}")
    return EXIT_OK if ok else EXIT_RUNTIME


def _training_images(cfg: RunConfig, data_dir) -> np.ndarray:
    if data_dir is not None:
        ds = load_dataset(data_dir)
    else:
        d = cfg.data
        ds = _make_dataset(d["dataset"], int(d["count"]), int(d["size"]), int(d["seed"]))
    train, _, _ = split(ds)
    return train.images


def cmd_train(args) -> int:
    overrides = {"train.N": args.n_divisions, "train.iterations": args.iters, "train.batch_size": args.batch,
                 "train.lr": args.lr, "train.seed": args.seed}
    cfg = RunConfig.resolve(args.config, overrides)
    ckpt = Path(args.ckpt_dir)
    if (ckpt / "manifest.json").exists() and not args.restart:
        state = load_checkpoint(ckpt)
        if args.iters is not None:
            state.config = TrainConfig.from_dict({**state.config.to_dict(), "iterations": args.iters})
        log.info("resuming from iteration %d", state.iteration)
    else:
        state = TrainState.fresh(cfg.model, cfg.train)
    images = _training_images(cfg, args.data or cfg.data.get("path"))
    write_run_echo(ckpt, RunConfig(state.model.config, state.config, cfg.data), "train")

    def report(i, loss):
        if i % max(1, state.config.iterations // 20) == 0:
            print(f"iteration {i} loss {loss:.5f}", flush=True)

    train_loop(images, state, ckpt_dir=ckpt, log_path=ckpt / "loss.csv", callback=report)
    back = load_checkpoint(ckpt)
    print(f"checkpoint at iteration {back.iteration} in {ckpt}")
    return EXIT_OK if back.iteration == state.config.iterations else EXIT_RUNTIME


def cmd_sample(args) -> int:
    state = load_checkpoint(args.ckpt)
    model = state.model
    H = W = args.size
    grid = PatchGrid(model.config.N, H, W)
    req = SampleRequest(count=args.count, seed=args.seed, grid=grid, sched=state.sched, denoiser=model,
                        image_channels=model.config.image_channels, out_dir=args.out,
                        batch_size=args.batch_size, parallel=args.parallel)
    sample(req)
    write_run_echo(args.out, {"ckpt": args.ckpt, "count": args.count, "seed": args.seed, "size": args.size,
                              "N": grid.N, "parallel": args.parallel}, "sample")
    files = [Path(args.out) / sample_filename(args.seed, k, model.config.image_channels)
             for k in range(args.count)]
    ok = all(f.exists() and read_pnm(f).shape == (model.config.image_channels, H, W) for f in files)
    print(f"wrote {args.count} samples to {args.out}")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_profile(args) -> int:
    if args.ckpt is not None:
        state = load_checkpoint(args.ckpt)
        model_cfg, sched = state.model.config, state.sched
    else:
        cfg = RunConfig.resolve(args.config, desk=True if args.config is None else None)
        model_cfg, sched = cfg.model, cfg.train.schedule()
    n_list = [int(v) for v in args.n_list.split(",") if v.strip()]
    report = profile(model_cfg, (args.size, args.size), n_list, sched, steps_to_measure=args.steps,
                     measure=not args.analytical_only)
    text, csv_text = compare_report(report)
    print(text)
    if args.csv:
        path = Path(args.csv)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(csv_text)
        write_run_echo(path.parent, {"n_list": args.n_list, "size": args.size, "steps": args.steps,
                                     **model_cfg.to_dict()}, "profile")
        if [r["N"] for r in parse_report_csv(path.read_text())] != n_list:
            return EXIT_RUNTIME
    return EXIT_OK


def _load_dir(path) -> np.ndarray:
    files = iter_image_files(path)
    if not files:
        raise FileNotFoundError(f"no PGM/PPM images in {path}")
    return np.stack([to_normalized(read_pnm(f)) for f in files])


def cmd_eval(args) -> int:
    samples = _load_dir(args.samples_dir)
    ref = _load_dir(args.ref_dir)
    grid = PatchGrid(args.n_divisions, samples.shape[-2], samples.shape[-1])
    fd = frechet_distance(fit_stats(samples), fit_stats(ref))
    seam = mean_seam_score(samples, grid)
    row = {"model": args.model, "N": grid.N, "proxy_fd": fd, "mean_seam_score": seam, "n_samples": len(samples)}
    print(f"proxy-FD {fd:.5f}  mean seam score {seam:.5f}  n={len(samples)}")
    if samples.shape[1] == 1:
        print(f"single-blob rate {blob_detection_rate(samples):.3f}")
    if args.csv:
        path = Path(args.csv)
        path.parent.mkdir(parents=True, exist_ok=True)
        rows = read_metric_csv(path) if path.exists() and args.append else []
        write_metric_csv(path, rows + [row])
        write_run_echo(path.parent, {"samples_dir": args.samples_dir, "ref_dir": args.ref_dir,
                                     "n_divisions": grid.N}, "eval")
        if read_metric_csv(path)[-1]["n_samples"] != len(samples):
            return EXIT_RUNTIME
    return EXIT_OK


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="patchdiff", description="Patch-wise diffusion: data, training, sampling, profiling.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset as PGM/PPM files")
    g.add_argument("--dataset", choices=["blobs", "gradients"], required=True)
    g.add_argument("--count", type=int, default=2000)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a patch denoiser")
    t.add_argument("--config")
    t.add_argument("--data", help="dataset directory (default: generate from the [data] section)")
    t.add_argument("--n-divisions", type=int)
    t.add_argument("--iters", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float, help="learning rate (profile default 1e-4)")
    t.add_argument("--ckpt-dir", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--restart", action="store_true", help="ignore an existing checkpoint")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw images from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--batch-size", type=int, default=256)
    s.add_argument("--parallel", action="store_true", help="batch all patches (forfeits the memory bound)")
    s.set_defaults(func=cmd_sample)

    m = sub.add_parser("profile", help="compare peak activation memory across N")
    src = m.add_mutually_exclusive_group()
    src.add_argument("--ckpt")
    src.add_argument("--config")
    m.add_argument("--n-list", default="1,2,4,8")
    m.add_argument("--csv")
    m.add_argument("--size", type=int, default=32)
    m.add_argument("--steps", type=int, default=2)
    m.add_argument("--analytical-only", action="store_true")
    m.set_defaults(func=cmd_profile)

    e = sub.add_parser("eval", help="proxy-FD and seam score of a sample directory")
    e.add_argument("--samples-dir", required=True)
    e.add_argument("--ref-dir", required=True)
    e.add_argument("--n-divisions", type=int, required=True)
    e.add_argument("--csv")
    e.add_argument("--model", default="patchdiff")
    e.add_argument("--append", action="store_true")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"patchdiff: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("failure", exc_info=True)
        print(f"patchdiff: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
