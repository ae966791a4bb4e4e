"""Noise-prediction U-Net conditioned on diffusion step, patch position and global content.

The network input is a patch stacked with its pooled global content (2C
channels). A conditioning vector, the concatenation of a step embedding and
a position embedding (a fully connected layer applied to the one-hot patch
index), is projected per residual block and added to its feature maps.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import ops
from .numerics.tensor import Tensor
from .patching import one_hot


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DenoiserConfig:
    image_channels: int = 1
    N: int = 2
    base_channels: int = 32
    channel_mults: tuple = (1, 2)
    attention: bool = True
    emb_dim: int = 64
    zero_init_output: bool = False

    def __post_init__(self):
        object.__setattr__(self, "channel_mults", tuple(int(m) for m in self.channel_mults))
        if self.image_channels < 1 or self.N < 1 or self.base_channels < 1 or self.emb_dim < 2:
            raise ConfigError(f"invalid denoiser config {self}")
        if not self.channel_mults:
            raise ConfigError("need at least one resolution level")
        if self.emb_dim % 2:
            raise ConfigError("emb_dim must be even (sin/cos halves)")

    @property
    def in_channels(self) -> int:
        return 2 * self.image_channels

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    @property
    def cond_dim(self) -> int:
        return 2 * self.emb_dim

    def level_channels(self, level: int) -> int:
        return self.base_channels * self.channel_mults[level]

    def check_patch(self, H_p: int, W_p: int) -> None:
        f = 2 ** (self.levels - 1)
        if H_p % f or W_p % f:
            raise ConfigError(f"patch {H_p}x{W_p} not divisible by {f} for {self.levels} levels")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**{k: (tuple(v) if k == "channel_mults" else v) for k, v in d.items()})


def norm_groups(channels: int) -> int:
    return 8 if channels % 8 == 0 else channels


def sinusoidal_features(t, dim: int) -> np.ndarray:
    """[sin(t*f_k) ..., cos(t*f_k) ...] with f_k = 10000^(-k/half), k = 0..half-1."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = np.asarray(t, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


# -- parameter construction --------------------------------------------------

@dataclass
class _Builder:
    rng: np.random.Generator
    params: dict = field(default_factory=dict)

    def dense(self, name: str, n_out: int, n_in: int) -> None:
        bound = 1.0 / math.sqrt(n_in)
        self.params[f"{name}.w"] = self.rng.uniform(-bound, bound, (n_out, n_in))
        self.params[f"{name}.b"] = np.zeros(n_out)

    def conv(self, name: str, c_out: int, c_in: int, k: int, zero: bool = False) -> None:
        bound = 1.0 / math.sqrt(c_in * k * k)
        w = np.zeros((c_out, c_in, k, k)) if zero else self.rng.uniform(-bound, bound, (c_out, c_in, k, k))
        self.params[f"{name}.w"] = w
        self.params[f"{name}.b"] = np.zeros(c_out)

    def norm(self, name: str, c: int) -> None:
        self.params[f"{name}.g"] = np.ones(c)
        self.params[f"{name}.b"] = np.zeros(c)

    def resblock(self, name: str, c_in: int, c_out: int, cond_dim: int) -> None:
        self.norm(f"{name}.norm1", c_in)
        self.conv(f"{name}.conv1", c_out, c_in, 3)
        self.dense(f"{name}.cond", c_out, cond_dim)
        self.norm(f"{name}.norm2", c_out)
        self.conv(f"{name}.conv2", c_out, c_out, 3)
        if c_in != c_out:
            self.conv(f"{name}.skip", c_out, c_in, 1)

    def attention(self, name: str, c: int) -> None:
        self.norm(f"{name}.norm", c)
        for proj in ("q", "k", "v", "o"):
            self.dense(f"{name}.{proj}", c, c)


def init_params(config: DenoiserConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    b = _Builder(np.random.default_rng(seed))
    e = config.emb_dim
    b.dense("time.fc1", e, e)
    b.dense("time.fc2", e, e)
    b.dense("pos.fc", e, config.N * config.N)
    b.conv("conv_in", config.base_channels, config.in_channels, 3)
    ch = config.base_channels
    skips = []
    for lvl in range(config.levels):
        out = config.level_channels(lvl)
        b.resblock(f"down{lvl}", ch, out, config.cond_dim)
        ch = out
        if lvl < config.levels - 1:
            skips.append(ch)
    if config.attention:
        b.attention("attn", ch)
    for lvl in reversed(range(config.levels - 1)):
        out = config.level_channels(lvl)
        b.resblock(f"up{lvl}", ch + skips.pop(), out, config.cond_dim)
        ch = out
    b.norm("norm_out", ch)
    b.conv("conv_out", config.image_channels, ch, 3, zero=config.zero_init_output)
    return {k: Tensor(v.astype(dtype), requires_grad=True, dtype=dtype) for k, v in b.params.items()}


def parameter_count(params: dict) -> int:
    return int(sum(p.data.size for p in params.values()))


# -- forward ----------------------------------------------------------------

def time_embedding(t, params: dict, dim: int) -> Tensor:
    """Sinusoidal step features passed through a two-layer MLP."""
    fc1w = params["time.fc1.w"]
    feats = Tensor(sinusoidal_features(t, dim), dtype=fc1w.dtype)
    h = ops.silu(ops.linear(feats, fc1w, params["time.fc1.b"]))
    return ops.linear(h, params["time.fc2.w"], params["time.fc2.b"])


def position_embedding(code, params: dict, validate: bool = True) -> Tensor:
    """Fully connected layer applied to a one-hot patch position code."""
    w = params["pos.fc.w"]
    code = np.asarray(code, dtype=w.dtype)
    if code.shape[-1] != w.shape[1]:
        raise ConfigError(f"position code has length {code.shape[-1]}, expected {w.shape[1]}")
    if validate and not (np.all((code == 0) | (code == 1)) and np.all(code.sum(axis=-1) == 1)):
        raise ValueError("position code is not one-hot")
    return ops.linear(Tensor(code, dtype=w.dtype), w, params["pos.fc.b"])


def _norm(params, name, x):
    g = params[f"{name}.g"]
    return ops.group_norm(x, norm_groups(g.shape[0]), g, params[f"{name}.b"])


def _conv(params, name, x, padding=1):
    return ops.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], padding=padding)


def _resblock(params, name, x, cond_act):
    h = ops.silu(_norm(params, f"{name}.norm1", x))
    h = _conv(params, f"{name}.conv1", h)
    proj = ops.linear(cond_act, params[f"{name}.cond.w"], params[f"{name}.cond.b"])
    h = h + ops.reshape(proj, proj.shape + (1, 1))
    del proj
    h = ops.silu(_norm(params, f"{name}.norm2", h))
    h = _conv(params, f"{name}.conv2", h)
    if f"{name}.skip.w" in params:
        return _conv(params, f"{name}.skip", x, padding=0) + h
    return x + h


def _attention(params, name, x):
    h = _norm(params, f"{name}.norm", x)
    h = ops.self_attention(h, *(params[f"{name}.{p}.w"] for p in "qkvo"),
                           *(params[f"{name}.{p}.b"] for p in "qkvo"))
    return x + h


def predict_noise(x_cond, t, s, params: dict, config: DenoiserConfig) -> Tensor:
    """Estimate the noise in a patch.

    ``x_cond`` is 2C×H_p×W_p (or a batch of those) holding the noisy patch
    followed by its global content; ``t`` is the 1-based step and ``s`` the
    flat patch index, either scalars or one per batch item. Returns C×H_p×W_p
    (or the batch equivalent).
    """
    x = x_cond if isinstance(x_cond, Tensor) else Tensor(np.asarray(x_cond), dtype=params["conv_in.w"].dtype)
    single = x.ndim == 3
    if single:
        x = ops.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != config.in_channels:
        raise ConfigError(f"expected {config.in_channels} input channels, got shape {x_cond.shape}")
    config.check_patch(x.shape[2], x.shape[3])
    B = x.shape[0]
    t_arr = np.broadcast_to(np.asarray(t), (B,))
    s_arr = np.broadcast_to(np.asarray(s), (B,))
    if np.any(t_arr < 1):
        raise ConfigError("diffusion steps are 1-based")

    temb = time_embedding(t_arr, params, config.emb_dim)
    pemb = position_embedding(one_hot(s_arr, config.N), params)
    cond_act = ops.silu(ops.concat([temb, pemb], axis=1))
    del temb, pemb

    h = _conv(params, "conv_in", x)
    del x
    skips = []
    for lvl in range(config.levels):
        h = _resblock(params, f"down{lvl}", h, cond_act)
        if lvl < config.levels - 1:
            skips.append(h)
            h = ops.avg_pool2d(h, 2)
    if config.attention:
        h = _attention(params, "attn", h)
    for lvl in reversed(range(config.levels - 1)):
        h = ops.upsample_nearest(h, 2)
        h = ops.concat([h, skips.pop()], axis=1)
        h = _resblock(params, f"up{lvl}", h, cond_act)
    h = ops.silu(_norm(params, "norm_out", h))
    out = _conv(params, "conv_out", h)
    del h
    if single:
        out = ops.reshape(out, out.shape[1:])
    return out


class Denoiser:
    """Parameters bundled with their config; calling it runs :func:`predict_noise`."""

    def __init__(self, config: DenoiserConfig, params: dict | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    def __call__(self, x_cond, t, s) -> Tensor:
        return predict_noise(x_cond, t, s, self.params, self.config)

    def parameter_count(self) -> int:
        return parameter_count(self.params)

    def astype(self, dtype) -> "Denoiser":
        params = {k: Tensor(p.data.astype(dtype), requires_grad=True, dtype=dtype)
                  for k, p in self.params.items()}
        return Denoiser(self.config, params)
