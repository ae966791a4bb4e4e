"""Patch grid geometry, position encoding and global content pooling.

Images are C×H×W arrays, or B×C×H×W batches; the last two axes are always
spatial. Patches are ordered row-major by their flat index ``s = i*N + j``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

from .numerics.ops import block_mean


class PatchError(ValueError):
    pass


class PatchIndex(NamedTuple):
    i: int
    j: int
    s: int


@dataclass(frozen=True)
class PatchGrid:
    N: int
    H: int
    W: int

    def __post_init__(self):
        if self.N < 1:
            raise PatchError(f"N must be >= 1, got {self.N}")
        if self.H % self.N or self.W % self.N:
            raise PatchError(f"N={self.N} does not divide image size {self.H}x{self.W}")

    @property
    def H_p(self) -> int:
        return self.H // self.N

    @property
    def W_p(self) -> int:
        return self.W // self.N

    @property
    def count(self) -> int:
        return self.N * self.N

    def indices(self) -> list[PatchIndex]:
        return [PatchIndex(s // self.N, s % self.N, s) for s in range(self.count)]

    def bounds(self, s: int) -> tuple[slice, slice]:
        i, j = unflatten_index(s, self.N)
        return (slice(i * self.H_p, (i + 1) * self.H_p), slice(j * self.W_p, (j + 1) * self.W_p))

    def check(self, image: np.ndarray) -> None:
        if image.ndim < 3 or image.shape[-2:] != (self.H, self.W):
            raise PatchError(f"image shape {image.shape} does not match grid {self.H}x{self.W}")


def flat_index(i: int, j: int, N: int) -> int:
    if not (0 <= i < N and 0 <= j < N):
        raise PatchError(f"patch ({i}, {j}) outside a {N}x{N} grid")
    return i * N + j


def unflatten_index(s: int, N: int) -> tuple[int, int]:
    if not 0 <= s < N * N:
        raise PatchError(f"flat index {s} outside 0..{N * N - 1}")
    return s // N, s % N


def one_hot(s, N: int, dtype=np.float32) -> np.ndarray:
    """One-hot position code of length N². Accepts a scalar or an array of indices."""
    s_arr = np.asarray(s)
    if np.any(s_arr < 0) or np.any(s_arr >= N * N):
        raise PatchError(f"flat index outside 0..{N * N - 1}")
    return np.eye(N * N, dtype=dtype)[s_arr]


def partition(image: np.ndarray, grid: PatchGrid) -> list[tuple[PatchIndex, np.ndarray]]:
    """Split into N² non-overlapping patches (copies), row-major by flat index."""
    grid.check(image)
    out = []
    for idx in grid.indices():
        rows, cols = grid.bounds(idx.s)
        out.append((idx, image[..., rows, cols].copy()))
    return out


def crop(image: np.ndarray, grid: PatchGrid, s) -> np.ndarray:
    """Patch ``s`` of ``image``; for a batch, ``s`` may give one index per item."""
    grid.check(image)
    s_arr = np.asarray(s)
    if s_arr.ndim == 0:
        rows, cols = grid.bounds(int(s_arr))
        return image[..., rows, cols]
    if image.ndim != 4 or s_arr.shape != (image.shape[0],):
        raise PatchError("per-item indices need a B×C×H×W batch and B indices")
    i, j = s_arr // grid.N, s_arr % grid.N
    if np.any(s_arr < 0) or np.any(s_arr >= grid.count):
        raise PatchError("flat index out of range")
    ys = i[:, None] * grid.H_p + np.arange(grid.H_p)[None, :]
    xs = j[:, None] * grid.W_p + np.arange(grid.W_p)[None, :]
    b = np.arange(image.shape[0])[:, None, None, None]
    c = np.arange(image.shape[1])[None, :, None, None]
    return image[b, c, ys[:, None, :, None], xs[:, None, None, :]]


def reassemble(patches: Iterable[tuple[PatchIndex, np.ndarray]], grid: PatchGrid) -> np.ndarray:
    """Inverse of :func:`partition`; input order does not matter."""
    patches = list(patches)
    seen: set[int] = set()
    out = None
    for idx, patch in patches:
        s = idx.s if isinstance(idx, PatchIndex) else int(idx)
        unflatten_index(s, grid.N)
        if s in seen:
            raise PatchError(f"duplicate patch index {s}")
        seen.add(s)
        if patch.shape[-2:] != (grid.H_p, grid.W_p):
            raise PatchError(f"patch {s} has shape {patch.shape}, expected spatial "
                             f"{(grid.H_p, grid.W_p)}")
        if out is None:
            out = np.empty(patch.shape[:-2] + (grid.H, grid.W), dtype=patch.dtype)
        elif patch.shape[:-2] != out.shape[:-2]:
            raise PatchError(f"patch {s} has shape {patch.shape}, inconsistent with the others")
        rows, cols = grid.bounds(s)
        out[..., rows, cols] = patch
    missing = set(range(grid.count)) - seen
    if missing:
        raise PatchError(f"missing patch indices {sorted(missing)}")
    return out


def global_content(image: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Per-channel N×N block means: the whole image pooled down to patch size.

    Has no trainable parameters; for N = 1 it returns the image unchanged.
    """
    grid.check(image)
    return block_mean(np.asarray(image), grid.N)


def assemble_condition(patch: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Stack the patch and its global content along the channel axis (patch first)."""
    if patch.shape[-2:] != g.shape[-2:]:
        raise PatchError(f"spatial mismatch: patch {patch.shape} vs global content {g.shape}")
    if patch.ndim != g.ndim:
        raise PatchError(f"rank mismatch: patch {patch.shape} vs global content {g.shape}")
    return np.concatenate([patch, g], axis=-3)
