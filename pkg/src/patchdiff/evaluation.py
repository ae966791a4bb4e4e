"""Desk-scale quality metrics.

``proxy-FD`` is a Fréchet distance between Gaussians fitted to a fixed,
training-free pixel descriptor. It keeps the functional form of FID but is
not comparable to FID values.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .patching import PatchGrid

BLOCK = 4


@dataclass(frozen=True)
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray

    @property
    def d(self) -> int:
        return self.mu.shape[0]


def block_features(images: np.ndarray, block: int = BLOCK) -> np.ndarray:
    """Per-image descriptor: block means followed by block standard deviations.

    ``images`` is n×C×H×W; the result is n×(2·C·(H/block)·(W/block)).
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    n, C, H, W = images.shape
    if H % block or W % block:
        raise ValueError(f"block {block} does not divide {H}x{W}")
    blocks = images.reshape(n, C, H // block, block, W // block, block)
    means = blocks.mean(axis=(3, 5))
    stds = blocks.std(axis=(3, 5))
    return np.concatenate([means.reshape(n, -1), stds.reshape(n, -1)], axis=1)


def fit_stats(images: np.ndarray, block: int = BLOCK) -> GaussianStats:
    feats = block_features(images, block)
    mu = feats.mean(axis=0)
    if len(feats) < 2:
        return GaussianStats(mu, np.zeros((feats.shape[1], feats.shape[1])))
    sigma = np.cov(feats, rowvar=False)
    return GaussianStats(mu, np.atleast_2d((sigma + sigma.T) / 2.0))


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||² + Tr(S_a + S_b - 2 (S_a S_b)^½).

    The trace of the product root is taken from the symmetric matrix
    S_a^½ S_b S_a^½, which has the same eigenvalues as S_a S_b.
    """
    if a.d != b.d:
        raise ValueError(f"dimension mismatch {a.d} vs {b.d}")
    diff = a.mu - b.mu
    root_a = _psd_sqrt(a.sigma)
    inner = root_a @ b.sigma @ root_a
    eig = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_root = np.sqrt(np.clip(eig, 0.0, None)).sum()
    value = diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * tr_root
    return float(max(value, 0.0))


def seam_score(image: np.ndarray, grid: PatchGrid) -> float:
    """Mean |difference| across patch seams minus the mean over all other neighbour pairs.

    Differences are taken between horizontally and vertically adjacent
    pixels, across all channels. With N = 1 there are no seams and the
    score is 0.
    """
    image = np.asarray(image, dtype=np.float64)
    grid.check(image)
    if grid.N == 1:
        return 0.0
    dx = np.abs(np.diff(image, axis=-1))  # pair (x, x+1) at index x
    dy = np.abs(np.diff(image, axis=-2))
    seam_x = (np.arange(grid.W - 1) + 1) % grid.W_p == 0
    seam_y = (np.arange(grid.H - 1) + 1) % grid.H_p == 0
    seam = np.concatenate([dx[..., seam_x].ravel(), dy[..., seam_y, :].ravel()])
    interior = np.concatenate([dx[..., ~seam_x].ravel(), dy[..., ~seam_y, :].ravel()])
    if interior.size == 0:
        return float(seam.mean())
    return float(seam.mean() - interior.mean())


def mean_seam_score(images: np.ndarray, grid: PatchGrid) -> float:
    return float(np.mean([seam_score(img, grid) for img in images]))


def count_blobs(image: np.ndarray, threshold: float = 0.0, min_area: int = 4) -> int:
    """Number of 8-connected bright regions of at least ``min_area`` pixels.

    ``image`` is C×H×W in [-1, 1] (channels averaged) or a 2-d array.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=0)
    labels, n = ndimage.label(img > threshold, structure=np.ones((3, 3)))
    if n == 0:
        return 0
    areas = np.bincount(labels.ravel())[1:]
    return int((areas >= min_area).sum())


def blob_detection_rate(images: np.ndarray, threshold: float = 0.0, min_area: int = 4) -> float:
    """Fraction of images holding exactly one bright blob."""
    return float(np.mean([count_blobs(img, threshold, min_area) == 1 for img in images]))


def write_metric_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["model", "N", "proxy_fd", "mean_seam_score", "n_samples"])
        w.writeheader()
        for r in rows:
            w.writerow(r)


def read_metric_csv(path) -> list[dict]:
    with open(Path(path), newline="") as fh:
        return [{"model": r["model"], "N": int(r["N"]), "proxy_fd": float(r["proxy_fd"]),
                 "mean_seam_score": float(r["mean_seam_score"]), "n_samples": int(r["n_samples"])}
                for r in csv.DictReader(fh)]
