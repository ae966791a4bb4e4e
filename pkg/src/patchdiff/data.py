"""Synthetic datasets, PGM/PPM image files, normalization and splitting."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_SPLIT = (0.64, 0.16, 0.20)
BLOB_SIGMA = 3.0


class ImageFormatError(ValueError):
    pass


@dataclass
class Dataset:
    name: str
    images: np.ndarray  # (count, C, H, W) float32 in [-1, 1]
    seed: int = 0
    split_fractions: tuple = DEFAULT_SPLIT
    meta: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, indices, name: str | None = None) -> "Dataset":
        return Dataset(name or self.name, self.images[np.asarray(indices, dtype=np.int64)],
                       self.seed, self.split_fractions, dict(self.meta))


# -- normalization ------------------------------------------------------------

def to_normalized(pixels: np.ndarray) -> np.ndarray:
    """8-bit pixels -> float32 in [-1, 1]."""
    return (np.asarray(pixels, dtype=np.float64) / 127.5 - 1.0).astype(np.float32)


def to_pixels(x: np.ndarray) -> np.ndarray:
    """Clamp to [-1, 1] and map to uint8."""
    x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    return np.rint((x + 1.0) * 127.5).astype(np.uint8)


# -- generators -------------------------------------------------------------------

def _check_shape(shape) -> tuple[int, int, int]:
    if len(shape) != 3 or min(shape) < 1:
        raise ValueError(f"shape must be (C, H, W), got {shape}")
    return tuple(int(v) for v in shape)


def gen_blobs(count: int, shape=(1, 32, 32), seed: int = 0, sigma: float = BLOB_SIGMA) -> Dataset:
    """One Gaussian bright blob per image on a dark (-1) background.

    Blob centres are uniform over integer pixel positions, so the brightest
    pixel of each image is uniform over the grid.
    """
    C, H, W = _check_shape(shape)
    rng = np.random.default_rng(seed)
    cy = rng.integers(0, H, count)
    cx = rng.integers(0, W, count)
    yy = np.arange(H)[None, :, None]
    xx = np.arange(W)[None, None, :]
    r2 = (yy - cy[:, None, None]) ** 2 + (xx - cx[:, None, None]) ** 2
    img = -1.0 + 2.0 * np.exp(-r2 / (2.0 * sigma ** 2))
    images = np.repeat(img[:, None], C, axis=1).astype(np.float32)
    return Dataset("blobs", images, seed, meta={"centers": np.stack([cy, cx], axis=1),
                                                 "sigma": sigma})


def ramp(shape, angle: float, scales, offsets) -> np.ndarray:
    """Closed-form linear ramp along direction ``angle`` (radians).

    Pixel-centred coordinates span [-1, 1]; channel c is
    ``offsets[c] + scales[c] * (cos(angle) * x + sin(angle) * y) / sqrt(2)``.
    """
    C, H, W = _check_shape(shape)
    x = (np.arange(W) + 0.5) / W * 2.0 - 1.0
    y = (np.arange(H) + 0.5) / H * 2.0 - 1.0
    u = (np.cos(angle) * x[None, :] + np.sin(angle) * y[:, None]) / np.sqrt(2.0)
    scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), (C,))
    offsets = np.broadcast_to(np.asarray(offsets, dtype=np.float64), (C,))
    return offsets[:, None, None] + scales[:, None, None] * u[None]


def gen_gradients(count: int, shape=(3, 32, 32), seed: int = 0, angle: float | None = None) -> Dataset:
    """Linear ramps with random orientation, per-channel slope and offset, inside [-1, 1]."""
    C, H, W = _check_shape(shape)
    rng = np.random.default_rng(seed)
    images = np.empty((count, C, H, W), dtype=np.float32)
    angles = rng.uniform(0.0, 2.0 * np.pi, count) if angle is None else np.full(count, angle)
    for n in range(count):
        scales = rng.uniform(0.3, 1.0, C)
        offsets = rng.uniform(-(1.0 - scales), 1.0 - scales)
        images[n] = ramp(shape, angles[n], scales, offsets)
    return Dataset("gradients", images, seed, meta={"angles": angles})


# -- splitting ----------------------------------------------------------------------

def split_counts(n: int, fractions=DEFAULT_SPLIT) -> tuple[int, int, int]:
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.shape != (3,) or np.any(fractions < 0) or not np.isclose(fractions.sum(), 1.0):
        raise ValueError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    return n_train, n_val, n - n_train - n_val


def split(dataset: Dataset, fractions=DEFAULT_SPLIT, seed: int | None = None):
    """Disjoint, exhaustive train/val/test subsets from a seeded permutation."""
    seed = dataset.seed if seed is None else seed
    n_train, n_val, _ = split_counts(len(dataset), fractions)
    perm = np.random.default_rng(seed).permutation(len(dataset))
    parts = (np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]),
             np.sort(perm[n_train + n_val:]))
    return tuple(dataset.subset(idx, f"{dataset.name}:{tag}")
                 for idx, tag in zip(parts, ("train", "val", "test")))


# -- PGM / PPM ------------------------------------------------------------------------

def write_pnm(path, pixels: np.ndarray) -> None:
    """Write a C×H×W uint8 array as binary PGM (C=1) or PPM (C=3), maxval 255."""
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        pixels = pixels[None]
    if pixels.dtype != np.uint8:
        raise ImageFormatError(f"expected uint8 pixels, got {pixels.dtype}")
    C, H, W = pixels.shape
    magic = {1: b"P5", 3: b"P6"}.get(C)
    if magic is None:
        raise ImageFormatError(f"PNM supports 1 or 3 channels, got {C}")
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (W, H))
        fh.write(np.ascontiguousarray(pixels.transpose(1, 2, 0)).tobytes())


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """First ``count`` whitespace-separated header tokens (comments skipped) and the data offset."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise ImageFormatError("truncated header")
        if data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    return tokens, pos + 1


def read_pnm(path) -> np.ndarray:
    """Read binary PGM/PPM into a C×H×W uint8 array (16-bit files are rescaled)."""
    data = Path(path).read_bytes()
    if data[:2] not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: not a binary PGM/PPM file")
    C = 1 if data[:2] == b"P5" else 3
    try:
        tokens, offset = _tokens(data[2:], 3)
        W, H, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise ImageFormatError(f"{path}: malformed header") from exc
    if W < 1 or H < 1 or not 0 < maxval < 65536:
        raise ImageFormatError(f"{path}: bad dimensions or maxval")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    n = W * H * C
    raster = data[2 + offset:2 + offset + n * dtype.itemsize]
    if len(raster) != n * dtype.itemsize:
        raise ImageFormatError(f"{path}: truncated raster")
    arr = np.frombuffer(raster, dtype=dtype).reshape(H, W, C).transpose(2, 0, 1)
    if maxval != 255:
        arr = np.rint(arr.astype(np.float64) * 255.0 / maxval).astype(np.uint8)
    return np.ascontiguousarray(arr)


# -- resizing and loading ------------------------------------------------------------

def center_crop_square(img: np.ndarray) -> np.ndarray:
    H, W = img.shape[-2:]
    side = min(H, W)
    top, left = (H - side) // 2, (W - side) // 2
    return img[..., top:top + side, left:left + side]


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) matrix of overlap fractions between output and input pixel intervals."""
    edges_out = np.arange(n_out + 1) * (n_in / n_out)
    lo = np.maximum(edges_out[:-1, None], np.arange(n_in)[None, :])
    hi = np.minimum(edges_out[1:, None], np.arange(n_in)[None, :] + 1)
    w = np.clip(hi - lo, 0.0, None)
    return w / w.sum(axis=1, keepdims=True)


def area_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Area-averaging resample of the last two axes (exact block means for integer factors)."""
    H, W = img.shape[-2:]
    wy, wx = _area_weights(H, out_h), _area_weights(W, out_w)
    return np.einsum("yh,...hw,xw->...yx", wy, np.asarray(img, dtype=np.float64), wx)


def load_image_dir(path, target_hw, name: str | None = None) -> Dataset:
    """Load every .pgm/.ppm file in ``path`` (sorted by name): centre-crop to the short side,
    area-resize to ``target_hw`` and normalize to [-1, 1].

    Mixed channel counts are rejected.
    """
    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in (".pgm", ".ppm", ".pnm"))
    if not files:
        raise ImageFormatError(f"{path}: no PGM/PPM files")
    out_h, out_w = target_hw
    images = []
    for f in files:
        px = center_crop_square(read_pnm(f))
        if px.shape[-2:] != (out_h, out_w):
            px = area_resize(px, out_h, out_w)
        images.append(np.asarray(px, dtype=np.float64) / 127.5 - 1.0)
    if len({im.shape for im in images}) != 1:
        raise ImageFormatError(f"{path}: images have inconsistent channel counts")
    return Dataset(name or Path(path).name, np.stack(images).astype(np.float32),
                   meta={"files": [f.name for f in files]})


def save_dataset(dataset: Dataset, out_dir) -> Path:
    """Write each image as PGM/PPM plus ``manifest.txt`` (header lines, then one path per line)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = ".pgm" if dataset.shape[0] == 1 else ".ppm"
    names = []
    for n, img in enumerate(dataset.images):
        fname = f"{dataset.name}_{n:05d}{ext}"
        write_pnm(out / fname, to_pixels(img))
        names.append(fname)
    manifest = out / "manifest.txt"
    with open(manifest, "w") as fh:
        fh.write(f"# name = {dataset.name}\n")
        fh.write(f"# shape = {','.join(str(v) for v in dataset.shape)}\n")
        fh.write(f"# seed = {dataset.seed}\n")
        fh.write(f"# count = {len(dataset)}\n")
        fh.writelines(name + "\n" for name in names)
    return manifest


def read_manifest(path) -> tuple[dict, list[str]]:
    header, entries = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            header[key.strip()] = value.strip()
        elif line.strip():
            entries.append(line.strip())
    return header, entries


def load_dataset(path) -> Dataset:
    """Load a directory written by :func:`save_dataset` (or any PGM/PPM directory)."""
    path = Path(path)
    manifest = path / "manifest.txt" if path.is_dir() else path
    if not manifest.exists():
        ds = load_image_dir(path, _first_shape(path))
        return ds
    header, entries = read_manifest(manifest)
    images = np.stack([to_normalized(read_pnm(manifest.parent / e)) for e in entries])
    return Dataset(header.get("name", manifest.parent.name), images, int(header.get("seed", 0)))


def _first_shape(path: Path) -> tuple[int, int]:
    for p in sorted(path.iterdir()):
        if p.suffix.lower() in (".pgm", ".ppm", ".pnm"):
            side = min(read_pnm(p).shape[-2:])
            return side, side
    raise ImageFormatError(f"{path}: no PGM/PPM files")


def iter_image_files(path) -> list[str]:
    return sorted(os.fspath(p) for p in Path(path).iterdir()
                  if p.suffix.lower() in (".pgm", ".ppm", ".pnm"))
