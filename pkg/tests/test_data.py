import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from patchdiff.data import (Dataset, ImageFormatError, area_resize, center_crop_square, gen_blobs,
                            gen_gradients, load_dataset, load_image_dir, ramp, read_pnm, save_dataset,
                            split, split_counts, to_normalized, to_pixels, write_pnm)


def test_blobs_range_and_determinism():
    a = gen_blobs(50, (1, 16, 16), seed=3)
    b = gen_blobs(50, (1, 16, 16), seed=3)
    assert a.images.min() >= -1.0 and a.images.max() <= 1.0
    assert np.array_equal(a.images, b.images)
    assert not np.array_equal(a.images, gen_blobs(50, (1, 16, 16), seed=4).images)
    assert a.images.shape == (50, 1, 16, 16) and a.images.dtype == np.float32


def test_blob_peak_at_centre():
    ds = gen_blobs(20, (1, 12, 12), seed=1)
    for img, (cy, cx) in zip(ds.images, ds.meta["centers"]):
        assert np.unravel_index(img[0].argmax(), (12, 12)) == (cy, cx)
        assert img[0, cy, cx] == pytest.approx(1.0)


def test_blob_max_location_uniform():
    H = W = 8
    ds = gen_blobs(10_000, (1, H, W), seed=7)
    flat = ds.images.reshape(len(ds), -1).argmax(axis=1)
    counts = np.bincount(flat, minlength=H * W)
    assert stats.chisquare(counts).pvalue > 0.01


def test_gradients_constant_orientation_matches_ramp():
    ds = gen_gradients(5, (3, 8, 8), seed=2, angle=0.7)
    assert ds.images.min() >= -1.0 and ds.images.max() <= 1.0
    x = (np.arange(8) + 0.5) / 8 * 2 - 1
    u = (np.cos(0.7) * x[None, :] + np.sin(0.7) * x[:, None]) / np.sqrt(2)
    for img in ds.images:
        for c in range(3):
            # every channel is an affine function of u
            A = np.stack([u.ravel(), np.ones(64)], axis=1)
            coef, res, *_ = np.linalg.lstsq(A, img[c].ravel().astype(np.float64), rcond=None)
            assert np.allclose(A @ coef, img[c].ravel(), atol=1e-6)
    np.testing.assert_allclose(ramp((1, 2, 2), 0.0, [1.0], [0.0])[0],
                               [[-0.5 / np.sqrt(2), 0.5 / np.sqrt(2)]] * 2)
    assert np.array_equal(gen_gradients(4, seed=9).images, gen_gradients(4, seed=9).images)


def test_split_counts_and_properties():
    assert split_counts(100) == (64, 16, 20)
    ds = Dataset("d", np.arange(100, dtype=np.float32).reshape(100, 1, 1, 1), seed=5)
    tr, va, te = split(ds)
    vals = [set(p.images.ravel().tolist()) for p in (tr, va, te)]
    assert [len(v) for v in vals] == [64, 16, 20]
    assert not (vals[0] & vals[1] or vals[0] & vals[2] or vals[1] & vals[2])
    assert vals[0] | vals[1] | vals[2] == set(range(100))
    again = split(ds)
    assert all(np.array_equal(a.images, b.images) for a, b in zip((tr, va, te), again))
    with pytest.raises(ValueError):
        split_counts(10, (0.5, 0.6, -0.1))


@settings(max_examples=50, deadline=None)
@given(n=st.integers(0, 500))
def test_split_counts_exhaustive(n):
    counts = split_counts(n)
    assert sum(counts) == n and min(counts) >= 0


def test_pixel_mapping():
    px = np.array([0, 1, 127, 128, 255], dtype=np.uint8)
    assert np.array_equal(to_pixels(to_normalized(px)), px)
    assert to_pixels(np.array([-3.0, 3.0])).tolist() == [0, 255]


def test_pnm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    for C in (1, 3):
        px = rng.integers(0, 256, (C, 5, 7), dtype=np.uint8)
        write_pnm(tmp_path / f"a{C}.pnm", px)
        assert np.array_equal(read_pnm(tmp_path / f"a{C}.pnm"), px)


def test_pnm_header_comments_and_16bit(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n2 1\n65535\n" + np.array([0, 65535], ">u2").tobytes())
    assert read_pnm(p).tolist() == [[[0, 255]]]


def test_pnm_errors(tmp_path):
    (tmp_path / "x.pgm").write_text("not an image")
    with pytest.raises(ImageFormatError):
        read_pnm(tmp_path / "x.pgm")
    (tmp_path / "t.pgm").write_bytes(b"P5 4 4 255\n\x00\x01")
    with pytest.raises(ImageFormatError):
        read_pnm(tmp_path / "t.pgm")
    with pytest.raises(ImageFormatError):
        write_pnm(tmp_path / "f.pgm", np.zeros((1, 2, 2)))


def test_center_crop_index_arithmetic():
    img = np.arange(200 * 100).reshape(1, 200, 100)
    crop = center_crop_square(img)
    assert crop.shape == (1, 100, 100)
    assert crop[0, 0, 0] == 50 * 100 and crop[0, -1, -1] == 149 * 100 + 99
    assert center_crop_square(np.zeros((1, 6, 10)))[0].shape == (6, 6)


def test_area_resize_block_means():
    img = np.random.default_rng(1).random((2, 8, 8))
    out = area_resize(img, 4, 4)
    np.testing.assert_allclose(out, img.reshape(2, 4, 2, 4, 2).mean(axis=(2, 4)), atol=1e-12)
    np.testing.assert_allclose(area_resize(img, 8, 8), img, atol=1e-12)
    np.testing.assert_allclose(area_resize(np.full((1, 9, 9), 0.25), 4, 4), 0.25)


def test_load_image_dir(tmp_path):
    px = np.random.default_rng(2).integers(0, 256, (1, 8, 8), dtype=np.uint8)
    write_pnm(tmp_path / "a.pgm", px)
    ds = load_image_dir(tmp_path, (8, 8))
    np.testing.assert_allclose(ds.images[0], to_normalized(px), atol=1e-6)
    wide = np.zeros((1, 4, 8), dtype=np.uint8)
    wide[:, :, 2:6] = 200
    write_pnm(tmp_path / "b.pgm", wide)
    (tmp_path / "notes.txt").write_text("ignored")
    ds = load_image_dir(tmp_path, (2, 2))
    np.testing.assert_allclose(ds.images[1], 200 / 127.5 - 1, atol=1e-6)
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "x.pgm").write_text("junk")
    with pytest.raises(ImageFormatError):
        load_image_dir(bad, (2, 2))


def test_save_and_load_dataset(tmp_path):
    ds = gen_blobs(6, (1, 8, 8), seed=4)
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.name == "blobs" and back.seed == 4
    np.testing.assert_allclose(back.images, ds.images, atol=1 / 127.5)
