import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchdiff.data import gen_blobs, ramp
from patchdiff.evaluation import (GaussianStats, blob_detection_rate, block_features, count_blobs,
                                  fit_stats, frechet_distance, mean_seam_score, read_metric_csv,
                                  seam_score, write_metric_csv)
from patchdiff.patching import PatchGrid


def test_features_dimension_and_constant_images():
    imgs = np.full((5, 3, 8, 8), 0.2)
    feats = block_features(imgs)
    assert feats.shape == (5, 2 * 2 * 2 * 3)
    s = fit_stats(imgs)
    assert s.d == 24
    np.testing.assert_allclose(s.sigma, 0.0, atol=1e-15)


def test_stats_match_two_pass_oracle():
    imgs = np.random.default_rng(0).standard_normal((30, 1, 8, 8))
    feats = []
    for img in imgs:
        means, stds = [], []
        for by in range(2):
            for bx in range(2):
                blk = img[0, 4 * by:4 * by + 4, 4 * bx:4 * bx + 4]
                m = sum(blk.ravel()) / 16
                means.append(m)
                stds.append(np.sqrt(sum((v - m) ** 2 for v in blk.ravel()) / 16))
        feats.append(means + stds)
    feats = np.array(feats)
    mu = feats.sum(axis=0) / len(feats)
    centred = feats - mu
    cov = centred.T @ centred / (len(feats) - 1)
    s = fit_stats(imgs)
    np.testing.assert_allclose(s.mu, mu, atol=1e-12)
    np.testing.assert_allclose(s.sigma, cov, atol=1e-12)


def test_frechet_examples():
    s = fit_stats(np.random.default_rng(1).standard_normal((40, 1, 8, 8)))
    assert frechet_distance(s, s) == pytest.approx(0.0, abs=1e-6)
    a = GaussianStats(np.array([1.0, 2.0]), np.zeros((2, 2)))
    b = GaussianStats(np.array([-1.0, 0.5]), np.zeros((2, 2)))
    assert frechet_distance(a, b) == 4.0 + 2.25
    one_a = GaussianStats(np.array([0.3]), np.array([[4.0]]))
    one_b = GaussianStats(np.array([-0.2]), np.array([[0.25]]))
    assert frechet_distance(one_a, one_b) == pytest.approx((2.0 - 0.5) ** 2 + 0.5 ** 2, rel=1e-12)
    with pytest.raises(ValueError):
        frechet_distance(a, one_a)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_frechet_symmetric_nonnegative_and_psd(seed):
    rng = np.random.default_rng(seed)
    a = fit_stats(rng.standard_normal((12, 1, 8, 8)))
    b = fit_stats(rng.standard_normal((9, 1, 8, 8)) * 2 + 1)
    assert np.linalg.eigvalsh(a.sigma).min() > -1e-8
    assert np.array_equal(a.sigma, a.sigma.T)
    d_ab, d_ba = frechet_distance(a, b), frechet_distance(b, a)
    assert d_ab >= 0 and d_ab == pytest.approx(d_ba, rel=1e-6)


def test_seam_score_examples():
    grid = PatchGrid(2, 8, 8)
    assert seam_score(np.full((1, 8, 8), 0.4), grid) == 0.0
    img = np.zeros((1, 8, 8))
    img[..., 4:] = 1.0
    # 8 of the 16 seam pairs carry the jump; 96 interior pairs carry none
    assert seam_score(img, grid) == pytest.approx(0.5)
    r = ramp((1, 32, 32), 0.3, [1.0], [0.0])
    assert abs(seam_score(r, PatchGrid(4, 32, 32))) < 0.01 * (r.max() - r.min())
    assert seam_score(img, PatchGrid(1, 8, 8)) == 0.0
    assert mean_seam_score(np.stack([img, img]), grid) == pytest.approx(0.5)


def test_blob_detector_on_real_blobs():
    ds = gen_blobs(200, (1, 32, 32), seed=11)
    assert blob_detection_rate(ds.images) == 1.0
    assert count_blobs(np.full((1, 32, 32), -1.0)) == 0
    two = np.maximum(ds.images[0], ds.images[1])
    assert count_blobs(two) in (1, 2)
    speck = np.full((32, 32), -1.0)
    speck[5, 5] = 1.0
    assert count_blobs(speck) == 0


def test_metric_csv_round_trip(tmp_path):
    rows = [{"model": "m", "N": 2, "proxy_fd": 0.125, "mean_seam_score": -0.01, "n_samples": 200}]
    write_metric_csv(tmp_path / "m.csv", rows)
    assert read_metric_csv(tmp_path / "m.csv") == rows
