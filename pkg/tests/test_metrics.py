import csv
import math

import numpy as np
import pytest
import torch
from scipy import ndimage, stats

from uniremoval import metrics as M
from uniremoval.degradations import make_clean_image, synth_blur, synth_haze, HazeParams, BlurKernel, make_depth_field


def unit(x01):
    """[0, 1] array -> normalized [-1, 1]."""
    return np.asarray(x01, dtype=np.float64) * 2 - 1


def natural(seed, size=64):
    return unit(make_clean_image(size, size, np.random.default_rng(seed)))


def test_psnr_analytic():
    a = np.full((3, 8, 8), 0.3)
    assert abs(M.psnr(unit(a), unit(a + 0.1)) - 20.0) <= 1e-9
    assert abs(M.psnr(unit(a), unit(a + 0.5)) - 10 * math.log10(4)) <= 1e-9
    assert abs(M.psnr(unit(a), unit(a + 0.5)) - 6.0206) < 1e-4
    assert M.psnr(unit(a), unit(a)) == 100.0


def test_psnr_accepts_tensors_and_checks_shape():
    x = torch.zeros(3, 4, 4)
    assert M.psnr(x, x + 0.2) == pytest.approx(20.0)
    with pytest.raises(ValueError):
        M.psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


def test_psnr_decreases_with_uniform_error():
    a = np.full((3, 4, 4), 0.2)
    values = [M.psnr(unit(a), unit(a + d)) for d in (0.01, 0.05, 0.1, 0.3, 0.7)]
    assert all(x > y for x, y in zip(values, values[1:]))


def test_psnr_pixel_shuffle_invariance():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(-1, 1, (3, 16, 16)), rng.uniform(-1, 1, (3, 16, 16))
    perm = rng.permutation(256)
    shuf = lambda x: x.reshape(3, -1)[:, perm].reshape(3, 16, 16)
    assert M.psnr(a, b) == M.psnr(shuf(a), shuf(b)) == M.psnr(b, a)


def test_ssim_identity_and_constants():
    img = natural(1)
    assert abs(M.ssim(img, img) - 1.0) <= 1e-9
    a, b = unit(np.full((3, 16, 16), 0.2)), unit(np.full((3, 16, 16), 0.4))
    expected = (2 * 0.08 + 1e-4) / (0.04 + 0.16 + 1e-4)
    assert M.ssim(a, b) == pytest.approx(expected, abs=1e-9)
    assert M.ssim(a, b) == pytest.approx(0.80009995, abs=1e-8)


def test_ssim_inverted_images_below_one_and_symmetric():
    for seed in range(10):
        x = natural(seed, 32)
        assert M.ssim(x, -x) < 1.0
        y = natural(seed + 100, 32)
        assert M.ssim(x, y) == pytest.approx(M.ssim(y, x), abs=1e-12)


def test_ssim_window_guard():
    with pytest.raises(ValueError, match="window"):
        M.ssim(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))


def test_mscn_properties():
    assert np.array_equal(M.mscn(np.full((3, 20, 20), 0.1)), np.zeros((20, 20)))
    for seed in range(5):
        img = natural(seed)
        m = M.mscn(img)
        assert -0.1 < m.mean() < 0.1
        assert np.array_equal(m, M.mscn(img))


def test_mscn_matches_explicit_gaussian_window():
    rng = np.random.default_rng(3)
    luma = rng.uniform(0, 1, (24, 24))
    ax = np.arange(-3, 4)
    w = np.exp(-(ax[:, None] ** 2 + ax[None] ** 2) / (2 * (7 / 6) ** 2))
    w /= w.sum()
    mu = ndimage.correlate(luma, w, mode="nearest")
    sd = np.sqrt(np.abs(ndimage.correlate(luma ** 2, w, mode="nearest") - mu ** 2))
    assert np.allclose(M.mscn_luma(luma), (luma - mu) / (sd + 1 / 255), atol=1e-10)


def test_ggd_fit_on_gaussian_field():
    x = np.random.default_rng(0).standard_normal((256, 256))
    shape, var = M.fit_ggd(x)
    assert abs(shape - 2.0) <= 0.3
    assert var == pytest.approx(1.0, abs=0.02)


def test_ggd_fit_recovers_known_shapes():
    for beta in (0.8, 1.0, 1.5, 3.0):
        x = stats.gennorm.rvs(beta, size=200_000, random_state=np.random.default_rng(int(beta * 10)))
        assert M.fit_ggd(x)[0] == pytest.approx(beta, rel=0.05)


def test_aggd_fit_symmetric_and_skewed():
    x = np.random.default_rng(1).standard_normal(200_000)
    nu, eta, lv, rv = M.fit_aggd(x)
    assert nu == pytest.approx(2.0, rel=0.05) and abs(eta) < 0.02 and lv == pytest.approx(rv, rel=0.03)
    skew = np.where(x > 0, 2 * x, x)
    _, eta2, lv2, rv2 = M.fit_aggd(skew)
    assert eta2 > 0.5 and rv2 > 3 * lv2


def _brute_ggd_shape(m):
    # independent oracle: grid search on the moment ratio, no root finder
    from scipy.special import gamma
    rho = np.mean(m ** 2) / np.mean(np.abs(m)) ** 2
    grid = np.arange(0.2, 10, 0.001)
    r = gamma(1 / grid) * gamma(3 / grid) / gamma(2 / grid) ** 2
    return grid[np.argmin(np.abs(r - rho))]


def test_brisque_first_feature_matches_bruteforce_mscn_fit():
    noise = np.random.default_rng(2).uniform(-1, 1, (3, 64, 64))
    f = M.brisque_features(noise)
    assert f[0] == pytest.approx(_brute_ggd_shape(M.mscn(noise)), abs=2e-3)


def test_brisque_features_shape_and_errors():
    for seed in range(5):
        f = M.brisque_features(natural(seed))
        assert f.shape == (36,) and np.all(np.isfinite(f))
    with pytest.raises(M.InsufficientStatisticsError):
        M.brisque_features(np.zeros((3, 64, 64)))
    with pytest.raises(ValueError):
        M.brisque_features(np.zeros((3, 16, 16)))


def test_brisque_affine_model(tmp_path):
    model = M.BrisqueModel(50.0, np.zeros(36))
    f = M.brisque_features(natural(3))
    assert model.predict(f) == 50.0 and M.brisque_score(f, model) == 50.0
    path = tmp_path / "m.json"
    model.save(path)
    assert M.brisque_score(f, path) == 50.0
    with pytest.raises(ValueError):
        model.predict(np.zeros(35))


def test_brisque_model_file_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        M.BrisqueModel.load(tmp_path / "none.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ValueError):
        M.BrisqueModel.load(bad)
    bad.write_text('{"format": "other", "version": 1, "intercept": 0}')
    with pytest.raises(ValueError, match="format"):
        M.BrisqueModel.load(bad)


def test_reference_model_orders_clean_below_degraded():
    model = M.BrisqueModel.load(M.reference_model_path())
    wins = 0
    for i in range(20):
        rng = np.random.default_rng(500 + i)
        clean01 = make_clean_image(64, 64, rng)
        bad01 = synth_haze(synth_blur(clean01, BlurKernel.motion(11, 30.0)),
                           HazeParams((0.9, 0.9, 0.9), 2.0, make_depth_field(64, 64, rng)))
        bad01 = np.clip(bad01 + rng.normal(0, 0.08, bad01.shape), 0, 1)
        wins += M.brisque(unit(bad01), model) > M.brisque(unit(clean01), model)
    assert wins >= 16


def test_piqe_orders_noisy_above_clean():
    wins = 0
    for i in range(20):
        rng = np.random.default_rng(900 + i)
        clean01 = make_clean_image(64, 64, rng)
        noisy = np.clip(clean01 + rng.normal(0, 0.1, clean01.shape), 0, 1)
        s_clean, s_noisy = M.piqe(unit(clean01)), M.piqe(unit(noisy))
        assert 0 <= s_clean <= 100 and 0 <= s_noisy <= 100
        wins += s_noisy > s_clean
    assert wins >= 18


def test_piqe_errors_and_determinism():
    with pytest.raises(M.InsufficientActivityError):
        M.piqe(np.zeros((3, 64, 64)))
    img = natural(4)
    assert M.piqe(img) == M.piqe(img)


def test_metric_report_csv(tmp_path):
    imgs = [(f"{i}.png", natural(i)) for i in range(3)]
    report = M.evaluate_images(imgs, dict(imgs), ["psnr", "ssim"])
    assert all(r["psnr"] == 100.0 and r["ssim"] == pytest.approx(1.0) for _, r in report.rows)
    report.write_csv(tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["image", "psnr", "ssim"] and rows[-1][0] == "MEAN" and len(rows) == 5
    with pytest.raises(ValueError):
        M.evaluate_images(imgs, None, ["psnr"])
    noref = M.evaluate_images(imgs, None, ["piqe"])
    agg = noref.aggregate()["piqe"]
    assert agg == pytest.approx(np.mean([r["piqe"] for _, r in noref.rows]))


def test_report_skips_undefined_scores(tmp_path):
    imgs = [("flat.png", np.zeros((3, 64, 64))), ("a.png", natural(1)), ("b.png", natural(2))]
    report = M.evaluate_images(imgs, None, ["piqe"])
    assert math.isnan(report.rows[0][1]["piqe"])
    assert report.undefined() == {"piqe": ["flat.png"]}
    assert report.aggregate()["piqe"] == pytest.approx(np.mean([report.rows[i][1]["piqe"] for i in (1, 2)]))
    report.write_csv(tmp_path / "r.csv")
    assert list(csv.reader(open(tmp_path / "r.csv")))[1] == ["flat.png", "nan"]
