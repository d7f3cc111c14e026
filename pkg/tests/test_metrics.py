import math

import numpy as np
import pytest

import oracles
from hinet import metrics
from hinet.errors import ConfigError, DataError, DimensionError
from hinet.metrics import MetricsRecord, aggregate


def test_psnr_examples():
    assert metrics.psnr([0, 1], [0, 1]) == math.inf
    assert metrics.psnr([0.0, 1.0], [0.0, 0.5]) == pytest.approx(10 * math.log10(8), abs=1e-12)
    assert metrics.psnr([0.0, 1.0], [0.0, 0.5]) == pytest.approx(9.0309, abs=1e-4)


def test_psnr_peak_uses_both_images():
    # the prediction holds the peak here
    assert metrics.psnr([0.0, 0.5], [0.0, 1.0]) == pytest.approx(10 * math.log10(8))


def test_mse_term_shift_invariant_peak_not():
    rng = np.random.default_rng(0)
    y, g = rng.random((8, 8)), rng.random((8, 8))
    c = 0.25
    mse = np.mean((y - g) ** 2)
    assert np.mean(((y - c) - (g - c)) ** 2) == pytest.approx(mse, rel=1e-12)
    peak = max(y.max(), g.max()) - c
    assert metrics.psnr(y - c, g - c) == pytest.approx(10 * np.log10(peak ** 2 / mse), rel=1e-12)
    assert metrics.psnr(y - c, g - c) < metrics.psnr(y, g)


def test_psnr_monotone_in_noise():
    rng = np.random.default_rng(1)
    y = rng.random((32, 32))
    noise = rng.standard_normal((32, 32))
    vals = [metrics.psnr(y, np.clip(y + a * noise, 0, 1)) for a in (0.01, 0.03, 0.1, 0.2, 0.4)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_nmse_examples():
    y = np.array([1.0, 1.0])
    assert metrics.nmse(y, y) == 0.0
    assert metrics.nmse(y, np.zeros(2)) == 1.0
    assert metrics.nmse(y, np.array([1.0, 0.0])) == 0.5
    with pytest.raises(DataError):
        metrics.nmse(np.zeros(3), np.ones(3))


@pytest.mark.parametrize("alpha", [0.0, 0.3, 1.0, 1.7, -2.0])
def test_nmse_scaling_identity(alpha):
    y = np.random.default_rng(2).random((16, 16))
    assert metrics.nmse(y, alpha * y) == pytest.approx((1 - alpha) ** 2, rel=1e-12, abs=1e-15)


def test_ssim_self_is_exactly_one():
    y = np.random.default_rng(3).random((40, 40))
    assert metrics.ssim(y, y) == 1.0


def test_ssim_inverted_image_is_low():
    y = np.random.default_rng(4).random((32, 32))
    assert metrics.ssim(y, 1 - y) < 0.5
    assert metrics.ssim(y, 1 - y) == pytest.approx(oracles.ssim(y, 1 - y), abs=1e-9)


def test_ssim_uniform_images_luminance_only():
    y, g = np.full((20, 20), 0.3), np.full((20, 20), 0.7)
    c1 = 0.01 ** 2
    expected = (2 * 0.3 * 0.7 + c1) / (0.3 ** 2 + 0.7 ** 2 + c1)
    assert metrics.ssim(y, g) == pytest.approx(expected, abs=1e-9)


def test_ssim_errors_and_range():
    with pytest.raises(ConfigError):
        metrics.ssim(np.zeros((8, 8)), np.zeros((8, 8)))
    with pytest.raises(DimensionError):
        metrics.ssim(np.zeros((16, 16)), np.zeros((16, 17)))
    rng = np.random.default_rng(5)
    for _ in range(10):
        v = metrics.ssim(rng.random((24, 24)), rng.random((24, 24)))
        assert -1.0 <= v <= 1.0


def test_metrics_reject_nonfinite():
    with pytest.raises(DataError):
        metrics.psnr([np.nan, 1.0], [0.0, 1.0])


def test_image_metrics_rescale_to_unit_range():
    y = np.tile([[-1.0, 1.0]], (12, 6))
    out = metrics.image_metrics(y, y * 0.0)
    # on [0, 1]: y -> {0, 1}, prediction -> 0.5 everywhere
    assert out["psnr"] == pytest.approx(10 * math.log10(1 / 0.25))
    assert out["nmse"] == pytest.approx(0.25 / 0.5)


def test_aggregate_matches_bruteforce_and_csv(tmp_path):
    rng = np.random.default_rng(6)
    recs = [MetricsRecord(f"s{i % 3}", i, float(rng.uniform(20, 30)), float(rng.uniform(0, 0.1)),
                          float(rng.uniform(0.8, 1))) for i in range(12)]
    recs.append(MetricsRecord("s0", 99, math.inf, 0.0, 1.0))
    path = metrics.write_slice_csv(tmp_path / "slices.csv", recs)
    back = metrics.read_slice_csv(path)
    assert back == recs
    rep = aggregate(back, "T1+T2→Flair")
    assert rep.count == 13
    assert rep.n_infinite_psnr == 1
    ps = [r.psnr for r in recs[:-1]]
    mean = sum(ps) / len(ps)
    assert rep.stats["psnr"]["mean"] == pytest.approx(mean, rel=1e-12)
    assert rep.stats["psnr"]["std"] == pytest.approx(math.sqrt(sum((p - mean) ** 2 for p in ps) / len(ps)))
    assert rep.stats["nmse"]["count"] == 13
    assert rep.orientation["nmse"] == "lower is better"
    assert "PSNR" in rep.format_table()


def test_aggregate_per_subject():
    recs = [MetricsRecord("a", 0, 10.0, 0.1, 0.5), MetricsRecord("a", 1, 20.0, 0.3, 0.7),
            MetricsRecord("b", 0, 40.0, 0.2, 0.9)]
    rep = aggregate(recs, per_subject=True)
    assert rep.count == 2
    assert rep.stats["psnr"]["mean"] == pytest.approx((15.0 + 40.0) / 2)
