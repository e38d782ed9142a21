from fractions import Fraction as F
from types import SimpleNamespace

import numpy as np
import pytest
from scipy.signal import argrelmax

from romnet.uq import (Prediction, UQReport, ZoneOfInterest, confidence_interval, error_indicators,
                       extract_qoi, kde, kde_grid, mean_and_variance, run_monte_carlo, write_uq_report,
                       zone_average, zone_of_interest)


# ---------------------------------------------------------------- zone and QoIs

def test_zone_threshold():
    p = np.array([0.0, 0.3, 0.41, 1.0, 0.4])
    z = zone_of_interest(p)
    assert z.ips.tolist() == [2, 3, 4]
    assert np.all(p[z.ips] >= 0.4 * p.max())
    with pytest.raises(ValueError):
        zone_of_interest(np.zeros(4))


def test_qoi_trivial_cases():
    vol = np.array([1.0, 2.0, 3.0, 4.0])
    zone = ZoneOfInterest([1, 3])
    p = np.array([9.0, 0.7, 9.0, 0.7])
    hyd = np.tile([5.0, 5.0, 5.0, 0, 0, 0], (4, 1))
    pb, sb = extract_qoi(p, hyd, zone, vol)
    assert pb == pytest.approx(0.7, rel=1e-15)
    assert sb == pytest.approx(0.0, abs=1e-12)


def test_qoi_hand_weighted_average():
    vol = np.array([1.0, 2.0, 5.0])
    p = np.array([0.25, 0.5, 0.125])
    expected = (F(1) * F(1, 4) + F(2) * F(1, 2) + F(5) * F(1, 8)) / F(8)
    assert zone_average(p, ZoneOfInterest([0, 1, 2]), vol) == pytest.approx(float(expected), rel=1e-15)
    # uniaxial stress: sigma_eq = |s11|
    sig = np.zeros((3, 6))
    sig[:, 0] = [100.0, -200.0, 50.0]
    expected = (F(100) + F(2 * 200) + F(5 * 50)) / F(8)
    assert extract_qoi(p, sig, ZoneOfInterest([0, 1, 2]), vol)[1] == pytest.approx(float(expected), rel=1e-12)


def test_empty_zone_rejected():
    with pytest.raises(ValueError):
        ZoneOfInterest([])


# ---------------------------------------------------------------- estimators

def test_mean_variance_exact():
    x = [1, 2, 4, 7, 11]
    mean = F(sum(x), 5)
    var = sum((F(v) - mean) ** 2 for v in x) / 4
    m, v = mean_and_variance(x)
    assert m == pytest.approx(float(mean), rel=1e-15) and v == pytest.approx(float(var), rel=1e-15)
    with pytest.raises(ValueError):
        mean_and_variance([1.0])


def test_ci_constant_samples():
    lo, hi = confidence_interval(np.full(50, 3.5))
    assert lo == hi == 3.5


def test_ci_width_standard_normal():
    x = np.random.default_rng(0).standard_normal(10_000)
    lo, hi = confidence_interval(x, 0.05)
    assert hi - lo == pytest.approx(2 * 1.959964 / 100, rel=0.05)
    lo99, hi99 = confidence_interval(x, 0.01)
    assert lo99 < lo and hi99 > hi


def test_ci_coverage():
    rng = np.random.default_rng(1)
    hits = 0
    for _ in range(1000):
        x = rng.normal(2.0, 3.0, 200)
        lo, hi = confidence_interval(x, 0.05)
        hits += lo <= 2.0 <= hi
    assert abs(hits / 1000 - 0.95) <= 0.02


def test_ci_width_scaling():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=400), rng.normal(size=1600)
    wa = np.subtract(*confidence_interval(a)[::-1])
    wb = np.subtract(*confidence_interval(b)[::-1])
    assert 1.9 <= wa / wb <= 2.1


# ---------------------------------------------------------------- KDE

def test_kde_normalized():
    x = np.random.default_rng(3).normal(size=500)
    g = np.linspace(-12, 12, 20_001)
    assert np.trapezoid(kde(x, g), g) == pytest.approx(1.0, abs=1e-3)


def test_kde_symmetric():
    x = np.random.default_rng(4).normal(size=100)
    x = np.r_[x, -x]
    g = np.linspace(-5, 5, 201)
    assert np.max(np.abs(kde(x, g) - kde(x, -g))) <= 1e-10


def test_kde_bimodal():
    rng = np.random.default_rng(5)
    x = np.r_[rng.normal(-1.5, 1.0, 1000), rng.normal(1.5, 1.0, 1000)]
    g = kde_grid(x, 400)
    assert len(argrelmax(kde(x, g))[0]) == 2


def test_kde_errors():
    with pytest.raises(ValueError):
        kde([1.0, 1.0, 1.0], [0.0])


# ---------------------------------------------------------------- validation indicators

def _line(n):
    return np.c_[np.arange(n) * 2.5, np.zeros(n), np.zeros(n)]


def test_indicators_identical():
    f = np.array([0.1, 0.5, 0.3, 0.9])
    ind = error_indicators(f, f, [1, 3], np.ones(4), _line(4))
    assert all(v == 0 for v in ind.values())


def test_indicators_scaling():
    f = np.array([0.1, -0.5, 0.3, 0.9])
    e = 0.03
    ind = error_indicators((1 + e) * f, f, [1, 2, 3], np.array([1.0, 2.0, 3.0, 4.0]), _line(4))
    for k in ("l2_omega", "l2_zone", "linf_omega", "linf_zone", "avg_zone"):
        assert ind[k] == pytest.approx(e, rel=1e-12)
    assert ind["dist_max"] == 0


def test_indicators_adjacent_argmax():
    hf = np.array([0.0, 1.0, 0.9, 0.0])
    rom = np.array([0.0, 0.9, 1.0, 0.0])
    assert error_indicators(rom, hf, [1, 2], np.ones(4), _line(4))["dist_max"] == pytest.approx(2.5)


# ---------------------------------------------------------------- Monte Carlo

class _FakeNet:
    """Closed-form stand-in for the ROM-net: fields are simple functions of T_max."""

    def __init__(self, thermal_model, n_ip):
        self.thermal_model = thermal_model
        self.hfm = SimpleNamespace(mesh=SimpleNamespace(volumes=np.linspace(1.0, 2.0, n_ip)))
        self.n_ip = n_ip

    def predict(self, sample):
        T = sample.T_max[: self.n_ip]
        if not np.isfinite(T).all():
            raise ValueError("bad sample")
        sig = np.zeros((self.n_ip, 6))
        sig[:, 0] = T - 293.0
        return Prediction(int(T.mean() > 1100), 1e-6 * (T - 293.0) ** 2, sig, {"solve": 0.0})


def test_mc_empty_run(small_thermal, tmp_path):
    rep = run_monte_carlo(_FakeNet(small_thermal, 10), ZoneOfInterest([0, 1]), 0, 0)
    assert rep.n == 0 and rep.failures == []
    stats = write_uq_report(rep, tmp_path)
    assert stats["p_cum"] is None
    assert "successful 0" in (tmp_path / "summary.txt").read_text()


def test_mc_independent_of_workers(small_thermal, tmp_path):
    net, zone = _FakeNet(small_thermal, 12), ZoneOfInterest([2, 5, 7])
    a = run_monte_carlo(net, zone, 24, seed=9, workers=1)
    b = run_monte_carlo(net, zone, 24, seed=9, workers=4)
    assert np.array_equal(a.p_bar, b.p_bar) and np.array_equal(a.s_eq_bar, b.s_eq_bar)
    assert np.array_equal(a.draw_ids, b.draw_ids) and np.array_equal(a.clusters, b.clusters)
    c = run_monte_carlo(net, zone, 24, seed=10)
    assert not np.array_equal(a.p_bar, c.p_bar)
    stats = write_uq_report(a, tmp_path)
    for st in stats.values():
        lo95, hi95 = st["ci"][0.95]
        lo99, hi99 = st["ci"][0.99]
        assert 0 < hi95 - lo95 and lo99 <= lo95 and hi99 >= hi95
    for f in ("summary.txt", "samples.csv", "kde.csv", "histogram.csv"):
        assert (tmp_path / f).exists()
    assert len((tmp_path / "samples.csv").read_text().splitlines()) == 25


def test_mc_failed_draws_are_excluded(small_thermal):
    class Flaky(_FakeNet):
        def predict(self, sample):
            if sample.coords[1] > 0:
                raise RuntimeError("diverged")
            return super().predict(sample)

    rep = run_monte_carlo(Flaky(small_thermal, 8), ZoneOfInterest([0]), 16, seed=3)
    assert 0 < len(rep.failures) < 16
    assert rep.n + len(rep.failures) == 16
    assert set(rep.draw_ids).isdisjoint(i for i, _ in rep.failures)
    assert all("diverged" in e for _, e in rep.failures)
