"""Monte-Carlo uncertainty propagation through the ROM-net, with validation indicators."""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
import logging
import multiprocessing as mp
import os
import time

import numpy as np
from scipy.special import ndtri
from threadpoolctl import threadpool_limits

from .doe import to_loading_coords
from .gappy import gappy_pod, reconstruct_dual
from .rom import DUAL_NAMES, ReducedSolver
from .tensor import von_mises, voigt_stress_to_mandel
from .thermal import sample_temperature

logger = logging.getLogger(__name__)

LEVELS = (0.95, 0.99)


def von_mises_voigt(sigma):
    """Equivalent stress of true-component stresses ``[s11, s22, s33, s23, s13, s12]``."""
    return von_mises(voigt_stress_to_mandel(sigma))


# --------------------------------------------------------------------------
# zone of interest and QoIs

@dataclass
class ZoneOfInterest:
    ips: np.ndarray
    fraction: float = 0.4
    reference: str = "T_ref + dT0"

    def __post_init__(self):
        self.ips = np.asarray(self.ips, dtype=np.int64)
        if self.ips.size == 0:
            raise ValueError("empty zone of interest")


def zone_of_interest(p_cum_ref, fraction=0.4, reference="T_ref + dT0"):
    """Integration points where the reference ``p_cum`` reaches ``fraction`` of its maximum."""
    p = np.asarray(p_cum_ref, dtype=float)
    if not np.any(p > 0):
        raise ValueError("reference p_cum is identically zero: no zone of interest")
    return ZoneOfInterest(np.flatnonzero(p >= fraction * p.max()), fraction, reference)


def zone_average(values, zone, volumes):
    ips = zone.ips if isinstance(zone, ZoneOfInterest) else np.asarray(zone)
    if ips.size == 0:
        raise ValueError("empty zone of interest")
    w = np.asarray(volumes, dtype=float)[ips]
    return float(np.sum(np.asarray(values, dtype=float)[..., ips] * w, axis=-1) / w.sum())


def extract_qoi(p_cum, sigma_peak, zone, volumes):
    """Volume averages of ``p_cum`` and of the von Mises stress over the zone.

    Parameters
    ----------
    p_cum : ndarray, shape (n_ip,)
        Accumulated octahedral slip at the end of the cycle.
    sigma_peak : ndarray, shape (n_ip, 6)
        Stress (true components) at maximum rotation speed.
    """
    return zone_average(p_cum, zone, volumes), zone_average(von_mises_voigt(sigma_peak), zone, volumes)


# --------------------------------------------------------------------------
# estimators

def mean_and_variance(samples):
    """Sample mean and unbiased sample variance."""
    x = np.asarray(samples, dtype=float)
    if x.size < 2:
        raise ValueError(f"need at least 2 samples, got {x.size}")
    m = x.mean()
    return float(m), float(np.sum((x - m) ** 2) / (x.size - 1))


def confidence_interval(samples, alpha=0.05):
    """Asymptotic normal interval ``mean -/+ q_(1 - alpha/2) sqrt(S^2 / n)``."""
    x = np.asarray(samples, dtype=float)
    m, v = mean_and_variance(x)
    h = float(ndtri(1.0 - alpha / 2.0)) * np.sqrt(v / x.size)
    return m - h, m + h


def silverman_bandwidth(samples):
    x = np.asarray(samples, dtype=float)
    sd = x.std(ddof=1)
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    return 0.9 * spread * x.size ** (-0.2)


def kde(samples, grid, bandwidth=None):
    """Gaussian kernel density estimate evaluated on ``grid``."""
    x = np.asarray(samples, dtype=float)
    if x.size < 2:
        raise ValueError("kde needs at least 2 samples")
    if np.ptp(x) == 0:
        raise ValueError("kde of samples with zero spread")
    h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    g = np.asarray(grid, dtype=float)
    z = (g[..., None] - x) / h
    return np.exp(-0.5 * z * z).sum(axis=-1) / (x.size * h * np.sqrt(2.0 * np.pi))


def kde_grid(samples, n=256, pad=4.0):
    x = np.asarray(samples, dtype=float)
    h = silverman_bandwidth(x)
    return np.linspace(x.min() - pad * h, x.max() + pad * h, n)


# --------------------------------------------------------------------------
# validation indicators

def _rel_l2(a, b, w):
    den = np.sqrt(np.sum(b ** 2 * w))
    return float(np.sqrt(np.sum((a - b) ** 2 * w)) / den) if den > 0 else float(np.any(a != b)) * np.inf


def _rel_linf(a, b):
    den = np.max(np.abs(b))
    return float(np.max(np.abs(a - b)) / den) if den > 0 else float(np.any(a != b)) * np.inf


def error_indicators(rom_field, hf_field, zone, volumes, positions):
    """Validation indicators of one scalar field.

    Returns a dict with the relative L2 and Linf errors on the whole mesh
    and on the zone, the relative error on the zone average, and the
    distance between the positions of the two maxima.
    """
    a = np.asarray(rom_field, dtype=float)
    b = np.asarray(hf_field, dtype=float)
    w = np.asarray(volumes, dtype=float)
    z = zone.ips if isinstance(zone, ZoneOfInterest) else np.asarray(zone)
    avg_a, avg_b = zone_average(a, z, w), zone_average(b, z, w)
    pos = np.asarray(positions, dtype=float)
    return {
        "l2_omega": _rel_l2(a, b, w),
        "l2_zone": _rel_l2(a[z], b[z], w[z]),
        "linf_omega": _rel_linf(a, b),
        "linf_zone": _rel_linf(a[z], b[z]),
        "avg_zone": abs(avg_a - avg_b) / abs(avg_b) if avg_b != 0 else float(avg_a != avg_b) * np.inf,
        "dist_max": float(np.linalg.norm(pos[np.argmax(a)] - pos[np.argmax(b)])),
    }


INDICATOR_LABELS = {
    "l2_omega": "Mean L2 relative error on Omega",
    "l2_zone": "Mean L2 relative error on Omega'",
    "linf_omega": "Mean Linf relative error on Omega",
    "linf_zone": "Mean Linf relative error on Omega'",
    "avg_zone": "Mean relative error on the average over Omega'",
    "dist_max": "Mean distance between maxima (mm)",
}


# --------------------------------------------------------------------------
# exploitation phase

@dataclass
class Prediction:
    cluster: int
    p_cum: np.ndarray          # (n_ip,) end of cycle
    sigma: np.ndarray          # (n_ip, 6) at maximum rotation speed
    timings: dict
    newton_iterations: int = 0

    @property
    def wall_time(self):
        return sum(self.timings.values())


class ROMNet:
    """Dictionary of local ROMs, recommender and Gappy surrogates.

    Parameters
    ----------
    hfm : HighFidelityModel
        Only used for its mesh, operators and schedule.
    roms : dict
        cluster id -> LocalROM.
    gappy : dict
        cluster id -> {dual name -> (GappySurrogate or None, ReducedBasis)}.
        A ``None`` surrogate falls back to Gappy-POD.
    """

    def __init__(self, hfm, thermal_model, recommender, roms, gappy, newton_kw=None):
        self.hfm = hfm
        self.thermal_model = thermal_model
        self.recommender = recommender
        self.roms = roms
        self.gappy = gappy
        self.newton_kw = newton_kw or {}
        self._solvers = {}
        self.peak = hfm.schedule.peak_step

    def solver(self, k):
        if k not in self._solvers:
            self._solvers[k] = ReducedSolver(self.hfm, self.roms[k], **self.newton_kw)
        return self._solvers[k]

    def reconstruct(self, k, name, rid_values):
        sur, basis = self.gappy[k][name]
        if sur is None:
            return gappy_pod(rid_values, basis.modes[:, self.roms[k].rid]) @ basis.modes
        return reconstruct_dual(rid_values, sur, basis)

    def predict(self, sample, cluster=None):
        T_max = getattr(sample, "T_max", sample)
        t = {}
        t0 = time.perf_counter()
        k = int(self.recommender.recommend(T_max)) if cluster is None else int(cluster)
        t1 = time.perf_counter()
        t["recommend"] = t1 - t0
        rt = self.solver(k).solve(T_max)
        t2 = time.perf_counter()
        t["solve"] = t2 - t1
        p = self.reconstruct(k, "p_cum", rt.p_cum_rid[-1])
        sig = np.column_stack([self.reconstruct(k, n, rt.sigma_rid[self.peak, :, c])
                               for c, n in enumerate(DUAL_NAMES[1:])])
        t["reconstruct"] = time.perf_counter() - t2
        return Prediction(k, p, sig, t, int(sum(rt.newton_iterations)))


# --------------------------------------------------------------------------
# Monte Carlo

@dataclass
class UQReport:
    p_bar: np.ndarray
    s_eq_bar: np.ndarray
    clusters: np.ndarray
    draw_ids: np.ndarray
    failures: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def n(self):
        return self.p_bar.size

    def statistics(self):
        out = {}
        for name, x in (("p_cum", self.p_bar), ("sigma_eq", self.s_eq_bar)):
            if x.size < 2:
                out[name] = None
                continue
            m, v = mean_and_variance(x)
            out[name] = {"mean": m, "variance": v,
                         "ci": {lv: confidence_interval(x, 1.0 - lv) for lv in LEVELS}}
        return out


_NET = None
_ZONE = None


def _draw(args):
    i, coords = args
    net, zone = _NET, _ZONE
    try:
        sample = sample_temperature(net.thermal_model, coords)
        pred = net.predict(sample)
        t = time.perf_counter()
        p, s = extract_qoi(pred.p_cum, pred.sigma, zone, net.hfm.mesh.volumes)
        tm = dict(pred.timings)
        tm["qoi"] = time.perf_counter() - t
        return i, (p, s, pred.cluster, tm), None
    except Exception as exc:     # noqa: BLE001 - a failed draw is recorded, not fatal
        return i, None, f"{type(exc).__name__}: {exc}"


def _init_worker():
    threadpool_limits(1)


def mc_coordinates(n_draws, seed, dim=5):
    """Uniform points of the draws, mapped to loading coordinates."""
    chi = np.random.default_rng(seed).random((n_draws, dim))
    return to_loading_coords(chi) if n_draws else np.zeros((0, dim))


def run_monte_carlo(net, zone, n_draws, seed, workers=1):
    """Propagate ``n_draws`` random thermal loadings through the ROM-net.

    The draws depend only on ``(seed, index)`` and every evaluation runs
    with single-threaded BLAS, so the per-draw results do not depend on
    ``workers``.  Failed draws are listed and excluded from the samples.
    """
    global _NET, _ZONE
    start = time.perf_counter()
    coords = mc_coordinates(n_draws, seed)
    _NET, _ZONE = net, zone
    jobs = list(enumerate(coords))
    if workers <= 1 or n_draws <= 1:
        with threadpool_limits(1):
            results = [_draw(j) for j in jobs]
    else:
        ctx = mp.get_context("fork")
        with ProcessPoolExecutor(workers, mp_context=ctx, initializer=_init_worker) as ex:
            results = list(ex.map(_draw, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    _NET = _ZONE = None
    ok = [(i, r) for i, r, e in results if r is not None]
    failures = [(i, e) for i, r, e in results if r is None]
    timings = {}
    for _, r in ok:
        for k, v in r[3].items():
            timings[k] = timings.get(k, 0.0) + v
    if failures:
        logger.warning("%d of %d draws failed", len(failures), n_draws)
    return UQReport(np.array([r[0] for _, r in ok]), np.array([r[1] for _, r in ok]),
                    np.array([r[2] for _, r in ok], dtype=np.int64), np.array([i for i, _ in ok], dtype=np.int64),
                    failures, timings, time.perf_counter() - start)


def write_uq_report(report, directory, kde_points=256, bins=30):
    """Plain-text summary plus CSV tables of samples, KDE curves and histograms."""
    from .io import atomic_write_text

    os.makedirs(directory, exist_ok=True)
    stats = report.statistics()
    lines = [f"draws {report.n + len(report.failures)}", f"successful {report.n}",
             f"failed {len(report.failures)}"]
    for i, e in report.failures:
        lines.append(f"failure draw {i}: {e}")
    for name, st in stats.items():
        if st is None:
            lines.append(f"{name}: fewer than 2 samples")
            continue
        lines.append(f"{name}: mean {st['mean']:.6g}  unbiased variance {st['variance']:.6g}")
        for lv, (lo, hi) in st["ci"].items():
            rel = (hi - lo) / abs(st["mean"]) if st["mean"] else np.inf
            lines.append(f"  {lv:.2f} CI [{lo:.6g}, {hi:.6g}]  width {hi - lo:.4g} ({100 * rel:.2f}% of mean)")
    for k, v in sorted(report.timings.items()):
        lines.append(f"time {k} {v:.3f} s")
    lines.append(f"time total {report.wall_time:.3f} s")
    atomic_write_text(os.path.join(directory, "summary.txt"), "\n".join(lines) + "\n")
    rows = ["draw,cluster,p_cum_bar,sigma_eq_bar"]
    rows += [f"{i},{c},{p:.10g},{s:.10g}" for i, c, p, s in
             zip(report.draw_ids, report.clusters, report.p_bar, report.s_eq_bar)]
    atomic_write_text(os.path.join(directory, "samples.csv"), "\n".join(rows) + "\n")
    if report.n >= 2 and np.ptp(report.p_bar) > 0 and np.ptp(report.s_eq_bar) > 0:
        gp, gs = kde_grid(report.p_bar, kde_points), kde_grid(report.s_eq_bar, kde_points)
        kp, ks = kde(report.p_bar, gp), kde(report.s_eq_bar, gs)
        rows = ["p_cum_bar,density_p,sigma_eq_bar,density_s"]
        rows += [f"{a:.10g},{b:.10g},{c:.10g},{d:.10g}" for a, b, c, d in zip(gp, kp, gs, ks)]
        atomic_write_text(os.path.join(directory, "kde.csv"), "\n".join(rows) + "\n")
        hp, ep = np.histogram(report.p_bar, bins, density=True)
        hs, es = np.histogram(report.s_eq_bar, bins, density=True)
        rows = ["p_left,p_right,p_density,s_left,s_right,s_density"]
        rows += [f"{ep[j]:.10g},{ep[j + 1]:.10g},{hp[j]:.10g},{es[j]:.10g},{es[j + 1]:.10g},{hs[j]:.10g}"
                 for j in range(bins)]
        atomic_write_text(os.path.join(directory, "histogram.csv"), "\n".join(rows) + "\n")
    return stats
