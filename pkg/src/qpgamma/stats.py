"""Correlation and coincidence statistics, poisoning footprint and parameter calibration.

Probabilities carry Wilson score intervals and rates carry Poisson
(Garwood) intervals.  All reducers are plain sums, so results do not depend
on the order in which inputs are combined.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import optimize, stats
from scipy.interpolate import CloughTocher2DInterpolator, NearestNDInterpolator
from scipy.spatial import cKDTree

from .analysis import JumpEvent, MaskedDigitalTrace
from .errors import DataError, NumericalError

Z95 = 1.959963984540054


# ---------------------------------------------------------------------------
# intervals


def wilson_interval(k, n, z: float = Z95) -> tuple[float, float]:
    """Wilson score interval for ``k`` successes in ``n`` trials."""
    if n <= 0:
        return 0.0, 1.0
    p = k / n
    d = 1 + z * z / n
    c = (p + z * z / (2 * n)) / d
    h = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / d
    return float(max(0.0, c - h)), float(min(1.0, c + h))


def poisson_interval(k: int, cl: float = 0.95) -> tuple[float, float]:
    """Interval on a Poisson mean given ``k`` observed counts.

    Zero counts give the one-sided upper limit ``-ln(1 - cl)``; otherwise the
    central Garwood interval.
    """
    if k < 0:
        raise ValueError("count must be >= 0")
    if k == 0:
        return 0.0, float(-np.log(1 - cl))
    a = 1 - cl
    return float(stats.chi2.ppf(a / 2, 2 * k) / 2), float(stats.chi2.ppf(1 - a / 2, 2 * k + 2) / 2)


# ---------------------------------------------------------------------------
# rates


@dataclass
class RateEstimate:
    rate: float
    lower: float
    upper: float
    count: int
    duration: float

    @property
    def sigma(self) -> float:
        return float(np.sqrt(max(self.count, 1)) / self.duration)


def jump_rate(jumps, duration: float, cl: float = 0.95) -> RateEstimate:
    """Rate of a jump list (or a jump count) over ``duration`` seconds."""
    if not duration > 0:
        raise ValueError("duration must be > 0")
    k = int(jumps) if np.isscalar(jumps) else len(jumps)
    lo, hi = poisson_interval(k, cl)
    return RateEstimate(k / duration, lo / duration, hi / duration, k, duration)


@dataclass
class PowerLaw:
    exponent: float
    exponent_err: float
    prefactor: float


def rate_vs_distance(rates, distances, errors=None) -> PowerLaw:
    """Weighted log-log fit ``rate = a * r**k``."""
    r = np.asarray(rates, dtype=float)
    d = np.asarray(distances, dtype=float)
    if r.size < 2 or np.any(r <= 0) or np.any(d <= 0):
        raise DataError("need at least two positive rates at positive distances")
    y, X = np.log(r), np.column_stack([np.log(d), np.ones_like(d)])
    # weights are 1/sigma of log(rate); unit weights fall back to the scatter
    w = np.ones_like(r) if errors is None else r / np.maximum(np.asarray(errors, dtype=float), 1e-300)
    coef, *_ = np.linalg.lstsq(X * w[:, None], y * w, rcond=None)
    cov = np.linalg.inv((X * w[:, None]).T @ (X * w[:, None]))
    if errors is None and r.size > 2:
        cov *= np.sum((y - X @ coef) ** 2) / (r.size - 2)
    k, lna = coef
    return PowerLaw(float(k), float(np.sqrt(max(cov[0, 0], 0.0))), float(np.exp(lna)))


# ---------------------------------------------------------------------------
# correlated jumps between qubit pairs


@dataclass
class PairStats:
    pair: tuple[str, str]
    p_i: float
    p_j: float
    p_ij_obs: float
    p_ij: float
    p_corr: float
    p_corr_err: float
    n_bins: int = 0
    observed_rate: float = float("nan")
    background_rate: float = float("nan")


def correlation_from_probabilities(p_i, p_j, p_ij_obs):
    """True two-fold probability and ``p_corr`` from observed single and joint probabilities."""
    p_i, p_j, p_ij_obs = (np.asarray(v, dtype=float) for v in (p_i, p_j, p_ij_obs))
    if np.any(p_i + p_j <= 0):
        raise DataError("p_corr undefined: both single-qubit probabilities are zero")
    den = 1 + p_ij_obs - (p_i + p_j)
    with np.errstate(divide="ignore", invalid="ignore"):
        p_ij = np.where(den > 0, (p_ij_obs - p_i * p_j) / np.where(den > 0, den, 1.0), p_ij_obs)
    return p_ij, 2 * p_ij / (p_i + p_j)


def _pcorr_from_counts(n: int, n_i: int, n_j: int, n_ij: int) -> tuple[float, float]:
    """``(p_ij, p_corr)`` from integer window counts; exact for identical streams."""
    if n_i + n_j == 0:
        raise DataError("p_corr undefined: both single-qubit probabilities are zero")
    num = n * n_ij - n_i * n_j
    den = n + n_ij - n_i - n_j
    if den <= 0:
        return n_ij / n, 2 * n_ij / (n_i + n_j)
    return num / (n * den), 2 * num / (den * (n_i + n_j))


def _occupancy(times, n_bins: int, width: float, t0: float) -> np.ndarray:
    b = np.floor((np.asarray(times, dtype=float) - t0) / width).astype(np.int64)
    b = b[(b >= 0) & (b < n_bins)]
    occ = np.zeros(n_bins, bool)
    occ[b] = True
    return occ


def correlation_probability(times_i, times_j, window: float, duration: float, t0: float = 0.0,
                            pair=("i", "j")) -> PairStats:
    """Correlation probability of two jump streams binned in coincidence windows.

    ``times_*`` are jump times (s).  ``p_i`` is the fraction of windows with
    a jump on qubit i and ``p_ij_obs`` the fraction with jumps on both.
    """
    if not window > 0 or not duration >= window:
        raise ValueError("need 0 < window <= duration")
    n = int(duration // window)
    a = _occupancy(times_i, n, window, t0)
    b = _occupancy(times_j, n, window, t0)
    p_i, p_j, p_ij_obs = a.mean(), b.mean(), (a & b).mean()
    p_ij, p_corr = _pcorr_from_counts(n, int(a.sum()), int(b.sum()), int((a & b).sum()))
    err = _pcorr_error(a, b)
    return PairStats(tuple(pair), float(p_i), float(p_j), float(p_ij_obs), float(p_ij), float(p_corr), err, n)


def _pcorr_error(a: np.ndarray, b: np.ndarray) -> float:
    """Standard error of p_corr from multinomial bin counts by the delta method."""
    n = a.size
    n11 = np.count_nonzero(a & b)
    n10 = np.count_nonzero(a & ~b)
    n01 = np.count_nonzero(~a & b)
    probs = np.array([n11, n10, n01, n - n11 - n10 - n01], float) / n

    def f(q):
        q11, q10, q01 = q[0], q[1], q[2]
        pi, pj = q11 + q10, q11 + q01
        if pi + pj <= 0:
            return 0.0
        return float(correlation_from_probabilities(pi, pj, q11)[1])

    g = np.zeros(4)
    h = 1e-6
    for k in range(3):
        d = np.zeros(4)
        d[k] = h
        g[k] = (f(probs + d) - f(probs - d)) / (2 * h)
    cov = (np.diag(probs) - np.outer(probs, probs)) / n
    return float(np.sqrt(max(g @ cov @ g, 0.0)))


def pairwise_parity_rate(trace_i: MaskedDigitalTrace, trace_j: MaskedDigitalTrace, window: int,
                         pair=("i", "j")) -> PairStats:
    """Two-fold parity-switch rate of two decoded traces on a common sample clock.

    The jointly unmasked record is cut into windows of ``window`` samples;
    a window counts when both traces switch inside it.  The random
    background is ``gamma_i * gamma_j * window_duration``.
    """
    if trace_i.mask.size != trace_j.mask.size:
        raise DataError("traces must share a sample clock")
    dt = trace_i.dt
    n = trace_i.mask.size // window
    if n == 0:
        raise DataError("trace shorter than one window")
    sl = slice(0, n * window)
    ok = (~trace_i.mask[sl] & ~trace_j.mask[sl]).reshape(n, window).all(axis=1)
    if not ok.any():
        raise DataError("no jointly unmasked time")

    def switched(t):
        # flip[k] marks a change between samples k-1 and k, so boundary flips count
        flip = np.zeros(n * window, bool)
        flip[1:] = t.states[: n * window][1:] != t.states[: n * window][:-1]
        return flip.reshape(n, window).any(axis=1)

    si, sj = switched(trace_i), switched(trace_j)
    both = si & sj & ok
    T = ok.sum() * window * dt
    gi, gj = trace_i.switching_rate, trace_j.switching_rate
    obs = both.sum() / T
    bkg = gi * gj * window * dt
    pi, pj = (si & ok).sum() / ok.sum(), (sj & ok).sum() / ok.sum()
    if pi + pj > 0:
        p_ij, p_corr = _pcorr_from_counts(int(ok.sum()), int((si & ok).sum()), int((sj & ok).sum()),
                                          int(both.sum()))
        err = _pcorr_error(si[ok], sj[ok])
    else:
        p_ij, p_corr, err = 0.0, 0.0, 0.0
    return PairStats(tuple(pair), float(pi), float(pj), float(both.sum() / ok.sum()), float(p_ij),
                     float(p_corr), err, int(ok.sum()), float(obs), float(bkg))


# ---------------------------------------------------------------------------
# poisoning probability and coincidence scan


def poisoning_probability(p_obs, p_bkgd):
    """``1 - (1 - 2 p_obs)/(1 - 2 p_bkgd)``; raw value, not clamped."""
    p_obs = np.asarray(p_obs, dtype=float)
    p_bkgd = np.asarray(p_bkgd, dtype=float)
    if np.any(p_bkgd >= 0.5):
        raise DataError("p_bkgd >= 0.5: poisoning probability undefined")
    out = 1.0 - (1.0 - 2.0 * p_obs) / (1.0 - 2.0 * p_bkgd)
    return float(out) if out.ndim == 0 else out


def poisoning_uncertainty(p_obs, n_unmasked, p_bkgd, p_bkgd_err=0.0):
    """Standard error of ``p_poison`` from the binomial error on ``p_obs`` and the error on ``p_bkgd``."""
    p_obs, n, p_bkgd = (np.asarray(v, dtype=float) for v in (p_obs, n_unmasked, p_bkgd))
    s_obs = np.sqrt(p_obs * (1 - p_obs) / np.maximum(n, 1))
    den = 1 - 2 * p_bkgd
    d_obs = 2 / den
    d_bkg = 2 * (1 - 2 * p_obs) / den**2
    return np.sqrt((d_obs * s_obs) ** 2 + (d_bkg * np.asarray(p_bkgd_err, dtype=float)) ** 2)


@dataclass
class CoincidenceStats:
    qubits: tuple[str, ...]
    counts: np.ndarray
    unmasked: np.ndarray
    p_obs: np.ndarray
    p_obs_ci: np.ndarray  # (n, 2) Wilson interval
    p_bkgd: np.ndarray
    p_bkgd_err: np.ndarray
    p_poison_raw: np.ndarray
    p_poison: np.ndarray  # clamped to [0, 1]
    p_poison_err: np.ndarray
    window: int
    window_s: float
    n_jumps: int = 0

    def rows(self) -> list[dict]:
        return [{
            "qubit": q, "counts": int(self.counts[i]), "unmasked": int(self.unmasked[i]),
            "p_obs": float(self.p_obs[i]), "p_obs_lo": float(self.p_obs_ci[i, 0]),
            "p_obs_hi": float(self.p_obs_ci[i, 1]), "p_bkgd": float(self.p_bkgd[i]),
            "p_bkgd_err": float(self.p_bkgd_err[i]), "p_poison": float(self.p_poison[i]),
            "p_poison_raw": float(self.p_poison_raw[i]), "p_poison_err": float(self.p_poison_err[i]),
        } for i, q in enumerate(self.qubits)]

    def to_json(self) -> str:
        return json.dumps({"window_samples": self.window, "window_s": self.window_s,
                           "n_jumps": self.n_jumps, "qubits": self.rows()}, indent=2)

    def write_table_csv(self, path: str | Path) -> None:
        """Counts, unmasked, p_obs, p_bkgd and p_poison per qubit."""
        rows = self.rows()
        with open(path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=list(rows[0]))
            wr.writeheader()
            wr.writerows(rows)


def coincidence_table(qubits, counts, unmasked, p_bkgd, p_bkgd_err=None, window: int = 100,
                      window_s: float = float("nan"), n_jumps: int = 0) -> CoincidenceStats:
    """Assemble :class:`CoincidenceStats` from counts, unmasked totals and background probabilities."""
    counts = np.asarray(counts, dtype=np.int64)
    unmasked = np.asarray(unmasked, dtype=np.int64)
    if np.any(counts > unmasked):
        raise DataError("counts exceed unmasked occurrences")
    p_bkgd = np.asarray(p_bkgd, dtype=float)
    p_bkgd_err = np.zeros_like(p_bkgd) if p_bkgd_err is None else np.asarray(p_bkgd_err, dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        p_obs = np.where(unmasked > 0, counts / np.maximum(unmasked, 1), np.nan)
    ci = np.array([wilson_interval(int(k), int(n)) for k, n in zip(counts, unmasked)]).reshape(-1, 2)
    raw = np.asarray(poisoning_probability(p_obs, p_bkgd), dtype=float).reshape(-1)
    err = np.asarray(poisoning_uncertainty(p_obs, unmasked, p_bkgd, p_bkgd_err), dtype=float).reshape(-1)
    return CoincidenceStats(tuple(qubits), counts, unmasked, p_obs, ci, p_bkgd, p_bkgd_err, raw,
                            np.clip(raw, 0.0, 1.0), err, window, window_s, n_jumps)


def _windows(index: np.ndarray, window: int, n: int):
    a = index - window // 2
    b = a + window
    ok = (a >= 0) & (b <= n)
    return a, b, ok


def coincidence_scan(jumps, traces: Sequence[MaskedDigitalTrace], window: int = 100,
                     qubits=None) -> CoincidenceStats:
    """Coincidences between charge jumps and parity switches on each decoded trace.

    ``jumps`` are :class:`JumpEvent` or sample indices on the common clock.
    For each jump the window of ``window`` samples centred on it is examined;
    a fully unmasked window is *unmasked*, and a parity that differs between
    the window edges is a *count*.  ``p_bkgd`` is the switching rate measured
    outside all jump windows times the window duration.
    """
    idx = np.array([j.index if isinstance(j, JumpEvent) else int(j) for j in jumps], dtype=np.int64)
    qubits = tuple(qubits) if qubits is not None else tuple(str(i) for i in range(len(traces)))
    if len(qubits) != len(traces):
        raise ValueError("one qubit id per trace")
    counts, unmasked, bk, bk_err = [], [], [], []
    dt = traces[0].dt if traces else float("nan")
    for tr in traces:
        n = tr.mask.size
        a, b, inside = _windows(idx, window, n)
        mcum = np.concatenate([[0], np.cumsum(tr.mask)])
        a_c, b_c = np.clip(a, 0, n), np.clip(b, 0, n)
        full = inside & (mcum[b_c] - mcum[a_c] == 0)
        st = tr.states
        sw = np.zeros(len(idx), bool)
        sw[full] = st[a[full]] != st[b[full] - 1]
        counts.append(int(sw.sum()))
        unmasked.append(int(full.sum()))
        # background switching rate away from the jump windows
        excl = tr.mask.copy()
        for lo, hi in zip(np.clip(a, 0, n), np.clip(b, 0, n)):
            excl[lo:hi] = True
        ok_pairs = ~excl[1:] & ~excl[:-1]
        flips = np.count_nonzero((st[1:] != st[:-1]) & ok_pairs)
        T = ok_pairs.sum() * tr.dt
        if T <= 0:
            raise DataError("no unmasked background time outside the jump windows")
        gamma = flips / T
        bk.append(gamma * window * tr.dt)
        bk_err.append(np.sqrt(max(flips, 1)) / T * window * tr.dt)
    return coincidence_table(qubits, counts, unmasked, bk, bk_err, window, window * dt, len(idx))


# Published coincidence table: (counts, unmasked, p_bkgd, p_poison) per qubit.
MEASURED_COINCIDENCES = {
    "non-Cu": {
        "Q1": (1351, 2889, 0.1539, 0.91), "Q2": (1306, 2621, 0.1288, 1.00),
        "Q3": (1342, 3150, 0.1173, 0.81), "Q4": (1053, 2593, 0.1101, 0.76),
        "Q5": (904, 2344, 0.0981, 0.72), "Q6": (1433, 3014, 0.1355, 0.93),
    },
    "Cu": {
        "Q1": (123, 1149, 0.0199, 0.18), "Q2": (219, 1398, 0.0730, 0.20),
        "Q3": (248, 978, 0.0361, 0.47), "Q4": (160, 1208, 0.0380, 0.20),
        "Q5": (718, 1445, 0.0241, 0.99), "Q6": (145, 1238, 0.0238, 0.20),
    },
}


def measured_coincidence_stats(device: str) -> CoincidenceStats:
    rows = MEASURED_COINCIDENCES[device]
    q = tuple(rows)
    return coincidence_table(q, [rows[k][0] for k in q], [rows[k][1] for k in q], [rows[k][2] for k in q])


# ---------------------------------------------------------------------------
# Poisson poisoning footprint


@dataclass(frozen=True)
class FootprintModel:
    """Quasiparticle density profile around an impact, in units of its amplitude.

    ``profile`` is ``"uniform"`` (constant) or ``"exponential"``
    (``floor + exp(-r / length)``).  ``x_bar`` is the threshold density.
    """

    profile: str = "uniform"
    x_bar: float = 1.0
    length: float = 2e-3
    amplitude: float = 1.0
    sensing_radius: float = 1.06e-3
    floor: float = 0.0

    def density(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        if self.profile == "uniform":
            return np.full(r.shape, self.amplitude)
        if self.profile == "exponential":
            return self.amplitude * (self.floor + np.exp(-r / self.length))
        raise ValueError(f"unknown profile {self.profile!r}")


_GL = np.polynomial.legendre.leggauss(64)


def _gauss(a, b, f):
    """Gauss-Legendre integral of ``f`` over ``[a, b]`` (broadcast over array ``a``, ``b``)."""
    x, w = _GL
    half = 0.5 * (b - a)[..., None]
    t = 0.5 * (b + a)[..., None] + half * x
    return (half * w * f(t)).sum(axis=-1)


def _disc_average(model: FootprintModel, d: np.ndarray) -> np.ndarray:
    """Mean density at distance-``d`` points over impacts spread uniformly on the sensing disc.

    Integrates radially about the evaluation point, weighting each radius by
    the angle of its circle lying inside the disc, so the profile cusp at
    zero separation sits on an integration endpoint.
    """
    R = model.sensing_radius
    d = np.asarray(d, dtype=float)
    if R <= 0:
        return model.density(d)
    inner = np.maximum(R - d, 0.0)
    full = _gauss(np.zeros_like(d), inner, lambda r: 2 * np.pi * r * model.density(r))
    lo, hi = np.abs(R - d), R + d
    dd = d[..., None]

    def lens(t):
        # r = lo + (hi - lo)(1 - cos t)/2 smooths the square-root ends of the arc angle
        r = lo[..., None] + 0.5 * (hi - lo)[..., None] * (1 - np.cos(t))
        c = np.clip((r**2 + dd**2 - R**2) / np.maximum(2 * r * dd, 1e-300), -1.0, 1.0)
        return 2 * np.arccos(c) * r * model.density(r) * 0.5 * (hi - lo)[..., None] * np.sin(t)

    part = np.where(d > 0, _gauss(np.zeros_like(d), np.full_like(d, np.pi), lens), 0.0)
    return (full + part) / (np.pi * R**2)


def footprint_lambda(model: FootprintModel, impact, points) -> np.ndarray:
    if not model.x_bar > 0:
        raise ValueError("x_bar must be > 0")
    pts = np.atleast_2d(np.asarray(points, dtype=float))[:, :2]
    d = np.hypot(pts[:, 0] - impact[0], pts[:, 1] - impact[1])
    return _disc_average(model, d) / model.x_bar


def footprint_model_eval(model: FootprintModel, impact, qubit_positions) -> np.ndarray:
    """Per-qubit ``p = 1 - exp(-lambda)`` for impacts averaged over the sensing disc at ``impact``."""
    return -np.expm1(-footprint_lambda(model, impact, qubit_positions))


@dataclass
class FootprintFit:
    model: FootprintModel
    p_model: np.ndarray
    residuals: np.ndarray
    cost: float


def fit_footprint(profile: str, impact, qubit_positions, p_poison, sigma=None,
                  sensing_radius: float = 1.06e-3, fit_floor: bool = False) -> FootprintFit:
    """Least-squares fit of ``x_bar`` (plus ``length`` and optionally ``floor``
    for the decaying profile) to observed ``p_poison``."""
    p = np.asarray(p_poison, dtype=float)
    pos = np.asarray(qubit_positions, dtype=float)
    if profile not in ("uniform", "exponential"):
        raise ValueError(f"unknown profile {profile!r}")
    n_par = 1 if profile == "uniform" else 2 + int(fit_floor)
    if p.size < max(2, n_par):
        raise DataError("under-determined footprint fit")
    s = np.ones_like(p) if sigma is None else np.asarray(sigma, dtype=float)

    def build(theta):
        if profile == "uniform":
            return FootprintModel("uniform", float(np.exp(theta[0])), sensing_radius=sensing_radius)
        floor = float(np.exp(theta[2])) if fit_floor else 0.0
        return FootprintModel("exponential", float(np.exp(theta[0])), float(np.exp(theta[1])),
                              sensing_radius=sensing_radius, floor=floor)

    def resid(theta):
        return (footprint_model_eval(build(theta), impact, pos) - p) / s

    if profile == "uniform":
        starts = [[0.0]]
    else:
        starts = [[a, np.log(L)] + ([np.log(f)] if fit_floor else [])
                  for a in (-2.0, 0.0, 2.0) for L in (3e-4, 1e-3, 3e-3, 1e-2)
                  for f in ((0.01, 0.1, 1.0) if fit_floor else (None,))]
    best = None
    for x0 in starts:
        r = optimize.least_squares(resid, x0, xtol=1e-12, ftol=1e-12, gtol=1e-12)
        if best is None or r.cost < best.cost:
            best = r
    m = build(best.x)
    pm = footprint_model_eval(m, impact, pos)
    return FootprintFit(m, pm, pm - p, float(best.cost))


def interpolate_poison_map(positions, values, grid_x, grid_y, clamp: bool = True) -> np.ndarray:
    """Cubic interpolant through ``(position, p_poison)`` on a grid.

    Inside the convex hull of the positions the surface is a C1 cubic
    (Clough-Tocher); outside it takes the nearest interpolated value.
    Returns shape ``(len(grid_y), len(grid_x))``, clamped to [0, 1].
    """
    pos = np.asarray(positions, dtype=float)[:, :2]
    v = np.asarray(values, dtype=float)
    if len(v) < 4:
        raise DataError("need at least four points for surface interpolation")
    X, Y = np.meshgrid(np.asarray(grid_x, float), np.asarray(grid_y, float))
    scale = max(np.ptp(pos[:, 0]), np.ptp(pos[:, 1]), 1e-12)
    pts = pos / scale
    q = np.column_stack([X.ravel(), Y.ravel()]) / scale
    out = CloughTocher2DInterpolator(pts, v)(q)
    bad = np.isnan(out)
    if bad.any():
        good = ~bad
        if good.any():
            _, nn = cKDTree(q[good]).query(q[bad])
            out[bad] = out[good][nn]
        else:
            out[bad] = NearestNDInterpolator(pts, v)(q[bad])
    out = out.reshape(X.shape)
    return np.clip(out, 0.0, 1.0) if clamp else out


def write_map_csv(path: str | Path, grid_x, grid_y, Z) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["x_m", "y_m", "value"])
        for j, y in enumerate(grid_y):
            for i, x in enumerate(grid_x):
                wr.writerow([repr(float(x)), repr(float(y)), repr(float(Z[j, i]))])


# ---------------------------------------------------------------------------
# threshold arithmetic


def threshold_analysis(R_gamma: float, r_th: float) -> float:
    """Threshold poisoning probability ``r_th / R_gamma``."""
    if R_gamma == 0:
        raise ValueError("R_gamma must be nonzero")
    if R_gamma < 0 or r_th < 0:
        raise ValueError("rates must be >= 0")
    return r_th / R_gamma


def chip_impact_rate(jump_rate: float, sensing_radius: float = 1.06e-3, chip_area: float = 64e-6) -> float:
    """Impact rate over the whole chip from one qubit's jump rate and its sensing area."""
    return jump_rate * chip_area / (np.pi * sensing_radius**2)


# ---------------------------------------------------------------------------
# jump asymmetry


@dataclass
class Fraction:
    value: float
    lower: float
    upper: float
    k: int
    n: int

    @property
    def sigma(self) -> float:
        return float(np.sqrt(self.value * (1 - self.value) / max(self.n, 1)))


def jump_asymmetry(jumps, threshold: float = 0.15) -> Fraction:
    """Fraction of jumps with ``|q| > threshold`` that are positive."""
    q = np.array([j.magnitude if isinstance(j, JumpEvent) else float(j) for j in jumps], dtype=float)
    q = q[np.abs(q) > threshold]
    if q.size == 0:
        raise DataError("no jumps above threshold")
    k = int(np.count_nonzero(q > 0))
    lo, hi = wilson_interval(k, q.size)
    return Fraction(k / q.size, lo, hi, k, int(q.size))


# ---------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class Target:
    value: float
    sigma: float


MEASURED_TARGETS = {
    "asymmetry": Target(0.56, 0.07),
    "p_corr_Q2Q4": Target(0.232, 0.004),
    "p_corr_Q3Q5": Target(0.283, 0.004),
}


@dataclass
class CalibrationResult:
    best: tuple[float, float, float]  # (trap_length_e, ratio, f_q)
    chi2: float
    keys: list[tuple[float, float, float]]
    chi2_surface: np.ndarray  # (n_e, n_ratio, n_fq)
    axes: tuple[np.ndarray, np.ndarray, np.ndarray]
    observables: dict = field(default_factory=dict)

    @property
    def best_trap_lengths(self) -> tuple[float, float]:
        return self.best[0], self.best[0] * self.best[1]

    def surface_rows(self) -> list[dict]:
        rows = []
        for key in self.keys:
            i, j, k = (int(np.flatnonzero(np.isclose(a, v))[0]) for a, v in zip(self.axes, key))
            row = {"trap_length_e": key[0], "trap_length_h": key[0] * key[1], "ratio": key[1], "f_q": key[2],
                   "chi2": float(self.chi2_surface[i, j, k])}
            row.update({f"obs_{n}": float(v) for n, v in self.observables[key].items()})
            rows.append(row)
        return rows


def chi2_score(observed: Mapping[str, float], targets: Mapping[str, Target]) -> float:
    total = 0.0
    for name, t in targets.items():
        if name not in observed:
            raise DataError(f"observable {name!r} missing")
        v = observed[name]
        total += np.inf if not np.isfinite(v) else ((v - t.value) / t.sigma) ** 2
    return float(total)


def calibrate_parameters(targets: Mapping[str, Target], observables: Mapping[tuple, Mapping[str, float]] | None = None,
                         grid=None, simulate: Callable | None = None) -> CalibrationResult:
    """Grid chi-square minimiser.

    Either ``observables`` (grid key -> observable dict, keys
    ``(trap_length_e, ratio, f_q)``) is given, or ``grid`` = (Λe values,
    ratios, f_q values) together with ``simulate(key) -> observables``.
    Ties go to the first key in grid order.
    """
    if observables is None:
        if grid is None or simulate is None:
            raise ValueError("need observables or grid and simulate")
        keys = [(float(a), float(b), float(c)) for a in grid[0] for b in grid[1] for c in grid[2]]
        observables = {k: simulate(k) for k in keys}
    if not observables:
        raise DataError("empty calibration grid")
    keys = sorted(observables)
    axes = tuple(np.array(sorted({k[i] for k in keys})) for i in range(3))
    surf = np.full(tuple(len(a) for a in axes), np.inf)
    for key in keys:
        idx = tuple(int(np.flatnonzero(a == v)[0]) for a, v in zip(axes, key))
        surf[idx] = chi2_score(observables[key], targets)
    flat = int(np.argmin(surf))
    i, j, k = np.unravel_index(flat, surf.shape)
    best = (float(axes[0][i]), float(axes[1][j]), float(axes[2][k]))
    if not np.isfinite(surf[i, j, k]):
        raise NumericalError("no grid point produced finite observables")
    return CalibrationResult(best, float(surf[i, j, k]), keys, surf, axes, dict(observables))


def targets_from_observables(obs: Mapping[str, float], sigmas: Mapping[str, float]) -> dict[str, Target]:
    return {k: Target(float(obs[k]), float(sigmas[k])) for k in sigmas}


def dataclass_json(obj) -> str:
    def conv(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        raise TypeError(type(o))
    return json.dumps(asdict(obj), default=conv, indent=2)
