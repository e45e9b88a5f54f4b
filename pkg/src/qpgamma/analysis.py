"""Detection and decoding: tomography fits, jump and step detection, PSD fits,
masking and two-state HMM parity decoding."""
from __future__ import annotations

import csv
import functools
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
from scipy import optimize, signal
from scipy.ndimage import uniform_filter1d
from scipy.special import erfinv

from .errors import DataError, NumericalError

# ---------------------------------------------------------------------------
# offset-charge response and aliasing


def tomography_response(n_g, d: float, nu: float):
    """Qubit 1-state probability after the charge-tomography sequence."""
    return 0.5 * (d + nu * np.cos(np.pi * np.cos(2 * np.pi * np.asarray(n_g, dtype=float))))


def wrap(x):
    """Alias charges to (-0.5, 0.5]."""
    x = np.asarray(x, dtype=float)
    out = -((-x + 0.5) % 1.0 - 0.5)
    return float(out) if out.ndim == 0 else out


def shortest_from_bias(delta):
    """Distance in [0, 0.25] of an offset from the bias, the response being 0.5-periodic and even."""
    r = np.abs(np.asarray(delta, dtype=float)) % 0.5
    return np.minimum(r, 0.5 - r)


@dataclass
class TomographyFit:
    delta: float  # offset charge modulo 0.5 e, in [0, 0.5)
    d: float
    nu: float
    residual_rms: float


def fit_tomography(n_ext, p1, min_snr: float = 3.0) -> TomographyFit:
    """Least-squares fit of the tomography response for the offset ``delta``.

    The response is even and 0.5-periodic in the offset, so ``delta`` is
    reported in [0, 0.5).
    """
    n_ext = np.asarray(n_ext, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    if n_ext.size < 4:
        raise DataError("tomography scan needs at least 4 points")
    if np.ptp(n_ext) < 0.5 - 1.0 / n_ext.size:
        raise DataError("tomography scan must span a full period of the response")
    grid = np.linspace(0.0, 0.5, 201)[:-1]
    # closed-form two-parameter least squares for every trial offset at once
    Bm = np.cos(np.pi * np.cos(2 * np.pi * (n_ext[None, :] + grid[:, None])))
    n = n_ext.size
    sb, sbb, sp, sbp = Bm.sum(1), (Bm**2).sum(1), p1.sum(), Bm @ p1
    det = n * sbb - sb**2
    with np.errstate(divide="ignore", invalid="ignore"):
        slope = (n * sbp - sb * sp) / det
        icpt = (sp - slope * sb) / n
        costs = ((icpt[:, None] + slope[:, None] * Bm - p1[None, :]) ** 2).sum(1)
    costs = np.where((slope > 0) & (det > 0), costs, np.inf)
    g0 = grid[int(np.argmin(costs))]

    def linfit(dl):
        A = np.column_stack([np.full_like(n_ext, 0.5), 0.5 * np.cos(np.pi * np.cos(2 * np.pi * (n_ext + dl)))])
        coef, *_ = np.linalg.lstsq(A, p1, rcond=None)
        return coef, float(np.sum((A @ coef - p1) ** 2))

    res = optimize.minimize_scalar(lambda dl: linfit(dl)[1], bounds=(g0 - 0.005, g0 + 0.005), method="bounded",
                                   options={"xatol": 1e-10})
    dl = float(res.x) % 0.5
    (d, nu), cost = linfit(dl)
    rms = np.sqrt(cost / n_ext.size)
    if not nu > min_snr * max(rms, 1e-12) or not nu > 1e-9:
        raise NumericalError(f"tomography fit failed: modulation {nu:.3g} below noise {rms:.3g}")
    if dl >= 0.5 - 1e-12:
        dl = 0.0
    return TomographyFit(dl, float(d), float(nu), float(rms))


def diff_series(deltas, period: float = 1.0):
    """Consecutive offset differences wrapped to ``(-period/2, period/2]``.

    Offsets from :func:`fit_tomography` are known modulo 0.5, so their
    differences are only meaningful with ``period=0.5``.
    """
    d = np.diff(np.asarray(deltas, dtype=float))
    return period * wrap(d / period)


@dataclass
class JumpEvent:
    index: int
    magnitude: float
    method: str
    qubit: str = ""


def detect_jumps_threshold(dq, threshold: float = 0.15, qubit: str = "") -> list[JumpEvent]:
    """Jumps where the wrapped difference exceeds ``threshold`` in magnitude."""
    dq = wrap(np.atleast_1d(np.asarray(dq, dtype=float)))
    idx = np.flatnonzero(np.abs(dq) > threshold)
    return [JumpEvent(int(i), float(dq[i]), "threshold", qubit) for i in idx]


def write_jumps_csv(jumps: list[JumpEvent], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["index", "magnitude_e", "method", "qubit"])
        for j in jumps:
            wr.writerow([j.index, repr(j.magnitude), j.method, j.qubit])


def read_jumps_csv(path: str | Path) -> list[JumpEvent]:
    try:
        with open(path, newline="") as fh:
            return [JumpEvent(int(r["index"]), float(r["magnitude_e"]), r["method"], r["qubit"])
                    for r in csv.DictReader(fh)]
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read jump list {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# single-shot step detection


def level_to_offset(level, d: float, nu: float):
    """Offset magnitude (shortest distance from a bias at 0) that yields P1 = ``level``."""
    c = np.clip((2 * np.asarray(level, dtype=float) - d) / nu, -1.0, 1.0)
    u = np.arccos(c) / np.pi  # |cos(2 pi delta)|
    return np.arccos(np.clip(u, 0.0, 1.0)) / (2 * np.pi)


def step_statistic(x, average: int = 100, width: int = 200) -> np.ndarray:
    """Moving average followed by correlation with a +-1 step of ``width`` samples.

    Output ``g[k]`` is (mean of the next width/2 averaged samples) minus (mean
    of the previous width/2), i.e. positive for an upward step at ``k``.
    """
    x = np.asarray(x, dtype=float)
    m = uniform_filter1d(x, average, mode="nearest")
    h = width // 2
    c = np.concatenate([[0.0], np.cumsum(m)])
    k = np.arange(len(x))
    lo, hi = np.clip(k - h, 0, len(x)), np.clip(k + h, 0, len(x))
    g = np.full(len(x), np.nan)
    ok = (k - h >= 0) & (k + h <= len(x))
    g[ok] = ((c[hi] - c[k]) - (c[k] - c[lo]))[ok] / h
    return g


def _change_point(x: np.ndarray) -> int:
    """Least-squares location of a single mean shift in ``x`` (index of the first post-step sample)."""
    n = x.size
    t = np.arange(1, n)
    c = np.cumsum(x)[:-1]
    stat = (c - t * x.mean()) ** 2 / (t * (n - t))
    return int(np.argmax(stat)) + 1


def _robust_std(v) -> float:
    v = v[np.isfinite(v)]
    if v.size == 0:
        return 0.0
    return float(1.4826 * np.median(np.abs(v - np.median(v))))


@functools.lru_cache(maxsize=64)
def step_noise_scale(d: float, nu: float, average: int = 100, width: int = 200, segment: int = 5000,
                     n_segments: int = 200, seed: int = 12345) -> float:
    """Standard deviation of the step statistic on noise-only single-shot data at bias 0."""
    p = float(tomography_response(0.0, d, nu))
    g = np.random.default_rng(seed)
    vals = []
    for _ in range(n_segments):
        v = step_statistic((g.random(segment) < p).astype(float), average, width)
        vals.append(v[np.isfinite(v)])
    return float(np.concatenate(vals).std())


def detect_steps_singleshot(series, d: float, nu: float, reset_interval: int = 5000,
                            average: int = 100, width: int = 200, threshold_sigma: float = 5.0,
                            noise_scale: float | str | None = "calibrated", qubit: str = "") -> list[JumpEvent]:
    """Steps in a single-shot charge record, searched within each reset segment.

    ``noise_scale`` is the standard deviation of the step statistic under
    noise only: ``"calibrated"`` takes it from a noise-only ensemble at the
    bias point and scales it with the local binomial variance, ``None`` estimates it robustly per segment.  A step is
    a local extremum of |g| above ``threshold_sigma * noise_scale``, located
    by a least-squares change point on the raw samples around it; its
    magnitude comes from the mean level after the step (up to the next step
    or the segment end), inverted through the response at bias 0.
    """
    x = np.asarray(series, dtype=float)
    out: list[JumpEvent] = []
    h = width // 2
    calibrated = isinstance(noise_scale, str)
    if calibrated:
        noise_scale = step_noise_scale(float(d), float(nu), average, width, reset_interval)
        p0 = float(tomography_response(0.0, d, nu))
        v0 = max(p0 * (1 - p0), 1e-12)
    for s0 in range(0, len(x), reset_interval):
        seg = x[s0:s0 + reset_interval]
        if len(seg) < width:
            continue
        g = step_statistic(seg, average, width)
        sd = noise_scale if noise_scale is not None else _robust_std(g)
        if sd <= 0:
            continue
        a = np.abs(np.nan_to_num(g))
        thr = threshold_sigma * sd
        if calibrated:
            # binomial noise grows when the level moves away from the bias point
            m = uniform_filter1d(seg, average, mode="nearest")
            k = np.arange(len(seg))
            lv = m * (1 - m)
            v = np.maximum(lv[np.clip(k - h // 2, 0, len(seg) - 1)], lv[np.clip(k + h // 2, 0, len(seg) - 1)])
            thr = thr * np.sqrt(np.maximum(v, v0) / v0)
        cand = []
        above = a > thr
        if not above.any():
            continue
        # one peak per contiguous excursion above threshold
        edges = np.flatnonzero(np.diff(np.r_[0, above.astype(np.int8), 0]))
        for lo, hi in zip(edges[::2], edges[1::2]):
            cand.append(lo + int(np.argmax(a[lo:hi])))
        # merge peaks closer than one kernel half-width
        peaks = []
        for p in cand:
            if peaks and p - peaks[-1] < h:
                if a[p] > a[peaks[-1]]:
                    peaks[-1] = p
            else:
                peaks.append(p)
        # refine each peak on the raw samples within one kernel half-width
        peaks = [max(0, p - h) + _change_point(seg[max(0, p - h):p + h]) for p in peaks]
        bounds = peaks[1:] + [len(seg)]
        for p, nxt in zip(peaks, bounds):
            post = seg[p + average // 2: max(p + average // 2 + 1, nxt - average // 2)]
            level = post.mean() if post.size else seg[p:].mean()
            mag = float(level_to_offset(level, d, nu))
            out.append(JumpEvent(int(s0 + p), mag, "step-convolution", qubit))
    return out


# ---------------------------------------------------------------------------
# PSD and Lorentzian fit


def lorentzian(f, gamma, A, B):
    return A * 4 * gamma / ((2 * gamma) ** 2 + (2 * np.pi * f) ** 2) + B


def _cos_matrix(f, dt: float, nperseg: int) -> np.ndarray:
    return np.cos(2 * np.pi * np.outer(np.asarray(f) * dt, np.arange(nperseg)))


def expected_periodogram(f, gamma, A, B, dt: float, nperseg: int, cos_matrix=None):
    """Mean one-sided boxcar periodogram of ``nperseg`` samples for the sampled process
    whose PSD is :func:`lorentzian`.

    The autocovariance is ``(A/2) exp(-2 gamma |tau|)`` plus white noise of
    variance ``B / (2 dt)``; the finite segment smooths the Lorentzian, which
    matters when its corner is only a few frequency bins wide.
    """
    tau = np.arange(nperseg)
    r = 0.5 * A * np.exp(-2.0 * gamma * dt * tau)
    w = (nperseg - tau) / nperseg
    c = _cos_matrix(f, dt, nperseg) if cos_matrix is None else cos_matrix
    coef = w * r
    coef[1:] *= 2.0
    return 2.0 * dt * (c @ coef) + B


def digitize(trace, threshold: float = 0.0) -> np.ndarray:
    """Map an analog readout trace to +-1 by a calibration threshold."""
    return np.where(np.asarray(trace) > threshold, 1.0, -1.0)


@dataclass
class Spectrum:
    f: np.ndarray
    psd: np.ndarray
    n_segments: int
    dt: float
    n_samples: int
    variance: float
    nperseg: int = 1024


def compute_psd(trace, dt: float, segment: int = 1024, threshold: float | None = 0.0) -> Spectrum:
    """One-sided averaged-periodogram PSD (50% overlap) of the digital trace."""
    x = np.asarray(trace, dtype=float)
    if x.size < 1024:
        raise DataError("PSD needs at least 2**10 samples")
    if threshold is not None:
        x = digitize(x, threshold)
    seg = min(segment, x.size)
    f, p = signal.welch(x, fs=1.0 / dt, window="boxcar", nperseg=seg, noverlap=seg // 2,
                        detrend="constant", scaling="density", return_onesided=True)
    nseg = 1 + (x.size - seg) // (seg // 2)
    return Spectrum(f, p, nseg, dt, x.size, float(np.var(x)), seg)


@dataclass
class PsdFit:
    gamma: float
    fidelity: float
    A: float
    B: float
    cov: np.ndarray
    resolvable: bool = True

    @property
    def gamma_err(self) -> float:
        return float(np.sqrt(self.cov[0, 0]))

    def to_json(self) -> str:
        return json.dumps({"gamma_p": self.gamma, "fidelity": self.fidelity, "A": self.A, "B": self.B,
                           "cov": self.cov.tolist(), "resolvable": self.resolvable})


def fit_lorentzian(spec: Spectrum, strict: bool = True) -> PsdFit:
    """Weighted fit of ``A 4G/((2G)^2 + (2 pi f)^2) + B``; F = sqrt(A / 2).

    The model is compared with the data through its expected segment
    periodogram (:func:`expected_periodogram`), so the fitted parameters are
    those of the Lorentzian itself.
    With ``strict`` a rate outside [1/(N dt), 1/(2 dt)] raises; otherwise it is
    flagged in ``resolvable``.
    """
    f, p = spec.f[1:], spec.psd[1:]
    fmax = f[-1]
    lo_g, hi_g = 1.0 / (spec.n_samples * spec.dt), 1.0 / (2 * spec.dt)
    B0 = float(np.median(p[-max(3, len(p) // 10):]))
    A0 = max(float(spec.variance - B0 * fmax), 1e-6)
    # initial rate from the half-power point of the excess
    excess = p - B0
    half = excess[0] / 2 if excess[0] > 0 else 0
    k = np.flatnonzero(excess < half)
    g0 = float(np.clip(np.pi * f[k[0]] if k.size else fmax, lo_g, hi_g))
    p0 = [g0, A0, max(B0, 1e-12)]
    sigma = p / np.sqrt(spec.n_segments)
    cm = _cos_matrix(f, spec.dt, spec.nperseg)
    model = lambda ff, g, a, b: expected_periodogram(ff, g, a, b, spec.dt, spec.nperseg, cm)
    try:
        for _ in range(3):
            popt, pcov = optimize.curve_fit(model, f, p, p0=p0, sigma=sigma, absolute_sigma=True,
                                            bounds=([0, 0, 0], [np.inf, np.inf, np.inf]), maxfev=20000)
            sigma = model(f, *popt) / np.sqrt(spec.n_segments)
            p0 = popt
    except (RuntimeError, ValueError) as exc:
        raise NumericalError(f"Lorentzian fit did not converge: {exc}") from exc
    gamma, A, B = (float(v) for v in popt)
    ok = bool(lo_g <= gamma <= hi_g and A > 0 and np.all(np.isfinite(pcov)))
    if not ok and strict:
        raise NumericalError(f"switching rate {gamma:.4g} 1/s outside resolvable band [{lo_g:.3g}, {hi_g:.3g}]")
    F = float(min(1.0, np.sqrt(max(A, 0.0) / 2.0)))
    return PsdFit(gamma, F, A, B, pcov, ok)


# ---------------------------------------------------------------------------
# masking


def mask_alpha(F, n: int = 40, s: float = 3.29):
    """Second-condition threshold ratio for a moving average of ``n`` samples."""
    F = np.asarray(F, dtype=float)
    return np.sqrt((1 + s**2 / 4) / (1 + 2 * (erfinv(F) * np.sqrt(n)) ** 2))


def readout_separation(F) -> np.ndarray:
    """State separation in noise-sigma units for state-mapping fidelity F."""
    return 2 * np.sqrt(2) * erfinv(np.asarray(F, dtype=float))


def mask_trace(trace, gamma_p: float, dt: float, F: float, n: int = 40, s: float = 3.29,
               alpha: float | None = None) -> np.ndarray:
    """Boolean mask, True where the data are *masked* (rejected).

    Windows of ``round(1/(gamma_p dt))`` averaged samples are accepted when
    ``|mu_i - mu| > sigma_i`` or ``sigma_i > alpha * sigma``.
    """
    x = np.asarray(trace, dtype=float)
    L = int(round(1.0 / (gamma_p * dt)))
    if L < 2:
        raise DataError("masking window shorter than two samples")
    if L > x.size:
        raise DataError("masking window longer than the trace")
    a = mask_alpha(F, n, s) if alpha is None else alpha
    m = uniform_filter1d(x, n, mode="nearest")
    mu, sd = m.mean(), m.std()
    nw = -(-x.size // L)
    pad = nw * L - x.size
    mp = np.concatenate([m, np.full(pad, np.nan)]).reshape(nw, L)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mu_i = np.nanmean(mp, axis=1)
        sd_i = np.nanstd(mp, axis=1)
    accept = (np.abs(mu_i - mu) > sd_i) | (sd_i > a * sd)
    return np.repeat(~accept, L)[: x.size]


# ---------------------------------------------------------------------------
# two-state Gaussian HMM


@numba.njit(cache=True)
def _forward_backward(x, mu, sig, A, pi):
    n = x.size
    B = np.empty((n, 2))
    for t in range(n):
        for k in range(2):
            z = (x[t] - mu[k]) / sig[k]
            B[t, k] = np.exp(-0.5 * z * z) / sig[k]
    alpha = np.empty((n, 2))
    c = np.empty(n)
    a0 = pi[0] * B[0, 0]
    a1 = pi[1] * B[0, 1]
    s = a0 + a1 + 1e-300
    alpha[0, 0] = a0 / s
    alpha[0, 1] = a1 / s
    c[0] = s
    for t in range(1, n):
        a0 = (alpha[t - 1, 0] * A[0, 0] + alpha[t - 1, 1] * A[1, 0]) * B[t, 0]
        a1 = (alpha[t - 1, 0] * A[0, 1] + alpha[t - 1, 1] * A[1, 1]) * B[t, 1]
        s = a0 + a1 + 1e-300
        alpha[t, 0] = a0 / s
        alpha[t, 1] = a1 / s
        c[t] = s
    beta = np.empty((n, 2))
    beta[n - 1, 0] = 1.0
    beta[n - 1, 1] = 1.0
    for t in range(n - 2, -1, -1):
        for i in range(2):
            beta[t, i] = (A[i, 0] * B[t + 1, 0] * beta[t + 1, 0] + A[i, 1] * B[t + 1, 1] * beta[t + 1, 1]) / c[t + 1]
    gamma = alpha * beta
    xi = np.zeros((2, 2))
    for t in range(n - 1):
        for i in range(2):
            for j in range(2):
                xi[i, j] += alpha[t, i] * A[i, j] * B[t + 1, j] * beta[t + 1, j] / c[t + 1]
    ll = 0.0
    for t in range(n):
        ll += np.log(c[t])
    return gamma, xi, ll


@numba.njit(cache=True)
def _viterbi(x, mu, sig, A, pi):
    n = x.size
    lA = np.log(A + 1e-300)
    d = np.empty((n, 2))
    bp = np.zeros((n, 2), np.int8)
    for k in range(2):
        z = (x[0] - mu[k]) / sig[k]
        d[0, k] = np.log(pi[k] + 1e-300) - 0.5 * z * z - np.log(sig[k])
    for t in range(1, n):
        for k in range(2):
            z = (x[t] - mu[k]) / sig[k]
            e = -0.5 * z * z - np.log(sig[k])
            v0 = d[t - 1, 0] + lA[0, k]
            v1 = d[t - 1, 1] + lA[1, k]
            if v0 >= v1:
                d[t, k] = v0 + e
                bp[t, k] = 0
            else:
                d[t, k] = v1 + e
                bp[t, k] = 1
    path = np.empty(n, np.int8)
    path[n - 1] = 0 if d[n - 1, 0] >= d[n - 1, 1] else 1
    for t in range(n - 1, 0, -1):
        path[t - 1] = bp[t, path[t]]
    return path


def _segments(mask: np.ndarray):
    """(start, stop) of contiguous unmasked runs."""
    ok = ~mask
    e = np.flatnonzero(np.diff(np.r_[0, ok.astype(np.int8), 0]))
    return list(zip(e[::2], e[1::2]))


@dataclass
class MaskedDigitalTrace:
    mask: np.ndarray
    states: np.ndarray  # int8; -1 where masked
    transitions: int
    unmasked_samples: int
    dt: float
    switching_rate: float  # transitions / unmasked duration
    corrected_rate: float  # rate per state from the per-sample flip probability
    means: tuple[float, float] = (0.0, 1.0)
    sigma: tuple[float, float] = (1.0, 1.0)
    log_likelihood: float = 0.0
    iterations: int = 0

    @property
    def unmasked_fraction(self) -> float:
        return self.unmasked_samples / max(1, self.mask.size)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["index", "masked", "parity"])
            for i, (m, s) in enumerate(zip(self.mask, self.states)):
                wr.writerow([i, int(m), "" if m else int(s)])


def hmm_decode(trace, mask, dt: float, gamma_prior: float | None = None, max_iter: int = 50,
               tol: float = 1e-6, min_segment: int = 2) -> MaskedDigitalTrace:
    """Two-state Gaussian HMM fitted by Baum-Welch on all unmasked segments,
    then decoded by Viterbi segment by segment."""
    x = np.asarray(trace, dtype=float)
    mask = np.zeros(x.size, bool) if mask is None else np.asarray(mask, bool)
    segs = [(a, b) for a, b in _segments(mask) if b - a >= min_segment]
    n_un = sum(b - a for a, b in segs)
    if n_un == 0:
        raise DataError("trace is fully masked")
    xu = np.concatenate([x[a:b] for a, b in segs])
    # two-component split around the median
    med = np.median(xu)
    lo, hi = xu[xu <= med], xu[xu > med]
    if hi.size == 0 or np.ptp(xu) == 0:
        mu = np.array([med - 0.5, med + 0.5])
        sig = np.array([1e-3, 1e-3]) * max(1.0, abs(med))
    else:
        mu = np.array([lo.mean(), hi.mean()])
        sig = np.array([max(lo.std(), 1e-6 * np.ptp(xu)), max(hi.std(), 1e-6 * np.ptp(xu))])
    p = 0.5 * (1 - np.exp(-2 * gamma_prior * dt)) if gamma_prior else 0.01
    p = float(np.clip(p, 1e-6, 0.49))
    A = np.array([[1 - p, p], [p, 1 - p]])
    pi = np.array([0.5, 0.5])
    prev = -np.inf
    it = 0
    ll = prev
    # noiseless two-level data make the Gaussian emissions singular: threshold instead
    degenerate = np.unique(xu).size <= 2 or sig.max() < 1e-9 * max(1.0, np.ptp(xu))
    if not degenerate:
        for it in range(1, max_iter + 1):
            s0 = np.zeros(2)
            s1 = np.zeros(2)
            s2 = np.zeros(2)
            xi = np.zeros((2, 2))
            ll = 0.0
            for a, b in segs:
                g, xs, l = _forward_backward(x[a:b], mu, sig, A, pi)
                s0 += g.sum(axis=0)
                s1 += (g * x[a:b, None]).sum(axis=0)
                s2 += (g * x[a:b, None] ** 2).sum(axis=0)
                xi += xs
                ll += l
            mu = s1 / np.maximum(s0, 1e-300)
            var = s2 / np.maximum(s0, 1e-300) - mu**2
            sig = np.sqrt(np.maximum(var, 1e-12 * max(1.0, float(np.var(xu)))))
            A = xi / np.maximum(xi.sum(axis=1, keepdims=True), 1e-300)
            A = np.clip(A, 1e-12, 1.0)
            A /= A.sum(axis=1, keepdims=True)
            if abs(ll - prev) <= tol * abs(ll):
                break
            prev = ll
    order = np.argsort(mu)
    mu, sig = mu[order], sig[order]
    A = A[np.ix_(order, order)]
    states = np.full(x.size, -1, np.int8)
    trans = 0
    pairs = 0
    for a, b in segs:
        if degenerate:
            path = (x[a:b] > (xu.min() + xu.max()) / 2).astype(np.int8)
        else:
            path = _viterbi(x[a:b], mu, sig, A, pi)
        states[a:b] = path
        trans += int(np.count_nonzero(np.diff(path)))
        pairs += b - a - 1
    rate = trans / (n_un * dt)
    ph = trans / max(pairs, 1)
    corr = -np.log(max(1e-300, 1 - 2 * ph)) / (2 * dt) if ph < 0.5 else np.inf
    return MaskedDigitalTrace(mask, states, trans, n_un, dt, float(rate), float(corr),
                              (float(mu[0]), float(mu[1])), (float(sig[0]), float(sig[1])), float(ll), it)
