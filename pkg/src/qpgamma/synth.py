"""Synthetic measurement records with their ground truth attached.

* charge-tomography scans with Poisson-arrival offset jumps;
* symmetric two-state parity traces with Gaussian readout noise;
* coupled single-shot charge records plus six parity traces driven by a
  list of substrate impacts.

Readout model: unit-sigma Gaussian noise around state means ``+-s/2`` where
``s = 2 sqrt(2) erfinv(F)``, so each single-shot assignment by sign is wrong
with probability ``(1 - F)/2``.  Each parity state flips at rate ``gamma_p``
(autocorrelation ``exp(-2 gamma_p tau)``), the rate recovered by the
Lorentzian fit.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng
from .analysis import readout_separation, tomography_response, wrap
from .errors import DataError

TRACE_FORMAT = "qpgamma-trace/1"


def save_npz(path: str | Path, **arrays) -> None:
    """``np.savez`` with fixed member timestamps, so equal arrays give equal bytes."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def _gen(seed: int, *keys) -> np.random.Generator:
    h = int(rng.hash_keys(seed, rng.TAG_SYNTH, *keys))
    return np.random.default_rng([h & 0xFFFFFFFF, h >> 32])


# ---------------------------------------------------------------------------
# tomography


@dataclass
class TomographyScan:
    n_ext: np.ndarray
    p1: np.ndarray
    time: float
    true_delta: float


@dataclass
class TomographyStream:
    scans: list[TomographyScan]
    jump_times: np.ndarray
    jump_raw: np.ndarray

    @property
    def true_shifts(self) -> np.ndarray:
        """Aliased shift of every planted jump, in (-0.5, 0.5]."""
        return wrap(self.jump_raw)


def synth_tomography_stream(gamma_c: float, duration: float, scan_period: float = 0.6, seed: int = 0,
                            magnitudes=None, n_points: int = 40, shots: int = 100, d: float = 1.0,
                            nu: float = 0.8, initial: float = 0.0, jumps=None) -> TomographyStream:
    """Scans every ``scan_period`` of a piecewise-constant offset with Poisson jumps.

    ``magnitudes`` is an array to resample raw jump sizes from (uniform on
    (-0.5, 0.5] by default); ``jumps`` = (times, raw sizes) plants explicit
    jumps instead of drawing them.
    """
    if gamma_c < 0:
        raise ValueError("gamma_c must be >= 0")
    g = _gen(seed, 1)
    if jumps is not None:
        times = np.asarray(jumps[0], dtype=float)
        raw = np.asarray(jumps[1], dtype=float)
    else:
        n = g.poisson(gamma_c * duration)
        times = np.sort(g.uniform(0, duration, n))
        if magnitudes is None:
            raw = -g.uniform(-0.5, 0.5, n)
        else:
            raw = g.choice(np.asarray(magnitudes, dtype=float), n)
    n_ext = np.arange(n_points) / n_points
    scans = []
    t_scan = np.arange(0.0, duration, scan_period)
    cum = np.concatenate([[0.0], np.cumsum(raw)])
    for t in t_scan:
        k = np.searchsorted(times, t, side="right")
        delta = initial + cum[k]
        p = tomography_response(n_ext + delta, d, nu)
        p1 = g.binomial(shots, np.clip(p, 0, 1)) / shots
        scans.append(TomographyScan(n_ext, p1, float(t), float(delta)))
    return TomographyStream(scans, times, raw)


# ---------------------------------------------------------------------------
# parity traces


@dataclass
class ParityTrace:
    dt: float
    samples: np.ndarray
    fidelity: float
    qubit: str = ""
    offset: float = 0.0  # readout stagger, s
    states: np.ndarray | None = None  # ground truth
    degenerate: np.ndarray | None = None  # ground truth
    gamma_p: float | None = None  # ground truth

    @property
    def timestamps(self) -> np.ndarray:
        return np.arange(self.samples.size) * self.dt + self.offset

    def save(self, path: str | Path) -> None:
        head = {"format": TRACE_FORMAT, "dt": self.dt, "fidelity": self.fidelity, "qubit": self.qubit,
                "offset": self.offset, "ground_truth": self.states is not None, "gamma_p": self.gamma_p}
        arrays = {"samples": self.samples}
        if self.states is not None:
            arrays["truth_states"] = self.states
        if self.degenerate is not None:
            arrays["truth_degenerate"] = self.degenerate
        save_npz(path, header=np.frombuffer(json.dumps(head).encode(), np.uint8), **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "ParityTrace":
        try:
            z = np.load(path)
            head = json.loads(z["header"].tobytes())
        except (OSError, KeyError, ValueError) as exc:
            raise DataError(f"cannot read trace {path}: {exc}") from exc
        if head.get("format") != TRACE_FORMAT:
            raise DataError(f"{path}: unsupported trace format")
        return cls(head["dt"], z["samples"], head["fidelity"], head["qubit"], head["offset"],
                   z["truth_states"] if "truth_states" in z else None,
                   z["truth_degenerate"] if "truth_degenerate" in z else None, head.get("gamma_p"))


def flip_probability(gamma_p: float, dt: float) -> float:
    """Per-sample flip probability of a symmetric telegraph process with per-state rate ``gamma_p``."""
    return 0.5 * (1.0 - np.exp(-2.0 * gamma_p * dt))


def _levels(F: float, noise: float | None):
    if F >= 1.0:
        return 1.0, 0.0 if noise is None else noise
    return float(readout_separation(F)), 1.0 if noise is None else noise


def synth_parity_trace(gamma_p: float, F: float, dt: float, n: int, seed: int = 0, degeneracy=(),
                       qubit: str = "", offset: float = 0.0, noise: float | None = None,
                       poison_at=None, stream: int = 0, initial: int | None = None) -> ParityTrace:
    """Telegraph parity trace with Gaussian readout.

    ``degeneracy`` lists (start, stop) sample ranges in which the two state
    means collapse onto each other.  ``poison_at`` lists sample indices at
    which the parity is re-drawn at random (a flip with probability 1/2).
    With ``F = 1`` the state separation is 1 and the noise defaults to zero.
    """
    if gamma_p < 0 or not 0 < F <= 1:
        raise ValueError("need gamma_p >= 0 and 0 < F <= 1")
    g = _gen(seed, 2, stream)
    p = flip_probability(gamma_p, dt)
    flips = g.random(n) < p
    flips[0] = False
    if poison_at is not None and len(poison_at):
        idx = np.asarray(poison_at, dtype=np.int64)
        idx = idx[(idx > 0) & (idx < n)]
        flips[idx] ^= g.random(idx.size) < 0.5
    s0 = int(g.random() < 0.5) if initial is None else int(initial)
    states = (np.cumsum(flips) + s0) % 2
    sep, sig = _levels(F, noise)
    deg = np.zeros(n, bool)
    for a, b in degeneracy:
        deg[max(0, a):min(n, b)] = True
    mean = np.where(deg, 0.0, (states - 0.5) * sep)
    x = mean + sig * g.standard_normal(n) if sig > 0 else mean.astype(float)
    return ParityTrace(dt, x, F, qubit, offset, states.astype(np.int8), deg, gamma_p)


# ---------------------------------------------------------------------------
# single-shot charge record and coupled records


@dataclass
class OffsetChargeSeries:
    dt: float
    samples: np.ndarray  # single-shot outcomes (0/1)
    resets: np.ndarray  # sample indices of bias resets
    d: float
    nu: float
    qubit: str = ""
    true_offset: np.ndarray | None = None
    jump_index: np.ndarray | None = None
    jump_raw: np.ndarray | None = None

    @property
    def timestamps(self) -> np.ndarray:
        return np.arange(self.samples.size) * self.dt


def synth_singleshot_series(n: int, dt: float, jump_index, jump_raw, seed: int = 0, d: float = 1.0,
                            nu: float = 0.8, reset_interval: int = 5000, qubit: str = "",
                            stream: int = 0) -> OffsetChargeSeries:
    """Single-shot outcomes at a bias re-zeroed every ``reset_interval`` samples."""
    jump_index = np.asarray(jump_index, dtype=np.int64)
    jump_raw = np.asarray(jump_raw, dtype=float)
    step = np.zeros(n)
    ok = (jump_index >= 0) & (jump_index < n)
    np.add.at(step, jump_index[ok], jump_raw[ok])
    # cumulative offset since the most recent reset
    cum = np.cumsum(step)
    resets = np.arange(0, n, reset_interval)
    seg_start = resets[np.searchsorted(resets, np.arange(n), side="right") - 1]
    base = np.concatenate([[0.0], cum])[seg_start]
    delta = cum - base
    p1 = tomography_response(delta, d, nu)
    g = _gen(seed, 3, stream)
    shots = (g.random(n) < p1).astype(np.int8)
    return OffsetChargeSeries(dt, shots, resets, d, nu, qubit, delta, jump_index, jump_raw)


@dataclass
class CoupledRecords:
    charge: OffsetChargeSeries
    parity: list[ParityTrace]
    impact_index: np.ndarray
    p_poison: np.ndarray  # (n_impacts, n_qubits)
    qubits: tuple[str, ...]


def events_to_records(impact_index, charge_raw, p_poison, n: int, dt: float, qubits, gamma_bkg, F,
                      seed: int = 0, charge_qubit: str | None = None, d: float = 1.0, nu: float = 0.8,
                      reset_interval: int = 5000, stagger=(50e-6, 100e-6), degeneracy=None) -> CoupledRecords:
    """Couple a list of impacts to a charge record and one parity trace per qubit.

    ``charge_raw[k]`` is the raw offset induced on the charge-sensing qubit
    by impact ``k``; qubit ``j`` is poisoned by impact ``k`` with probability
    ``p_poison[k, j]`` and a poisoning re-draws its parity.
    """
    impact_index = np.asarray(impact_index, dtype=np.int64)
    p_poison = np.atleast_2d(np.asarray(p_poison, dtype=float))
    qubits = tuple(qubits)
    nq = len(qubits)
    if p_poison.shape != (impact_index.size, nq):
        p_poison = np.broadcast_to(p_poison, (impact_index.size, nq)).copy()
    gamma_bkg = np.broadcast_to(np.asarray(gamma_bkg, dtype=float), (nq,))
    F = np.broadcast_to(np.asarray(F, dtype=float), (nq,))
    charge_qubit = charge_qubit or qubits[0]
    charge = synth_singleshot_series(n, dt, impact_index, charge_raw, seed, d, nu, reset_interval,
                                     charge_qubit)
    g = _gen(seed, 4)
    poisoned = g.random(p_poison.shape) < p_poison
    offs = np.linspace(stagger[0], stagger[1], nq) if nq > 1 else np.array([stagger[0]])
    traces = []
    for j, q in enumerate(qubits):
        deg = () if degeneracy is None else degeneracy[j]
        traces.append(synth_parity_trace(float(gamma_bkg[j]), float(F[j]), dt, n, seed, degeneracy=deg,
                                         qubit=q, offset=float(offs[j]), poison_at=impact_index[poisoned[:, j]],
                                         stream=100 + j))
    return CoupledRecords(charge, traces, impact_index, p_poison, qubits)
