"""End-to-end simulation: decays -> substrate impacts -> carriers -> offset charge per qubit.

The calibration sweep exploits two facts of the carrier model: electrons
and holes draw from separate random streams, so each species is propagated
once per trapping length and reused across ratios; and the tracked-carrier
count is a prefix in ``f_q``, so every ``f_q`` value is a prefix sum of the
same per-carrier contributions.
"""
from __future__ import annotations

import dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import stats
from .charges import ELECTRON, HOLE, deposits_to_carriers, pair_count, propagate
from .config import ExperimentConfig, TransportParams
from .electrostatics import InducedChargeTable, OffsetChargeShift
from .errors import DataError
from .gamma.batch import DepositLog, run_decay_batch
from .gamma.transport import VOLUME_SUBSTRATE


@dataclass
class Impacts:
    """Substrate deposits grouped by event, with per-event importance weights."""

    event: np.ndarray  # per deposit
    pos: np.ndarray
    energy_keV: np.ndarray
    events: np.ndarray  # unique event ids
    weight: np.ndarray  # per event
    n_decays: int
    activity: float
    distance: float

    def __len__(self) -> int:
        return len(self.events)

    @classmethod
    def from_log(cls, log: DepositLog) -> "Impacts":
        d = log.in_volume(VOLUME_SUBSTRATE)
        ev, _, w = log.events(VOLUME_SUBSTRATE)
        return cls(d.event, d.pos, d.energy_keV, ev, w, log.n_decays, log.activity, log.source_distance)

    def first(self, n: int) -> "Impacts":
        keep_ev = self.events[:n]
        m = np.isin(self.event, keep_ev)
        return Impacts(self.event[m], self.pos[m], self.energy_keV[m], keep_ev, self.weight[:n],
                       self.n_decays, self.activity, self.distance)


def simulate_impacts(config: ExperimentConfig, n_decays: int, seed: int | None = None, jobs: int = 1,
                     cone_fraction: float | None = 0.95) -> Impacts:
    log = run_decay_batch(config, n_decays, seed=seed, cone_fraction=cone_fraction, jobs=jobs)
    return Impacts.from_log(log)


def _island_contributions(final: np.ndarray, signed_weight: np.ndarray, table: InducedChargeTable,
                          centers) -> np.ndarray:
    """Per-carrier induced charge on each island, shape (n_carriers, n_islands)."""
    out = np.empty((len(final), len(centers)))
    for j, c in enumerate(centers):
        out[:, j] = signed_weight * table.at(final, c)
    return out


def impact_offsets(config: ExperimentConfig, table: InducedChargeTable, impacts: Impacts,
                   params: TransportParams | None = None, seed: int | None = None,
                   qubit_ids=None, chunk: int = 500) -> OffsetChargeShift:
    """Raw induced charge per (impact event, qubit), ``chunk`` impacts at a time."""
    params = params or config.transport
    seed = config.seed if seed is None else seed
    qubit_ids = tuple(qubit_ids or config.qubit_ids)
    centers = [config.geometry.island(q).center for q in qubit_ids]
    raw = np.zeros((len(impacts), len(qubit_ids)))
    for lo in range(0, len(impacts), chunk):
        evs = impacts.events[lo:lo + chunk]
        sel = (impacts.event >= evs[0]) & (impacts.event <= evs[-1])
        state = deposits_to_carriers(impacts.event[sel], impacts.pos[sel], impacts.energy_keV[sel], params)
        if not len(state):
            continue
        state = propagate(state, params, config.geometry, seed)
        pos = np.searchsorted(evs, state.event)
        contrib = _island_contributions(state.final, state.signed_weight, table, centers)
        for j in range(len(qubit_ids)):
            raw[lo:lo + len(evs), j] = np.bincount(pos, weights=contrib[:, j], minlength=len(evs))
    return OffsetChargeShift(impacts.events, qubit_ids, raw)


# ---------------------------------------------------------------------------
# observables of a set of simulated impacts


def jump_probability(aliased: np.ndarray, weight: np.ndarray, threshold: float = 0.15) -> np.ndarray:
    """Weighted per-qubit probability that an impact gives ``|q| > threshold``."""
    j = np.abs(aliased) > threshold
    return (weight[:, None] * j).sum(axis=0) / weight.sum()


def simulated_pcorr(aliased: np.ndarray, weight: np.ndarray, i: int, j: int, threshold: float = 0.15,
                    occupancy: float = 0.0) -> float:
    """Expected ``p_corr`` of qubits ``i`` and ``j`` for jump streams binned in coincidence windows.

    Impacts arrive as a Poisson process with ``occupancy`` expected impacts per
    window; each impact gives a jump on i, on j or on both with the weighted
    per-impact probabilities a, b, c.  The binned window probabilities are
    then exact, and ``occupancy -> 0`` gives ``2c / (a + b)``.
    """
    x = np.abs(aliased[:, i]) > threshold
    y = np.abs(aliased[:, j]) > threshold
    W = weight.sum()
    a, b, c = (weight * x).sum() / W, (weight * y).sum() / W, (weight * (x & y)).sum() / W
    if a + b == 0:
        return float("nan")
    if occupancy <= 0:
        return float(2 * c / (a + b))
    m = occupancy
    p_i, p_j = -np.expm1(-m * a), -np.expm1(-m * b)
    p_ij_obs = p_i + p_j - 1 + np.exp(-m * (a + b - c))
    return float(stats.correlation_from_probabilities(p_i, p_j, p_ij_obs)[1])


def positive_fraction(aliased: np.ndarray, weight: np.ndarray, threshold: float = 0.15) -> float:
    """Weighted fraction of above-threshold jumps (all qubits pooled) that are positive."""
    big = np.abs(aliased) > threshold
    w = np.broadcast_to(weight[:, None], aliased.shape)
    tot = (w * big).sum()
    if tot == 0:
        return float("nan")
    return float((w * (big & (aliased > 0))).sum() / tot)


PARITY_SWITCH_GIVEN_IMPACT = 0.45


def observables(shift: OffsetChargeShift, weight: np.ndarray, pairs, threshold: float = 0.15) -> dict:
    """Calibration observables: jump asymmetry, pair ``p_corr`` and jump probability."""
    a = shift.aliased
    ids = list(shift.qubit_ids)
    out = {"asymmetry": positive_fraction(a, weight, threshold)}
    for p, q in pairs:
        out[f"p_corr_{p}{q}"] = simulated_pcorr(a, weight, ids.index(p), ids.index(q), threshold)
    pj = float(jump_probability(a, weight, threshold).mean())
    out["jump_probability"] = pj
    out["gc_gp_ratio"] = pj / PARITY_SWITCH_GIVEN_IMPACT
    return out


# ---------------------------------------------------------------------------
# distance scan


@dataclass
class DistancePoint:
    distance: float
    n_decays: int
    n_hits: int
    hit_rate: float  # substrate impacts per second
    hit_rate_err: float
    jump_rate: np.ndarray  # per qubit, 1/s
    jump_rate_err: np.ndarray


def distance_point(config: ExperimentConfig, table: InducedChargeTable, distance: float, n_decays: int,
                   seed: int, jobs: int = 1, threshold: float = 0.15) -> DistancePoint:
    cfg = config.with_geometry(source_distance=float(distance))
    imp = simulate_impacts(cfg, n_decays, seed, jobs)
    if len(imp) == 0:
        raise DataError(f"no substrate hits at r = {distance} m")
    shift = impact_offsets(cfg, table, imp, seed=seed)
    j = np.abs(shift.aliased) > threshold
    w = imp.weight
    k = imp.activity / imp.n_decays
    return DistancePoint(float(distance), n_decays, len(imp), float(w.sum() * k), float(np.sqrt((w**2).sum()) * k),
                         (w[:, None] * j).sum(axis=0) * k, np.sqrt((w[:, None] ** 2 * j).sum(axis=0)) * k)


@dataclass
class DistanceScan:
    points: list[DistancePoint]
    hit_fit: stats.PowerLaw
    jump_fit: stats.PowerLaw

    def rows(self) -> list[dict]:
        return [{"distance_m": p.distance, "inv_r2": 1 / p.distance**2, "hit_rate": p.hit_rate,
                 "hit_rate_err": p.hit_rate_err, "jump_rate": float(p.jump_rate.mean()),
                 "jump_rate_err": float(np.sqrt((p.jump_rate_err**2).sum()) / len(p.jump_rate))}
                for p in self.points]


def distance_scan(config: ExperimentConfig, table: InducedChargeTable, distances, n_decays: int,
                  seed: int | None = None, jobs: int = 1, threshold: float = 0.15) -> DistanceScan:
    """Hit rate and qubit-averaged jump rate versus source distance, with power-law fits."""
    seed = config.seed if seed is None else seed
    pts = [distance_point(config, table, r, n_decays, seed + 7919 * i, jobs, threshold)
           for i, r in enumerate(distances)]
    rows = [(p.distance, p.hit_rate, p.hit_rate_err, p.jump_rate.mean(),
             np.sqrt((p.jump_rate_err**2).sum()) / len(p.jump_rate)) for p in pts]
    d, h, he, g, ge = (np.array(c) for c in zip(*rows))
    return DistanceScan(pts, stats.rate_vs_distance(h, d, he), stats.rate_vs_distance(g, d, ge))


# ---------------------------------------------------------------------------
# calibration sweep


@dataclass
class SweepGrid:
    trap_lengths_e: tuple[float, ...] = (300e-6, 450e-6, 600e-6, 750e-6, 900e-6)
    ratios: tuple[float, ...] = (1.0, 1.25, 1.55, 1.85)
    f_q: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5)

    def keys(self) -> list[tuple[float, float, float]]:
        return [(float(a), float(b), float(c)) for a in self.trap_lengths_e for b in self.ratios for c in self.f_q]


def _species_sums(args):
    """Per-(f_q, event, qubit) induced charge of one species at one trapping length."""
    (species, lam, geometry, seed, event, pos, energy, fq_values, base, table, centers, n_events, ev_pos) = args
    top = TransportParams(trap_length_e=lam, trap_length_h=lam, f_q=max(fq_values),
                          pair_energy=base.pair_energy, downsample=base.downsample)
    st = deposits_to_carriers(event, pos, energy, top)
    st = st.select(st.species == species)
    st = propagate(st, top, geometry, seed)
    contrib = _island_contributions(st.final, st.signed_weight, table, centers)
    # deposit row of each carrier (deposits_to_carriers keeps input order)
    n_top = pair_count(energy, top)
    dep_row = np.repeat(np.arange(len(energy)), n_top)
    out = np.zeros((len(fq_values), n_events, len(centers)))
    for f, fq in enumerate(fq_values):
        n_f = pair_count(energy, dataclasses.replace(top, f_q=fq))
        keep = st.carrier_index < n_f[dep_row]
        for j in range(len(centers)):
            out[f, :, j] = np.bincount(ev_pos[dep_row[keep]], weights=contrib[keep, j], minlength=n_events)
    return out


def calibration_sweep(config: ExperimentConfig, table: InducedChargeTable, impacts: Impacts,
                      grid: SweepGrid | None = None, seed: int | None = None, jobs: int = 1,
                      threshold: float = 0.15, pairs=(("Q2", "Q4"), ("Q3", "Q5"))) -> dict:
    """Observables at every grid point, keyed by ``(trap_length_e, ratio, f_q)``."""
    grid = grid or SweepGrid()
    seed = config.seed if seed is None else seed
    if not grid.keys():
        raise DataError("empty calibration grid")
    ids = config.qubit_ids
    centers = [config.geometry.island(q).center for q in ids]
    fq = tuple(sorted(grid.f_q))
    ev_pos = np.searchsorted(impacts.events, impacts.event)
    common = (config.geometry, seed, impacts.event, impacts.pos, impacts.energy_keV, fq, config.transport,
              table, centers, len(impacts), ev_pos)
    lam_e = sorted(set(grid.trap_lengths_e))
    lam_h = sorted({round(a * r, 12) for a in grid.trap_lengths_e for r in grid.ratios})
    tasks = [(ELECTRON, a) + common for a in lam_e] + [(HOLE, b) + common for b in lam_h]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            sums = list(pool.map(_species_sums, tasks))
    else:
        sums = [_species_sums(t) for t in tasks]
    e_sums = dict(zip(lam_e, sums[: len(lam_e)]))
    h_sums = dict(zip(lam_h, sums[len(lam_e):]))
    out = {}
    for a, r, f in grid.keys():
        k = fq.index(f)
        raw = e_sums[a][k] + h_sums[round(a * r, 12)][k]
        shift = OffsetChargeShift(impacts.events, tuple(ids), raw)
        out[(a, r, f)] = observables(shift, impacts.weight, pairs, threshold)
    return out


def calibrate(config: ExperimentConfig, table: InducedChargeTable, impacts: Impacts, targets=None,
              grid: SweepGrid | None = None, seed: int | None = None, jobs: int = 1) -> stats.CalibrationResult:
    """Sweep plus chi-square minimisation against ``targets`` (default: the published values)."""
    targets = stats.MEASURED_TARGETS if targets is None else targets
    obs = calibration_sweep(config, table, impacts, grid, seed, jobs)
    return stats.calibrate_parameters(targets, obs)

