"""Decay batches, NaI spectra and activity estimates."""
from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import rng
from ..config import CI_DECAYS_PER_S, ExperimentConfig, Geometry
from ..errors import ConfigError, DataError, NumericalError
from .transport import (MECHANISMS, VOLUME_NAI, VOLUME_SUBSTRATE, DepositArrays, Scene, build_scene,
                        decay_photons, transport_photons)

_D_BIAS, _D_CONE = 10, 12


@dataclass
class DepositLog:
    """Deposits of a decay batch plus the bookkeeping needed to normalise them.

    ``weight`` is the importance weight of the photon that produced each
    deposit (1 for analog runs); rates are weighted sums divided by
    ``n_decays``.
    """

    deposits: DepositArrays
    volume_names: tuple[str, ...]
    n_decays: int
    seed: int
    activity: float
    source_distance: float
    branch_1173: float = 0.9986

    def in_volume(self, name: str) -> DepositArrays:
        return self.deposits.select(self.deposits.volume == self.volume_names.index(name))

    def events(self, name: str = VOLUME_SUBSTRATE):
        """Per-event totals in one volume: (event ids, total keV, weight).

        Photons are importance-sampled independently, so an event in which
        only photon k deposited has biased odds that its partner missed.  Its
        weight ``w_k`` is rescaled by ``(1 - p_a) / (1 - p_b)`` of the partner
        slot, with ``p_a`` (weighted) and ``p_b`` (raw) the partner's deposit
        probabilities estimated from the same batch.  Events in which both
        photons deposited carry ``w_0 w_1``.
        """
        d = self.in_volume(name)
        if len(d) == 0:
            return np.zeros(0, np.int64), np.zeros(0), np.zeros(0)
        ev, inv = np.unique(d.event, return_inverse=True)
        tot = np.bincount(inv, weights=d.energy_keV)
        key = d.event * 4 + d.slot
        _, first = np.unique(key, return_index=True)
        w = np.ones(len(ev))
        np.multiply.at(w, inv[first], d.weight[first])
        n_slot = np.zeros(len(ev), np.int64)
        np.add.at(n_slot, inv[first], 1)
        slots = np.full(len(ev), -1)
        slots[inv[first]] = d.slot[first]
        emitted = (self.n_decays, self.n_decays * self.branch_1173)
        factor = [1.0, 1.0]
        for s in (0, 1):
            other = 1 - s
            sel = d.slot[first] == other
            if emitted[other] == 0:
                continue
            p_a = d.weight[first][sel].sum() / emitted[other]
            p_b = np.count_nonzero(sel) / emitted[other]
            if p_b < 1:
                factor[s] = (1 - min(p_a, 1.0)) / (1 - p_b)
        # a decay without the 1.1732 MeV photon has no partner to correct for
        has_partner = rng.uniforms(self.seed, ev, rng.TAG_DECAY, 4) < self.branch_1173
        single = (n_slot == 1) & has_partner
        w[single] *= np.where(slots[single] == 0, factor[0], factor[1])
        return ev, tot, w

    def hit_rate(self, name: str = VOLUME_SUBSTRATE) -> tuple[float, float]:
        """Weighted hits per decay and its standard error."""
        _, _, w = self.events(name)
        return float(w.sum() / self.n_decays), float(np.sqrt((w**2).sum()) / self.n_decays)

    def mean_deposit(self, name: str = VOLUME_SUBSTRATE) -> float:
        _, tot, w = self.events(name)
        if w.sum() == 0:
            return float("nan")
        return float((tot * w).sum() / w.sum())

    def histogram(self, name: str = VOLUME_SUBSTRATE, bins=None):
        _, tot, w = self.events(name)
        bins = np.linspace(0, 1400, 141) if bins is None else bins
        counts, edges = np.histogram(tot, bins=bins, weights=w)
        return counts, edges

    def summary(self) -> dict:
        rate, err = self.hit_rate()
        counts, edges = self.histogram()
        return {
            "n_decays": self.n_decays,
            "seed": self.seed,
            "source_distance_m": self.source_distance,
            "hits_per_decay": rate,
            "hits_per_decay_err": err,
            "hit_rate_per_s": rate * self.activity,
            "mean_deposit_keV": self.mean_deposit(),
            "histogram_edges_keV": edges.tolist(),
            "histogram_counts": counts.tolist(),
        }

    def write_csv(self, path: str | Path) -> None:
        d = self.deposits
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["event_index", "photon", "volume", "x", "y", "z", "energy_keV", "mechanism", "weight"])
            for i in range(len(d)):
                wr.writerow([int(d.event[i]), int(d.slot[i]), self.volume_names[d.volume[i]],
                             repr(float(d.pos[i, 0])), repr(float(d.pos[i, 1])), repr(float(d.pos[i, 2])),
                             repr(float(d.energy_keV[i])), MECHANISMS[d.mechanism[i]], repr(float(d.weight[i]))])

    def write_summary(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2))


def read_deposit_csv(path: str | Path, volume_names: tuple[str, ...]) -> DepositArrays:
    rows = list(csv.DictReader(open(path, newline="")))
    if not rows:
        return DepositArrays()
    try:
        return DepositArrays(
            np.array([int(r["event_index"]) for r in rows], np.int64),
            np.array([int(r["photon"]) for r in rows], np.int64),
            np.array([volume_names.index(r["volume"]) for r in rows], np.int64),
            np.array([[float(r["x"]), float(r["y"]), float(r["z"])] for r in rows]),
            np.array([float(r["energy_keV"]) for r in rows]),
            np.array([MECHANISMS.index(r["mechanism"]) for r in rows], np.int64),
            np.array([float(r["weight"]) for r in rows]),
        )
    except (KeyError, ValueError) as exc:
        raise DataError(f"malformed deposit log {path}: {exc}") from exc


def cone_half_angle(scene: Scene, margin: float = 1.0e-3) -> float:
    """Half-angle of the emission cone that covers the target volume's top face."""
    tv = scene.target_volume()
    if tv.kind == "box":
        reach = np.hypot(tv.half_x, tv.half_y) + margin
    else:
        reach = tv.radius + margin
    return float(np.arctan2(reach, scene.source[2] - tv.z1))


def _directions(seed, ev, slot, base_dirs, scene, cone_fraction):
    """Emission directions and importance weights.

    With ``cone_fraction = beta`` each photon is drawn from the mixture
    ``(1 - beta) * isotropic + beta * uniform-in-cone`` aimed at the target;
    the weight is the isotropic density over the mixture density.
    """
    if not cone_fraction:
        return base_dirs, np.ones(len(ev))
    theta = cone_half_angle(scene)
    cos_c = np.cos(theta)
    omega_c = 2 * np.pi * (1 - cos_c)
    u = rng.uniforms(seed, ev, rng.TAG_DECAY, _D_BIAS + slot)
    use_cone = u < cone_fraction
    u1 = rng.uniforms(seed, ev, rng.TAG_DECAY, _D_CONE + 2 * slot)
    u2 = rng.uniforms(seed, ev, rng.TAG_DECAY, _D_CONE + 2 * slot + 1)
    ct = 1 - u1 * (1 - cos_c)
    st = np.sqrt(np.maximum(0, 1 - ct**2))
    phi = 2 * np.pi * u2
    cone_dirs = np.stack([st * np.cos(phi), st * np.sin(phi), -ct], axis=1)
    dirs = np.where(use_cone[:, None], cone_dirs, base_dirs)
    in_cone = -dirs[:, 2] >= cos_c
    dens = (1 - cone_fraction) / (4 * np.pi) + cone_fraction * in_cone / omega_c
    return dirs, 1.0 / (4 * np.pi) / dens


def _run_chunk(args):
    scene, seed, first, last, branch, cone_fraction = args
    events = np.arange(first, last, dtype=np.int64)
    ev, slot, energy, dirs = decay_photons(seed, events, branch)
    dirs, w = _directions(seed, ev, slot, dirs, scene, cone_fraction)
    res = transport_photons(scene, seed, ev, slot, energy, dirs, weight=w)
    return res.deposits


def run_decays(scene: Scene, n_decays: int, seed: int, branch_1173: float = 0.9986,
               cone_fraction: float | None = 0.95, chunk: int = 100_000, jobs: int = 1,
               first_event: int = 0) -> DepositArrays:
    if n_decays < 1:
        raise ValueError("need at least one decay")
    bounds = list(range(first_event, first_event + n_decays, chunk)) + [first_event + n_decays]
    tasks = [(scene, seed, a, b, branch_1173, cone_fraction) for a, b in zip(bounds[:-1], bounds[1:])]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_run_chunk, tasks))
    else:
        parts = [_run_chunk(t) for t in tasks]
    deps = DepositArrays.concat(parts)
    order = np.lexsort((deps.slot, deps.event))
    return deps.select(order)


def run_decay_batch(config: ExperimentConfig, n_decays: int, seed: int | None = None,
                    cone_fraction: float | None = 0.95, jobs: int = 1, shields: bool = True,
                    chunk: int = 100_000) -> DepositLog:
    """Simulate ``n_decays`` source decays against the chip substrate.

    ``cone_fraction`` enables importance-sampled emission towards the chip
    (``None``/0 gives analog isotropic emission).
    """
    seed = config.seed if seed is None else seed
    scene = build_scene(config.geometry, VOLUME_SUBSTRATE, shields=shields)
    deps = run_decays(scene, n_decays, seed, config.analysis.branch_1173, cone_fraction, chunk, jobs)
    return DepositLog(deps, tuple(v.name for v in scene.volumes), n_decays, seed,
                      config.geometry.source_activity, config.geometry.source_distance, config.analysis.branch_1173)


def estimate_activity(measured_peak_rate: float, photoabsorption_count: int, trials: int) -> dict:
    """Source activity from a measured full-energy peak rate and the simulated peak efficiency."""
    if trials <= 0:
        raise ValueError("trials must be positive")
    if photoabsorption_count < 0:
        raise ValueError("photoabsorption_count must be >= 0")
    if photoabsorption_count == 0:
        raise NumericalError("zero simulated photoabsorptions: activity estimate undefined")
    activity = measured_peak_rate / (photoabsorption_count / trials)
    return {"decays_per_s": activity, "uCi": activity / CI_DECAYS_PER_S * 1e6}


@dataclass
class NaISpectrum:
    counts: np.ndarray
    edges: np.ndarray
    peak_1332: float
    peak_1173: float
    n_decays: int

    @property
    def peak_efficiency(self) -> float:
        return self.peak_1332 / self.n_decays


def nai_spectrum(config: ExperimentConfig | Geometry, n_decays: int, seed: int = 0,
                 shields: bool = True, cone_fraction: float | None = 0.95, bin_keV: float = 5.0,
                 jobs: int = 1) -> NaISpectrum:
    """Per-event energy deposited in the NaI crystal and full-energy peak counts.

    No resolution broadening is applied; the peaks are counted as events whose
    deposit lies within one bin width of the line energy.
    """
    geometry = config.geometry if isinstance(config, ExperimentConfig) else config
    if geometry.nai_detector is None:
        raise ConfigError("nai_spectrum needs a NaI detector in the geometry")
    edges = np.arange(0.0, 1500.0 + bin_keV, bin_keV)
    if n_decays <= 0:
        return NaISpectrum(np.zeros(len(edges) - 1), edges, 0.0, 0.0, 0)
    scene = build_scene(geometry, VOLUME_NAI, shields=shields)
    deps = run_decays(scene, n_decays, seed, cone_fraction=cone_fraction, jobs=jobs)
    log = DepositLog(deps, tuple(v.name for v in scene.volumes), n_decays, seed,
                     geometry.source_activity, geometry.nai_detector.distance)
    _, tot, w = log.events(VOLUME_NAI)
    counts, _ = np.histogram(tot, bins=edges, weights=w)
    peak1 = float(w[np.abs(tot - 1332.5) <= bin_keV].sum())
    peak2 = float(w[np.abs(tot - 1173.2) <= bin_keV].sum())
    return NaISpectrum(counts, edges, peak1, peak2, n_decays)
