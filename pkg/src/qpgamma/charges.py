"""Electron/hole generation and single-flight trapping transport in the substrate.

Each tracked carrier stands for ``downsample`` real charges.  A carrier picks
one isotropic direction and one exponentially distributed path length with
mean equal to its species' trapping length; if the substrate boundary comes
first it stops there (perfect absorber), otherwise it is trapped at the end
of the path.  Random numbers are keyed by (event, deposit, carrier, species)
so changing one species' trapping length leaves the other untouched.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng
from .config import Geometry, TransportParams

ELECTRON = 0
HOLE = 1
TRAPPED = 0
ABSORBED = 1
SPECIES = ("electron", "hole")
FATES = ("trapped", "boundary-absorbed")

_D_COS, _D_PHI, _D_PATH = 0, 1, 2


@dataclass
class ChargeState:
    """Carriers of one or more events, as parallel arrays."""

    event: np.ndarray
    species: np.ndarray
    weight: np.ndarray
    birth: np.ndarray
    final: np.ndarray
    fate: np.ndarray
    carrier_index: np.ndarray
    deposit_index: np.ndarray
    total_pairs: float = 0.0

    @classmethod
    def empty(cls) -> "ChargeState":
        z = np.zeros(0, np.int64)
        return cls(z, z.copy(), np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3)), z.copy(), z.copy(), z.copy())

    def __len__(self) -> int:
        return len(self.species)

    @property
    def sign(self) -> np.ndarray:
        """+1 for holes, -1 for electrons."""
        return np.where(self.species == HOLE, 1.0, -1.0)

    @property
    def signed_weight(self) -> np.ndarray:
        return self.sign * self.weight

    def select(self, mask) -> "ChargeState":
        return ChargeState(self.event[mask], self.species[mask], self.weight[mask], self.birth[mask],
                           self.final[mask], self.fate[mask], self.carrier_index[mask],
                           self.deposit_index[mask], self.total_pairs)

    @classmethod
    def concat(cls, parts: list["ChargeState"]) -> "ChargeState":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        out = cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                    ("event", "species", "weight", "birth", "final", "fate", "carrier_index", "deposit_index")))
        out.total_pairs = float(sum(p.total_pairs for p in parts))
        return out

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["event_index", "species", "weight", "x_f", "y_f", "z_f", "fate"])
            for i in range(len(self)):
                wr.writerow([int(self.event[i]), SPECIES[self.species[i]], repr(float(self.weight[i])),
                             repr(float(self.final[i, 0])), repr(float(self.final[i, 1])),
                             repr(float(self.final[i, 2])), FATES[self.fate[i]]])


def pair_count(energy_keV, params: TransportParams):
    """Number of tracked pairs for a deposit (after f_q and downsampling)."""
    e = np.asarray(energy_keV, dtype=float) * 1e3
    return np.rint(e * params.f_q / params.pair_energy / params.downsample).astype(np.int64)


def generate_pairs(energy_keV: float, position, params: TransportParams,
                   event_index: int = 0, deposit_index: int = 0) -> ChargeState:
    """Co-located, unpropagated e/h pairs for one substrate deposit."""
    n = int(pair_count(energy_keV, params))
    if n <= 0:
        return ChargeState.empty()
    pos = np.broadcast_to(np.asarray(position, dtype=float), (2 * n, 3)).copy()
    species = np.repeat(np.array([ELECTRON, HOLE]), n)
    idx = np.tile(np.arange(n), 2)
    st = ChargeState(
        np.full(2 * n, event_index, np.int64), species, np.full(2 * n, float(params.downsample)),
        pos, pos.copy(), np.zeros(2 * n, np.int64), idx, np.full(2 * n, deposit_index, np.int64),
    )
    st.total_pairs = float(energy_keV) * 1e3 * params.f_q / params.pair_energy
    return st


def _box_exit(pos: np.ndarray, d: np.ndarray, geometry: Geometry) -> np.ndarray:
    lx, ly, t = geometry.substrate_size
    lo = np.array([-lx / 2, -ly / 2, -t])
    hi = np.array([lx / 2, ly / 2, 0.0])
    with np.errstate(divide="ignore", invalid="ignore"):
        tt = np.where(d > 0, (hi - pos) / d, np.where(d < 0, (lo - pos) / d, np.inf))
    return np.maximum(tt.min(axis=1), 0.0)


def propagate(state: ChargeState, params: TransportParams, geometry: Geometry, seed: int) -> ChargeState:
    """Finalise every carrier of ``state`` (returns a new state)."""
    if len(state) == 0:
        return state
    keys = (state.event, rng.TAG_CARRIER, state.deposit_index, state.carrier_index, state.species)
    cos_t = 2.0 * rng.uniforms(seed, *keys, _D_COS) - 1.0
    phi = 2.0 * np.pi * rng.uniforms(seed, *keys, _D_PHI)
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t**2))
    d = np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], axis=1)
    lam = np.where(state.species == HOLE, params.trap_length_h, params.trap_length_e)
    s = -lam * np.log(rng.uniforms(seed, *keys, _D_PATH))
    t_exit = _box_exit(state.birth, d, geometry)
    absorbed = s >= t_exit
    travel = np.where(absorbed, t_exit, s)
    final = state.birth + travel[:, None] * d
    # clamp round-off so absorbed carriers sit exactly inside the box
    lx, ly, t = geometry.substrate_size
    final[:, 0] = np.clip(final[:, 0], -lx / 2, lx / 2)
    final[:, 1] = np.clip(final[:, 1], -ly / 2, ly / 2)
    final[:, 2] = np.clip(final[:, 2], -t, 0.0)
    out = ChargeState(state.event, state.species, state.weight, state.birth, final,
                      absorbed.astype(np.int64), state.carrier_index, state.deposit_index, state.total_pairs)
    return out


def propagate_carrier(birth, species: int, trap_length: float, geometry: Geometry, seed: int = 0,
                      event_index: int = 0, carrier_index: int = 0) -> tuple[np.ndarray, str]:
    """Single-carrier convenience wrapper: returns (final position, fate)."""
    p = TransportParams(trap_length_e=trap_length, trap_length_h=trap_length)
    st = ChargeState(np.array([event_index]), np.array([species]), np.array([1.0]),
                     np.asarray(birth, dtype=float).reshape(1, 3), np.asarray(birth, dtype=float).reshape(1, 3),
                     np.array([0]), np.array([carrier_index]), np.array([0]))
    out = propagate(st, p, geometry, seed)
    return out.final[0], FATES[out.fate[0]]


def deposits_to_carriers(event, pos, energy_keV, params: TransportParams) -> ChargeState:
    """Unpropagated carriers for many deposits at once.

    ``deposit_index`` numbers the deposits within each event in input order.
    """
    event = np.asarray(event, dtype=np.int64)
    energy_keV = np.asarray(energy_keV, dtype=float)
    pos = np.asarray(pos, dtype=float).reshape(-1, 3)
    if len(event) == 0:
        return ChargeState.empty()
    # index of each deposit within its event
    order = np.argsort(event, kind="stable")
    ev_sorted = event[order]
    start = np.r_[0, np.flatnonzero(np.diff(ev_sorted)) + 1]
    rank_sorted = np.arange(len(event)) - np.repeat(start, np.diff(np.r_[start, len(event)]))
    dep_idx = np.empty(len(event), np.int64)
    dep_idx[order] = rank_sorted

    n = pair_count(energy_keV, params)
    n = np.maximum(n, 0)
    total = int(n.sum())
    if total == 0:
        return ChargeState.empty()
    rep = np.repeat(np.arange(len(event)), n)
    cidx = np.arange(total) - np.repeat(np.cumsum(n) - n, n)
    ev = np.concatenate([event[rep], event[rep]])
    species = np.concatenate([np.full(total, ELECTRON), np.full(total, HOLE)])
    birth = np.concatenate([pos[rep], pos[rep]])
    st = ChargeState(ev, species, np.full(2 * total, float(params.downsample)), birth, birth.copy(),
                     np.zeros(2 * total, np.int64), np.concatenate([cidx, cidx]),
                     np.concatenate([dep_idx[rep], dep_idx[rep]]))
    st.total_pairs = float((energy_keV * 1e3 * params.f_q / params.pair_energy).sum())
    return st


def transport_event(deposit_pos, deposit_energy_keV, params: TransportParams, geometry: Geometry,
                    seed: int, event_index: int = 0) -> ChargeState:
    """All finalised carriers of one event's substrate deposits."""
    e = np.atleast_1d(np.asarray(deposit_energy_keV, dtype=float))
    if e.size == 0:
        return ChargeState.empty()
    st = deposits_to_carriers(np.full(e.size, event_index), deposit_pos, e, params)
    return propagate(st, params, geometry, seed)
