"""Photon transport through planar shields into the chip (or a NaI crystal).

All photons of a batch are advanced in lock-step with numpy.  Every random
number a photon consumes is keyed by ``(seed, event, photon slot, step,
draw id)`` so results do not depend on how events are chunked.

Physics list: photoelectric absorption and Compton scattering (Klein–Nishina,
free electrons).  Secondary electrons are not tracked between volumes; each
one travels in a straight line up to its practical range and deposits the
energy it loses inside the volume where it was produced, at the interaction
point.  Photons below the 10 keV cutoff deposit locally.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import rng
from ..config import Geometry
from ..errors import ConfigError
from .materials import MEC2, electron_energy_from_range, electron_range_gcm2, material

E_CUTOFF = 0.010  # MeV
E_1332 = 1.3325
E_1173 = 1.1732
_EPS = 1e-12
_MAX_STEPS = 400

VOLUME_SUBSTRATE = "substrate"
VOLUME_NAI = "NaI"
VOLUME_SHIELD = "shield"

MECH_PHOTO = 0
MECH_COMPTON = 1
MECHANISMS = ("photoelectric", "Compton-electron")

# draw ids within one transport step
_D_PATH, _D_PROC, _D_PHI, _D_ELEC_T, _D_ELEC_P, _D_KN = 0, 1, 2, 3, 4, 8


@dataclass(frozen=True)
class Volume:
    """Slab (infinite in x, y), box, or z-axis cylinder."""

    name: str
    kind: str
    material: str
    z0: float
    z1: float
    half_x: float = np.inf
    half_y: float = np.inf
    radius: float = np.inf

    def intersect(self, pos: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Entry and exit distances of each ray with this volume (t_in > t_out: miss)."""
        n = pos.shape[0]
        t_in = np.full(n, -np.inf)
        t_out = np.full(n, np.inf)
        with np.errstate(divide="ignore", invalid="ignore"):
            _slab_1d(pos[:, 2], d[:, 2], self.z0, self.z1, t_in, t_out)
            if self.kind == "box":
                _slab_1d(pos[:, 0], d[:, 0], -self.half_x, self.half_x, t_in, t_out)
                _slab_1d(pos[:, 1], d[:, 1], -self.half_y, self.half_y, t_in, t_out)
            elif self.kind == "cyl":
                a = d[:, 0] ** 2 + d[:, 1] ** 2
                b = pos[:, 0] * d[:, 0] + pos[:, 1] * d[:, 1]
                c = pos[:, 0] ** 2 + pos[:, 1] ** 2 - self.radius**2
                disc = b * b - a * c
                par = a < 1e-300
                sq = np.sqrt(np.maximum(disc, 0.0))
                lo = np.where(par, -np.inf, (-b - sq) / a)
                hi = np.where(par, np.inf, (-b + sq) / a)
                miss = (disc < 0) | (par & (c > 0))
                lo = np.where(miss, np.inf, lo)
                hi = np.where(miss, -np.inf, hi)
                np.maximum(t_in, lo, out=t_in)
                np.minimum(t_out, hi, out=t_out)
        return t_in, t_out

    def contains(self, p: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        ok = (p[..., 2] >= self.z0 - tol) & (p[..., 2] <= self.z1 + tol)
        if self.kind == "box":
            ok &= (np.abs(p[..., 0]) <= self.half_x + tol) & (np.abs(p[..., 1]) <= self.half_y + tol)
        elif self.kind == "cyl":
            ok &= np.hypot(p[..., 0], p[..., 1]) <= self.radius + tol
        return ok


def _slab_1d(p, d, lo, hi, t_in, t_out):
    a = (lo - p) / d
    b = (hi - p) / d
    par = d == 0
    inside = (p >= lo) & (p <= hi)
    near = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(a, b))
    far = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(a, b))
    np.maximum(t_in, near, out=t_in)
    np.minimum(t_out, far, out=t_out)


@dataclass(frozen=True)
class Scene:
    volumes: tuple[Volume, ...]
    source: tuple[float, float, float]
    target: str = VOLUME_SUBSTRATE

    def index(self, name: str) -> int:
        for i, v in enumerate(self.volumes):
            if v.name == name:
                return i
        raise KeyError(name)

    def target_volume(self) -> Volume:
        return self.volumes[self.index(self.target)]


def build_scene(geometry: Geometry, target: str = VOLUME_SUBSTRATE, shields: bool = True) -> Scene:
    """Volumes along the z axis; the source sits on the axis at +source_distance."""
    vols = []
    if shields:
        for i, s in enumerate(sorted(geometry.shield_slabs, key=lambda s: s.standoff)):
            z0, z1 = s.z_range
            vols.append(Volume(f"{VOLUME_SHIELD}{i}", "slab", s.material, z0, z1))
        prev = -np.inf
        for v in vols:
            if v.z0 < prev:
                raise ConfigError("malformed slab ordering: slabs overlap")
            prev = v.z1
    if target == VOLUME_SUBSTRATE:
        lx, ly, t = geometry.substrate_size
        vols.append(Volume(VOLUME_SUBSTRATE, "box", "Si", -t, 0.0, lx / 2, ly / 2))
        distance = geometry.source_distance
    elif target == VOLUME_NAI:
        nai = geometry.nai_detector
        if nai is None:
            raise ConfigError("no NaI detector configured")
        vols.append(Volume(VOLUME_NAI, "cyl", "NaI", -nai.length, 0.0, radius=nai.diameter / 2))
        distance = nai.distance
    else:
        raise ConfigError(f"unknown target volume {target!r}")
    if vols and max(v.z1 for v in vols) >= distance:
        raise ConfigError("source lies inside or behind a shield slab")
    return Scene(tuple(vols), (0.0, 0.0, distance), target)


# ---------------------------------------------------------------------------
# decays

@dataclass
class DecayEvent:
    event_index: int
    energies: np.ndarray  # MeV
    directions: np.ndarray  # (n, 3)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)


def sample_decay(stream: rng.EventStream, branch_1173: float = 0.9986,
                 origin=(0.0, 0.0, 0.0)) -> DecayEvent:
    """One 60Co decay: a 1.3325 MeV photon plus, with probability ``branch_1173``, a 1.1732 MeV one."""
    u = stream.random(5)
    dirs = rng.isotropic_directions(u[0:2], u[2:4])
    if u[4] < branch_1173:
        energies = np.array([E_1332, E_1173])
    else:
        energies = np.array([E_1332])
        dirs = dirs[:1]
    return DecayEvent(stream.event_index, energies, dirs, tuple(origin))


def decay_photons(seed: int, events: np.ndarray, branch_1173: float = 0.9986):
    """Vectorised equivalent of :func:`sample_decay` for many events.

    Returns (event, slot, energy, direction) arrays, one row per photon.
    """
    events = np.asarray(events, dtype=np.int64)
    u = rng.uniforms(seed, events[:, None], rng.TAG_DECAY, np.arange(5)[None, :])
    has2 = u[:, 4] < branch_1173
    d = rng.isotropic_directions(u[:, 0:2], u[:, 2:4])  # (n, 2, 3)
    ev = np.concatenate([events, events[has2]])
    slot = np.concatenate([np.zeros(len(events), np.int64), np.ones(has2.sum(), np.int64)])
    energy = np.concatenate([np.full(len(events), E_1332), np.full(has2.sum(), E_1173)])
    dirs = np.concatenate([d[:, 0], d[has2, 1]])
    return ev, slot, energy, dirs


# ---------------------------------------------------------------------------
# transport core

@dataclass
class DepositArrays:
    event: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    slot: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    volume: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    pos: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    energy_keV: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mechanism: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    weight: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def concat(cls, parts: list["DepositArrays"]) -> "DepositArrays":
        if not parts:
            return cls()
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                     ("event", "slot", "volume", "pos", "energy_keV", "mechanism", "weight")))

    def __len__(self) -> int:
        return len(self.event)

    def select(self, mask) -> "DepositArrays":
        return DepositArrays(self.event[mask], self.slot[mask], self.volume[mask], self.pos[mask],
                             self.energy_keV[mask], self.mechanism[mask], self.weight[mask])


@dataclass
class TransportResult:
    deposits: DepositArrays
    escaped_keV: np.ndarray  # per photon: photon + electron energy leaving all volumes
    initial_keV: np.ndarray


def _rotate(d: np.ndarray, cos_t: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Rotate unit vectors ``d`` by polar angle acos(cos_t) and azimuth phi."""
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t**2))
    ux, uy, uz = d[:, 0], d[:, 1], d[:, 2]
    cp, sp = np.cos(phi), np.sin(phi)
    out = np.empty_like(d)
    polar = np.abs(uz) > 0.99999
    den = np.sqrt(np.maximum(1.0 - uz**2, 1e-300))
    out[:, 0] = sin_t * (ux * uz * cp - uy * sp) / den + ux * cos_t
    out[:, 1] = sin_t * (uy * uz * cp + ux * sp) / den + uy * cos_t
    out[:, 2] = -sin_t * cp * den + uz * cos_t
    if np.any(polar):
        s = np.sign(uz[polar])
        out[polar, 0] = sin_t[polar] * cp[polar]
        out[polar, 1] = sin_t[polar] * sp[polar]
        out[polar, 2] = s * cos_t[polar]
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    return out


def sample_klein_nishina(E: np.ndarray, seed: int, keys: tuple) -> np.ndarray:
    """Scattered/incident energy ratio from the Klein–Nishina distribution.

    Composition-rejection as used in the standard Geant4 Compton model.
    ``keys`` are broadcastable counter keys identifying each photon-step.
    """
    n = len(E)
    k = E / MEC2
    eps0 = 1.0 / (1.0 + 2.0 * k)
    eps0sq = eps0 * eps0
    a1 = -np.log(eps0)
    a2 = 0.5 * (1.0 - eps0sq)
    out = np.empty(n)
    todo = np.arange(n)
    attempt = 0
    while todo.size:
        sub = tuple(np.asarray(kk)[todo] if np.ndim(kk) else kk for kk in keys)
        base = _D_KN + 3 * attempt
        u1 = rng.uniforms(seed, *sub, base)
        u2 = rng.uniforms(seed, *sub, base + 1)
        u3 = rng.uniforms(seed, *sub, base + 2)
        kk_, e0, e0s, b1, b2 = k[todo], eps0[todo], eps0sq[todo], a1[todo], a2[todo]
        first = b1 / (b1 + b2) > u1
        eps = np.where(first, np.exp(-b1 * u2), np.sqrt(e0s + (1.0 - e0s) * u2))
        onecost = (1.0 - eps) / (eps * kk_)
        sint2 = onecost * (2.0 - onecost)
        g = 1.0 - eps * sint2 / (1.0 + eps * eps)
        ok = g >= u3
        out[todo[ok]] = eps[ok]
        todo = todo[~ok]
        attempt += 1
        if attempt > 200:
            raise RuntimeError("Klein–Nishina sampling failed to converge")
    return out


# mean projected penetration over path length for low-Z absorbers at 0.1-1 MeV;
# multiple scattering shortens the straight-line reach of the track
DETOUR_FACTOR = 0.6


def _electron_deposit(T: np.ndarray, path_in_volume: np.ndarray, density: np.ndarray,
                      detour: float = DETOUR_FACTOR) -> np.ndarray:
    """Energy (MeV) an electron of energy T loses before leaving its volume.

    The track is a straight line of length ``detour * range``; energy is lost
    along it according to the range-energy relation.
    """
    R = electron_range_gcm2(T)
    path_in_volume = path_in_volume / detour
    travelled = path_in_volume * 100.0 * density  # g/cm^2
    remaining = electron_energy_from_range(np.maximum(R - travelled, 0.0))
    return np.where(travelled >= R, T, T - remaining)


def transport_photons(scene: Scene, seed: int, event: np.ndarray, slot: np.ndarray,
                      energy: np.ndarray, direction: np.ndarray, weight: np.ndarray | None = None,
                      origin: np.ndarray | None = None) -> TransportResult:
    """Trace photons (MeV, unit directions) to absorption or escape."""
    n = len(energy)
    if origin is None:
        origin = np.broadcast_to(np.asarray(scene.source, dtype=float), (n, 3))
    pos = np.array(origin, dtype=float, copy=True).reshape(n, 3)
    d = np.array(direction, dtype=float, copy=True)
    E = np.array(energy, dtype=float, copy=True)
    w = np.ones(n) if weight is None else np.asarray(weight, dtype=float)
    ev = np.asarray(event, dtype=np.int64)
    sl = np.asarray(slot, dtype=np.int64)
    escaped = np.zeros(n)
    alive = np.arange(n)
    vols = scene.volumes
    mats = [material(v.material) for v in vols]
    dens = np.array([m.density for m in mats])
    parts: list[DepositArrays] = []

    def record(idx, vol, p, e_mev, mech):
        keep = e_mev > 0
        if np.any(keep):
            parts.append(DepositArrays(ev[idx[keep]], sl[idx[keep]], vol[keep], p[keep],
                                       e_mev[keep] * 1e3, np.full(keep.sum(), mech), w[idx[keep]]))

    if not vols:
        return TransportResult(DepositArrays(), np.asarray(energy, dtype=float) * 1e3, np.asarray(energy) * 1e3)
    step = 0
    while alive.size:
        if step > _MAX_STEPS:
            raise RuntimeError("photon transport exceeded the step limit")
        p, dd = pos[alive], d[alive]
        m = len(alive)
        t_in = np.empty((m, len(vols)))
        t_out = np.empty((m, len(vols)))
        for j, v in enumerate(vols):
            t_in[:, j], t_out[:, j] = v.intersect(p, dd)
        hit = t_out > np.maximum(t_in, 0.0) + _EPS
        inside = hit & (t_in <= _EPS)
        cur = np.where(inside.any(axis=1), np.argmax(inside, axis=1), -1)
        # vacuum: jump to the nearest entry or escape
        vac = cur < 0
        keep_alive = np.ones(m, bool)
        if np.any(vac):
            vi = np.flatnonzero(vac)
            tmin = np.where(hit[vi] & ~inside[vi], t_in[vi], np.inf).min(axis=1)
            gone = ~np.isfinite(tmin)
            esc = alive[vi[gone]]
            escaped[esc] += E[esc] * 1e3
            keep_alive[vi[gone]] = False
            mv = vi[~gone]
            pos[alive[mv]] = p[mv] + (tmin[~gone] + 1e-12)[:, None] * dd[mv]
        ins = np.flatnonzero(~vac)
        if ins.size:
            gi = alive[ins]
            vid = cur[ins]
            texit = t_out[ins, vid]
            Eg = E[gi]
            mu = np.empty(ins.size)
            fpe = np.empty(ins.size)
            for j in np.unique(vid):
                sel = vid == j
                mu[sel], fpe[sel] = mats[j].coefficients(Eg[sel])
            keys = (ev[gi], sl[gi], rng.TAG_PHOTON, step)
            u_path = rng.uniforms(seed, *keys, _D_PATH)
            s = -np.log(u_path) / mu
            cross = s >= texit
            # leave the volume
            ci = ins[cross]
            pos[alive[ci]] = p[ci] + (texit[cross] + 1e-12)[:, None] * dd[ci]
            # interact
            ii = ins[~cross]
            if ii.size:
                gI = alive[ii]
                vI = vid[~cross]
                sI = s[~cross]
                ip = p[ii] + sI[:, None] * dd[ii]
                pos[gI] = ip
                kI = (ev[gI], sl[gI], rng.TAG_PHOTON, step)
                u_proc = rng.uniforms(seed, *kI, _D_PROC)
                photo = u_proc < fpe[~cross]
                EI = E[gI]
                # photoelectric: electron takes the photon energy, isotropic
                if np.any(photo):
                    gp = gI[photo]
                    kp = tuple(k[photo] if np.ndim(k) else k for k in kI)
                    ed = rng.isotropic_directions(rng.uniforms(seed, *kp, _D_ELEC_T),
                                                  rng.uniforms(seed, *kp, _D_ELEC_P))
                    tl = _exit_distance(vols, vI[photo], ip[photo], ed)
                    dep = _electron_deposit(EI[photo], tl, dens[vI[photo]])
                    escaped[gp] += (EI[photo] - dep) * 1e3
                    record(gp, vI[photo], ip[photo], dep, MECH_PHOTO)
                    E[gp] = 0.0
                    keep_alive[ii[photo]] = False
                comp = ~photo
                if np.any(comp):
                    gc = gI[comp]
                    kc = tuple(k[comp] if np.ndim(k) else k for k in kI)
                    Ec = EI[comp]
                    eps = sample_klein_nishina(Ec, seed, kc)
                    kk = Ec / MEC2
                    cos_t = 1.0 - (1.0 - eps) / (eps * kk)
                    phi = 2 * np.pi * rng.uniforms(seed, *kc, _D_PHI)
                    dnew = _rotate(dd[ii[comp]], np.clip(cos_t, -1, 1), phi)
                    T = Ec * (1.0 - eps)
                    # electron direction from momentum conservation
                    pvec = Ec[:, None] * dd[ii[comp]] - (Ec * eps)[:, None] * dnew
                    norm = np.linalg.norm(pvec, axis=1, keepdims=True)
                    edir = pvec / np.where(norm > 0, norm, 1.0)
                    tl = _exit_distance(vols, vI[comp], ip[comp], edir)
                    dep = _electron_deposit(T, tl, dens[vI[comp]])
                    escaped[gc] += (T - dep) * 1e3
                    record(gc, vI[comp], ip[comp], dep, MECH_COMPTON)
                    Enew = Ec * eps
                    low = Enew < E_CUTOFF
                    if np.any(low):
                        record(gc[low], vI[comp][low], ip[comp][low], Enew[low], MECH_PHOTO)
                        Enew = np.where(low, 0.0, Enew)
                        keep_alive[ii[comp][low]] = False
                    E[gc] = Enew
                    d[gc] = dnew
        alive = alive[keep_alive]
        step += 1
    deps = DepositArrays.concat(parts)
    return TransportResult(deps, escaped, np.asarray(energy) * 1e3)


def _exit_distance(vols, vid, p, d):
    out = np.empty(len(vid))
    for j in np.unique(vid):
        sel = vid == j
        _, t_out = vols[j].intersect(p[sel], d[sel])
        out[sel] = np.maximum(t_out, 0.0)
    return out


def trace_photon(energy: float, direction, geometry: Geometry | Scene, seed: int = 0,
                 event_index: int = 0, origin=None) -> DepositArrays:
    """Trace one photon; ``origin`` defaults to the configured source position."""
    if not 0.01 < energy <= 3.0:
        raise ValueError(f"photon energy {energy} MeV outside (0.01, 3]")
    scene = geometry if isinstance(geometry, Scene) else build_scene(geometry)
    d = np.asarray(direction, dtype=float).reshape(1, 3)
    d = d / np.linalg.norm(d)
    o = None if origin is None else np.asarray(origin, dtype=float).reshape(1, 3)
    res = transport_photons(scene, seed, np.array([event_index]), np.array([0]),
                            np.array([energy]), d, origin=o)
    return res.deposits
