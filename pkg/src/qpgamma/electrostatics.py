"""Induced offset charge from bulk charges via a weighting potential.

The weighting potential ``w`` solves Laplace's equation in the substrate with
the qubit island held at 1 and every other conductor at 0; a charge ``q`` at
``x`` induces ``q * w(x)`` on the island.  Boundary conditions on the
substrate box (island-centred, lateral half-width ``GridSpec.lateral_half``):

* top face: island nodes at 1, gap nodes insulating (zero normal flux),
  ground-plane nodes at 0;
* bottom face and side walls: 0.

Every island shares one table, evaluated at ``x - island_centre``.  The mesh
is a graded rectilinear grid whose node lines pass through every island and
gap edge; the discretisation is vertex-centred finite volumes, giving a
symmetric M-matrix solved with algebraic multigrid preconditioned CG.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
import pyamg
import scipy.sparse as sp
from contourpy import contour_generator
from scipy.signal import fftconvolve

from .charges import ChargeState, deposits_to_carriers, propagate
from .config import ExperimentConfig, Geometry, IslandShape, TransportParams
from .errors import DataError, NumericalError
from .gamma.batch import run_decay_batch

TABLE_FORMAT = "qpgamma-weighting-table/1"
_MAGIC = b"QPGWT001"


@dataclass(frozen=True)
class GridSpec:
    """Graded-mesh parameters.  ``scale`` multiplies every target spacing."""

    lateral_half: float = 8.0e-3
    h_fine: float = 2.5e-6
    h_max_lateral: float = 200e-6
    h_max_z: float = 25e-6
    growth: float = 1.25
    scale: float = 1.0
    tol: float = 1e-8
    maxiter: int = 500

    def scaled(self, factor: float) -> "GridSpec":
        return dataclasses.replace(self, scale=self.scale * factor)


def _graded_axis(lo: float, hi: float, keys, h0: float, hmax: float, growth: float) -> np.ndarray:
    """Nodes in [lo, hi] through every key point, spacing ~ h0 + (g-1)*distance-to-key."""
    keys = np.asarray(sorted(k for k in keys if lo <= k <= hi), dtype=float)
    breaks = np.unique(np.concatenate([[lo, hi], keys]))
    nodes = [np.array([lo])]
    for a, b in zip(breaks[:-1], breaks[1:]):
        s = np.linspace(a, b, 4001)
        dist = np.min(np.abs(s[:, None] - keys[None, :]), axis=1) if len(keys) else np.full_like(s, np.inf)
        h = np.minimum(hmax, h0 + (growth - 1.0) * dist)
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (1 / h[1:] + 1 / h[:-1]) * np.diff(s))])
        n = max(1, int(np.ceil(cum[-1] - 1e-9)))
        inner = np.interp(np.linspace(0, cum[-1], n + 1)[1:], cum, s)
        inner[-1] = b
        nodes.append(inner)
    return np.concatenate(nodes)


def build_axes(shape: IslandShape, thickness: float, spec: GridSpec):
    """(x, y, z) node coordinates, island-centred; z ascends from -thickness to 0."""
    a, w, g = shape.arm_length, shape.arm_width / 2, shape.gap
    pos = [0.0, w, w + g, a, a + g]
    keys = sorted(set(pos + [-p for p in pos]))
    h0 = spec.h_fine * spec.scale
    L = spec.lateral_half
    x = _graded_axis(-L, L, keys, h0, spec.h_max_lateral * spec.scale, spec.growth)
    z = _graded_axis(-thickness, 0.0, [0.0], h0, spec.h_max_z * spec.scale, spec.growth)
    return x, x.copy(), z


def top_face_labels(x: np.ndarray, y: np.ndarray, shape: IslandShape) -> np.ndarray:
    """0 = ground, 1 = island, 2 = gap for every (x, y) node of the top face."""
    X, Y = np.meshgrid(x, y, indexing="ij")
    tol = 1e-12
    island = shape.contains(X, Y, grow=tol)
    near = shape.contains(X, Y, grow=shape.gap - tol)
    lab = np.zeros(X.shape, np.int8)
    lab[near] = 2
    lab[island] = 1
    return lab


def _dual(c: np.ndarray) -> np.ndarray:
    d = np.empty_like(c)
    d[1:-1] = 0.5 * (c[2:] - c[:-2])
    d[0] = 0.5 * (c[1] - c[0])
    d[-1] = 0.5 * (c[-1] - c[-2])
    return d


def _edge_lists(x, y, z):
    """(p, q, conductance) for every nearest-neighbour node pair."""
    nx, ny, nz = len(x), len(y), len(z)
    idx = np.arange(nx * ny * nz).reshape(nx, ny, nz)
    dx, dy, dz = _dual(x), _dual(y), _dual(z)
    out = []
    c = (dy[None, :, None] * dz[None, None, :]) / np.diff(x)[:, None, None]
    out.append((idx[:-1].ravel(), idx[1:].ravel(), c.ravel()))
    c = (dx[:, None, None] * dz[None, None, :]) / np.diff(y)[None, :, None]
    out.append((idx[:, :-1].ravel(), idx[:, 1:].ravel(), c.ravel()))
    c = (dx[:, None, None] * dy[None, :, None]) / np.diff(z)[None, None, :]
    out.append((idx[:, :, :-1].ravel(), idx[:, :, 1:].ravel(), c.ravel()))
    p = np.concatenate([o[0] for o in out])
    q = np.concatenate([o[1] for o in out])
    cc = np.concatenate([o[2] for o in out])
    return p, q, cc


def _assemble(p, q, c, fixed, n):
    """Reduced SPD system for the free nodes.

    ``fixed`` holds the Dirichlet value at every node (NaN where free).
    Returns (A, rhs_matrix builder inputs): A over free nodes, and the
    coupling from free nodes to fixed nodes as a sparse matrix ``B`` so that
    ``A u = B @ v_fixed``.
    """
    free = np.isnan(fixed)
    fid = np.full(n, -1, np.int64)
    fid[free] = np.arange(free.sum())
    pf, qf = free[p], free[q]
    m = int(free.sum())
    diag = np.zeros(m)
    np.add.at(diag, fid[p[pf]], c[pf])
    np.add.at(diag, fid[q[qf]], c[qf])
    both = pf & qf
    rows = np.concatenate([fid[p[both]], fid[q[both]], np.arange(m)])
    cols = np.concatenate([fid[q[both]], fid[p[both]], np.arange(m)])
    vals = np.concatenate([-c[both], -c[both], diag])
    A = sp.csr_matrix((vals, (rows, cols)), shape=(m, m))
    # free-to-fixed couplings
    a1 = pf & ~qf
    a2 = qf & ~pf
    r = np.concatenate([fid[p[a1]], fid[q[a2]]])
    k = np.concatenate([q[a1], p[a2]])
    cv = np.concatenate([c[a1], c[a2]])
    B = sp.csr_matrix((cv, (r, k)), shape=(m, n))
    return A, B, free


def _solve_spd(A, b, tol, maxiter):
    if not np.any(b):
        return np.zeros_like(b), 0.0
    ml = pyamg.smoothed_aggregation_solver(A, symmetry="symmetric")
    res: list[float] = []
    u = ml.solve(b, tol=tol, accel="cg", maxiter=maxiter, residuals=res)
    rel = float(np.linalg.norm(b - A @ u) / np.linalg.norm(b))
    if not np.isfinite(rel) or rel > tol * 10:
        raise NumericalError(f"weighting-potential solve did not converge: relative residual {rel:.3e}")
    return u, rel


@numba.njit(cache=True)
def _locate(c, v):
    n = c.size
    if v <= c[0]:
        return 0, 0.0
    if v >= c[n - 1]:
        return n - 2, 1.0
    lo, hi = 0, n - 1
    while hi - lo > 1:
        mid = (lo + hi) >> 1
        if c[mid] <= v:
            lo = mid
        else:
            hi = mid
    return lo, (v - c[lo]) / (c[lo + 1] - c[lo])


@numba.njit(cache=True)
def _trilinear(pts, cx, cy, x, y, z, V):
    out = np.empty(pts.shape[0])
    for n in range(pts.shape[0]):
        i, tx = _locate(x, pts[n, 0] - cx)
        j, ty = _locate(y, pts[n, 1] - cy)
        k, tz = _locate(z, pts[n, 2])
        acc = 0.0
        for di in range(2):
            wx = tx if di else 1.0 - tx
            for dj in range(2):
                wy = ty if dj else 1.0 - ty
                for dk in range(2):
                    wz = tz if dk else 1.0 - tz
                    acc += wx * wy * wz * V[i + di, j + dj, k + dk]
        out[n] = acc
    return out


@dataclass
class InducedChargeTable:
    """Weighting potential of one island on an island-centred rectilinear grid."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    values: np.ndarray
    shape: IslandShape
    spec: GridSpec
    residual: float = 0.0
    clip: float = 0.0
    geometry_hash: str = ""

    @property
    def bounds(self):
        return (self.x[0], self.x[-1]), (self.y[0], self.y[-1]), (self.z[0], self.z[-1])

    def evaluate(self, points) -> np.ndarray:
        """Trilinear interpolation of ``w`` at island-relative points, shape (N, 3)."""
        pts = np.ascontiguousarray(np.asarray(points, dtype=float).reshape(-1, 3))
        if len(pts) == 0:
            return np.zeros(0)
        tol = 1e-12
        for axis, c in enumerate((self.x, self.y, self.z)):
            v = pts[:, axis]
            if v.min() < c[0] - tol or v.max() > c[-1] + tol:
                raise DataError("position outside table bounds")
        return _trilinear(pts, 0.0, 0.0, self.x, self.y, self.z, self.values)

    def at(self, points, center=(0.0, 0.0)) -> np.ndarray:
        """``w`` of the island centred at ``center`` at chip-frame points."""
        pts = np.ascontiguousarray(np.asarray(points, dtype=float).reshape(-1, 3))
        if len(pts) == 0:
            return np.zeros(0)
        tol = 1e-12
        for axis, c in enumerate((self.x, self.y, self.z)):
            v = pts[:, axis] - (center[axis] if axis < 2 else 0.0)
            if v.min() < c[0] - tol or v.max() > c[-1] + tol:
                raise DataError("position outside table bounds")
        return _trilinear(pts, float(center[0]), float(center[1]), self.x, self.y, self.z, self.values)

    def header(self) -> dict:
        return {
            "format": TABLE_FORMAT,
            "shape": [len(self.x), len(self.y), len(self.z)],
            "island": dataclasses.asdict(self.shape),
            "grid_spec": dataclasses.asdict(self.spec),
            "geometry_hash": self.geometry_hash,
            "relative_residual": self.residual,
            "max_clip": self.clip,
        }

    def save(self, path: str | Path) -> None:
        """Binary layout: magic, uint64 header length, JSON header, float64 x|y|z|values."""
        head = json.dumps(self.header(), sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(np.uint64(len(head)).tobytes())
            fh.write(head)
            for arr in (self.x, self.y, self.z, self.values):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "InducedChargeTable":
        try:
            raw = Path(path).read_bytes()
        except OSError as exc:
            raise DataError(f"cannot read table {path}: {exc}") from exc
        if raw[:8] != _MAGIC:
            raise DataError(f"{path} is not a weighting-potential table")
        n = int(np.frombuffer(raw[8:16], "<u8")[0])
        head = json.loads(raw[16:16 + n])
        if head.get("format") != TABLE_FORMAT:
            raise DataError(f"unsupported table format {head.get('format')!r}")
        nx, ny, nz = head["shape"]
        data = np.frombuffer(raw[16 + n:], "<f8")
        if data.size != nx + ny + nz + nx * ny * nz:
            raise DataError(f"truncated table {path}")
        x, y, z = data[:nx], data[nx:nx + ny], data[nx + ny:nx + ny + nz]
        vals = data[nx + ny + nz:].reshape(nx, ny, nz)
        return cls(x.copy(), y.copy(), z.copy(), vals.copy(), IslandShape(**head["island"]),
                   GridSpec(**head["grid_spec"]), head["relative_residual"], head["max_clip"],
                   head["geometry_hash"])


def geometry_hash(shape: IslandShape, thickness: float, spec: GridSpec) -> str:
    blob = json.dumps({"island": dataclasses.asdict(shape), "thickness": thickness,
                       "spec": dataclasses.asdict(spec)}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _island_shape(geometry: Geometry | IslandShape) -> IslandShape:
    if isinstance(geometry, IslandShape):
        return geometry
    shapes = {i.shape for i in geometry.qubit_islands}
    if len(shapes) > 1:
        raise NumericalError("all islands must share one outline for a shared table")
    return shapes.pop() if shapes else IslandShape()


def solve_weighting_potential(geometry: Geometry, spec: GridSpec | None = None) -> InducedChargeTable:
    """Weighting potential of the (shared) island outline of ``geometry``."""
    spec = spec or GridSpec()
    shape = _island_shape(geometry)
    thickness = geometry.thickness
    x, y, z = build_axes(shape, thickness, spec)
    nx, ny, nz = len(x), len(y), len(z)
    n = nx * ny * nz
    fixed = np.full((nx, ny, nz), np.nan)
    fixed[0], fixed[-1], fixed[:, 0], fixed[:, -1], fixed[:, :, 0] = 0, 0, 0, 0, 0
    lab = top_face_labels(x, y, shape)
    top = np.where(lab == 1, 1.0, np.where(lab == 0, 0.0, np.nan))
    top[0, :], top[-1, :], top[:, 0], top[:, -1] = 0, 0, 0, 0
    fixed[:, :, -1] = top
    fixed = fixed.ravel()
    p, q, c = _edge_lists(x, y, z)
    A, B, free = _assemble(p, q, c, fixed, n)
    v = np.nan_to_num(fixed)
    u, rel = _solve_spd(A, B @ v, spec.tol, spec.maxiter)
    w = v.copy()
    w[free] = u
    clip = float(max(0.0, -w.min(), w.max() - 1.0))
    w = np.clip(w, 0.0, 1.0).reshape(nx, ny, nz)
    return InducedChargeTable(x, y, z, w, shape, spec, rel, clip, geometry_hash(shape, thickness, spec))


def cache_dir() -> Path:
    return Path(os.environ.get("QPGAMMA_CACHE", Path.home() / ".cache" / "qpgamma"))


def load_or_build_table(geometry: Geometry, spec: GridSpec | None = None,
                        directory: str | Path | None = None) -> InducedChargeTable:
    """Table for ``geometry`` from the on-disk cache, solving on a miss."""
    spec = spec or GridSpec()
    shape = _island_shape(geometry)
    h = geometry_hash(shape, geometry.thickness, spec)
    d = Path(directory) if directory is not None else cache_dir()
    path = d / f"wtable-{h}.bin"
    if path.exists():
        tab = InducedChargeTable.load(path)
        if tab.geometry_hash == h:
            return tab
    tab = solve_weighting_potential(geometry, spec)
    d.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(f".tmp{os.getpid()}")
    tab.save(tmp)
    os.replace(tmp, path)
    return tab


def _cell_stencil(table: InducedChargeTable, point) -> np.ndarray:
    """3x3x3 points spaced by the local cell size of ``table`` around ``point``."""
    axes = []
    for a, c in enumerate((table.x, table.y, table.z)):
        k = int(np.clip(np.searchsorted(c, point[a]), 1, len(c) - 1))
        h = c[k] - c[k - 1]
        axes.append(np.clip(point[a] + np.array([-h, 0.0, h]), c[0], c[-1]))
    return np.array(np.meshgrid(*axes, indexing="ij")).reshape(3, -1).T


def discretization_error(geometry: Geometry, spec: GridSpec, points, order: float = 1.0):
    """Error estimate of ``spec``'s table at ``points``; returns (w_h, estimate).

    Compares against a grid with doubled spacing.  The graded meshes are not
    nested, so the pointwise difference oscillates in sign between levels;
    the estimate takes the largest difference over a one-coarse-cell stencil
    around each point.  ``order`` = 1 matches the observed convergence near
    the island edges.
    """
    fine = solve_weighting_potential(geometry, spec)
    coarse = solve_weighting_potential(geometry, spec.scaled(2.0))
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    est = np.array([np.max(np.abs(fine.evaluate(S) - coarse.evaluate(S)))
                    for S in (_cell_stencil(coarse, p) for p in pts)])
    return fine.evaluate(pts), est / (2.0**order - 1.0)


def induced_charge_direct(geometry: Geometry, point, spec: GridSpec | None = None) -> float:
    """Fraction of a unit charge at ``point`` induced on the island, by brute force.

    Places a unit point charge on a mesh node (the mesh is built through the
    point), grounds every conductor including the island, solves Poisson's
    equation and sums the flux into the island nodes.  Independent of the
    weighting-potential route apart from sharing the mesh builder.
    """
    spec = spec or GridSpec(scale=0.7, lateral_half=3e-3)
    shape = _island_shape(geometry)
    thickness = geometry.thickness
    x, y, z = build_axes(shape, thickness, spec)
    px, py, pz = point
    x = np.unique(np.concatenate([x, [px]]))
    y = np.unique(np.concatenate([y, [py]]))
    z = np.unique(np.concatenate([z, [pz]]))
    nx, ny, nz = len(x), len(y), len(z)
    n = nx * ny * nz
    fixed = np.full((nx, ny, nz), np.nan)
    fixed[0], fixed[-1], fixed[:, 0], fixed[:, -1], fixed[:, :, 0] = 0, 0, 0, 0, 0
    lab = top_face_labels(x, y, shape)
    fixed[:, :, -1] = np.where(lab == 2, np.nan, 0.0)
    fixed[0, :, -1] = fixed[-1, :, -1] = fixed[:, 0, -1] = fixed[:, -1, -1] = 0.0
    fixed = fixed.ravel()
    p, q, c = _edge_lists(x, y, z)
    A, _, free = _assemble(p, q, c, fixed, n)
    node = np.ravel_multi_index((np.searchsorted(x, px), np.searchsorted(y, py), np.searchsorted(z, pz)),
                                (nx, ny, nz))
    if not free[node]:
        raise ValueError("charge must sit inside the substrate, off the conductors")
    fid = np.cumsum(free) - 1
    b = np.zeros(int(free.sum()))
    b[fid[node]] = 1.0  # unit source (units where permittivity = 1)
    u, _ = _solve_spd(A, b, spec.tol, spec.maxiter)
    phi = np.zeros(n)
    phi[free] = u
    island = np.zeros((nx, ny, nz), bool)
    island[:, :, -1] = lab == 1
    island = island.ravel()
    # charge on island = -(net flux out of the island nodes into the bulk)
    s = island[p] & ~island[q]
    t = island[q] & ~island[p]
    flux = np.sum(c[s] * (phi[q[s]] - phi[p[s]])) + np.sum(c[t] * (phi[p[t]] - phi[q[t]]))
    return float(flux)


# ---------------------------------------------------------------------------
# induced charge on qubits

@dataclass
class OffsetChargeShift:
    event_index: np.ndarray
    qubit_ids: tuple[str, ...]
    raw: np.ndarray  # (n_events, n_qubits)

    @property
    def aliased(self) -> np.ndarray:
        return alias(self.raw)


def alias(q):
    """Shortest representative in (-0.5, 0.5]."""
    q = np.asarray(q, dtype=float)
    return -((-q + 0.5) % 1.0 - 0.5)


def induced_offset_charge(state: ChargeState, table: InducedChargeTable, center=(0.0, 0.0)) -> tuple[float, float]:
    """(raw, aliased) charge induced on one island by every carrier of ``state``."""
    if len(state) == 0:
        return 0.0, 0.0
    raw = float(np.sum(state.signed_weight * table.at(state.final, center)))
    return raw, float(alias(raw))


def event_offsets(state: ChargeState, table: InducedChargeTable, geometry: Geometry,
                  qubit_ids=None, events=None) -> OffsetChargeShift:
    """Raw induced charge per (event, qubit)."""
    islands = [geometry.island(q) for q in qubit_ids] if qubit_ids else list(geometry.qubit_islands)
    if events is None:
        events = np.unique(state.event)
    events = np.asarray(events, dtype=np.int64)
    raw = np.zeros((len(events), len(islands)))
    if len(state):
        pos = np.searchsorted(events, state.event)
        ok = (pos < len(events)) & (events[np.minimum(pos, len(events) - 1)] == state.event)
        sw = state.signed_weight
        for j, isl in enumerate(islands):
            raw[:, j] = np.bincount(pos[ok], weights=(sw * table.at(state.final, isl.center))[ok],
                                    minlength=len(events))
    return OffsetChargeShift(events, tuple(i.id for i in islands), raw)


# ---------------------------------------------------------------------------
# characteristic burst and sensing footprint

def hit_deposits(config: ExperimentConfig, n_events: int, seed: int, chunk: int = 200_000,
                 max_decays: int = 10**9):
    """Substrate deposits of the first ``n_events`` hit events of a decay sequence."""
    from .gamma.transport import VOLUME_SUBSTRATE
    parts_ev, parts_pos, parts_e = [], [], []
    found = 0
    start = 0
    while found < n_events and start < max_decays:
        log = run_decay_batch(config, chunk, seed=seed, chunk=chunk) if start == 0 else None
        if log is None:
            from .gamma.batch import DepositLog, run_decays
            from .gamma.transport import build_scene
            scene = build_scene(config.geometry, VOLUME_SUBSTRATE)
            deps = run_decays(scene, chunk, seed, config.analysis.branch_1173, first_event=start, chunk=chunk)
            log = DepositLog(deps, tuple(v.name for v in scene.volumes), chunk, seed,
                             config.geometry.source_activity, config.geometry.source_distance)
        d = log.in_volume(VOLUME_SUBSTRATE)
        evs = np.unique(d.event)[: n_events - found]
        keep = np.isin(d.event, evs)
        parts_ev.append(d.event[keep])
        parts_pos.append(d.pos[keep])
        parts_e.append(d.energy_keV[keep])
        found += len(evs)
        start += chunk
    if found < n_events:
        raise NumericalError(f"only {found} substrate hits found in {start} decays")
    return np.concatenate(parts_ev), np.concatenate(parts_pos), np.concatenate(parts_e)


def characteristic_burst(n_events: int, config: ExperimentConfig, seed: int | None = None,
                         params: TransportParams | None = None, deposits=None) -> ChargeState:
    """Carriers of ``n_events`` substrate hits, each re-centred to x = y = 0.

    Per-carrier weights are divided by ``n_events``.  Carriers are transported
    in a laterally unbounded slab of the substrate thickness so that only the
    top and bottom faces absorb.  ``deposits`` = (event, pos, keV) skips the
    decay simulation.
    """
    if n_events < 1:
        raise ValueError("n_events must be >= 1")
    seed = config.seed if seed is None else seed
    params = params or config.transport
    ev, pos, e = deposits if deposits is not None else hit_deposits(config, n_events, seed)
    pos = np.array(pos, dtype=float, copy=True)
    uniq, inv = np.unique(ev, return_inverse=True)
    if len(uniq) > n_events:
        keep = inv < n_events
        ev, pos, e = ev[keep], pos[keep], e[keep]
        uniq, inv = np.unique(ev, return_inverse=True)
    # energy-weighted centroid of each event's deposits goes to the origin
    wsum = np.bincount(inv, weights=e)
    for a in (0, 1):
        pos[:, a] -= (np.bincount(inv, weights=e * pos[:, a]) / wsum)[inv]
    state = deposits_to_carriers(ev, pos, e, params)
    wide = dataclasses.replace(config.geometry, substrate_size=(1.0, 1.0, config.geometry.thickness))
    state = propagate(state, params, wide, seed)
    state.weight = state.weight / len(uniq)
    return state


@dataclass
class Footprint:
    X: np.ndarray
    Y: np.ndarray
    Q: np.ndarray  # signed total induced charge vs island offset
    levels: tuple[float, ...]
    contours: dict
    radii: dict

    def write_contours_csv(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write("level_e,polyline,x_m,y_m\n")
            for lev, lines in self.contours.items():
                for k, line in enumerate(lines):
                    for x, y in line:
                        fh.write(f"{lev!r},{k},{x!r},{y!r}\n")


def _encloses_origin(line: np.ndarray) -> bool:
    """Even-odd ray test of the origin against a closed polyline."""
    x0, y0 = line[:-1, 0], line[:-1, 1]
    x1, y1 = line[1:, 0], line[1:, 1]
    cross = (y0 > 0) != (y1 > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        xi = x0 + (0 - y0) * (x1 - x0) / (y1 - y0)
    return bool(np.count_nonzero(cross & (xi > 0)) % 2)


def _contour_radius(line: np.ndarray) -> float:
    seg = np.diff(line, axis=0)
    ln = np.hypot(seg[:, 0], seg[:, 1])
    mid = 0.5 * (line[1:] + line[:-1])
    return float(np.sum(ln * np.hypot(mid[:, 0], mid[:, 1])) / np.sum(ln))


def footprint_map(burst: ChargeState, table: InducedChargeTable, reach: float = 3.0e-3,
                  step: float = 20e-6, cloud_half: float = 5.0e-3):
    """Total induced charge on an island displaced by (X, Y) from the burst origin.

    Charges are deposited onto a uniform lateral grid by bilinear weights and
    onto table z-nodes by linear weights; each z-layer is then correlated
    with the table sampled on the same lateral grid.
    """
    m = int(round(cloud_half / step))
    k = int(round(reach / step))
    mw = m + k
    if table.x[-1] < mw * step - 1e-12:
        raise DataError("table too small for the requested footprint reach")
    g_c = np.arange(-m, m + 1) * step
    g_w = np.arange(-mw, mw + 1) * step
    pts = burst.final
    q = burst.signed_weight
    inside = (np.abs(pts[:, 0]) < cloud_half) & (np.abs(pts[:, 1]) < cloud_half)
    pts, q = pts[inside], q[inside]
    fx = (pts[:, 0] + cloud_half) / step
    fy = (pts[:, 1] + cloud_half) / step
    ix = np.clip(np.floor(fx).astype(int), 0, 2 * m - 1)
    iy = np.clip(np.floor(fy).astype(int), 0, 2 * m - 1)
    tx, ty = fx - ix, fy - iy
    zc = table.z
    kz = np.clip(np.searchsorted(zc, pts[:, 2], side="right") - 1, 0, len(zc) - 2)
    tz = np.clip((pts[:, 2] - zc[kz]) / (zc[kz + 1] - zc[kz]), 0, 1)
    n = 2 * m + 1
    rho = np.zeros((len(zc), n, n))
    for dz, wz in ((0, 1 - tz), (1, tz)):
        for dx, wx in ((0, 1 - tx), (1, tx)):
            for dy, wy in ((0, 1 - ty), (1, ty)):
                np.add.at(rho, (kz + dz, ix + dx, iy + dy), q * wz * wx * wy)
    GX, GY = np.meshgrid(g_w, g_w, indexing="ij")
    Q = np.zeros((2 * k + 1, 2 * k + 1))
    for layer in np.flatnonzero(np.any(rho != 0, axis=(1, 2))):
        P = np.column_stack([GX.ravel(), GY.ravel(), np.full(GX.size, zc[layer])])
        W = table.evaluate(P).reshape(GX.shape)
        # Q(X) = sum_x rho(x) W(x - X) = (rho * W(-.))(X)
        full = fftconvolve(rho[layer], W[::-1, ::-1], mode="full")
        c0 = (n - 1) // 2 + mw  # index of X = 0 in the full output
        Q += full[c0 - k:c0 + k + 1, c0 - k:c0 + k + 1]
    X = np.arange(-k, k + 1) * step
    return X, X.copy(), Q


def sensing_footprint(burst: ChargeState, table: InducedChargeTable, levels=(0.15, 0.10),
                      reach: float = 3.0e-3, step: float = 20e-6) -> Footprint:
    """Iso-contours of |induced charge| and their mean radii about the origin.

    The radius reported for a level is that of the outermost closed contour
    that encloses the origin; contours of isolated islands are returned but
    do not enter the radius.
    """
    if len(burst) == 0 or not np.any(burst.signed_weight):
        raise NumericalError("contour absent: empty or neutral-at-origin burst")
    X, Y, Q = footprint_map(burst, table, reach=reach, step=step)
    A = np.abs(Q)
    gen = contour_generator(X, Y, A.T)
    contours, radii = {}, {}
    for lev in levels:
        if A.max() < lev:
            raise NumericalError(f"contour absent: max |Q| = {A.max():.3g} e below level {lev}")
        lines = [ln for ln in gen.lines(lev) if len(ln) > 2]
        closed = [ln for ln in lines if np.allclose(ln[0], ln[-1]) and _encloses_origin(ln)]
        if not closed:
            raise NumericalError(f"contour absent at level {lev}: no closed contour around the origin")
        contours[lev] = lines
        radii[lev] = max(_contour_radius(ln) for ln in closed)
    return Footprint(X, Y, Q, tuple(levels), contours, radii)
