"""Experiment configuration: geometry, qubit layout, transport parameters.

Positions are SI (metres) in substrate-local coordinates: origin at the centre
of the top (metallised) face, +z pointing out of the chip towards the source,
the substrate occupying ``-thickness <= z <= 0``.  The config file is YAML;
lengths carry their unit in the key name (``_mm``, ``_um``, ``_m``).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .errors import ConfigError

SCHEMA_VERSION = 1
CI_DECAYS_PER_S = 3.7e10

MATERIALS = ("Si", "Cu", "Al", "Pb", "NaI")

DEFAULT_PAIRS = (("Q2", "Q4"), ("Q3", "Q5"), ("Q3", "Q4"), ("Q2", "Q3"), ("Q4", "Q5"), ("Q2", "Q5"))


@dataclass(frozen=True)
class ShieldSlab:
    """Planar slab perpendicular to the source axis.

    ``standoff`` is the gap between the chip top face and the slab face
    nearest the chip; the slab fills ``standoff <= z <= standoff + thickness``.
    """

    material: str
    thickness: float
    standoff: float

    @property
    def z_range(self) -> tuple[float, float]:
        return (self.standoff, self.standoff + self.thickness)


@dataclass(frozen=True)
class IslandShape:
    """X-mon cross: two perpendicular arms of full length ``2*arm_length``."""

    arm_length: float = 165e-6
    arm_width: float = 24e-6
    gap: float = 5e-6

    def outline(self) -> np.ndarray:
        """Closed 12-vertex polygon (island-centred), shape (12, 2)."""
        a, w = self.arm_length, self.arm_width / 2
        return np.array([
            (w, w), (a, w), (a, -w), (w, -w), (w, -a), (-w, -a),
            (-w, -w), (-a, -w), (-a, w), (-w, w), (-w, a), (w, a),
        ])

    def contains(self, x, y, grow: float = 0.0):
        """Point-in-cross test on arrays; ``grow`` dilates both arms."""
        ax, ay = np.abs(x), np.abs(y)
        a, w = self.arm_length + grow, self.arm_width / 2 + grow
        return ((ax <= a) & (ay <= w)) | ((ax <= w) & (ay <= a))


@dataclass(frozen=True)
class QubitIsland:
    id: str
    center: tuple[float, float]
    shape: IslandShape = field(default_factory=IslandShape)


@dataclass(frozen=True)
class QubitParams:
    id: str
    f01: float = float("nan")
    fR: float = float("nan")
    charge_dispersion: float = float("nan")  # MHz
    ej_ec: float = float("nan")
    T1: float = float("nan")  # us


@dataclass(frozen=True)
class NaIDetector:
    diameter: float = 0.0254
    length: float = 0.0254
    distance: float = 0.41  # source to detector front face


@dataclass(frozen=True)
class Geometry:
    substrate_size: tuple[float, float, float] = (8e-3, 8e-3, 525e-6)
    shield_slabs: tuple[ShieldSlab, ...] = ()
    source_distance: float = 0.59
    source_activity: float = 96e-6 * CI_DECAYS_PER_S
    qubit_islands: tuple[QubitIsland, ...] = ()
    nai_detector: NaIDetector | None = None

    @property
    def thickness(self) -> float:
        return self.substrate_size[2]

    def island(self, qid: str) -> QubitIsland:
        for isl in self.qubit_islands:
            if isl.id == qid:
                return isl
        raise KeyError(qid)

    def validate(self) -> None:
        if any(s <= 0 for s in self.substrate_size):
            raise ConfigError(f"substrate dimensions must be positive: {self.substrate_size}")
        if not self.source_distance > 0:
            raise ConfigError(f"source_distance must be > 0, got {self.source_distance}")
        if self.source_activity < 0:
            raise ConfigError("source_activity must be >= 0")
        hx, hy = self.substrate_size[0] / 2, self.substrate_size[1] / 2
        for isl in self.qubit_islands:
            x, y = isl.center
            if not (abs(x) < hx and abs(y) < hy):
                raise ConfigError(f"island {isl.id} centre {isl.center} lies outside the top face")
        ids = [i.id for i in self.qubit_islands]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate qubit island ids")
        slabs = sorted(self.shield_slabs, key=lambda s: s.standoff)
        prev_end = 0.0
        for s in slabs:
            if s.material not in MATERIALS:
                raise ConfigError(f"unknown material {s.material!r}")
            if s.thickness <= 0 or s.standoff < 0:
                raise ConfigError(f"bad slab {s}")
            if s.standoff < prev_end:
                raise ConfigError("shield slabs overlap along the source axis")
            prev_end = s.standoff + s.thickness
        if prev_end >= self.source_distance:
            raise ConfigError("shield slabs must lie between the chip and the source")


@dataclass(frozen=True)
class TransportParams:
    trap_length_e: float = 600e-6
    trap_length_h: float = 930e-6
    f_q: float = 0.30
    pair_energy: float = 3.8  # eV
    downsample: int = 10

    def validate(self) -> None:
        if not (self.trap_length_e > 0 and self.trap_length_h > 0):
            raise ConfigError("trapping lengths must be > 0")
        if not 0.0 <= self.f_q <= 1.0:
            raise ConfigError(f"f_q must lie in [0, 1], got {self.f_q}")
        if self.pair_energy <= 0:
            raise ConfigError("pair_energy must be > 0")
        if int(self.downsample) != self.downsample or self.downsample < 1:
            raise ConfigError("downsample must be a positive integer")


@dataclass(frozen=True)
class AnalysisParams:
    jump_threshold: float = 0.15  # e
    sensing_radius: float = 1060e-6
    coincidence_window: int = 100  # samples
    parity_average: int = 40
    footprint_average: int = 100
    mask_s_parity: float = 3.29
    mask_s_footprint: float = 4.65
    reset_interval: int = 5000
    branch_1173: float = 0.9986


@dataclass(frozen=True)
class ExperimentConfig:
    geometry: Geometry
    qubits: tuple[QubitParams, ...] = ()
    transport: TransportParams = field(default_factory=TransportParams)
    analysis: AnalysisParams = field(default_factory=AnalysisParams)
    pairs: tuple[tuple[str, str], ...] = DEFAULT_PAIRS
    seed: int = 20240601
    schema_version: int = SCHEMA_VERSION

    @property
    def qubit_ids(self) -> list[str]:
        return [i.id for i in self.geometry.qubit_islands]

    def validate(self) -> "ExperimentConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        self.geometry.validate()
        self.transport.validate()
        known = set(self.qubit_ids)
        for a, b in self.pairs:
            for q in (a, b):
                if q not in known:
                    raise ConfigError(f"pair ({a}, {b}) references unknown qubit {q!r}")
        for q in self.qubits:
            if q.id not in known:
                raise ConfigError(f"qubit parameters for unknown island {q.id!r}")
            if not q.charge_dispersion > 0:
                raise ConfigError(f"qubit {q.id} needs a positive charge dispersion")
        return self

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def with_geometry(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, geometry=dataclasses.replace(self.geometry, **changes))

    def with_transport(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, transport=dataclasses.replace(self.transport, **changes))


# ---------------------------------------------------------------------------
# defaults

DEFAULT_SLABS = (
    ShieldSlab("Al", 3.0e-3, 1.0e-3),     # sample box lid
    ShieldSlab("Cu", 1.5e-3, 40e-3),      # mixing-chamber shield
    ShieldSlab("Cu", 1.0e-3, 60e-3),      # still shield
    ShieldSlab("Al", 2.0e-3, 90e-3),      # 4 K shield
    ShieldSlab("Al", 2.0e-3, 120e-3),     # 50 K shield
    ShieldSlab("Al", 5.0e-3, 150e-3),     # vacuum jacket
)


def _read_default_layout() -> dict:
    text = resources.files("qpgamma").joinpath("data/default_layout.yaml").read_text()
    return yaml.safe_load(text)


def default_islands(shape: IslandShape | None = None) -> tuple[QubitIsland, ...]:
    shape = shape or IslandShape()
    raw = _read_default_layout()
    return tuple(
        QubitIsland(d["id"], (d["x_mm"] * 1e-3, d["y_mm"] * 1e-3), shape) for d in raw["islands"]
    )


def default_qubits() -> tuple[QubitParams, ...]:
    raw = _read_default_layout()
    return tuple(
        QubitParams(d["id"], d["f01_GHz"], d["fR_GHz"], d["df_MHz"], d["EJ_EC"], d["T1_us"])
        for d in raw["qubits"]
    )


def default_config(**overrides) -> ExperimentConfig:
    geom = Geometry(shield_slabs=DEFAULT_SLABS, qubit_islands=default_islands())
    cfg = ExperimentConfig(geometry=geom, qubits=default_qubits())
    if overrides:
        cfg = cfg.replace(**overrides)
    return cfg.validate()


# ---------------------------------------------------------------------------
# (de)serialisation

def _get(d: dict, key: str, default=None, scale: float = 1.0):
    if key in d and d[key] is not None:
        return float(d[key]) * scale
    return default


def _activity(g: dict, default: float) -> float:
    if "source_activity_uCi" in g:
        return float(g["source_activity_uCi"]) * 1e-6 * CI_DECAYS_PER_S
    if "source_activity_Bq" in g:
        return float(g["source_activity_Bq"])
    return default


def config_from_dict(raw: dict[str, Any], base_dir: Path | None = None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}")
    g = raw.get("geometry", {}) or {}
    base = Geometry()

    size = g.get("substrate_size_mm")
    substrate = tuple(float(v) * 1e-3 for v in size) if size else base.substrate_size
    if len(substrate) != 3:
        raise ConfigError("substrate_size_mm needs three values")

    if "shield_slabs" in g:
        slabs = tuple(
            ShieldSlab(str(s["material"]), float(s["thickness_mm"]) * 1e-3, float(s["standoff_mm"]) * 1e-3)
            for s in (g["shield_slabs"] or [])
        )
    else:
        slabs = DEFAULT_SLABS

    isl = g.get("island", {}) or {}
    shape = IslandShape(
        arm_length=_get(isl, "arm_length_um", IslandShape.arm_length, 1e-6),
        arm_width=_get(isl, "arm_width_um", IslandShape.arm_width, 1e-6),
        gap=_get(isl, "gap_um", IslandShape.gap, 1e-6),
    )
    layout = None
    if "layout_file" in g:
        path = Path(g["layout_file"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        try:
            layout = yaml.safe_load(path.read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read layout file {path}: {exc}") from exc
    if "qubit_islands" in g:
        islands = tuple(
            QubitIsland(str(d["id"]), (float(d["x_mm"]) * 1e-3, float(d["y_mm"]) * 1e-3), shape)
            for d in g["qubit_islands"]
        )
    elif layout is not None:
        islands = tuple(
            QubitIsland(str(d["id"]), (float(d["x_mm"]) * 1e-3, float(d["y_mm"]) * 1e-3), shape)
            for d in layout["islands"]
        )
    else:
        islands = default_islands(shape)

    nai = None
    if g.get("nai_detector"):
        n = g["nai_detector"]
        nai = NaIDetector(
            diameter=_get(n, "diameter_mm", NaIDetector.diameter, 1e-3),
            length=_get(n, "length_mm", NaIDetector.length, 1e-3),
            distance=_get(n, "distance_m", NaIDetector.distance),
        )

    geometry = Geometry(
        substrate_size=substrate,
        shield_slabs=slabs,
        source_distance=_get(g, "source_distance_m", base.source_distance),
        source_activity=_activity(g, base.source_activity),
        qubit_islands=islands,
        nai_detector=nai,
    )

    ids = {i.id for i in islands}
    if "qubits" in raw:
        qsrc = raw["qubits"] or []
    elif layout is not None and "qubits" in layout:
        qsrc = layout["qubits"]
    else:
        qsrc = [q for q in _read_default_layout()["qubits"] if q["id"] in ids]
    qubits = tuple(
        QubitParams(
            str(d["id"]), float(d.get("f01_GHz", "nan")), float(d.get("fR_GHz", "nan")),
            float(d.get("df_MHz", "nan")), float(d.get("EJ_EC", "nan")), float(d.get("T1_us", "nan")),
        )
        for d in qsrc
    )

    t = raw.get("transport", {}) or {}
    dt = TransportParams()
    transport = TransportParams(
        trap_length_e=_get(t, "trap_length_e_um", dt.trap_length_e, 1e-6),
        trap_length_h=_get(t, "trap_length_h_um", dt.trap_length_h, 1e-6),
        f_q=_get(t, "f_q", dt.f_q),
        pair_energy=_get(t, "pair_energy_eV", dt.pair_energy),
        downsample=int(t.get("downsample", dt.downsample)),
    )

    a = raw.get("analysis", {}) or {}
    da = AnalysisParams()
    analysis = AnalysisParams(
        jump_threshold=_get(a, "jump_threshold_e", da.jump_threshold),
        sensing_radius=_get(a, "sensing_radius_um", da.sensing_radius, 1e-6),
        coincidence_window=int(a.get("coincidence_window", da.coincidence_window)),
        parity_average=int(a.get("parity_average", da.parity_average)),
        footprint_average=int(a.get("footprint_average", da.footprint_average)),
        mask_s_parity=_get(a, "mask_s_parity", da.mask_s_parity),
        mask_s_footprint=_get(a, "mask_s_footprint", da.mask_s_footprint),
        reset_interval=int(a.get("reset_interval", da.reset_interval)),
        branch_1173=_get(a, "branch_1173", da.branch_1173),
    )

    pairs = raw.get("pairs")
    pairs = tuple((str(p[0]), str(p[1])) for p in pairs) if pairs is not None else DEFAULT_PAIRS
    if "pairs" not in raw:
        pairs = tuple(p for p in pairs if p[0] in ids and p[1] in ids)

    cfg = ExperimentConfig(
        geometry=geometry,
        qubits=qubits,
        transport=transport,
        analysis=analysis,
        pairs=pairs,
        seed=int(raw.get("seed", ExperimentConfig.seed)),
        schema_version=version,
    )
    return cfg.validate()


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if raw is None:
        raw = {}
    return config_from_dict(raw, base_dir=path.parent)


def config_to_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    g = cfg.geometry
    shape = g.qubit_islands[0].shape if g.qubit_islands else IslandShape()
    out: dict[str, Any] = {
        "schema_version": cfg.schema_version,
        "seed": cfg.seed,
        "geometry": {
            "substrate_size_mm": [v * 1e3 for v in g.substrate_size],
            "source_distance_m": g.source_distance,
            "source_activity_Bq": g.source_activity,
            "shield_slabs": [
                {"material": s.material, "thickness_mm": s.thickness * 1e3, "standoff_mm": s.standoff * 1e3}
                for s in g.shield_slabs
            ],
            "island": {
                "arm_length_um": shape.arm_length * 1e6,
                "arm_width_um": shape.arm_width * 1e6,
                "gap_um": shape.gap * 1e6,
            },
            "qubit_islands": [
                {"id": i.id, "x_mm": i.center[0] * 1e3, "y_mm": i.center[1] * 1e3} for i in g.qubit_islands
            ],
        },
        "qubits": [
            {"id": q.id, "f01_GHz": q.f01, "fR_GHz": q.fR, "df_MHz": q.charge_dispersion,
             "EJ_EC": q.ej_ec, "T1_us": q.T1}
            for q in cfg.qubits
        ],
        "transport": {
            "trap_length_e_um": cfg.transport.trap_length_e * 1e6,
            "trap_length_h_um": cfg.transport.trap_length_h * 1e6,
            "f_q": cfg.transport.f_q,
            "pair_energy_eV": cfg.transport.pair_energy,
            "downsample": cfg.transport.downsample,
        },
        "analysis": {
            "jump_threshold_e": cfg.analysis.jump_threshold,
            "sensing_radius_um": cfg.analysis.sensing_radius * 1e6,
            "coincidence_window": cfg.analysis.coincidence_window,
            "parity_average": cfg.analysis.parity_average,
            "footprint_average": cfg.analysis.footprint_average,
            "mask_s_parity": cfg.analysis.mask_s_parity,
            "mask_s_footprint": cfg.analysis.mask_s_footprint,
            "reset_interval": cfg.analysis.reset_interval,
            "branch_1173": cfg.analysis.branch_1173,
        },
        "pairs": [list(p) for p in cfg.pairs],
    }
    if g.nai_detector is not None:
        n = g.nai_detector
        out["geometry"]["nai_detector"] = {
            "diameter_mm": n.diameter * 1e3, "length_mm": n.length * 1e3, "distance_m": n.distance,
        }
    return out


def dump_config(cfg: ExperimentConfig, path: str | Path | None = None) -> str:
    text = yaml.safe_dump(config_to_dict(cfg), sort_keys=False)
    if path is not None:
        Path(path).write_text(text)
    return text


def configs_equivalent(a: ExperimentConfig, b: ExperimentConfig, rtol: float = 1e-12) -> bool:
    da, db = config_to_dict(a), config_to_dict(b)
    return _close(da, db, rtol)


def _close(a, b, rtol) -> bool:
    if isinstance(a, dict):
        return isinstance(b, dict) and a.keys() == b.keys() and all(_close(a[k], b[k], rtol) for k in a)
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(_close(x, y, rtol) for x, y in zip(a, b))
    if isinstance(a, float) or isinstance(b, float):
        if np.isnan(a) and np.isnan(b):
            return True
        return bool(np.isclose(a, b, rtol=rtol, atol=0.0))
    return a == b

