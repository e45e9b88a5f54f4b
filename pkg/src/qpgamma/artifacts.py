"""On-disk formats for stage outputs, plus the run manifest."""
from __future__ import annotations

import csv
import hashlib
import json
import time
from pathlib import Path

import numpy as np

from .analysis import MaskedDigitalTrace
from .electrostatics import OffsetChargeShift
from .errors import DataError
from .synth import OffsetChargeSeries, TomographyScan, TomographyStream, save_npz

MANIFEST_NAME = "manifest.json"
MANIFEST_SCHEMA = "qpgamma-manifest/1"


def sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _plain(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serialisable: {type(o)}")


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_plain) + "\n")


def read_json(path: str | Path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def write_rows(path: str | Path, rows: list[dict], fields=None) -> None:
    fields = fields or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=fields)
        wr.writeheader()
        for r in rows:
            wr.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v for k, v in r.items()})


def read_rows(path: str | Path) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# records


def write_offsets_csv(path: str | Path, shift: OffsetChargeShift, weight: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["event_index", "weight"] + [f"raw_{q}" for q in shift.qubit_ids])
        for i, ev in enumerate(shift.event_index):
            wr.writerow([int(ev), repr(float(weight[i]))] + [repr(float(v)) for v in shift.raw[i]])


def read_offsets_csv(path: str | Path) -> tuple[OffsetChargeShift, np.ndarray]:
    rows = read_rows(path)
    if not rows:
        raise DataError(f"{path}: no offsets")
    qs = tuple(k[4:] for k in rows[0] if k.startswith("raw_"))
    try:
        ev = np.array([int(r["event_index"]) for r in rows], np.int64)
        w = np.array([float(r["weight"]) for r in rows])
        raw = np.array([[float(r[f"raw_{q}"]) for q in qs] for r in rows])
    except (KeyError, ValueError) as exc:
        raise DataError(f"malformed offsets file {path}: {exc}") from exc
    return OffsetChargeShift(ev, qs, raw), w


def save_tomography(path: str | Path, streams: dict[str, TomographyStream]) -> None:
    arrays = {}
    for q, s in streams.items():
        arrays[f"{q}_time"] = np.array([sc.time for sc in s.scans])
        arrays[f"{q}_p1"] = np.array([sc.p1 for sc in s.scans])
        arrays[f"{q}_delta"] = np.array([sc.true_delta for sc in s.scans])
        arrays[f"{q}_jump_times"] = s.jump_times
        arrays[f"{q}_jump_raw"] = s.jump_raw
        arrays[f"{q}_n_ext"] = s.scans[0].n_ext if s.scans else np.zeros(0)
    save_npz(path, qubits=np.array(list(streams)), **arrays)


def load_tomography(path: str | Path) -> dict[str, TomographyStream]:
    try:
        z = np.load(path)
        out = {}
        for q in z["qubits"]:
            q = str(q)
            t, p1, dl, n_ext = z[f"{q}_time"], z[f"{q}_p1"], z[f"{q}_delta"], z[f"{q}_n_ext"]
            scans = [TomographyScan(n_ext, p1[i], float(t[i]), float(dl[i])) for i in range(len(t))]
            out[q] = TomographyStream(scans, z[f"{q}_jump_times"], z[f"{q}_jump_raw"])
        return out
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read tomography record {path}: {exc}") from exc


def save_charge_series(path: str | Path, s: OffsetChargeSeries) -> None:
    save_npz(path, dt=np.array(s.dt), samples=s.samples, resets=s.resets, d=np.array(s.d), nu=np.array(s.nu),
             qubit=np.array(s.qubit), true_offset=s.true_offset, jump_index=s.jump_index, jump_raw=s.jump_raw)


def load_charge_series(path: str | Path) -> OffsetChargeSeries:
    try:
        z = np.load(path)
        return OffsetChargeSeries(float(z["dt"]), z["samples"], z["resets"], float(z["d"]), float(z["nu"]),
                                  str(z["qubit"]), z["true_offset"], z["jump_index"], z["jump_raw"])
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read charge record {path}: {exc}") from exc


def save_decoded(path: str | Path, tr: MaskedDigitalTrace) -> None:
    save_npz(path, mask=tr.mask, states=tr.states, dt=np.array(tr.dt),
             scalars=np.array([tr.transitions, tr.unmasked_samples, tr.switching_rate, tr.corrected_rate,
                               tr.means[0], tr.means[1], tr.sigma[0], tr.sigma[1], tr.log_likelihood,
                               tr.iterations], float))


def load_decoded(path: str | Path) -> MaskedDigitalTrace:
    try:
        z = np.load(path)
        s = z["scalars"]
        return MaskedDigitalTrace(z["mask"], z["states"], int(s[0]), int(s[1]), float(z["dt"]), float(s[2]),
                                  float(s[3]), (float(s[4]), float(s[5])), (float(s[6]), float(s[7])),
                                  float(s[8]), int(s[9]))
    except (OSError, KeyError, ValueError, IndexError) as exc:
        raise DataError(f"cannot read decoded trace {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# manifest


class Manifest:
    """Stage records: inputs and outputs with their content hashes.

    Paths are stored relative to the output directory.
    """

    def __init__(self, root: Path, data: dict | None = None):
        self.root = Path(root)
        self.data = data or {"schema": MANIFEST_SCHEMA, "config": None, "seed": None, "stages": {}}

    @classmethod
    def load(cls, root: str | Path) -> "Manifest":
        root = Path(root)
        p = root / MANIFEST_NAME
        if not p.exists():
            return cls(root)
        data = read_json(p)
        if data.get("schema") != MANIFEST_SCHEMA:
            raise DataError(f"manifest schema {data.get('schema')!r} does not match {MANIFEST_SCHEMA!r}")
        return cls(root, data)

    def save(self) -> None:
        write_json(self.root / MANIFEST_NAME, self.data)

    def producer_hash(self, rel: str) -> str | None:
        for st in self.data["stages"].values():
            if rel in st.get("outputs", {}):
                return st["outputs"][rel]
        return None

    def check_inputs(self, rels: list[str], force: bool) -> dict[str, str]:
        hashes = {}
        for rel in rels:
            p = self.root / rel
            if not p.exists():
                raise DataError(f"missing stage input {rel}; run the producing stage first")
            h = sha256(p)
            rec = self.producer_hash(rel)
            if rec is not None and rec != h and not force:
                raise DataError(f"hash mismatch for {rel}: file changed since it was produced (use --force)")
            hashes[rel] = h
        return hashes

    def record(self, stage: str, inputs: dict[str, str], outputs: list[str], started: float, options: dict) -> None:
        self.data["stages"][stage] = {
            "inputs": inputs,
            "outputs": {rel: sha256(self.root / rel) for rel in sorted(outputs)},
            "options": options,
            "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
        }
        self.save()
