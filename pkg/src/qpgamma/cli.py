"""Command-line pipeline.

Every subcommand is one stage: it checks its inputs against the manifest in
the output directory, writes its outputs and records their hashes.  Exit
codes: 0 ok, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import dataclasses
import functools
import os
import sys
import time
from itertools import combinations
from pathlib import Path

import click
import numpy as np

from . import artifacts as art
from . import pipeline as pl
from . import stats
from .analysis import (compute_psd, detect_jumps_threshold, detect_steps_singleshot, diff_series, fit_lorentzian,
                       fit_tomography, hmm_decode, mask_alpha, mask_trace, read_jumps_csv, write_jumps_csv)
from .charges import FATES, SPECIES, deposits_to_carriers, propagate
from .config import NaIDetector, config_to_dict, default_config, load_config
from .electrostatics import (GridSpec, InducedChargeTable, characteristic_burst, load_or_build_table,
                             sensing_footprint)
from .errors import ConfigError, DataError, NumericalError, QPGammaError
from .gamma.batch import DepositLog, estimate_activity, nai_spectrum, read_deposit_csv, run_decay_batch
from .gamma.transport import VOLUME_SUBSTRATE
from .synth import ParityTrace, events_to_records, synth_parity_trace, synth_tomography_stream

ENV_OUT_DIR = "QPGAMMA_OUT_DIR"

DEPOSITS = "decays/deposits.csv"
DECAY_SUMMARY = "decays/summary.json"
TABLE = "table/weighting.bin"
OFFSETS = "footprint/offsets.csv"
SYNTH_INDEX = "synth/index.json"
ANALYSIS_INDEX = "analysis/index.json"
STEPS = "analysis/charge_steps.csv"
COINCIDE_JSON = "coincide/stats.json"


class Context:
    def __init__(self, config_path, seed, jobs, out_dir, force):
        self.config = load_config(config_path) if config_path else default_config()
        if seed is not None:
            self.config = self.config.replace(seed=int(seed))
        self.seed = self.config.seed
        self.jobs = max(1, int(jobs))
        self.root = Path(out_dir or os.environ.get(ENV_OUT_DIR) or "qpgamma-out")
        self.force = force
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest = art.Manifest.load(self.root)
        snap = config_to_dict(self.config)
        m = self.manifest.data
        if m["config"] is not None and m["config"] != snap and not force:
            raise DataError("configuration or seed differs from the one recorded in the manifest (use --force)")
        m["config"], m["seed"] = snap, self.seed

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p


def stage(name: str):
    """Wrap a stage body ``f(ctx, **opts) -> (inputs, outputs)`` with manifest bookkeeping.

    The body first calls ``ctx.require(rels)``; outputs are relative paths.
    """
    def deco(f):
        @functools.wraps(f)
        def run(ctx: Context, **opts):
            started = time.time()
            state = {}

            def require(rels):
                state["inputs"] = ctx.manifest.check_inputs(list(rels), ctx.force)

            ctx.require = require
            outputs = f(ctx, **opts)
            ctx.manifest.record(name, state.get("inputs", {}), outputs, started,
                                {k: v for k, v in sorted(opts.items())})
            click.echo(f"{name}: {len(outputs)} outputs in {ctx.root}")
        return run
    return deco


# ---------------------------------------------------------------------------
# helpers


def _load_log(ctx: Context) -> DepositLog:
    summary = art.read_json(ctx.root / DECAY_SUMMARY)
    volumes = tuple(summary["volumes"])
    deps = read_deposit_csv(ctx.root / DEPOSITS, volumes)
    return DepositLog(deps, volumes, int(summary["n_decays"]), int(summary["seed"]),
                      float(summary["activity_Bq"]), float(summary["source_distance_m"]),
                      ctx.config.analysis.branch_1173)


def _load_table(ctx: Context) -> InducedChargeTable:
    try:
        return InducedChargeTable.load(ctx.root / TABLE)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read weighting table: {exc}") from exc


def _charge_qubit(ctx: Context) -> str:
    ids = ctx.config.qubit_ids
    return "Q2" if "Q2" in ids else ids[0]


def _default_poison(ids) -> np.ndarray:
    table = stats.MEASURED_COINCIDENCES["non-Cu"]
    return np.array([table[q][3] if q in table else 0.5 for q in ids])


# ---------------------------------------------------------------------------
# stages


@stage("simulate-decays")
def _simulate_decays(ctx: Context, n_decays: int, distance: float | None):
    cfg = ctx.config if distance is None else ctx.config.with_geometry(source_distance=distance)
    log = run_decay_batch(cfg, n_decays, seed=ctx.seed, jobs=ctx.jobs)
    ctx.require([])
    log.write_csv(ctx.path(DEPOSITS))
    s = log.summary()
    s.update({"volumes": list(log.volume_names), "activity_Bq": log.activity})
    art.write_json(ctx.path(DECAY_SUMMARY), s)
    counts, edges = log.histogram()
    art.write_rows(ctx.path("decays/deposit_spectrum.csv"),
                   [{"e_lo_keV": float(a), "e_hi_keV": float(b), "rate_per_decay": float(c / n_decays)}
                    for a, b, c in zip(edges[:-1], edges[1:], counts)])
    return [DEPOSITS, DECAY_SUMMARY, "decays/deposit_spectrum.csv"]


@stage("build-table")
def _build_table(ctx: Context, scale: float):
    ctx.require([])
    spec = GridSpec().scaled(scale)
    table = load_or_build_table(ctx.config.geometry, spec)
    table.save(ctx.path(TABLE))
    art.write_json(ctx.path("table/header.json"), table.header())
    return [TABLE, "table/header.json"]


@stage("transport-charges")
def _transport_charges(ctx: Context, max_events: int):
    ctx.require([DEPOSITS, DECAY_SUMMARY])
    imp = pl.Impacts.from_log(_load_log(ctx)).first(max_events)
    p = ctx.config.transport
    st = propagate(deposits_to_carriers(imp.event, imp.pos, imp.energy_keV, p), p, ctx.config.geometry, ctx.seed)
    st.write_csv(ctx.path("charges/carriers.csv"))
    summ = {"n_events": len(imp), "n_carriers": len(st), "total_pairs": st.total_pairs}
    for s, name in enumerate(SPECIES):
        m = st.species == s
        disp = np.linalg.norm(st.final[m] - st.birth[m], axis=1)
        summ[name] = {"count": int(m.sum()), "mean_displacement_m": float(disp.mean()) if m.any() else 0.0,
                      **{f"fraction_{f}": float((st.fate[m] == k).mean()) if m.any() else 0.0
                         for k, f in enumerate(FATES)}}
    art.write_json(ctx.path("charges/summary.json"), summ)
    return ["charges/carriers.csv", "charges/summary.json"]


@stage("footprint")
def _footprint(ctx: Context, burst_events: int):
    ctx.require([DEPOSITS, DECAY_SUMMARY, TABLE])
    log = _load_log(ctx)
    table = _load_table(ctx)
    imp = pl.Impacts.from_log(log)
    if len(imp) == 0:
        raise DataError("no substrate hits in the deposit log")
    shift = pl.impact_offsets(ctx.config, table, imp, seed=ctx.seed)
    art.write_offsets_csv(ctx.path(OFFSETS), shift, imp.weight)
    n = min(burst_events, len(imp))
    sub = imp.first(n)
    burst = characteristic_burst(n, ctx.config, ctx.seed, deposits=(sub.event, sub.pos, sub.energy_keV))
    fp = sensing_footprint(burst, table)
    fp.write_contours_csv(ctx.path("footprint/contours.csv"))
    art.write_rows(ctx.path("footprint/map.csv"),
                   [{"dx_m": float(x), "dy_m": float(y), "charge_e": float(q)}
                    for x, y, q in zip(fp.X.ravel(), fp.Y.ravel(), fp.Q.ravel())])
    art.write_json(ctx.path("footprint/footprint.json"), {
        "n_events": n, "levels_e": list(fp.levels),
        "mean_radius_m": {str(k): float(v) for k, v in fp.radii.items()},
        "transport": dataclasses.asdict(ctx.config.transport),
        "observables": pl.observables(shift, imp.weight, ctx.config.pairs, ctx.config.analysis.jump_threshold),
    })
    return [OFFSETS, "footprint/contours.csv", "footprint/map.csv", "footprint/footprint.json"]


def _draw_impacts(g: np.random.Generator, rate: float, duration: float, shift_raw: np.ndarray, w: np.ndarray):
    n = g.poisson(rate * duration)
    t = np.sort(g.uniform(0, duration, n))
    rows = g.choice(len(w), n, p=w / w.sum()) if len(w) else np.zeros(0, int)
    return t, shift_raw[rows]


@stage("synth")
def _synth(ctx: Context, distances: tuple[float, ...], tomo_duration: float, parity_samples: int,
           parity_dt: float, coupled_samples: int, gamma_bkg: float, coupled_gamma_bkg: float, fidelity: float):
    ctx.require([OFFSETS, DECAY_SUMMARY])
    shift, w = art.read_offsets_csv(ctx.root / OFFSETS)
    summ = art.read_json(ctx.root / DECAY_SUMMARY)
    r0 = float(summ["source_distance_m"])
    R0 = float(summ["hit_rate_per_s"])
    ids = list(shift.qubit_ids)
    tomo_q = [q for q in ("Q2", "Q3", "Q4", "Q5") if q in ids] or ids[:4]
    p_poison = _default_poison(ids)
    g = np.random.default_rng([ctx.seed, 0x5EED])
    index = {"distances_m": list(distances), "reference_distance_m": r0, "impact_rate_ref": R0,
             "tomography": [], "parity": [], "truth": {"p_poison": dict(zip(ids, p_poison.tolist())),
                                                      "gamma_bkg": gamma_bkg,
                                                      "coupled_gamma_bkg": coupled_gamma_bkg}}
    outputs = []
    for k, r in enumerate(distances):
        rate = R0 * (r0 / r) ** 2
        t, raw = _draw_impacts(g, rate, tomo_duration, shift.raw, w)
        streams = {}
        for q in tomo_q:
            j = ids.index(q)
            streams[q] = synth_tomography_stream(0.0, tomo_duration, seed=ctx.seed + 101 * k + j,
                                                 jumps=(t, raw[:, j]))
        rel = f"synth/tomography_r{k}.npz"
        art.save_tomography(ctx.path(rel), streams)
        index["tomography"].append({"distance_m": r, "file": rel, "impact_rate": rate, "n_impacts": len(t)})
        outputs.append(rel)
        # parity traces: background switching plus poisoning by the same impact process
        T = parity_samples * parity_dt
        t, _ = _draw_impacts(g, rate, T, shift.raw, w)
        idx = (t / parity_dt).astype(np.int64)
        hit = g.random((len(idx), len(ids))) < p_poison
        files = {}
        for j, q in enumerate(ids):
            tr = synth_parity_trace(gamma_bkg, fidelity, parity_dt, parity_samples, ctx.seed, qubit=q,
                                    poison_at=idx[hit[:, j]], stream=1000 * (k + 1) + j)
            rel = f"synth/parity_r{k}_{q}.npz"
            tr.save(ctx.path(rel))
            files[q] = rel
            outputs.append(rel)
        index["parity"].append({"distance_m": r, "files": files, "impact_rate": rate, "n_impacts": len(idx)})
    # coupled charge + parity record at the reference distance
    dt = 3.7 / 5000
    T = coupled_samples * dt
    t, raw = _draw_impacts(g, R0, T, shift.raw, w)
    idx = (t / dt).astype(np.int64)
    cq = _charge_qubit(ctx)
    rec = events_to_records(idx, raw[:, ids.index(cq)], np.broadcast_to(p_poison, (len(idx), len(ids))),
                            coupled_samples, dt, ids, coupled_gamma_bkg, fidelity, seed=ctx.seed, charge_qubit=cq,
                            reset_interval=ctx.config.analysis.reset_interval)
    art.save_charge_series(ctx.path("synth/coupled_charge.npz"), rec.charge)
    outputs.append("synth/coupled_charge.npz")
    cfiles = {}
    for tr in rec.parity:
        rel = f"synth/coupled_{tr.qubit}.npz"
        tr.save(ctx.path(rel))
        cfiles[tr.qubit] = rel
        outputs.append(rel)
    index["coupled"] = {"charge": "synth/coupled_charge.npz", "parity": cfiles, "dt": dt,
                        "charge_qubit": cq, "n_impacts": len(idx)}
    art.write_json(ctx.path(SYNTH_INDEX), index)
    return outputs + [SYNTH_INDEX]


def _synth_inputs(ctx: Context) -> tuple[dict, list[str]]:
    p = ctx.root / SYNTH_INDEX
    if not p.exists():
        raise DataError(f"missing stage input {SYNTH_INDEX}; run the synth stage first")
    index = art.read_json(p)
    files = [x["file"] for x in index["tomography"]]
    files += [f for x in index["parity"] for f in x["files"].values()]
    files += [index["coupled"]["charge"]] + list(index["coupled"]["parity"].values())
    return index, [SYNTH_INDEX] + files


def _tomography_jumps(stream, threshold: float, qubit: str):
    deltas, times = [], []
    for sc in stream.scans:
        try:
            deltas.append(fit_tomography(sc.n_ext, sc.p1).delta)
            times.append(sc.time)
        except NumericalError:
            continue
    deltas, times = np.array(deltas), np.array(times)
    dq = diff_series(deltas, period=0.5)
    jumps = detect_jumps_threshold(dq, threshold, qubit)
    return jumps, times, dq


def _decode(trace: ParityTrace, n: int, s: float, segment: int = 1024):
    fit = fit_lorentzian(compute_psd(trace.samples, trace.dt, segment), strict=False)
    F = min(max(fit.fidelity, 0.51), 0.999)
    try:
        mask = mask_trace(trace.samples, fit.gamma, trace.dt, F, n=n, s=s)
    except DataError:
        mask = np.zeros(trace.samples.size, bool)
    if mask.all():
        mask = np.zeros(trace.samples.size, bool)
    dec = hmm_decode(trace.samples, mask, trace.dt, gamma_prior=fit.gamma)
    return fit, dec


@stage("analyze")
def _analyze(ctx: Context):
    index, inputs = _synth_inputs(ctx)
    ctx.require(inputs)
    a = ctx.config.analysis
    charge_rows, charge_pairs, parity_rows, parity_pairs, outputs = [], [], [], [], []
    for k, entry in enumerate(index["tomography"]):
        streams = art.load_tomography(ctx.root / entry["file"])
        times = {}
        all_j = []
        for q, s in streams.items():
            jumps, t, _ = _tomography_jumps(s, a.jump_threshold, q)
            all_j += jumps
            duration = float(t[-1] - t[0]) if len(t) > 1 else 1.0
            times[q] = t[[j.index + 1 for j in jumps]] if jumps else np.zeros(0)
            est = stats.jump_rate(jumps, duration)
            charge_rows.append({"distance_m": entry["distance_m"], "qubit": q, "jump_rate": est.rate,
                                "lower": est.lower, "upper": est.upper, "count": est.count, "duration_s": duration})
        rel = f"analysis/jumps_r{k}.csv"
        write_jumps_csv(all_j, ctx.path(rel))
        outputs.append(rel)
        period = streams[next(iter(streams))].scans[1].time - streams[next(iter(streams))].scans[0].time
        dur = max(float(s.scans[-1].time) for s in streams.values()) + period
        for qi, qj in combinations(sorted(streams), 2):
            ps = stats.correlation_probability(times[qi], times[qj], period, dur, pair=(qi, qj))
            n_both = ps.p_ij_obs * ps.n_bins
            gi, gj = ps.p_i / period, ps.p_j / period
            charge_pairs.append({"distance_m": entry["distance_m"], "pair": f"{qi}{qj}", "p_corr": ps.p_corr,
                                 "p_corr_err": ps.p_corr_err, "coincidence_rate": n_both / dur,
                                 "background_rate": gi * gj * period})
    for k, entry in enumerate(index["parity"]):
        decoded = {}
        for q, rel in entry["files"].items():
            tr = ParityTrace.load(ctx.root / rel)
            fit, dec = _decode(tr, a.parity_average, a.mask_s_parity)
            decoded[q] = dec
            parity_rows.append({"distance_m": entry["distance_m"], "qubit": q, "gamma_psd": fit.gamma,
                                "gamma_psd_err": fit.gamma_err, "fidelity": fit.fidelity,
                                "gamma_hmm": dec.switching_rate, "gamma_hmm_corrected": dec.corrected_rate,
                                "unmasked_fraction": dec.unmasked_fraction})
        for qi, qj in combinations(sorted(decoded), 2):
            ps = stats.pairwise_parity_rate(decoded[qi], decoded[qj], a.parity_average, pair=(qi, qj))
            parity_pairs.append({"distance_m": entry["distance_m"], "pair": f"{qi}{qj}",
                                 "observed_rate": ps.observed_rate, "background_rate": ps.background_rate})
    # coupled record: charge steps and decoded parity at the footprint settings
    c = index["coupled"]
    charge = art.load_charge_series(ctx.root / c["charge"])
    steps = detect_steps_singleshot(charge.samples, charge.d, charge.nu, a.reset_interval,
                                    a.footprint_average, 2 * a.footprint_average, qubit=charge.qubit)
    write_jumps_csv(steps, ctx.path(STEPS))
    outputs.append(STEPS)
    dec_files = {}
    for q, rel in c["parity"].items():
        tr = ParityTrace.load(ctx.root / rel)
        _, dec = _decode(tr, a.footprint_average, a.mask_s_footprint)
        out = f"analysis/decoded_{q}.npz"
        art.save_decoded(ctx.path(out), dec)
        dec_files[q] = out
        outputs.append(out)
    for name, rows in (("charge_rates", charge_rows), ("charge_pairs", charge_pairs),
                       ("parity_rates", parity_rows), ("parity_pairs", parity_pairs)):
        art.write_rows(ctx.path(f"analysis/{name}.csv"), rows)
        outputs.append(f"analysis/{name}.csv")
    art.write_json(ctx.path(ANALYSIS_INDEX), {"steps": STEPS, "decoded": dec_files, "dt": c["dt"],
                                              "n_steps": len(steps)})
    return outputs + [ANALYSIS_INDEX]


@stage("coincide")
def _coincide(ctx: Context):
    p = ctx.root / ANALYSIS_INDEX
    if not p.exists():
        raise DataError(f"missing stage input {ANALYSIS_INDEX}; run the analyze stage first")
    index = art.read_json(p)
    ctx.require([ANALYSIS_INDEX, STEPS] + list(index["decoded"].values()))
    steps = read_jumps_csv(ctx.root / STEPS)
    ids = list(index["decoded"])
    traces = [art.load_decoded(ctx.root / index["decoded"][q]) for q in ids]
    cs = stats.coincidence_scan(steps, traces, ctx.config.analysis.coincidence_window, ids)
    cs.write_table_csv(ctx.path("coincide/table.csv"))
    outputs = ["coincide/table.csv"]
    pub_rows = []
    for dev in stats.MEASURED_COINCIDENCES:
        t = stats.measured_coincidence_stats(dev)
        for r, pub in zip(t.rows(), stats.MEASURED_COINCIDENCES[dev].values()):
            pub_rows.append({"device": dev, **r, "p_poison_published": pub[3]})
    art.write_rows(ctx.path("coincide/measured_coincidences.csv"), pub_rows)
    outputs.append("coincide/measured_coincidences.csv")
    geom = ctx.config.geometry
    pos = np.array([geom.island(q).center for q in ids])
    cq = _charge_qubit(ctx)
    fits = {}
    for name, vals in (("synthetic", cs.p_poison),
                       ("non-Cu", [stats.MEASURED_COINCIDENCES["non-Cu"][q][3] for q in ids]),
                       ("Cu", [stats.MEASURED_COINCIDENCES["Cu"][q][3] for q in ids])):
        vals = np.asarray(vals, float)
        centre = pos[int(np.argmax(vals))] if name == "Cu" else np.asarray(geom.island(cq).center)
        ok = np.isfinite(vals)
        try:
            f = stats.fit_footprint("exponential", centre, pos[ok], vals[ok], fit_floor=True,
                                    sensing_radius=ctx.config.analysis.sensing_radius)
            fits[name] = {"model": dataclasses.asdict(f.model), "p_model": f.p_model.tolist(),
                          "residuals": f.residuals.tolist()}
        except DataError as exc:
            fits[name] = {"error": str(exc)}
        hx, hy = geom.substrate_size[0] / 2, geom.substrate_size[1] / 2
        gx, gy = np.linspace(-hx, hx, 81), np.linspace(-hy, hy, 81)
        if ok.sum() >= 4:
            Z = stats.interpolate_poison_map(pos[ok], vals[ok], gx, gy)
            rel = f"coincide/poison_map_{name}.csv"
            stats.write_map_csv(ctx.path(rel), gx, gy, Z)
            outputs.append(rel)
    art.write_json(ctx.path("coincide/footprint_fit.json"), fits)
    art.write_json(ctx.path(COINCIDE_JSON), {
        "window_samples": cs.window, "window_s": cs.window_s, "n_jumps": cs.n_jumps, "qubits": cs.rows(),
        "alpha_footprint": {q: float(mask_alpha(0.9, ctx.config.analysis.footprint_average,
                                                ctx.config.analysis.mask_s_footprint)) for q in ids[:1]},
    })
    return outputs + ["coincide/footprint_fit.json", COINCIDE_JSON]


@stage("calibrate")
def _calibrate(ctx: Context, n_decays: int, events: int, quick: bool):
    ctx.require([TABLE])
    table = _load_table(ctx)
    imp = pl.simulate_impacts(ctx.config, n_decays, ctx.seed, ctx.jobs).first(events)
    grid = pl.SweepGrid() if not quick else pl.SweepGrid((450e-6, 600e-6, 750e-6), (1.25, 1.55, 1.85),
                                                         (0.2, 0.3, 0.4))
    obs = pl.calibration_sweep(ctx.config, table, imp, grid, ctx.seed, ctx.jobs)
    res = stats.calibrate_parameters(stats.MEASURED_TARGETS, obs)
    art.write_rows(ctx.path("calibrate/surface.csv"), res.surface_rows())
    art.write_json(ctx.path("calibrate/best.json"), {
        "trap_length_e_m": res.best[0], "trap_length_h_m": res.best[0] * res.best[1], "ratio": res.best[1],
        "f_q": res.best[2], "chi2": res.chi2, "n_impacts": len(imp),
        "targets": {k: dataclasses.asdict(v) for k, v in stats.MEASURED_TARGETS.items()},
        "observables_at_best": obs[res.best],
    })
    return ["calibrate/surface.csv", "calibrate/best.json"]


@stage("nai-validate")
def _nai_validate(ctx: Context, n_decays: int):
    ctx.require([])
    geom = ctx.config.geometry
    if geom.nai_detector is None:
        geom = dataclasses.replace(geom, nai_detector=NaIDetector())
    sp = nai_spectrum(geom, n_decays, seed=ctx.seed, jobs=ctx.jobs)
    art.write_rows(ctx.path("nai/spectrum.csv"),
                   [{"e_lo_keV": float(a), "e_hi_keV": float(b), "counts_per_decay": float(c / max(n_decays, 1))}
                    for a, b, c in zip(sp.edges[:-1], sp.edges[1:], sp.counts)])
    published = [estimate_activity(17.05, 4905, 10**9), estimate_activity(21.26, 5865, 10**9)]
    art.write_json(ctx.path("nai/activity.json"), {
        "simulated_peak_efficiency_1332": sp.peak_efficiency,
        "published_inputs": [{"peak_rate": 17.05, "count": 4905, "trials": 10**9, **published[0]},
                             {"peak_rate": 21.26, "count": 5865, "trials": 10**9, **published[1]}],
        "activity_from_simulated_efficiency_uCi": [
            estimate_activity(r, int(round(sp.peak_efficiency * 10**9)), 10**9)["uCi"]
            if sp.peak_efficiency > 0 else None for r in (17.05, 21.26)],
    })
    return ["nai/spectrum.csv", "nai/activity.json"]


@stage("report")
def _report(ctx: Context):
    need = ["analysis/charge_rates.csv", "analysis/charge_pairs.csv", "analysis/parity_rates.csv",
            "analysis/parity_pairs.csv", "coincide/table.csv", "coincide/measured_coincidences.csv", "coincide/footprint_fit.json",
            "footprint/contours.csv", "footprint/footprint.json", DECAY_SUMMARY]
    optional = [r for r in ("calibrate/surface.csv", "calibrate/best.json", "nai/activity.json")
                if (ctx.root / r).exists()]
    maps = sorted(str(p.relative_to(ctx.root)) for p in (ctx.root / "coincide").glob("poison_map_*.csv"))
    ctx.require(need + optional + maps)
    out = []

    def copy(src, dst):
        ctx.path(dst).write_bytes((ctx.root / src).read_bytes())
        out.append(dst)

    # offset-charge jump rates, pair coincidences and correlation probabilities vs distance
    rows = art.read_rows(ctx.root / "analysis/charge_rates.csv")
    for r in rows:
        r["inv_r2"] = repr(1 / float(r["distance_m"]) ** 2)
    art.write_rows(ctx.path("report/rates_vs_distance.csv"), rows)
    out.append("report/rates_vs_distance.csv")
    copy("analysis/charge_pairs.csv", "report/charge_pair_correlations.csv")
    copy("analysis/parity_rates.csv", "report/parity_rates.csv")
    copy("analysis/parity_pairs.csv", "report/parity_twofold.csv")
    copy("coincide/table.csv", "report/poisoning.csv")
    copy("coincide/measured_coincidences.csv", "report/measured_coincidences.csv")
    copy("footprint/contours.csv", "report/footprint_contours.csv")
    for m in maps:
        copy(m, "report/poison_map_" + Path(m).name)
    summary = {"decays": art.read_json(ctx.root / DECAY_SUMMARY),
               "footprint": art.read_json(ctx.root / "footprint/footprint.json"),
               "footprint_fit": art.read_json(ctx.root / "coincide/footprint_fit.json"),
               "threshold": {"R_gamma": stats.chip_impact_rate(0.002),
                             "p_th": stats.threshold_analysis(stats.chip_impact_rate(0.002), 1e-2)}}
    for r in optional:
        if r.endswith(".json"):
            summary[Path(r).parent.name] = art.read_json(ctx.root / r)
        else:
            copy(r, "report/calibration_surface.csv")
    summary["decays"].pop("histogram_counts", None)
    summary["decays"].pop("histogram_edges_keV", None)
    art.write_json(ctx.path("report/summary.json"), summary)
    return out + ["report/summary.json"]


# ---------------------------------------------------------------------------
# click wiring


def _invoke(ctx_obj, fn, **opts):
    try:
        ctx = Context(**ctx_obj)
        fn(ctx, **opts)
    except QPGammaError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(exc.exit_code)


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="YAML config file.")
@click.option("--seed", type=int, default=None, help="Master seed (overrides the config).")
@click.option("--jobs", type=int, default=1, show_default=True, help="Worker processes.")
@click.option("--out-dir", type=click.Path(file_okay=False), default=None,
              help=f"Output directory (default ${ENV_OUT_DIR} or ./qpgamma-out).")
@click.option("--force", is_flag=True, help="Ignore manifest hash and config mismatches.")
@click.pass_context
def main(cctx, config_path, seed, jobs, out_dir, force):
    """Gamma-impact offset-charge and quasiparticle-poisoning pipeline."""
    cctx.obj = dict(config_path=config_path, seed=seed, jobs=jobs, out_dir=out_dir, force=force)


@main.command("simulate-decays")
@click.option("--n-decays", type=int, default=200_000, show_default=True)
@click.option("--distance", type=float, default=None, help="Source distance in m (overrides the config).")
@click.pass_obj
def simulate_decays_cmd(obj, n_decays, distance):
    """Source decays through the shields into the substrate."""
    _invoke(obj, _simulate_decays, n_decays=n_decays, distance=distance)


@main.command("build-table")
@click.option("--scale", type=float, default=1.0, show_default=True, help="Mesh refinement factor.")
@click.pass_obj
def build_table_cmd(obj, scale):
    """Solve the island weighting potential (cached)."""
    _invoke(obj, _build_table, scale=scale)


@main.command("transport-charges")
@click.option("--max-events", type=int, default=20, show_default=True)
@click.pass_obj
def transport_charges_cmd(obj, max_events):
    """Carrier transport for the first hit events; writes final positions."""
    _invoke(obj, _transport_charges, max_events=max_events)


@main.command("footprint")
@click.option("--burst-events", type=int, default=500, show_default=True)
@click.pass_obj
def footprint_cmd(obj, burst_events):
    """Per-impact offset charges and the charge-sensing footprint."""
    _invoke(obj, _footprint, burst_events=burst_events)


def _floats(_, __, value):
    try:
        return tuple(float(v) for v in value.split(","))
    except ValueError as exc:
        raise click.BadParameter(str(exc)) from exc


@main.command("synth")
@click.option("--distances", default="0.3,0.59,1.2", show_default=True, callback=_floats)
@click.option("--tomo-duration", type=float, default=1800.0, show_default=True)
@click.option("--parity-samples", type=int, default=200_000, show_default=True)
@click.option("--parity-dt", type=float, default=1e-3, show_default=True)
@click.option("--coupled-samples", type=int, default=1_000_000, show_default=True)
@click.option("--gamma-bkg", type=float, default=5.0, show_default=True, help="Background parity rate, 1/s.")
@click.option("--coupled-gamma-bkg", type=float, default=1.5, show_default=True,
              help="Background parity rate of the coupled record, 1/s.")
@click.option("--fidelity", type=float, default=0.9, show_default=True)
@click.pass_obj
def synth_cmd(obj, **opts):
    """Synthetic tomography, parity and coupled records driven by simulated impacts."""
    _invoke(obj, _synth, **opts)


@main.command("analyze")
@click.pass_obj
def analyze_cmd(obj):
    """Jump detection, PSD fits, masking and HMM decoding of the synthetic records."""
    _invoke(obj, _analyze)


@main.command("coincide")
@click.pass_obj
def coincide_cmd(obj):
    """Charge-jump / parity-switch coincidences, poisoning table and maps."""
    _invoke(obj, _coincide)


@main.command("calibrate")
@click.option("--n-decays", type=int, default=400_000, show_default=True)
@click.option("--events", type=int, default=1000, show_default=True)
@click.option("--quick", is_flag=True, help="3x3x3 grid around the nominal point.")
@click.pass_obj
def calibrate_cmd(obj, n_decays, events, quick):
    """Chi-square sweep over trapping lengths and f_q."""
    _invoke(obj, _calibrate, n_decays=n_decays, events=events, quick=quick)


@main.command("nai-validate")
@click.option("--n-decays", type=int, default=200_000, show_default=True)
@click.pass_obj
def nai_validate_cmd(obj, n_decays):
    """NaI spectrum and activity estimates."""
    _invoke(obj, _nai_validate, n_decays=n_decays)


@main.command("report")
@click.pass_obj
def report_cmd(obj):
    """Plot-ready tables from all completed stages."""
    _invoke(obj, _report)


if __name__ == "__main__":  # pragma: no cover
    main()
