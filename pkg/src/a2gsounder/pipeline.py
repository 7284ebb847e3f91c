"""End-to-end orchestration: waveform -> flight channel -> cell search -> CIR
-> SAGE -> statistics -> model, with file-based stage interfaces and a run
manifest of versions, seeds and artifact hashes."""
from __future__ import annotations

import csv
import hashlib
import json
import platform
from dataclasses import asdict, dataclass
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from . import a2gmodel, airchan, cirex, sage, stats, sync, waveform
from .iq import read_iq, write_iq

STAGES = ("wavegen", "fly", "cellsearch", "cir", "sage", "stats", "model")
DELAY_GUARD = 20e-6


class ConfigError(ValueError):
    """Invalid run configuration; raised before any stage runs."""


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunConfig:
    scenario: str
    out_dir: str = "run"
    seed: int = 0
    snr_db: float = 15.0
    stages: tuple = STAGES
    cell_config: str | None = None
    segment_duration: float | None = None
    sage_stride: int = 1
    model_draws: int = 2000
    model_roundtrip_windows: int = 1000

    def __post_init__(self):
        self.stages = tuple(self.stages)
        if not self.stages or self.stages != STAGES[:len(self.stages)]:
            raise ConfigError(f"stages must be a non-empty prefix of {list(STAGES)}")
        if self.sage_stride < 1:
            raise ConfigError("sage_stride must be >= 1")
        if self.segment_duration is not None and self.segment_duration <= 0:
            raise ConfigError("segment_duration must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = list(self.stages)
        return d


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def stage_seed(seed: int, scenario_seed: int, stage: str) -> int:
    ss = np.random.SeedSequence([int(seed), int(scenario_seed), STAGES.index(stage)])
    return int(ss.generate_state(1)[0])


def _versions() -> dict:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"a2gsounder": pkg, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------ stages
# Each stage reads and writes files only, so stages can be run separately.


def load_cell(scn: airchan.Scenario, cell_config=None) -> waveform.CellConfig:
    if cell_config is None:
        return waveform.CellConfig(scn.pci, scn.cp_mode)
    d = json.loads(Path(cell_config).read_text())
    return waveform.CellConfig(int(d["pci"]), d.get("cp_mode", "normal"))


def stage_wavegen(cell: waveform.CellConfig, t_start: float, duration: float, out, seed: int = 0):
    """Transmit frames covering [t_start, t_start + duration] plus a delay guard."""
    frame = waveform.DEFAULT_NUMEROLOGY.samples_per_frame / waveform.DEFAULT_NUMEROLOGY.sample_rate
    n_frames = int(np.ceil((duration + DELAY_GUARD) / frame))
    first = int(np.floor(t_start / frame + 1e-9))
    tx = waveform.generate(cell, n_frames, seed=seed, first_frame=first)
    tx = tx.replace(start_time=first * frame)
    write_iq(out, tx)
    return {"n_frames": n_frames, "first_frame": first, "start_time_s": tx.start_time}


def stage_fly(scn: airchan.Scenario, tx_path, out, snr_db: float, seed: int, truth_out=None):
    tx = read_iq(tx_path)
    tracks = airchan.mpc_tracks(scn.trajectory, scn.scatterers, scn.snapshot_rate,
                                tx.start_time, tx.start_time + tx.duration)
    ref = float(tracks.delay[tracks.alive()].min())
    rx = airchan.apply_channel(tx, tracks, snr_db, seed, delay_reference=ref,
                               max_delay=DELAY_GUARD)
    rx.description = f"{scn.name} snr={snr_db:g}dB"
    rx.metadata = dict(rx.metadata, scenario=scn.name, snr_db=snr_db, delay_reference_s=ref)
    write_iq(out, rx)
    if truth_out is not None:
        with open(truth_out, "w") as fh:
            for i, t in enumerate(tracks.times):
                paths = [{"re": p.amplitude.real, "im": p.amplitude.imag, "tau_s": p.delay - ref,
                          "nu_hz": p.doppler, "label": p.label} for p in tracks.at(i)]
                fh.write(json.dumps({"t": float(t), "paths": paths}, sort_keys=True) + "\n")
    return {"n_snapshots": len(tracks), "n_paths": tracks.n_paths, "delay_reference_s": ref}


def usable_half_frames(n_samples: int, limit: int = 10) -> int:
    num = waveform.DEFAULT_NUMEROLOGY
    n = 1
    while n < limit and sync.required_pss_length(n + 1, num) + num.half_frame_samples <= n_samples:
        n += 1
    return n


def stage_cellsearch(rx_path, out, n_half_frames: int | None = None):
    rx = read_iq(rx_path)
    x = sync.prepare_capture(rx)
    n = usable_half_frames(len(x)) if n_half_frames is None else n_half_frames
    res = sync.cell_search(x, n, prefilter=False)
    _write_json(out, res.to_dict())
    return {"pci": res.pci_hat, "cp_mode": res.cp_mode_hat, "t0": res.t0_hat,
            "n_half_frames": n}


def stage_cir(rx_path, sync_path, out, window: str = "rect"):
    rx = read_iq(rx_path)
    res = sync.SyncResult.from_dict(json.loads(Path(sync_path).read_text()))
    stream = cirex.extract_cir(rx, res, window=window)
    cirex.write_cirs(out, stream)
    return {"n_cirs": len(stream), "n_taps": stream.n_taps, "valid": int(stream.valid.sum())}


def stage_sage(cir_path, out, stride: int = 1, cfg: sage.SageConfig | None = None):
    stream = cirex.read_cirs(cir_path)
    est = sage.sage_run(stream, cfg, stride)
    sage.write_estimates(out, est)
    return {"n_snapshots": len(est), "paths": [e.L_hat for e in est]}


def stage_stats(mpcs_path, scn: airchan.Scenario, out_csv, out_summary):
    est = sage.read_estimates(mpcs_path)
    rep = stats.compute_stats(est, scn.trajectory, scn.bs_position, scn.scatterers.carrier)
    rep.write_csv(out_csv)
    rep.write_summary(out_summary)
    return {"n_records": len(rep.records)}


def scenario_geometry(scn: airchan.Scenario):
    """(mode, fixed flight geometry) of a scenario for the stochastic model."""
    traj = scn.trajectory
    w = traj.waypoints
    bs = np.asarray(scn.bs_position, float)
    if traj.kind == "vertical":
        return "vertical", float(np.hypot(w[0, 1] - bs[0], w[0, 2] - bs[1]))
    return "horizontal", float(np.median(w[:, 3]))


def stage_model(scn: airchan.Scenario, draws_out, report_out, n: int, windows: int, seed: int):
    mode, geom = scenario_geometry(scn)
    draws = a2gmodel.draw_statistics(mode, geom, n, seed, extrapolate=True)
    draws.write_csv(draws_out)
    report = a2gmodel.model_roundtrip(mode, windows, seed)
    report.write_json(report_out)
    return {"mode": mode, "geometry": geom, "n_draws": n, "roundtrip_windows": report.n_windows}


# ---------------------------------------------------------------- pipeline


ARTIFACTS = {
    "wavegen": ["tx.iq", "tx.iq.json"],
    "fly": ["rx.iq", "rx.iq.json", "truth.jsonl"],
    "cellsearch": ["sync.json"],
    "cir": ["cirs.bin"],
    "sage": ["mpcs.jsonl"],
    "stats": ["stats.csv", "stats_summary.json"],
    "model": ["draws.csv", "roundtrip.json"],
}


def run_pipeline(cfg: RunConfig) -> dict:
    """Run the configured stages in order and return the manifest.

    Configuration problems raise :class:`ConfigError` before anything runs. A
    failing stage raises :class:`StageError`; artifacts written so far and a
    manifest naming the failed stage are kept.
    """
    try:
        scn = airchan.load_scenario(cfg.scenario)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from exc
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"invalid scenario {cfg.scenario}: {exc}") from exc
    if cfg.cell_config is not None and not Path(cfg.cell_config).exists():
        raise ConfigError(f"cell config {cfg.cell_config} not found")
    try:
        cell = load_cell(scn, cfg.cell_config)
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"invalid cell config: {exc}") from exc

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0, t1 = scn.segment()
    duration = cfg.segment_duration or (t1 - t0)
    seeds = {s: stage_seed(cfg.seed, scn.seed, s) for s in cfg.stages}
    manifest = {"versions": _versions(), "config": cfg.to_dict(), "scenario": scn.raw,
                "cell": {"pci": cell.pci, "cp_mode": cell.cp_mode}, "seeds": seeds,
                "stages": [], "failed_stage": None}
    p = {name: out / name for names in ARTIFACTS.values() for name in names}
    runners = {
        "wavegen": lambda: stage_wavegen(cell, t0, duration, p["tx.iq"], seeds["wavegen"]),
        "fly": lambda: stage_fly(scn, p["tx.iq"], p["rx.iq"], cfg.snr_db, seeds["fly"],
                                 p["truth.jsonl"]),
        "cellsearch": lambda: stage_cellsearch(p["rx.iq"], p["sync.json"]),
        "cir": lambda: stage_cir(p["rx.iq"], p["sync.json"], p["cirs.bin"]),
        "sage": lambda: stage_sage(p["cirs.bin"], p["mpcs.jsonl"], cfg.sage_stride),
        "stats": lambda: stage_stats(p["mpcs.jsonl"], scn, p["stats.csv"],
                                     p["stats_summary.json"]),
        "model": lambda: stage_model(scn, p["draws.csv"], p["roundtrip.json"], cfg.model_draws,
                                     cfg.model_roundtrip_windows, seeds["model"]),
    }
    for stage in cfg.stages:
        try:
            info = runners[stage]()
        except Exception as exc:  # noqa: BLE001 - reported with the stage name
            manifest["failed_stage"] = {"stage": stage, "error": f"{type(exc).__name__}: {exc}"}
            _write_json(out / "manifest.json", manifest)
            raise StageError(stage, exc) from exc
        arts = {n: sha256(out / n) for n in ARTIFACTS[stage] if (out / n).exists()}
        manifest["stages"].append({"stage": stage, "seed": seeds[stage], "artifacts": arts,
                                   "info": _jsonable(info)})
        _write_json(out / "manifest.json", manifest)
    return manifest


def _jsonable(o):
    if isinstance(o, dict):
        return {k: _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    return o


# -------------------------------------------------------------- plot data


class MissingInput(FileNotFoundError):
    pass


def _need(path: Path) -> Path:
    if not path.exists():
        raise MissingInput(f"required input {path} not found")
    return path


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for r in rows:
            wr.writerow([f"{v:.9g}" if isinstance(v, (float, np.floating)) else v for v in r])


def _cdf_rows(values, fit: stats.DistributionFit):
    x = np.sort(values)
    emp = np.arange(1, x.size + 1) / x.size
    return zip(x, emp, fit.dist().cdf(x))


def emit_plots(run_dir) -> list:
    """Write plot-ready CSV series for whatever stage outputs exist in
    ``run_dir``; raises :class:`MissingInput` if none of them do."""
    run = Path(run_dir)
    out = run / "plots"
    written = []
    have = [n for n in ("cirs.bin", "mpcs.jsonl", "stats.csv", "draws.csv") if (run / n).exists()]
    if not have:
        raise MissingInput(f"{run} holds no cirs.bin, mpcs.jsonl, stats.csv or draws.csv")
    out.mkdir(exist_ok=True)

    if "cirs.bin" in have:
        st_ = cirex.read_cirs(_need(run / "cirs.bin"))
        with np.errstate(divide="ignore"):
            p = 10 * np.log10(cirex.pdp(st_))
        p = np.maximum(p, -300.0)
        _write_rows(out / "cpdp.csv", ["t_s"] + [f"{d:.6e}" for d in st_.delays],
                    ([t] + list(row) for t, row in zip(st_.timestamps, p)))
        written.append(out / "cpdp.csv")

    if "mpcs.jsonl" in have:
        est = sage.read_estimates(run / "mpcs.jsonl")
        rows = [(e.t, q.delay, q.doppler, 10 * np.log10(q.power)) for e in est for q in e.paths
                if q.power > 0]
        _write_rows(out / "mpc_scatter.csv", ["t_s", "tau_s", "nu_hz", "power_db"], rows)
        written.append(out / "mpc_scatter.csv")

    if "stats.csv" in have:
        with open(run / "stats.csv") as fh:
            recs = list(csv.DictReader(fh))
        _write_rows(out / "power_vs_geometry.csv", ["d_m", "h_m", "P_dB", "P_smoothed_dB"],
                    ((float(r["d_m"]), float(r["h_m"]), float(r["P_dB"]),
                      float(r["P_smoothed_dB"])) for r in recs))
        written.append(out / "power_vs_geometry.csv")
        summ = json.loads((run / "stats_summary.json").read_text()) \
            if (run / "stats_summary.json").exists() else {}
        for col, key in (("X_dB", "shadow"), ("K_dB", "k_db"), ("log10_ds", "log10_ds"),
                         ("log10_dops", "log10_dops")):
            v = np.array([float(r[col]) for r in recs])
            v = v[np.isfinite(v)]
            fam = summ.get(key, {}).get("family")
            if fam is None or v.size < 30:
                continue
            fit = stats.fit_distribution(v, fam)
            f = out / f"cdf_{col}.csv"
            _write_rows(f, ["x", "empirical", f"fitted_{fam}"], _cdf_rows(v, fit))
            written.append(f)

    if "draws.csv" in have:
        with open(run / "draws.csv") as fh:
            recs = list(csv.DictReader(fh))
        vertical = len({r["d"] for r in recs}) == 1
        for col in ("x_db", "k_db", "log10_ds", "log10_dops"):
            v = np.array([float(r[col]) for r in recs])
            fam = "extreme_value" if col == "log10_dops" and not vertical else "normal"
            fit = stats.fit_distribution(v, fam)
            f = out / f"cdf_model_{col}.csv"
            _write_rows(f, ["x", "empirical", f"fitted_{fam}"], _cdf_rows(v, fit))
            written.append(f)
    return written
