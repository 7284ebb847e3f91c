"""Command-line entry point: ``a2gsounder <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import a2gmodel, airchan, pipeline, sage, waveform
from .iq import write_iq
from .pipeline import ConfigError, StageError

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed")
    p.add_argument("--config", default=argparse.SUPPRESS,
                   help="JSON file; top-level keys or a section named after the subcommand "
                        "supply option defaults (a run config for 'pipeline')")
    p.add_argument("--out-dir", default=argparse.SUPPRESS,
                   help="directory for relative output paths")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    ap = argparse.ArgumentParser(prog="a2gsounder", parents=[common],
                                 description="Passive LTE air-to-ground channel sounding toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("wavegen", parents=[common], help="generate an LTE downlink IQ trace")
    p.add_argument("--pci", type=int, default=301)
    p.add_argument("--cp", choices=("normal", "extended"), default="normal")
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--first-frame", type=int, default=0)
    p.add_argument("--no-data", action="store_true", help="leave data resource elements empty")
    p.add_argument("--out", default="tx.iq")

    p = sub.add_parser("fly", parents=[common], help="pass an IQ trace through a flight channel")
    p.add_argument("--scenario", required=True)
    p.add_argument("--in", dest="inp", default="tx.iq")
    p.add_argument("--out", default="rx.iq")
    p.add_argument("--snr", type=float, default=15.0)
    p.add_argument("--truth", default=None, help="optional ground-truth MPC JSON-lines file")

    p = sub.add_parser("cellsearch", parents=[common], help="PSS/SSS cell search")
    p.add_argument("--in", dest="inp", default="rx.iq")
    p.add_argument("--out", "--json", dest="out", default="sync.json")
    p.add_argument("--half-frames", type=int, default=None)

    p = sub.add_parser("cir", parents=[common], help="extract CIRs from CRS pilots")
    p.add_argument("--in", dest="inp", default="rx.iq")
    p.add_argument("--sync", default="sync.json")
    p.add_argument("--out", default="cirs.bin")
    p.add_argument("--window", choices=("rect", "hann"), default="rect")

    p = sub.add_parser("sage", parents=[common], help="estimate MPCs per snapshot")
    p.add_argument("--cirs", "--in", dest="cirs", default="cirs.bin")
    p.add_argument("--out", default="mpcs.jsonl")
    p.add_argument("--stride", type=int, default=1, help="process every n-th snapshot")
    p.add_argument("--paths", type=int, default=30, help="pre-pass path count")
    p.add_argument("--iters", type=int, default=15, help="iterations per pass")
    p.add_argument("--floor-margin", type=float, default=3.0, help="noise floor margin in dB")

    p = sub.add_parser("stats", parents=[common], help="channel statistics from MPC estimates")
    p.add_argument("--mpcs", default="mpcs.jsonl")
    p.add_argument("--geometry", required=True, help="scenario JSON (or bundled name)")
    p.add_argument("--out", default="stats.csv")
    p.add_argument("--summary", default=None, help="fit summary JSON (default: <out>.json)")

    p = sub.add_parser("model", parents=[common], help="stochastic model draws or closed loop")
    p.add_argument("action", nargs="?", choices=("draw", "roundtrip"), default="draw")
    p.add_argument("--mode", choices=a2gmodel.MODES, default="horizontal")
    p.add_argument("--height", type=float, default=None, help="flight height (horizontal mode)")
    p.add_argument("--distance", type=float, default=None,
                   help="horizontal distance (vertical mode)")
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--windows", type=int, default=10000, help="roundtrip window count")
    p.add_argument("--extrapolate", action="store_true")
    p.add_argument("--params", default=None, help="alternative model parameter JSON")
    p.add_argument("--out", default="draws.csv")
    p.add_argument("--report", default="roundtrip.json")

    p = sub.add_parser("pipeline", parents=[common], help="run the full chain")
    p.add_argument("--scenario", default=None)
    p.add_argument("--cell-config", default=None)
    p.add_argument("--snr", type=float, default=None)
    p.add_argument("--stages", default=None, help="comma-separated prefix of the stage list")
    p.add_argument("--segment-duration", type=float, default=None)
    p.add_argument("--sage-stride", type=int, default=None)

    p = sub.add_parser("plots", parents=[common], help="emit plot-data files for a run")
    p.add_argument("--run-dir", default=None)
    return ap


def _load_config(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def parse_args(argv=None) -> argparse.Namespace:
    ap = build_parser()
    args = ap.parse_args(argv)
    if getattr(args, "config", None) and args.command != "pipeline":
        cfg = _load_config(args.config)
        section = cfg.get(args.command, cfg)
        sub = ap._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in section.items()
                            if not isinstance(v, dict)})
        args = ap.parse_args(argv)
    return args


def _path(args, name):
    p = Path(name)
    base = getattr(args, "out_dir", None)
    return p if p.is_absolute() or base is None else Path(base) / p


def _need(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"input file {p} not found")
    return p


def _scenario(name):
    try:
        return airchan.load_scenario(name)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from exc
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"invalid scenario {name}: {exc}") from exc


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, default=str))


def _run(args) -> dict:
    seed = getattr(args, "seed", 0)
    cmd = args.command
    if getattr(args, "out_dir", None):
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)

    if cmd == "wavegen":
        try:
            cell = waveform.CellConfig(args.pci, args.cp)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if args.frames < 1:
            raise ConfigError("--frames must be >= 1")
        stage = "wavegen"

        def work():
            tx = waveform.generate(cell, args.frames, data_fill=not args.no_data, seed=seed,
                                   first_frame=args.first_frame)
            num = waveform.DEFAULT_NUMEROLOGY
            tx = tx.replace(start_time=args.first_frame * num.samples_per_frame / num.sample_rate)
            write_iq(_path(args, args.out), tx)
            return {"out": str(_path(args, args.out)), "samples": len(tx)}

    elif cmd == "fly":
        scn = _scenario(args.scenario)
        inp = _need(_path(args, args.inp))
        stage = "fly"

        def work():
            truth = _path(args, args.truth) if args.truth else None
            return pipeline.stage_fly(scn, inp, _path(args, args.out), args.snr, seed, truth)

    elif cmd == "cellsearch":
        inp = _need(_path(args, args.inp))
        stage = "cellsearch"

        def work():
            return pipeline.stage_cellsearch(inp, _path(args, args.out), args.half_frames)

    elif cmd == "cir":
        inp, sy = _need(_path(args, args.inp)), _need(_path(args, args.sync))
        stage = "cir"

        def work():
            return pipeline.stage_cir(inp, sy, _path(args, args.out), args.window)

    elif cmd == "sage":
        inp = _need(_path(args, args.cirs))
        if args.stride < 1:
            raise ConfigError("--stride must be >= 1")
        try:
            cfg = sage.SageConfig(pre_pass_paths=args.paths, iterations=args.iters,
                                  noise_floor_margin_db=args.floor_margin)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        stage = "sage"

        def work():
            return pipeline.stage_sage(inp, _path(args, args.out), args.stride, cfg)

    elif cmd == "stats":
        inp = _need(_path(args, args.mpcs))
        scn = _scenario(args.geometry)
        stage = "stats"

        def work():
            out = _path(args, args.out)
            summary = _path(args, args.summary) if args.summary else out.with_suffix(".json")
            return pipeline.stage_stats(inp, scn, out, summary)

    elif cmd == "model":
        try:
            params = a2gmodel.ModelParams.load(args.params) if args.params else None
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"cannot load model parameters: {exc}") from exc
        stage = "model"
        if args.action == "draw":
            geom = args.height if args.mode == "horizontal" else args.distance
            if geom is None:
                raise ConfigError("--height (horizontal) or --distance (vertical) is required")
            bank = (params or a2gmodel.ModelParams.load()).bank(args.mode)
            lo, hi = bank.geometry_range
            if not args.extrapolate and not lo <= geom <= hi:
                raise ConfigError(f"geometry {geom} outside [{lo}, {hi}]; use --extrapolate")
            if args.n < 1:
                raise ConfigError("--n must be >= 1")

            def work():
                draws = a2gmodel.draw_statistics(args.mode, geom, args.n, seed, params,
                                                 extrapolate=args.extrapolate)
                draws.write_csv(_path(args, args.out))
                return {"out": str(_path(args, args.out)), "n": len(draws)}
        else:
            def work():
                rep = a2gmodel.model_roundtrip(args.mode, args.windows, seed, params)
                rep.write_json(_path(args, args.report))
                return {"report": str(_path(args, args.report)), "n_windows": rep.n_windows}

    elif cmd == "pipeline":
        d = _load_config(args.config) if getattr(args, "config", None) else {}
        overrides = {"scenario": args.scenario, "cell_config": args.cell_config,
                     "snr_db": args.snr, "segment_duration": args.segment_duration,
                     "sage_stride": args.sage_stride,
                     "stages": args.stages.split(",") if args.stages else None,
                     "seed": getattr(args, "seed", None),
                     "out_dir": getattr(args, "out_dir", None)}
        d.update({k: v for k, v in overrides.items() if v is not None})
        if "scenario" not in d:
            raise ConfigError("pipeline needs --scenario or a config with 'scenario'")
        cfg = pipeline.RunConfig.from_dict(d)
        manifest = pipeline.run_pipeline(cfg)
        return {"out_dir": cfg.out_dir, "stages": [s["stage"] for s in manifest["stages"]]}

    elif cmd == "plots":
        run = args.run_dir or getattr(args, "out_dir", None)
        if run is None:
            raise ConfigError("plots needs --run-dir or --out-dir")
        run = _need(run)
        try:
            files = pipeline.emit_plots(run)
        except pipeline.MissingInput as exc:
            raise ConfigError(str(exc)) from exc
        return {"files": [str(f) for f in files]}
    else:  # pragma: no cover - argparse restricts choices
        raise ConfigError(f"unknown command {cmd}")

    try:
        return work()
    except Exception as exc:  # noqa: BLE001 - surfaced as a stage failure
        raise StageError(stage, exc) from exc


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse usage errors exit with 2
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        _emit(_run(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
