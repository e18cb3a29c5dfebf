"""Command-line entry point: ``weaktraj {calibrate,simulate,filter,reconstruct,correlate,check}``.

Exit codes: 0 success, 1 failed acceptance check, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__, checks
from .bayes import batch_trajectories, trajectory
from .calibration import calibrate
from .io import (
    RunConfig,
    load_config,
    read_dataset,
    read_record,
    read_table,
    run_header,
    write_dataset,
    write_manifest,
    write_record,
    write_table,
)
from .model import EnsembleDataset, Quadrature
from .simulator import run_experiment, simulate_record
from .tomography import DEFAULT_MIN_COUNT, compare, correlation_curves, reconstruct_trajectory

log = logging.getLogger("weaktraj")


class UsageError(Exception):
    pass


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="YAML run configuration (or a manifest.json)")
    parser.add_argument("--seed", type=int, help="master seed; the only source of randomness")
    parser.add_argument("--out", type=Path, help="output directory")
    parser.add_argument("--overwrite", action="store_true", help="replace existing output files")


def _physics(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--reps", type=int, help="number of repetitions")
    parser.add_argument("--quadrature", choices=["z", "phi"])
    parser.add_argument("--tau", type=float, help="measurement duration in seconds")
    parser.add_argument("--nbar", type=float, help="mean intracavity photon number")
    parser.add_argument("--eta", type=float, help="quantum efficiency")
    parser.add_argument("--t2-star-us", type=float, help="environmental T2* in microseconds (inf disables)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weaktraj", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"weaktraj {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="strength, dephasing rate and related constants")
    _common(p)
    _physics(p)

    p = sub.add_parser("simulate", help="run the herald/measure/tomography sequence")
    _common(p)
    _physics(p)
    p.add_argument("--format", choices=["npz", "csv"], help="dataset container")
    p.add_argument("--traces", action="store_true", help="also store full true-state traces")

    p = sub.add_parser("filter", help="Bayesian trajectories for records")
    _common(p)
    p.add_argument("input", type=Path, help="dataset (.npz/.csv) or single record (.csv)")
    p.add_argument("--quadrature", choices=["z", "phi"], help="quadrature of a bare record file")
    p.add_argument("--split", action="store_true", help="one table per record")

    p = sub.add_parser("reconstruct", help="ensemble-reconstructed trajectory vs the filter")
    _common(p)
    p.add_argument("dataset", type=Path)
    p.add_argument("--reference", type=Path, help="reference record file")
    p.add_argument("--reference-seed", type=int, help="simulate a fresh reference with this seed")
    p.add_argument("--epsilon", type=float, help="fixed matching half-width (voltage units)")
    p.add_argument("--min-count", type=int, default=DEFAULT_MIN_COUNT)

    p = sub.add_parser("correlate", help="binned tomography vs integrated signal")
    _common(p)
    p.add_argument("dataset", type=Path)
    p.add_argument("--bins", type=int, default=checks.N_BINS)
    p.add_argument("--tau", type=float, help="readout time to use when the dataset has several")

    p = sub.add_parser("check", help="run the acceptance suite")
    p.add_argument("--seed", type=int, default=0, help="base seed of the suite")
    p.add_argument("--only", type=int, nargs="+", help="criterion numbers to run")
    p.add_argument("--scale", type=float, default=1.0, help="shrink repetition counts (smoke runs only)")
    p.add_argument("--out", type=Path, help="write a JSON report here")
    return parser


def _run_config(args) -> RunConfig:
    config = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "out", None) is not None:
        config.out = str(args.out)
    if getattr(args, "reps", None) is not None:
        config.plan.repetitions = args.reps
    if getattr(args, "quadrature", None):
        config.measurement.quadrature = args.quadrature
    if getattr(args, "tau", None) is not None and args.command != "correlate":
        config.measurement.duration_us = args.tau * 1e6
    if getattr(args, "nbar", None) is not None:
        config.params.nbar = args.nbar
    if getattr(args, "eta", None) is not None:
        config.params.eta = args.eta
    if getattr(args, "t2_star_us", None) is not None:
        config.params.t2_star_us = args.t2_star_us
    if getattr(args, "format", None):
        config.format = args.format
    return config


def _claim(path: Path, overwrite: bool) -> Path:
    if path.exists() and not overwrite:
        raise UsageError(f"{path} exists; pass --overwrite to replace it")
    return path


def _out_dir(config: RunConfig) -> Path:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_calibrate(args) -> int:
    config = _run_config(args)
    params = config.physical_params()
    tau = args.tau if args.tau is not None else config.measurement.duration_us * 1e-6
    report = calibrate(params, tau, config.measurement.delta_v)
    out = _claim(_out_dir(config) / "calibration.json", args.overwrite)
    body = run_header(config, "calibration", "tau s; gamma 1/s; sigma voltage units; phase rad")
    body["report"] = report.as_dict()
    out.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    print(f"S = {report.s:.4f}  gamma = {report.gamma:.4e} /s  gamma*tau = {report.gamma * tau:.4f}  "
          f"sigma = {report.sigma:.4f}  4chi/kappa = {report.phase_per_photon:.4f} rad")
    print(f"identity gamma_meas*tau = S(1-eta)/(8 eta): gap {report.identity_gap:.2e}")
    return 0


def cmd_simulate(args) -> int:
    config = _run_config(args)
    params = config.physical_params()
    mconfig = config.measurement_config()
    plan = config.experiment_plan()
    out = _out_dir(config)
    suffix = ".npz" if config.format == "npz" else ".csv"
    targets = {"dataset": out / f"dataset{suffix}", "manifest": out / "manifest.json"}
    if args.traces:
        targets["traces"] = out / "traces.npz"
    for path in targets.values():
        _claim(path, args.overwrite)

    ds = run_experiment(plan, params, mconfig, config.seed, keep_traces=args.traces)
    header = run_header(config, "dataset", "times s; voltages in delta_v units")
    write_dataset(targets["dataset"], ds, header)
    files = {"dataset": targets["dataset"]}
    if args.traces:
        np.savez_compressed(targets["traces"], true_traces=ds.true_traces)
        files["traces"] = targets["traces"]
    write_manifest(targets["manifest"], config, files)
    log.info("wrote %d repetitions to %s", len(ds), targets["dataset"])
    print(f"{len(ds)} repetitions ({mconfig.quadrature.value}) -> {targets['dataset']}")
    return 0


def _load_input(path: Path):
    if not path.exists():
        raise UsageError(f"{path} does not exist")
    if path.suffix == ".csv":
        header, _ = read_table(path)
        if header.get("kind") == "record":
            return read_record(path)
    return read_dataset(path)


def _trajectory_rows(traj, record_id: int) -> dict:
    n = len(traj.times) - 1
    return {
        "record": np.full(n, record_id, dtype=np.int64),
        "tau": traj.times[1:],
        "x": traj.x[1:],
        "y": traj.y[1:],
        "z": traj.z[1:],
        "purity": traj.purity[1:],
        "v_m": traj.integrated[1:],
    }


def cmd_filter(args) -> int:
    config = _run_config(args)
    header, data = _load_input(args.input)
    out = _out_dir(config)
    units = "tau s; v_m voltage units; x y z dimensionless"
    src = {k: header[k] for k in ("config_hash", "seed") if k in header}

    if isinstance(data, EnsembleDataset):
        params, mconfig, ds = data.params, data.config, data
        records = range(len(ds))
    else:
        params, mconfig = config.physical_params(), config.measurement_config()
        if data.quadrature is not mconfig.quadrature:
            raise UsageError(
                f"record is {data.quadrature.value}-quadrature but the config says {mconfig.quadrature.value}"
            )
        ds, records = None, [0]

    def one(i):
        record = ds.record(i) if ds is not None else data
        return _trajectory_rows(trajectory(record, params, mconfig), i)

    out_header = dict(run_header(None, "trajectory", units), **src)
    if args.split:
        for i in records:
            write_table(_claim(out / f"trajectory_{i}.csv", args.overwrite), one(i), out_header)
    else:
        target = _claim(out / "trajectories.csv", args.overwrite)
        if ds is not None and len(ds) and len(np.unique(ds.n_steps)) == 1:
            # one vectorised pass for equal-length records
            est = batch_trajectories(ds.integrated, params, mconfig)
            n, k = est.shape[:2]
            cols = {
                "record": np.repeat(np.arange(n), k),
                "tau": np.tile(ds.times, n),
                "x": est[..., 0].ravel(),
                "y": est[..., 1].ravel(),
                "z": est[..., 2].ravel(),
                "purity": np.sum(est**2, axis=-1).ravel(),
                "v_m": ds.integrated.ravel(),
            }
        else:
            parts = [one(i) for i in records]
            names = ["record", "tau", "x", "y", "z", "purity", "v_m"]
            cols = {n: np.concatenate([p[n] for p in parts]) if parts else np.empty(0) for n in names}
            if not parts:
                cols["record"] = np.empty(0, dtype=np.int64)
        write_table(target, cols, out_header)
    print(f"filtered {len(records)} record(s) -> {out}")
    return 0


def cmd_reconstruct(args) -> int:
    config = _run_config(args)
    header, ds = read_dataset(args.dataset)
    out = _out_dir(config)
    targets = [out / n for n in ("reconstruction.csv", "comparison.json", "reference_record.csv")]
    for t in targets:
        _claim(t, args.overwrite)
    if args.reference:
        _, record = read_record(args.reference)
    else:
        seed = args.reference_seed if args.reference_seed is not None else ds.master_seed + 1
        record, _ = simulate_record(ds.params, ds.config, (seed, 0))
    if record.quadrature is not ds.config.quadrature:
        raise UsageError("reference record and dataset use different quadratures")
    try:
        recon = reconstruct_trajectory(ds, record, epsilon=args.epsilon, min_count=args.min_count)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    filt = trajectory(record, ds.params, ds.config)
    report = compare(filt, recon)

    idx = np.searchsorted(filt.times, recon.times)
    cols = {"tau": recon.times, "target_v": recon.target_v, "epsilon": recon.epsilon}
    for a, name in enumerate("xyz"):
        cols[f"n_{name}"] = recon.counts[:, a]
    for a, name in enumerate("xyz"):
        cols[f"recon_{name}"] = recon.means[:, a]
        cols[f"se_{name}"] = recon.se[:, a]
        cols[f"filter_{name}"] = filt.bloch[idx, a]
    cols["ok"] = recon.ok.astype(np.int64)
    src = {k: header[k] for k in ("config_hash", "seed") if k in header}
    units = "tau s; target_v and epsilon voltage units"
    write_table(targets[0], cols, dict(run_header(None, "reconstruction", units), **src))
    body = dict(run_header(None, "comparison", "dimensionless"), **src)
    body["report"] = report.as_dict()
    targets[1].write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    write_record(targets[2], record, dict(run_header(None, "record", "tau s; v voltage units"), **src))
    print(json.dumps(report.as_dict(), indent=2))
    return 0


def cmd_correlate(args) -> int:
    config = _run_config(args)
    header, ds = read_dataset(args.dataset)
    out = _out_dir(config)
    target = _claim(out / "correlation.csv", args.overwrite)
    try:
        table = correlation_curves(ds, args.bins, tau=args.tau)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    src = {k: header[k] for k in ("config_hash", "seed") if k in header}
    extra = dict(quadrature=table.quadrature, tau=table.tau, S=table.s, gamma_tau=table.gamma_tau)
    write_table(target, table.columns(), dict(run_header(None, "correlation", "v voltage units", **extra), **src))
    ok = table.qualifying()
    print(f"{ok.sum()} of {len(ok)} bins have >= {DEFAULT_MIN_COUNT} outcomes per axis -> {target}")
    return 0


def cmd_check(args) -> int:
    results = checks.run_all(base_seed=args.seed, scale=args.scale, only=args.only)
    if args.scale != 1.0:
        print(f"note: repetition counts scaled by {args.scale}; this is not the acceptance run")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps([
            {"criterion": r.index, "title": r.title, "passed": r.passed, "details": r.details,
             "metrics": r.metrics, "seconds": r.seconds}
            for r in results
        ], indent=2) + "\n")
    failed = [r.index for r in results if not r.passed]
    print("all criteria passed" if not failed else f"failed: {failed}")
    return 1 if failed else 0


COMMANDS = {
    "calibrate": cmd_calibrate,
    "simulate": cmd_simulate,
    "filter": cmd_filter,
    "reconstruct": cmd_reconstruct,
    "correlate": cmd_correlate,
    "check": cmd_check,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    logging.captureWarnings(True)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ValueError, KeyError, OSError) as exc:
        print(f"weaktraj {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
