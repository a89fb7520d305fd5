"""Batch command-line pipeline.

Subcommands: partition | build | patterns | fit | predict | eval | synth |
report. Configuration comes from --config (or FLOWCAST_CONFIG), with flags
overriding file values. Exit codes: 0 success, 2 configuration error, 3 data
error, 4 convergence failure.
"""

from __future__ import annotations

import argparse
import sys
from datetime import timedelta
from pathlib import Path

import numpy as np

from . import container, forecast as fc, metrics, patterns, reconstruction as rc, report, synth
from .config import PipelineConfig, load_config
from .errors import ConfigError, ConvergenceError, DataError, FlowcastError
from .geo import PartitionParams, build_region_map, load_region_map, save_region_map
from .tensor import (FragmentSpec, FlowTensor, FragmentIndex, build_tensor, floor_hour,
                     format_rfc3339, load_tensor, parse_rfc3339, read_calendar_csv,
                     read_trips_csv, save_tensor)


def _admm_params(cfg: PipelineConfig) -> patterns.AdmmParams:
    s = cfg.ssc
    return patterns.AdmmParams(tau=s.tau, mu=s.mu, max_iter=s.max_iter, tol=s.tol,
                               recon_tol=s.recon_tol, normalize=s.normalize)


def _objective_params(cfg: PipelineConfig) -> rc.ObjectiveParams:
    r = cfg.recon
    return rc.ObjectiveParams(lam=r.lam, gamma=r.gamma, sigma=r.sigma, eta=r.eta,
                              theta=r.theta, eps_pos=r.eps_pos,
                              include_zero_cells=r.include_zero_cells)


def _pg_options(cfg: PipelineConfig) -> rc.PgOptions:
    r = cfg.recon
    return rc.PgOptions(max_sweeps=r.max_sweeps, rel_tol=r.rel_tol, loss=r.loss,
                        alt_max_iter=r.alt_max_iter, alt_rel_tol=r.alt_rel_tol,
                        basis_steps=r.basis_steps)


def _fragment_meta(fragments: list[FragmentIndex]) -> list[dict]:
    return [{"n": f.n, "start": format_rfc3339(f.start), "duration": f.duration,
             "day_type": f.day_type} for f in fragments]


def _fragments_from_meta(entries: list[dict]) -> list[FragmentIndex]:
    return [FragmentIndex(n=e["n"], start=parse_rfc3339(e["start"]),
                          duration=int(e.get("duration", 3600)), day_type=e["day_type"])
            for e in entries]


def cmd_partition(args, cfg: PipelineConfig) -> int:
    trips = read_trips_csv(args.trips)
    points = [t.pickup for t in trips] + [t.dropoff for t in trips]
    params = PartitionParams(epsilon=cfg.partition.epsilon, min_pts=cfg.partition.min_pts)
    region_map = build_region_map(points, params, assign_radius=cfg.partition.assign_radius)
    if region_map.m == 0:
        raise DataError("no regions found; lower min_pts or raise epsilon")
    save_region_map(region_map, args.output, include_members=cfg.partition.include_members)
    print(f"partition: {len(points)} points -> {region_map.m} regions "
          f"(epsilon={params.epsilon} m, min_pts={params.min_pts}) -> {args.output}")
    return 0


def cmd_build(args, cfg: PipelineConfig) -> int:
    trips = read_trips_csv(args.trips)
    region_map = load_region_map(args.regions)
    calendar = read_calendar_csv(args.calendar)
    if args.start and args.end:
        start, end = parse_rfc3339(args.start), parse_rfc3339(args.end)
    elif trips:
        times = [t.pickup_time for t in trips]
        start, end = floor_hour(min(times)), max(times) + timedelta(seconds=1)
    else:
        raise DataError("no trips and no explicit --start/--end window")
    spec = FragmentSpec(start=start, end=end, calendar=calendar)
    tensor, discard = build_tensor(trips, region_map, spec, threads=cfg.threads)
    save_tensor(tensor, args.output, discard=discard)
    print(f"build: {discard.kept}/{discard.total} trips kept "
          f"(out_of_window={discard.out_of_window}, "
          f"unassigned={discard.unassigned_pickup + discard.unassigned_dropoff}); "
          f"tensor N={tensor.n}, M={tensor.m} -> {args.output}")
    return 0


def cmd_patterns(args, cfg: PipelineConfig) -> int:
    tensor = load_tensor(args.tensor)
    basis_set, coeffs = patterns.extract_patterns(
        tensor, cfg.patterns.n_bases, params=_admm_params(cfg), seed=cfg.seed,
        restarts=cfg.patterns.restarts)
    container.write_matrices(args.output, basis_set.bases)
    meta = {
        "kind": "bases",
        "c": basis_set.c,
        "m": tensor.m,
        "labels": basis_set.labels.tolist(),
        "masses": basis_set.masses.tolist(),
        "solver": {"iterations": coeffs.iterations,
                   "primal_residual": coeffs.primal_residual,
                   "dual_residual": coeffs.dual_residual,
                   "converged": coeffs.converged},
        "config_fingerprint": cfg.fingerprint(),
    }
    if args.regions:
        region_map = load_region_map(args.regions)
        meta["distance_histogram"] = patterns.distance_histogram(
            basis_set, region_map, bin_width_m=cfg.patterns.hist_bin_m)
    container.write_meta(args.output, meta)
    print(f"patterns: {basis_set.c} bases from N={tensor.n} fragments -> {args.output}")
    return 0


def cmd_fit(args, cfg: PipelineConfig) -> int:
    tensor = load_tensor(args.tensor)
    params = _objective_params(cfg)
    options = _pg_options(cfg)
    if args.mode == "ibfp":
        if not args.bases:
            raise ConfigError("--mode ibfp requires --bases")
        bases = container.read_matrices(args.bases)
        bases_meta = container.read_meta(args.bases)
        coeffs, state = rc.fit_coefficients(tensor, bases, params, options)
        labels = bases_meta.get("labels", [])
    else:
        basis_set, coeffs, state = rc.fit_alternating(
            tensor, params, cfg.patterns.n_bases, options, seed=cfg.seed)
        bases = basis_set.bases
        labels = basis_set.labels.tolist()

    container.write_blocks(args.output, [bases, coeffs.s[None, :, :]])
    container.write_meta(args.output, {
        "kind": "model",
        "mode": args.mode,
        "m": tensor.m,
        "c": int(bases.shape[0]),
        "loss": options.loss,
        "labels": labels,
        "fragments": _fragment_meta(coeffs.fragments),
        "trace": [float(v) for v in state.trace],
        "sweeps": state.sweeps,
        "converged": state.converged,
        "config_fingerprint": cfg.fingerprint(),
    })
    if not state.converged:
        raise ConvergenceError(f"{args.mode} fit did not reach tolerance; "
                               f"model written to {args.output}")
    print(f"fit[{args.mode}]: objective {state.trace[0]:.6g} -> {state.trace[-1]:.6g} "
          f"in {state.sweeps} sweeps -> {args.output}")
    return 0


def cmd_predict(args, cfg: PipelineConfig) -> int:
    blocks = container.read_blocks(args.model)
    if len(blocks) != 2:
        raise DataError(f"{args.model}: expected basis and coefficient blocks")
    bases, s_block = blocks[0], blocks[1][0]
    meta = container.read_meta(args.model)
    fragments = _fragments_from_meta(meta["fragments"])
    coeffs = rc.CoefficientMatrix(s=s_block, fragments=fragments)

    calendar = read_calendar_csv(args.calendar) if args.calendar else {}
    start = parse_rfc3339(args.start) if args.start \
        else fragments[-1].start + timedelta(hours=1)
    day_type = calendar.get(start.date()) if calendar else None

    model = fc.build_transition_model(coeffs, start, cfg.forecast.p, cfg.forecast.q,
                                      day_type=day_type)
    result = fc.predict_horizon(model, coeffs, start, cfg.forecast.horizon, bases,
                                calendar=calendar)

    container.write_matrices(args.output, result.matrices)
    container.write_meta(args.output, {
        "kind": "forecast",
        "model": meta.get("mode", "model"),
        "m": int(bases.shape[1]),
        "horizon": result.horizon,
        "fragments": _fragment_meta(result.fragments),
        "rows": result.rows.tolist(),
        "transitions": {"p": model.p, "q": model.q,
                        "degenerate_pairs": model.degenerate_pairs},
        "notes": result.warnings,
        "config_fingerprint": cfg.fingerprint(),
    })
    csv_path = Path(args.output).with_suffix(".csv")
    _write_forecast_csv(result, csv_path)
    print(f"predict: {result.horizon + 1} fragments from {format_rfc3339(start)} "
          f"-> {args.output}, {csv_path}")
    return 0


def _write_forecast_csv(result: fc.Forecast, path: Path) -> None:
    import csv as _csv
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["fragment_start", "region", "outflow", "inflow"])
        for k, frag in enumerate(result.fragments):
            for region in range(result.outflow.shape[1]):
                writer.writerow([format_rfc3339(frag.start), region,
                                 repr(float(result.outflow[k, region])),
                                 repr(float(result.inflow[k, region]))])


def _tensor_from_forecast(path: str | Path) -> FlowTensor:
    matrices = container.read_matrices(path)
    meta = container.read_meta(path)
    return FlowTensor(fragments=_fragments_from_meta(meta["fragments"]),
                      matrices=matrices, m=int(meta["m"]))


def cmd_eval(args, cfg: PipelineConfig) -> int:
    predicted = _tensor_from_forecast(args.forecast)
    truth_full = load_tensor(args.truth)
    truth_index = {f.start: i for i, f in enumerate(truth_full.fragments)}
    missing = [f for f in predicted.fragments if f.start not in truth_index]
    if missing:
        raise DataError(f"alignment failure: {len(missing)} forecast fragments missing "
                        f"from truth (first: {format_rfc3339(missing[0].start)})")
    truth = truth_full.subset([truth_index[f.start] for f in predicted.fragments])

    name = container.read_meta(args.forecast).get("model", "model")
    models = {name: predicted.matrices}
    if args.train:
        train = load_tensor(args.train)
        ha_pred, flags = metrics.ha_baseline(train, truth.fragments)
        models["ha"] = ha_pred
        for flag in flags:
            print(f"eval: ha fallback: {flag}", file=sys.stderr)

    csv_path = Path(str(args.output) + ".csv")
    json_path = Path(str(args.output) + ".json")
    reports = metrics.compare(models, truth, nonzero_only=cfg.eval.nonzero_only,
                              config_fingerprint=cfg.fingerprint(),
                              csv_path=csv_path, json_path=json_path)
    for rep in reports:
        print(f"eval[{rep.model}]: MAE={rep.mae:.6g} RMSE={rep.rmse:.6g}")
    print(f"eval: wrote {csv_path}, {json_path}")
    return 0


def cmd_synth(args, cfg: PipelineConfig) -> int:
    data = synth.generate(cfg.synth, cfg.seed)
    paths = synth.write_dataset(data, args.output, cfg.synth, cfg.seed)
    n_trips = len(data.trips)
    print(f"synth: {n_trips} trips over {cfg.synth.days} days, "
          f"M={cfg.synth.m_regions}, C={cfg.synth.n_bases} -> {paths['trips'].parent}")
    return 0


def cmd_report(args, cfg: PipelineConfig) -> int:
    wrote = []
    if args.eval:
        wrote += report.render_error_curves(args.eval, args.output)
    if args.bases:
        wrote += report.render_basis_report(args.bases, args.output)
    if not wrote:
        raise ConfigError("report: provide --eval and/or --bases")
    print("report: wrote " + ", ".join(str(p) for p in wrote))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="path to JSON config "
                        "(default: $FLOWCAST_CONFIG, else built-in defaults)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="override config seed")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="cap worker threads")

    parser = argparse.ArgumentParser(
        prog="flowcast", parents=[common],
        description="Region flow forecasting pipeline over trip records.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_command(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    p = add_command("partition", help="cluster trip endpoints into regions")
    p.add_argument("trips")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--epsilon", type=float, help="DBSCAN radius in metres")
    p.add_argument("--min-pts", type=int, help="DBSCAN core threshold")
    p.add_argument("--assign-radius", type=float)
    p.add_argument("--include-members", action="store_true",
                   help="persist member points in the region JSON")
    p.set_defaults(func=cmd_partition)

    p = add_command("build", help="bin trips into an hourly flow tensor")
    p.add_argument("trips")
    p.add_argument("regions")
    p.add_argument("calendar")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--start", help="window start (RFC 3339), default: first trip")
    p.add_argument("--end", help="window end (RFC 3339), default: last trip")
    p.set_defaults(func=cmd_build)

    p = add_command("patterns", help="extract base matrices from a tensor")
    p.add_argument("tensor")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--n-bases", type=int)
    p.add_argument("--regions", help="region JSON for the distance histogram")
    p.set_defaults(func=cmd_patterns)

    p = add_command("fit", help="fit reconstruction coefficients")
    p.add_argument("tensor")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--mode", choices=["ibfp", "rbfp"], default="ibfp",
                   help="ibfp: fixed extracted bases; rbfp: learn bases too")
    p.add_argument("--bases", help="bases container (required for ibfp)")
    p.add_argument("--lambda", dest="lam", type=float, help="l1 weight")
    p.add_argument("--gamma", type=float, help="graph smoothing weight")
    p.add_argument("--loss", choices=["poisson", "frobenius"])
    p.set_defaults(func=cmd_fit)

    p = add_command("predict", help="forecast future flow matrices")
    p.add_argument("model")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--from", dest="start",
                   help="first forecast fragment (RFC 3339), default: after history")
    p.add_argument("--horizon", type=int, help="steps beyond the first fragment")
    p.add_argument("--calendar", help="calendar CSV for future day types")
    p.add_argument("--p", type=int, help="precedent transitions averaged")
    p.add_argument("--q", type=int, help="periodic transitions averaged")
    p.set_defaults(func=cmd_predict)

    p = add_command("eval", help="score a forecast against a truth tensor")
    p.add_argument("forecast")
    p.add_argument("truth")
    p.add_argument("-o", "--output", required=True,
                   help="report path prefix (.csv and .json are appended)")
    p.add_argument("--train", help="training tensor; adds the historical-average baseline")
    p.add_argument("--nonzero-only", action="store_true",
                   help="average errors over nonzero truth entries only")
    p.set_defaults(func=cmd_eval)

    p = add_command("synth", help="generate a synthetic dataset with ground truth")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = add_command("report", help="render figures from reports and bases")
    p.add_argument("--eval", help="evaluation report CSV")
    p.add_argument("--bases", help="bases container")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=cmd_report)
    return parser


def _apply_overrides(args, cfg: PipelineConfig) -> None:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "threads", None) is not None:
        cfg.threads = args.threads
    for flag, section, attr in [
        ("epsilon", "partition", "epsilon"),
        ("min_pts", "partition", "min_pts"),
        ("assign_radius", "partition", "assign_radius"),
        ("include_members", "partition", "include_members"),
        ("n_bases", "patterns", "n_bases"),
        ("lam", "recon", "lam"),
        ("gamma", "recon", "gamma"),
        ("loss", "recon", "loss"),
        ("horizon", "forecast", "horizon"),
        ("p", "forecast", "p"),
        ("q", "forecast", "q"),
        ("nonzero_only", "eval", "nonzero_only"),
    ]:
        value = getattr(args, flag, None)
        if value is not None and value is not False:
            setattr(getattr(cfg, section), attr, value)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        _apply_overrides(args, cfg)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except FlowcastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
