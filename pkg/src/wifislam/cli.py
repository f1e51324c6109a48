"""Experiment runner: dataset generation, single runs, parameter sweeps,
similarity curves, and localization CDFs.

Exit codes: 0 success, 2 usage/config error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from itertools import product
from pathlib import Path

from . import evaluation, gating, simworld
from .gating import BadDataset, PolicyParams, RgbdParams, RtabParams, run_pipeline, save_run
from .signature import NoSignatures

USAGE_ERROR = 2
DATA_ERROR = 3


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _world_config(name_or_path: str) -> simworld.WorldConfig:
    presets = simworld.preset_worlds()
    if name_or_path in presets:
        return presets[name_or_path]
    p = Path(name_or_path)
    if p.exists() and p.suffix == ".json":
        with open(p) as fh:
            return _config_from_json(json.load(fh))
    raise CliError(
        f"unknown world {name_or_path!r}; valid presets: {', '.join(sorted(presets))}",
        USAGE_ERROR,
    )


def _config_from_json(wj: dict) -> simworld.WorldConfig:
    return simworld.WorldConfig(
        name=wj["name"],
        trajectory=simworld.TrajectorySpec(**wj["trajectory"]),
        template_of={int(k): v for k, v in wj["template_of"].items()},
        ap_count=wj["ap_count"],
        tx_power_at_1m=wj.get("tx_power_at_1m", -30.0),
        propagation=simworld.PropagationParams(**wj.get("propagation", {})),
        extra_walls=tuple(simworld.Wall(*w) for w in wj.get("walls", [])),
        margin=wj.get("margin", 4.0),
        odom_noise=simworld.OdomNoise(**wj.get("odom_noise", {})),
        appearance=simworld.AppearanceModel(**wj.get("appearance", {})),
        scans_per_dwell=wj.get("scans_per_dwell", 5),
        bssids_per_ap=wj.get("bssids_per_ap", 2),
    )


def _parse_threshold(text: str) -> float:
    if text.strip().lower() in ("inf", "infinity"):
        return math.inf
    return float(text)


def _params_from_args(args: argparse.Namespace) -> PolicyParams:
    base: dict = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            base = json.load(fh)
    rgbd = dict(base.pop("rgbd", {}))
    rtab = dict(base.pop("rtab", {}))
    if isinstance(rtab.get("real_time_threshold"), str):
        rtab["real_time_threshold"] = _parse_threshold(rtab["real_time_threshold"])
    for flag, key in [
        ("policy", "policy"),
        ("gated", "gated"),
        ("min_matches", "min_matches"),
        ("inlier_distance", "inlier_distance"),
        ("wifi_threshold", "wifi_threshold"),
        ("seed", "seed"),
    ]:
        v = getattr(args, flag, None)
        if v is not None:
            base[key] = v
    if getattr(args, "real_time_threshold", None) is not None:
        rtab["real_time_threshold"] = _parse_threshold(args.real_time_threshold)
    try:
        return PolicyParams(rgbd=RgbdParams(**rgbd), rtab=RtabParams(**rtab), **base)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad run configuration: {exc}", USAGE_ERROR) from exc


def _bool_flag(text: str) -> bool:
    if text.lower() in ("true", "1", "yes"):
        return True
    if text.lower() in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def cmd_gen(args: argparse.Namespace) -> int:
    config = _world_config(args.world)
    dataset = simworld.synthesize(config, args.seed)
    out = simworld.save_dataset(dataset, args.out)
    n_dwells = len(dataset.dwell_scans)
    print(
        f"wrote {out}: frames={len(dataset.frames)} dwells={n_dwells} "
        f"aps={len(dataset.world.aps)} gt_loop_pairs={len(dataset.gt_loop_pairs)}"
    )
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    params = _params_from_args(args)
    try:
        dataset = simworld.load_dataset(args.dataset)
        record = run_pipeline(dataset, params)
    except (BadDataset, NoSignatures, simworld.BadWorld, FileNotFoundError) as exc:
        raise CliError(f"bad dataset: {exc}", DATA_ERROR) from exc
    out = save_run(record, args.out)
    row = evaluation.report_row(record, dataset, match_radius=args.match_radius)
    evaluation.write_report(out / "report_row.csv", [row])
    print(
        f"wrote {out}: rmse_m={row['rmse_m']} fp={row['fp']} fn={row['fn']} "
        f"loop_cost={row['loop_cost']} overhead_cost={row['overhead_cost']}"
    )
    return 0


def _sweep_cell(dataset_dir: str, params_json: dict, match_radius: int) -> dict:
    dataset = simworld.load_dataset(dataset_dir)
    params = gating.params_from_json(params_json)
    record = run_pipeline(dataset, params)
    return evaluation.report_row(record, dataset, match_radius=match_radius)


def cmd_sweep(args: argparse.Namespace) -> int:
    try:
        with open(args.grid) as fh:
            grid = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"malformed grid file: {exc}", USAGE_ERROR) from exc
    if not isinstance(grid, dict) or not grid:
        raise CliError("grid must be a non-empty JSON object of lists", USAGE_ERROR)
    axes = {k: v if isinstance(v, list) else [v] for k, v in grid.items()}
    cells = []
    for combo in product(*axes.values()):
        cell = dict(zip(axes.keys(), combo))
        rtab = {}
        if "real_time_threshold" in cell:
            v = cell.pop("real_time_threshold")
            rtab["real_time_threshold"] = _parse_threshold(str(v))
        base = {**cell}
        try:
            params = PolicyParams(rtab=RtabParams(**rtab), **base)
        except (TypeError, ValueError) as exc:
            raise CliError(f"bad grid cell {cell}: {exc}", USAGE_ERROR) from exc
        cells.append(params)

    out_path = Path(args.out)
    existing = evaluation.read_report(out_path)
    have = {evaluation.row_key(r) for r in existing}
    dataset_name = simworld.load_dataset(args.dataset).name
    pending = []
    for p in cells:
        key = (
            dataset_name,
            p.policy,
            str(p.gated).lower(),
            str(p.seed),
            str(p.min_matches),
            repr(float(p.inlier_distance)),
            repr(float(p.wifi_threshold)),
            "inf" if math.isinf(p.rtab.real_time_threshold) else repr(float(p.rtab.real_time_threshold)),
        )
        if key not in have:
            pending.append(p)

    rows = list(existing)
    if pending:
        jobs = args.jobs or os.cpu_count() or 1
        payloads = [(args.dataset, gating.params_to_json(p), args.match_radius) for p in pending]
        if jobs == 1:
            results = [_sweep_cell(*pl) for pl in payloads]
        else:
            with ProcessPoolExecutor(max_workers=jobs) as ex:
                results = list(ex.map(_sweep_cell, *zip(*payloads)))
        rows.extend(results)
    rows.sort(key=evaluation.row_key)
    evaluation.write_report(out_path, rows)
    print(f"wrote {out_path}: {len(rows)} rows ({len(pending)} computed, {len(have)} reused)")
    return 0


def cmd_curve(args: argparse.Namespace) -> int:
    try:
        dataset = simworld.load_dataset(args.dataset)
        sigs = gating.build_signatures(dataset)
        points, rho = evaluation.similarity_distance_curve(dataset, sigs)
    except (ValueError, FileNotFoundError) as exc:
        raise CliError(f"bad dataset: {exc}", DATA_ERROR) from exc
    evaluation.write_similarity_curve_csv(args.out, points, rho)
    print(f"wrote {args.out}: {len(points)} dwell pairs, spearman_rho={rho!r}")
    return 0


def cmd_localize(args: argparse.Namespace) -> int:
    try:
        dataset = simworld.load_dataset(args.dataset)
        curve, fallbacks, n_map, n_query = evaluation.localize_dataset(
            dataset, split=args.split, threshold=args.wifi_threshold
        )
    except (evaluation.EmptyMap, NoSignatures, FileNotFoundError, simworld.BadWorld) as exc:
        raise CliError(f"bad dataset: {exc}", DATA_ERROR) from exc
    evaluation.write_cdf_csv(args.out, curve, fallbacks)
    print(
        f"wrote {args.out}: map={n_map} query={n_query} fallbacks={fallbacks} "
        f"within_4m={curve.fraction_within(4.0)!r}"
    )
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    rows = []
    for root in args.runs:
        for p in sorted(Path(root).rglob("report_row.csv")):
            rows.extend(evaluation.read_report(p))
    rows.sort(key=evaluation.row_key)
    evaluation.write_report(args.out, rows)
    print(f"wrote {args.out}: {len(rows)} rows")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wifislam", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a dataset from a preset or world.json")
    g.add_argument("--world", required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    r = sub.add_parser("run", help="run one pipeline configuration on a dataset")
    r.add_argument("--dataset", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--config", help="JSON file of run parameters; flags override")
    r.add_argument("--policy", choices=gating.POLICIES)
    r.add_argument("--gated", type=_bool_flag)
    r.add_argument("--min-matches", dest="min_matches", type=int)
    r.add_argument("--inlier-distance", dest="inlier_distance", type=float)
    r.add_argument("--wifi-threshold", dest="wifi_threshold", type=float)
    r.add_argument("--real-time-threshold", dest="real_time_threshold")
    r.add_argument("--seed", type=int)
    r.add_argument("--match-radius", dest="match_radius", type=int, default=5)
    r.set_defaults(fn=cmd_run)

    s = sub.add_parser("sweep", help="run a Cartesian parameter grid; resumable")
    s.add_argument("--dataset", required=True)
    s.add_argument("--grid", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=0, help="worker processes (default: cpu count)")
    s.add_argument("--match-radius", dest="match_radius", type=int, default=5)
    s.set_defaults(fn=cmd_sweep)

    c = sub.add_parser("curve", help="similarity-vs-distance curve over dwell pairs")
    c.add_argument("--dataset", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_curve)

    l = sub.add_parser("localize", help="cluster-gated map-image localization CDF")
    l.add_argument("--dataset", required=True)
    l.add_argument("--out", required=True)
    l.add_argument("--split", type=float, default=0.4)
    l.add_argument("--wifi-threshold", dest="wifi_threshold", type=float, default=0.85)
    l.set_defaults(fn=cmd_localize)

    rep = sub.add_parser("report", help="consolidate report rows from run directories")
    rep.add_argument("--runs", nargs="+", required=True)
    rep.add_argument("--out", required=True)
    rep.set_defaults(fn=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except BadDataset as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_ERROR


if __name__ == "__main__":
    sys.exit(main())
