"""Command-line experiment runner.

    fedpc run experiment.yaml [--seed N] [--workers N] [--out DIR] [--mu 0] [--set key=value]
    fedpc replay runs/fedpc/seed-0/manifest.json
    fedpc compare runs/fedpc/seed-0/metrics.json runs/fedavg/seed-0/metrics.json [--csv out.csv]
    fedpc gen-data [experiment.yaml] --out federation.csv
    fedpc validate experiment.yaml
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .algorithms import RunResult, run
from .config import (
    ConfigError,
    ConfigErrors,
    Experiment,
    NamedRun,
    config_hash,
    load_experiment_dict,
    parse_override,
    resolve_experiment,
    run_config_from_dict,
    run_config_to_dict,
)
from .data import FederationConfig, export_feature_table, generate_federation
from .evaluation import SCHEMA_VERSION
from .errors import FedPCError

log = logging.getLogger("fedpc")

OUTPUT_FILES = ("metrics.json", "metrics.csv", "ledger.csv", "schedule.csv")

# Flag name -> run field; each takes a scalar value.
FIELD_FLAGS = {
    "algorithm": "algorithm",
    "rounds": "rounds",
    "epochs": "local_epochs",
    "batch_size": "batch_size",
    "mu": "mu",
    "weight_decay": "weight_decay",
    "lr": "lr",
    "lr_decay": "lr_decay",
    "frozen_layers": "frozen_layers",
    "personalization_steps": "personalization_steps",
    "personalization_lr": "personalization_lr",
    "metric_ii_mode": "metric_ii_mode",
}


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def render_outputs(result: RunResult) -> dict[str, bytes]:
    report = result.report
    schedule = result.schedule.to_csv() if result.schedule else "round,step,sender,receiver\n"
    return {
        "metrics.json": report.to_json().encode(),
        "metrics.csv": report.to_csv().encode(),
        "ledger.csv": report.ledger.to_csv().encode(),
        "schedule.csv": schedule.encode(),
    }


def build_manifest(name: str, cfg_dict: dict, outputs: dict[str, bytes]) -> dict:
    return {
        "name": name,
        "fedpc_version": __version__,
        "config": cfg_dict,
        "config_hash": config_hash(cfg_dict),
        "outputs": {k: _sha256(v) for k, v in sorted(outputs.items())},
    }


def run_dir(root: Path, named: NamedRun) -> Path:
    return root / named.name / f"seed-{named.seed}"


def execute(named: NamedRun, root: Path) -> Path:
    """Run one (config, seed) pair and write its artifacts."""
    result = run(named.config)
    outputs = render_outputs(result)
    cfg_dict = run_config_to_dict(named.config)
    target = run_dir(root, named)
    target.mkdir(parents=True, exist_ok=True)
    for fname, data in outputs.items():
        (target / fname).write_bytes(data)
    manifest = build_manifest(named.name, cfg_dict, outputs)
    (target / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    unvisited = result.unvisited
    if unvisited:
        log.warning("%s seed %d: %d client(s) never visited: %s",
                    named.name, named.seed, len(unvisited), unvisited)
    return target


def _execute_safe(named: NamedRun, root: Path) -> tuple[str, str | None]:
    try:
        return str(execute(named, root)), None
    except Exception as exc:  # noqa: BLE001 -- a sweep reports every failure and carries on
        return "", f"{type(exc).__name__}: {exc}"


def _collect_overrides(args) -> dict:
    overrides = {}
    for flag, fieldname in FIELD_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[fieldname] = value
    if getattr(args, "hidden", None) is not None:
        overrides["hidden"] = args.hidden
    for item in getattr(args, "set", None) or []:
        key, value = parse_override(item)
        overrides[key] = value
    return overrides


def _load(args) -> Experiment:
    raw = load_experiment_dict(args.config) if args.config else {}
    seeds = args.seed if getattr(args, "seed", None) else None
    return resolve_experiment(raw, _collect_overrides(args), seeds, getattr(args, "out", None))


def _report_config_error(exc: ConfigError) -> int:
    problems = exc.problems if isinstance(exc, ConfigErrors) else [str(exc)]
    for p in problems:
        print(f"config error: {p}", file=sys.stderr)
    return 1


def cmd_run(args) -> int:
    try:
        exp = _load(args)
    except ConfigError as exc:
        return _report_config_error(exc)
    failures = []
    if args.workers > 1 and len(exp.runs) > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_execute_safe, exp.runs, [exp.output_dir] * len(exp.runs)))
    else:
        results = [_execute_safe(named, exp.output_dir) for named in exp.runs]
    for named, (path, err) in zip(exp.runs, results):
        if err is None:
            print(f"ok   {named.name} seed={named.seed} -> {path}")
        else:
            failures.append(f"{named.name} seed={named.seed}: {err}")
    for f in failures:
        print(f"FAIL {f}", file=sys.stderr)
    return 1 if failures else 0


def cmd_replay(args) -> int:
    path = Path(args.manifest)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read manifest {path}: {exc}", file=sys.stderr)
        return 1
    cfg_dict = manifest["config"]
    if config_hash(cfg_dict) != manifest["config_hash"]:
        print(f"error: {path}: config hash mismatch, manifest was edited", file=sys.stderr)
        return 1
    try:
        outputs = render_outputs(run(run_config_from_dict(cfg_dict)))
    except FedPCError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    bad = [k for k, v in outputs.items() if _sha256(v) != manifest["outputs"].get(k)]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for fname, data in outputs.items():
            (out / fname).write_bytes(data)
    if bad:
        print(f"MISMATCH {', '.join(bad)}", file=sys.stderr)
        return 1
    print(f"identical: {', '.join(sorted(outputs))}")
    return 0


def load_report(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FedPCError(f"report not found: {path}")
    try:
        report = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FedPCError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(report, dict) or report.get("schema_version") != SCHEMA_VERSION:
        raise FedPCError(
            f"{path}: schema mismatch (expected schema_version {SCHEMA_VERSION}, "
            f"got {report.get('schema_version') if isinstance(report, dict) else None!r})"
        )
    for key in ("algorithm", "rounds", "metric_iii"):
        if key not in report:
            raise FedPCError(f"{path}: schema mismatch, missing {key!r}")
    return report


def compare_table(paths: list[str]) -> list[list[str]]:
    """Rows of a combined table: per-round metrics (i)/(ii), then the metric (iii) curve."""
    reports = [load_report(p) for p in paths]
    labels = [r["algorithm"] for r in reports]
    if len(set(labels)) != len(labels):
        labels = [f"{r['algorithm']}[{i}]" for i, r in enumerate(reports)]
    header = ["section", "index"]
    for label in labels:
        header += [f"{label}:metric_i", f"{label}:metric_ii"]
    rows = [header]

    def cell(x):
        return "" if x is None else f"{x:.4f}"

    n_rounds = max(len(r["rounds"]) for r in reports)
    for t in range(n_rounds):
        row = ["round", str(t)]
        for r in reports:
            if t < len(r["rounds"]):
                rm = r["rounds"][t]
                row += [cell(rm["metric_i"]["mean"]), cell(rm["metric_ii"]["mean"])]
            else:
                row += ["", ""]
        rows.append(row)
    n_steps = max(len(r["metric_iii"]["mean"]) for r in reports)
    for k in range(n_steps):
        row = ["metric_iii", str(k)]
        for r in reports:
            curve = r["metric_iii"]["mean"]
            row += [cell(curve[k]) if k < len(curve) else "", ""]
        rows.append(row)
    return rows


def cmd_compare(args) -> int:
    if len(args.reports) < 2:
        print("error: compare needs at least 2 reports", file=sys.stderr)
        return 2
    try:
        rows = compare_table(args.reports)
    except FedPCError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    for r in rows:
        print("  ".join(c.rjust(w) for c, w in zip(r, widths)))
    if args.csv:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(rows)
        Path(args.csv).write_text(buf.getvalue())
    return 0


def cmd_gen_data(args) -> int:
    try:
        exp = _load(args)
    except ConfigError as exc:
        return _report_config_error(exc)
    fed_cfg = exp.runs[0].config.federation
    if not isinstance(fed_cfg, FederationConfig):
        print("error: gen-data needs a generated federation, not a feature table", file=sys.stderr)
        return 1
    fed = generate_federation(fed_cfg)
    export_feature_table([fed.clients[c] for c in sorted(fed.clients)], args.out)
    print(f"wrote {len(fed.clients)} clients to {args.out}")
    return 0


def cmd_validate(args) -> int:
    try:
        exp = _load(args)
    except ConfigError as exc:
        return _report_config_error(exc)
    names = sorted({r.name for r in exp.runs})
    seeds = sorted({r.seed for r in exp.runs})
    print(f"valid: {len(names)} run(s) {names} x seeds {seeds}")
    return 0


def _add_run_flags(p: argparse.ArgumentParser, with_out: bool = True) -> None:
    p.add_argument("config", nargs="?", help="YAML experiment file")
    p.add_argument("--seed", type=int, action="append", help="run seed; repeat for a sweep")
    if with_out:
        p.add_argument("--out", help="output directory (overrides output_dir)")
    for flag in FIELD_FLAGS:
        p.add_argument(f"--{flag.replace('_', '-')}", dest=flag, default=None)
    p.add_argument("--hidden", default=None, help="hidden sizes, e.g. 64,64")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any run field or federation.<field>")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedpc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute one or a sweep of runs")
    _add_run_flags(p)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("replay", help="re-run a manifest and verify identical outputs")
    p.add_argument("manifest")
    p.add_argument("--out", help="also write the replayed outputs here")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("compare", help="combine metrics.json reports into one table")
    p.add_argument("reports", nargs="+")
    p.add_argument("--csv", help="write the table as CSV")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gen-data", help="export a synthetic federation to CSV")
    _add_run_flags(p, with_out=False)
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("validate", help="check a config without running")
    _add_run_flags(p)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
