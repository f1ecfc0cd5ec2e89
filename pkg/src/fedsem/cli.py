"""Command-line entry point: ``fedsem {cluster,partition,simulate,report}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from fedsem import experiment as ex
from fedsem.fileio import AnnotationFormatError
from fedsem.flcore import ConfigError
from fedsem.metrics import communication_cost, read_history_jsonl, relative_cost, rounds_to_target
from fedsem.partition import PartitionError
from fedsem.semantics import BalanceError, DimensionError, InvalidRecordError, MappingError
from fedsem.trainer import TrainingError, load_params

log = logging.getLogger("fedsem")

REPORT_FILE = "report.csv"
REPORT_COLUMNS = ("run", "aggregator", "rounds", "metric", "final", "target", "rounds_to_target",
                  "param_count", "comm_cost", "relative_cost")

USER_ERRORS = (ConfigError, PartitionError, AnnotationFormatError, MappingError, BalanceError,
               DimensionError, InvalidRecordError, TrainingError, FileNotFoundError)


def _load(args) -> tuple[ex.ExperimentConfig, Path]:
    cfg = ex.load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    out = Path(args.out) if args.out else cfg.output_dir
    if out is None:
        raise ConfigError("config.output_dir: not set and no --out given")
    return cfg, out


def cmd_cluster(args) -> int:
    cfg, out = _load(args)
    ex.run_cluster(cfg, out)
    return 0


def cmd_partition(args) -> int:
    cfg, out = _load(args)
    ex.run_partition(cfg, out)
    return 0


def cmd_simulate(args) -> int:
    cfg, out = _load(args)
    history = ex.run_simulate(cfg, out, reuse=args.reuse)
    final = history.final
    log.info("final round %d: acc %.4f  R@50 %.4f  mR@50 %.4f", final["round"], final["acc"],
             final["r50"], final["mr50"])
    return 0


def _history_path(p: Path) -> Path:
    return p / ex.HISTORY_JSONL if p.is_dir() else p


def report_rows(paths, metric: str, target: float) -> list[dict]:
    """One row per history: final value, rounds to target and communication cost.

    The first history is the baseline for ``relative_cost``.
    """
    rows = []
    for p in map(Path, paths):
        hist_path = _history_path(p)
        history = read_history_jsonl(hist_path)
        if not history:
            raise ConfigError(f"{str(hist_path)!r}: empty history")
        run_dir = hist_path.parent
        aggregator = ""
        if (run_dir / ex.CONFIG_FILE).exists():
            with open(run_dir / ex.CONFIG_FILE) as f:
                aggregator = json.load(f).get("aggregator", {}).get("name", "")
        param_count = None
        if (run_dir / ex.PARAMS_FILE).exists():
            param_count = load_params(run_dir / ex.PARAMS_FILE)[0].size
        rtt = rounds_to_target(history, metric, target)
        cost = None if rtt is None or param_count is None else communication_cost(param_count, rtt)
        rows.append({"run": run_dir.name, "aggregator": aggregator, "rounds": history[-1]["round"],
                     "metric": metric, "final": history[-1][metric], "target": target,
                     "rounds_to_target": rtt, "param_count": param_count, "comm_cost": cost,
                     "relative_cost": None})
    base = rows[0]["comm_cost"] if rows else None
    for row in rows:
        if base and row["comm_cost"] is not None:
            row["relative_cost"] = round(relative_cost(row["comm_cost"], base), 4)
    return rows


def write_report(stream, rows):
    w = csv.DictWriter(stream, REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: "" if row[k] is None else row[k] for k in REPORT_COLUMNS})


def cmd_report(args) -> int:
    rows = report_rows(args.histories, args.metric, args.target)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / REPORT_FILE, "w", newline="") as f:
            write_report(f, rows)
    if not args.quiet:
        write_report(sys.stdout, rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsem", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True,
                           help="experiment JSON file, or the name of a bundled config (e.g. quickstart)")
            p.add_argument("--seed", type=int, default=None, help="override every seed in the config")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--quiet", action="store_true", help="only print warnings and errors")

    p = sub.add_parser("cluster", help="k-means over category tensors; writes assignment.jsonl")
    common(p)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("partition", help="balance clusters and split them over clients; writes plan.json")
    common(p)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("simulate", help="cluster, partition and run federated training; writes history files")
    common(p)
    p.add_argument("--reuse", action="store_true",
                   help="train from the plan.json already in --out instead of re-clustering")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="rounds-to-target and communication cost across histories")
    common(p, needs_config=False)
    p.add_argument("histories", nargs="+", help="run directories or history.jsonl files; the first is the baseline")
    p.add_argument("--metric", default="acc")
    p.add_argument("--target", type=float, required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
