"""Command-line entry point: ``pmfl run | ablate-clients | gen-data``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, PMFLError

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 1, 2

log = logging.getLogger("pmfl")


def _parse_counts(text: str) -> list[int]:
    try:
        counts = [int(c) for c in text.split(",") if c.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not counts:
        raise argparse.ArgumentTypeError("no client counts given")
    return counts


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pmfl", description="Heterogeneous-task federated learning experiments.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="compare training schemes")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--out", type=Path, default=Path("pmfl-out"))
    run.add_argument("--round-log", type=Path, help="append per-round JSON lines here")

    abl = sub.add_parser("ablate-clients", help="PMFL with several pretraining client counts")
    abl.add_argument("--counts", required=True, type=_parse_counts)
    abl.add_argument("--config", required=True, type=Path)
    abl.add_argument("--out", type=Path, default=Path("pmfl-ablation"))
    abl.add_argument("--round-log", type=Path)

    gen = sub.add_parser("gen-data", help="write a synthetic task family as CSV files")
    gen.add_argument("--spec", required=True, type=Path)
    gen.add_argument("--out", required=True, type=Path)
    return p


def _read_mapping(path: Path) -> dict:
    import yaml

    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return raw


def cmd_run(args) -> int:
    from .experiment import emit_outputs, load_config, run_experiment

    config = load_config(args.config)
    table = run_experiment(config, args.round_log)
    print(table.format())
    for path in emit_outputs(table, args.out, config):
        log.info("wrote %s", path)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .experiment import emit_outputs, load_config, run_client_count_ablation

    config = load_config(args.config)
    table = run_client_count_ablation(config, args.counts, args.round_log)
    print(table.format())
    emit_outputs(table, args.out, config)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    from .data import TaskFamilySpec, generate_task_family, write_csv

    raw = _read_mapping(args.spec)
    k = int(raw.pop("tasks", 6))
    spec = TaskFamilySpec.from_dict(raw)
    seed = _env_seed(spec.seed)
    if seed != spec.seed:
        spec = TaskFamilySpec.from_dict({**spec.to_dict(), "seed": seed})
    tasks = generate_task_family(spec, k)
    args.out.mkdir(parents=True, exist_ok=True)
    for t in tasks:
        write_csv(args.out / f"{t.task_id}.csv", t)
    meta = {"family": spec.to_dict(), "tasks": k, "directions": [t.direction.tolist() for t in tasks]}
    (args.out / "family.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {k} tasks to {args.out}")
    return EXIT_OK


def _env_seed(default: int) -> int:
    import os

    value = os.environ.get("PMFL_SEED", "").strip()
    if not value:
        return default
    try:
        return int(value.split(",")[0])
    except ValueError:
        raise ConfigError(f"PMFL_SEED must be an integer, got {value!r}") from None


COMMANDS = {"run": cmd_run, "ablate-clients": cmd_ablate, "gen-data": cmd_gen_data}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except PMFLError as exc:
        print(f"pmfl: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"pmfl: io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
