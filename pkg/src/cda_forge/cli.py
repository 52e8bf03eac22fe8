"""Command-line interface.

Subcommands: filter, run, resume, augment, evaluate, stats, report. Behavior
comes from one declarative config file (YAML or JSON) plus --set overrides;
API keys are only ever read from environment variables named in the config.

Exit codes: 0 success, 1 usage error, 2 stage/operation failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import yaml

from .client import EndpointConfig, HttpChatClient
from .data import ColumnMap, Dataset, Label, compute_stats, ingest_dataset
from .augmenter import augment_round
from .errors import CdaForgeError
from .evaluator import evaluate_split
from .pipeline import (
    RunConfig,
    render_report_text,
    report_run,
    resume_run,
    run_cda,
    teacher_filter,
)

logger = logging.getLogger(__name__)

USAGE_ERROR = 1
STAGE_ERROR = 2


def load_config(path: str | Path, overrides: Sequence[str] = ()) -> RunConfig:
    """Parse the declarative config file and apply dotted --set overrides."""
    with Path(path).open("r", encoding="utf-8") as f:
        raw = yaml.safe_load(f) or {}
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override must look like section.key=value, got {item!r}")
        dotted, value = item.split("=", 1)
        node = raw
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = yaml.safe_load(value)
    return RunConfig.from_dict(raw)


def _load_mapping(path: str | None) -> ColumnMap | None:
    if path is None:
        return None
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    label_values = raw.get("label_values")
    kwargs: dict[str, Any] = {
        "sentence": raw["sentence"],
        "target_word": raw["target_word"],
        "label": raw["label"],
    }
    if label_values is not None:
        kwargs["label_values"] = {str(k).lower(): Label(v) for k, v in label_values.items()}
    if "delimiter" in raw:
        kwargs["delimiter"] = raw["delimiter"]
    return ColumnMap(**kwargs)


def _load_dataset(args: argparse.Namespace, attr: str = "dataset") -> Dataset:
    path = getattr(args, attr)
    return ingest_dataset(path, format=args.format, mapping=_load_mapping(args.mapping))


def _add_dataset_args(parser: argparse.ArgumentParser, name: str = "--dataset") -> None:
    parser.add_argument(name, required=True, help="input dataset file")
    parser.add_argument("--format", default="canonical-jsonl",
                        choices=["canonical-jsonl", "columnar-csv"])
    parser.add_argument("--mapping", default=None,
                        help="column-map file (YAML/JSON) for columnar sources")


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="declarative run config (YAML/JSON)")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="dotted config override, repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cda-forge", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("filter", help="teacher pre-filter of a raw dataset")
    _add_config_args(p)
    _add_dataset_args(p)
    p.add_argument("--output", required=True, help="where to write the filtered dataset")

    p = sub.add_parser("run", help="execute a full run")
    _add_config_args(p)
    _add_dataset_args(p)
    p.add_argument("--run-dir", required=True)

    p = sub.add_parser("resume", help="resume an interrupted run")
    p.add_argument("run_dir")

    p = sub.add_parser("augment", help="one generation round, for inspection")
    _add_config_args(p)
    _add_dataset_args(p, name="--seeds")
    p.add_argument("--iteration", type=int, default=1)
    p.add_argument("--output", required=True, help="where to write accepted instances")
    p.add_argument("--log-output", default=None, help="where to write the outcome log")

    p = sub.add_parser("evaluate", help="ad-hoc evaluation of any endpoint on any dataset")
    p.add_argument("--base-url", required=True)
    p.add_argument("--model-id", required=True)
    p.add_argument("--api-key-env", default=None)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--max-tokens", type=int, default=16)
    p.add_argument("--max-in-flight", type=int, default=4)
    p.add_argument("--timeout-ms", type=int, default=120_000)
    _add_dataset_args(p)
    p.add_argument("--report-output", default=None, help="optional metrics JSON output")

    p = sub.add_parser("stats", help="dataset statistics")
    _add_dataset_args(p)

    p = sub.add_parser("report", help="final report for a completed run")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--test-set", dest="test_sets", action="append", required=True,
                   help="test dataset file, repeatable")
    p.add_argument("--format", default="canonical-jsonl",
                   choices=["canonical-jsonl", "columnar-csv"])
    p.add_argument("--mapping", default=None)
    p.add_argument("--trials", type=int, default=3)

    return parser


def cmd_filter(args: argparse.Namespace) -> int:
    config = load_config(args.config, args.overrides)
    raw = _load_dataset(args)
    filtered = teacher_filter(HttpChatClient(config.teacher), raw)
    filtered.save_jsonl(args.output)
    stats = compute_stats(filtered)
    print(json.dumps({"kept": len(filtered), "of": len(raw), **stats.to_dict()}))
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    config = load_config(args.config, args.overrides)
    initial = _load_dataset(args)
    state = run_cda(config, initial, args.run_dir)
    print(json.dumps({"status": state.status,
                      "iterations": len(state.records),
                      "final_checkpoint": None if state.final_checkpoint is None
                      else state.final_checkpoint.id}))
    return 0


def cmd_resume(args: argparse.Namespace) -> int:
    state = resume_run(args.run_dir)
    print(json.dumps({"status": state.status, "iterations": len(state.records)}))
    return 0


def cmd_augment(args: argparse.Namespace) -> int:
    config = load_config(args.config, args.overrides)
    seeds = _load_dataset(args, attr="seeds")
    aug, log = augment_round(
        HttpChatClient(config.teacher), seeds, config.methods, args.iteration,
        history_keys=seeds.keys(),
        retries_per_generation=config.retries_per_generation)
    aug.save_jsonl(args.output)
    if args.log_output:
        log.save_jsonl(args.log_output)
    print(json.dumps({"accepted": len(aug), "outcomes": log.reason_counts()}))
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    endpoint = EndpointConfig(
        base_url=args.base_url, model_id=args.model_id, role="student",
        api_key_env=args.api_key_env, temperature=args.temperature,
        max_tokens=args.max_tokens, max_in_flight=args.max_in_flight,
        timeout_ms=args.timeout_ms)
    dataset = _load_dataset(args)
    report, split = evaluate_split(HttpChatClient(endpoint), dataset)
    summary = report.summary_dict()
    summary["n_correct"] = len(split.correct)
    summary["n_wrong"] = len(split.wrong)
    if args.report_output:
        Path(args.report_output).write_text(
            json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_stats(args: argparse.Namespace) -> int:
    dataset = _load_dataset(args)
    print(json.dumps(compute_stats(dataset).to_dict(), sort_keys=True))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    mapping = _load_mapping(args.mapping)
    test_sets = [ingest_dataset(path, format=args.format, mapping=mapping)
                 for path in args.test_sets]
    document = report_run(args.run_dir, test_sets, args.trials)
    print(render_report_text(document))
    return 0


_COMMANDS = {
    "filter": cmd_filter,
    "run": cmd_run,
    "resume": cmd_resume,
    "augment": cmd_augment,
    "evaluate": cmd_evaluate,
    "stats": cmd_stats,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors; 1 is our usage code
        return USAGE_ERROR if e.code not in (0, None) else 0
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (CdaForgeError, FileNotFoundError, ValueError) as e:
        logger.error("%s", e)
        return STAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
