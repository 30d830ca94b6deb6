"""Command line entry point.

Usage:
  python cli.py run <url|file> [--config cfg.yaml] [--no-vision] [--no-api-extractor] [--no-optimizer]
                               [--out DIR] [--replay DIR] [--seed N] [--date YYYY-MM-DD]
  python cli.py eval <rulesDir> <truthDir> [--out DIR] [--config cfg.yaml]
  python cli.py eval --counts table.json
  python cli.py fixtures record <url|file> --replay DIR
  python cli.py fixtures list DIR
  python cli.py history [--limit N]
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Mapping, Optional, Sequence

import pandas as pd
from dotenv import load_dotenv

from evalharness import EvaluationError, MetricsReport, check_thresholds, evaluate_directories, load_count_rows
from llm_gateway import FixtureStore, LlmGateway, LlmGatewayError, build_provider
from persistence import get_recent_runs
from pipeline import PipelineStageError, run_pipeline
from pipeline_config import PipelineConfig, load_config

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_THRESHOLD_MISSED = 2


def configure_logging(verbose: bool = False) -> None:
    level = logging.DEBUG if verbose else os.getenv("HUNTSMITH_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[logging.StreamHandler(sys.stdout)],
        force=True
    )


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("source", help="Report URL or local .html file")
    parser.add_argument("--config", help="YAML or JSON pipeline config")
    parser.add_argument("--no-vision", action="store_true", help="Skip image transcription")
    parser.add_argument("--no-api-extractor", action="store_true", help="Generate rules from raw paragraphs")
    parser.add_argument("--no-optimizer", action="store_true", help="Skip rule optimization")
    parser.add_argument("--out", help="Output directory (default: config output_dir)")
    parser.add_argument("--seed", type=int, help="Seed for generated rule ids")
    parser.add_argument("--date", help="Pin the rule date (YYYY-MM-DD)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="huntsmith", description="Turn cloud threat reports into Sigma rules")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="Run the pipeline on one report")
    _add_run_options(run)
    run.add_argument("--replay", help="Answer LLM calls from recorded fixtures in this directory")

    evaluate = commands.add_parser("eval", help="Score run output against ground truth")
    evaluate.add_argument("rules_dir", nargs="?", help="Run output directory (or one sub-directory per report)")
    evaluate.add_argument("truth_dir", nargs="?", help="Directory of ground-truth JSON files")
    evaluate.add_argument("--counts", help="JSON file of published (#, P, R) rows per type")
    evaluate.add_argument("--out", default="eval_out", help="Report directory")
    evaluate.add_argument("--config", help="Config file holding acceptance thresholds")

    fixtures = commands.add_parser("fixtures", help="Record or list replay fixtures")
    fixture_commands = fixtures.add_subparsers(dest="fixtures_command", required=True)
    record = fixture_commands.add_parser("record", help="Run live and record every LLM exchange")
    _add_run_options(record)
    record.add_argument("--replay", required=True, help="Fixture directory to write")
    listing = fixture_commands.add_parser("list", help="List recorded fixtures")
    listing.add_argument("directory")

    history = commands.add_parser("history", help="Recent runs from the database")
    history.add_argument("--limit", type=int, default=20)
    return parser


def _config_for(args: argparse.Namespace) -> PipelineConfig:
    config = load_config(args.config)
    toggles = replace(
        config.toggles,
        vision=config.toggles.vision and not args.no_vision,
        api_extractor=config.toggles.api_extractor and not args.no_api_extractor,
        optimizer=config.toggles.optimizer and not args.no_optimizer,
    )
    updates = {"toggles": toggles}
    if args.out:
        updates["output_dir"] = args.out
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.date:
        try:
            updates["run_date"] = dt.date.fromisoformat(args.date)
        except ValueError as exc:
            raise ValueError(f"--date is not an ISO date: {args.date!r}") from exc
    config = replace(config, **updates)
    if config.database_url and not os.getenv("DATABASE_URL"):
        os.environ["DATABASE_URL"] = config.database_url
    return config


def cmd_run(args: argparse.Namespace, record: bool = False) -> int:
    try:
        config = _config_for(args)
        if record:
            provider = build_provider(config.provider, record_dir=args.replay)
        else:
            provider = build_provider(config.provider, replay_dir=args.replay)
    except (ValueError, LlmGatewayError) as exc:
        logger.error(f"❌ {exc}")
        return EXIT_FAILED

    gateway = LlmGateway(provider, config.provider)
    try:
        result = run_pipeline(args.source, config, gateway)
    except PipelineStageError as exc:
        logger.error(f"❌ {exc}")
        return EXIT_FAILED
    print(f"{len(result.rules)} rule(s) written to {result.out_dir / 'rules'} ({result.manifest['variant']})")
    return EXIT_OK


def _missed_thresholds(reports: Sequence[MetricsReport], thresholds: Mapping[str, Mapping[str, float]]) -> List[str]:
    missed: List[str] = []
    reported = set()
    for report in reports:
        reported.update(report.types)
        missed.extend(check_thresholds(report, {k: v for k, v in thresholds.items() if k in report.types}))
    missed.extend(f"{kind}: not reported" for kind in sorted(set(thresholds) - reported))
    return missed


def cmd_eval(args: argparse.Namespace) -> int:
    try:
        thresholds = load_config(args.config).acceptance if args.config else {}
    except ValueError as exc:
        logger.error(f"❌ {exc}")
        return EXIT_FAILED
    out = Path(args.out)

    try:
        if args.counts:
            report = load_count_rows(args.counts)
            out.mkdir(parents=True, exist_ok=True)
            (out / "metrics.json").write_text(json.dumps({"published": report.to_dict()}, indent=2) + "\n", encoding="utf-8")
            print(report.render_table())
            reports = [report]
        elif args.rules_dir and args.truth_dir:
            result = evaluate_directories(args.rules_dir, args.truth_dir)
            result.write(out)
            print(result.entities.render_table())
            print()
            print(result.relationships.render_table())
            reports = [result.entities, result.relationships]
        else:
            logger.error("❌ eval needs <rulesDir> <truthDir> or --counts")
            return EXIT_FAILED
    except (EvaluationError, OSError, json.JSONDecodeError) as exc:
        logger.error(f"❌ Evaluation failed: {exc}")
        return EXIT_FAILED

    missed = _missed_thresholds(reports, thresholds)
    for line in missed:
        logger.warning(f"⚠️ Threshold missed: {line}")
    return EXIT_THRESHOLD_MISSED if missed else EXIT_OK


def cmd_fixtures_list(args: argparse.Namespace) -> int:
    entries = FixtureStore(args.directory).list()
    if not entries:
        print(f"No fixtures in {args.directory}")
        return EXIT_OK
    print(pd.DataFrame(entries).to_string(index=False))
    return EXIT_OK


def cmd_history(args: argparse.Namespace) -> int:
    try:
        runs = get_recent_runs(args.limit)
    except ConnectionError as exc:
        logger.error(f"❌ {exc}")
        return EXIT_FAILED
    if runs.empty:
        print("No runs recorded yet")
        return EXIT_OK
    columns = ["run_id", "started_at", "variant", "status", "rule_count", "total_ms", "source"]
    print(runs[columns].to_string(index=False))
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)

    if args.command == "run":
        return cmd_run(args)
    if args.command == "eval":
        return cmd_eval(args)
    if args.command == "fixtures":
        if args.fixtures_command == "record":
            return cmd_run(args, record=True)
        return cmd_fixtures_list(args)
    return cmd_history(args)


if __name__ == "__main__":
    sys.exit(main())
