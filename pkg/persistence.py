"""Database persistence layer - run history and the rule ledger."""

from __future__ import annotations

import logging
from contextlib import contextmanager
from typing import Any, List, Mapping, Sequence

import pandas as pd
from sqlalchemy import text

from database_config import create_database_engine

# Configure logging
logger = logging.getLogger(__name__)

# Schema validation cache to prevent redundant checks
_schema_validated = False


@contextmanager
def _connect():
    """Context manager for database connections with improved error handling."""
    try:
        engine = create_database_engine()
        with engine.connect() as conn:
            yield conn
    except Exception as e:
        logger.error(f"Database connection failed: {e}", exc_info=True)
        raise ConnectionError(
            f"Unable to connect to database. Please check your DATABASE_URL configuration. "
            f"Original error: {str(e)}"
        ) from e


def reset_schema_cache() -> None:
    global _schema_validated
    _schema_validated = False


def ensure_schema() -> None:
    """Ensure database schema exists, creating tables if needed."""
    global _schema_validated

    if _schema_validated:
        logger.debug("♻️  Schema already validated in this session, skipping check")
        return

    logger.info("Ensuring database schema exists...")
    with _connect() as conn:
        conn.execute(
            text(
                """
                CREATE TABLE IF NOT EXISTS runs (
                    run_id TEXT PRIMARY KEY,
                    source TEXT NOT NULL,
                    variant TEXT NOT NULL,
                    config_hash TEXT NOT NULL,
                    started_at TIMESTAMP NOT NULL,
                    finished_at TIMESTAMP,
                    total_ms INTEGER,
                    status TEXT,
                    failed_stage TEXT,
                    rule_count INTEGER,
                    prompt_tokens INTEGER,
                    completion_tokens INTEGER
                )
                """
            )
        )
        conn.execute(text("CREATE INDEX IF NOT EXISTS idx_runs_started_at ON runs(started_at DESC)"))
        logger.debug("  runs table ready")
        conn.execute(
            text(
                """
                CREATE TABLE IF NOT EXISTS rules (
                    run_id TEXT NOT NULL,
                    rule_index INTEGER NOT NULL,
                    title TEXT NOT NULL,
                    level TEXT,
                    paragraph_index INTEGER,
                    rule_yaml TEXT NOT NULL,
                    PRIMARY KEY (run_id, rule_index),
                    FOREIGN KEY (run_id) REFERENCES runs(run_id)
                )
                """
            )
        )
        logger.debug("  ✓ rules table ready")
        conn.commit()
        logger.info("✓ Schema commit completed")
        _schema_validated = True


def record_run(manifest: Mapping[str, Any], rule_rows: Sequence[Mapping[str, Any]] = ()) -> None:
    """Insert one run row and its rules in one transaction."""
    ensure_schema()
    usage = manifest.get("token_usage") or {}
    run = {
        "run_id": manifest["run_id"],
        "source": manifest.get("source", ""),
        "variant": manifest.get("variant", ""),
        "config_hash": manifest.get("config_hash", ""),
        "started_at": manifest["started_at"],
        "finished_at": manifest.get("finished_at"),
        "total_ms": manifest.get("total_ms"),
        "status": manifest.get("status"),
        "failed_stage": manifest.get("failed_stage"),
        "rule_count": manifest.get("rule_count", len(rule_rows)),
        "prompt_tokens": usage.get("prompt_tokens", 0),
        "completion_tokens": usage.get("completion_tokens", 0),
    }
    with _connect() as conn:
        conn.execute(
            text(
                """
                INSERT INTO runs (run_id, source, variant, config_hash, started_at, finished_at, total_ms,
                                  status, failed_stage, rule_count, prompt_tokens, completion_tokens)
                VALUES (:run_id, :source, :variant, :config_hash, :started_at, :finished_at, :total_ms,
                        :status, :failed_stage, :rule_count, :prompt_tokens, :completion_tokens)
                """
            ),
            run,
        )
        for index, row in enumerate(rule_rows):
            conn.execute(
                text(
                    """
                    INSERT INTO rules (run_id, rule_index, title, level, paragraph_index, rule_yaml)
                    VALUES (:run_id, :rule_index, :title, :level, :paragraph_index, :rule_yaml)
                    """
                ),
                {
                    "run_id": run["run_id"],
                    "rule_index": index,
                    "title": row["title"],
                    "level": row.get("level"),
                    "paragraph_index": row.get("paragraph_index"),
                    "rule_yaml": row["rule_yaml"],
                },
            )
        conn.commit()
    logger.info(f"💾 Recorded run {run['run_id']} ({len(rule_rows)} rule(s))")


def get_recent_runs(limit: int = 20) -> pd.DataFrame:
    ensure_schema()
    with _connect() as conn:
        return pd.read_sql(
            text("SELECT * FROM runs ORDER BY started_at DESC LIMIT :limit"), conn, params={"limit": int(limit)}
        )


def get_run_rules(run_id: str) -> pd.DataFrame:
    ensure_schema()
    with _connect() as conn:
        return pd.read_sql(
            text("SELECT rule_index, title, level, paragraph_index, rule_yaml FROM rules WHERE run_id = :run_id ORDER BY rule_index"),
            conn,
            params={"run_id": run_id},
        )


def build_rule_rows(rules: Sequence[Any], provenance: Sequence[int], texts: Sequence[str]) -> List[dict]:
    """Rows for ``record_run`` from final rules, their paragraph indices and emitted YAML."""
    rows: List[dict] = []
    for rule, paragraph_index, rule_yaml in zip(rules, provenance, texts):
        rows.append({"title": rule.title, "level": rule.level, "paragraph_index": paragraph_index, "rule_yaml": rule_yaml})
    return rows
