"""End-to-end orchestration: report in, Sigma rule files out.

Stages run in order:

    ingest -> vision -> extract (per paragraph) -> generate (per paragraph)
    -> optimize -> refine -> ioc -> enhance -> emit

Each LLM-backed stage writes its output to ``<out>/artifacts/<stage>-<key>.json``.
The key hashes the upstream key with the settings and prompt versions the stage
depends on, so an unchanged prefix of the pipeline is reused on the next run.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import logging
import random
import re
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import requests

import persistence
from extraction import (
    ApiCallCandidate,
    AwsServiceTable,
    TtpAssignment,
    TtpCatalog,
    assign_ttps,
    extract_api_calls,
)
from ingest import Document, Paragraph, document_from_dict, document_to_dict, filter_sections, load_source
from ioc import IocSet, enhance_rules, extract_iocs
from llm_gateway import LlmGateway, LlmGatewayError
from pipeline_config import PipelineConfig
from prompt_assets import prompt_versions
from refine import RuleSet, llm_remover, llm_selector, optimize_set, refine_set
from rulegen import CandidateBatch, EnrichedParagraph, GeneratorMetadata, RejectionLog, generate_rules
from sigma_core import emit_rule, rule_from_mapping, rule_to_mapping
from vision import transcribe_images

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA_VERSION = 1
ARTIFACT_SCHEMA_VERSION = 1


class PipelineStageError(RuntimeError):
    def __init__(self, stage: str, last_completed_stage: Optional[str], message: str = ""):
        super().__init__(f"stage {stage} failed (last completed: {last_completed_stage or 'none'}): {message}")
        self.stage = stage
        self.last_completed_stage = last_completed_stage


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------

def stage_key(stage: str, upstream: str, settings: Dict[str, Any]) -> str:
    payload = json.dumps({"stage": stage, "upstream": upstream, "settings": settings}, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class ArtifactStore:
    """Content-addressed stage outputs under ``<out>/artifacts``."""

    def __init__(self, directory: Path):
        self.directory = Path(directory)

    def path(self, stage: str, key: str) -> Path:
        return self.directory / f"{stage}-{key[:16]}.json"

    def load(self, stage: str, key: str) -> Optional[Any]:
        path = self.path(stage, key)
        if not path.exists():
            return None
        try:
            envelope = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            logger.warning(f"⚠️ Ignoring unreadable artifact {path.name}: {exc}")
            return None
        if envelope.get("schema_version") != ARTIFACT_SCHEMA_VERSION or envelope.get("key") != key:
            logger.warning(f"⚠️ Ignoring stale artifact {path.name}")
            return None
        return envelope["data"]

    def save(self, stage: str, key: str, data: Any) -> Path:
        self.directory.mkdir(parents=True, exist_ok=True)
        path = self.path(stage, key)
        envelope = {"schema_version": ARTIFACT_SCHEMA_VERSION, "stage": stage, "key": key, "data": data}
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(envelope, indent=2, ensure_ascii=False, default=str) + "\n", encoding="utf-8")
        tmp.replace(path)
        return path


def _rule_set_to_dict(rule_set: RuleSet) -> Dict[str, Any]:
    return {"rules": [rule_to_mapping(r) for r in rule_set.rules], "provenance": list(rule_set.provenance)}


def _rule_set_from_dict(data: Dict[str, Any]) -> RuleSet:
    return RuleSet(tuple(rule_from_mapping(r) for r in data["rules"]), tuple(data["provenance"]))


def _batches_to_list(batches: Sequence[CandidateBatch]) -> List[Dict[str, Any]]:
    return [
        {
            "paragraph_index": b.paragraph_index,
            "rules": [rule_to_mapping(r) for r in b.rules],
            "metadata": asdict(b.generator_metadata),
            "rejected": b.rejected,
        }
        for b in batches
    ]


def _batches_from_list(data: Sequence[Dict[str, Any]]) -> List[CandidateBatch]:
    return [
        CandidateBatch(
            b["paragraph_index"],
            tuple(rule_from_mapping(r) for r in b["rules"]),
            GeneratorMetadata(**b["metadata"]),
            b.get("rejected", 0),
        )
        for b in data
    ]


def rule_filename(position: int, title: str) -> str:
    slug = re.sub(r"[^a-z0-9]+", "_", title.lower()).strip("_")[:60] or "rule"
    return f"{position:02d}_{slug}.yml"


# ---------------------------------------------------------------------------
# Run
# ---------------------------------------------------------------------------

@dataclass
class PipelineResult:
    out_dir: Path
    manifest: Dict[str, Any]
    rules: RuleSet
    texts: List[str]
    iocs: IocSet
    refined: RuleSet  # before IoC enhancement
    rule_paths: List[Path] = field(default_factory=list)


class _Run:
    def __init__(self, source: str, config: PipelineConfig, gateway: LlmGateway, out_dir: Path,
                 catalog: TtpCatalog, table: AwsServiceTable, session: Optional[requests.Session]):
        self.source = source
        self.config = config
        self.gateway = gateway
        self.out_dir = out_dir
        self.catalog = catalog
        self.table = table
        self.session = session
        self.store = ArtifactStore(out_dir / "artifacts")
        self.prompts = prompt_versions()
        self.last_completed: Optional[str] = None
        self.stage_keys: Dict[str, str] = {}
        self.stage_ms: Dict[str, float] = {}
        self.reused: List[str] = []

    def _settings(self, *prompt_names: str, **extra: Any) -> Dict[str, Any]:
        return {
            "model": self.config.provider.model_name,
            "prompts": {name: self.prompts[name] for name in prompt_names},
            **extra,
        }

    def stage(self, name: str, upstream: str, settings: Dict[str, Any], compute: Callable[[], Any],
              encode: Callable[[Any], Any], decode: Callable[[Any], Any]) -> Tuple[Any, str]:
        key = stage_key(name, upstream, settings)
        self.stage_keys[name] = key
        logger.info("=" * 70)
        logger.info(f"STAGE: {name}")
        logger.info("=" * 70)
        start = time.time()
        cached = self.store.load(name, key)
        if cached is not None:
            logger.info(f"♻️  Reusing {name} artifact {key[:16]}")
            value = decode(cached)
            self.reused.append(name)
        else:
            try:
                value = compute()
            except PipelineStageError:
                raise
            except Exception as exc:
                logger.error(f"❌ Stage {name} failed: {exc}", exc_info=True)
                raise PipelineStageError(name, self.last_completed, str(exc)) from exc
            self.store.save(name, key, encode(value))
        self.stage_ms[name] = round((time.time() - start) * 1000, 2)
        logger.info(f"✓ Stage {name} finished in {self.stage_ms[name]:.2f}ms")
        self.last_completed = name
        return value, key

    def local_stage(self, name: str, compute: Callable[[], Any]) -> Any:
        """A stage without an artifact (pure and cheap)."""
        start = time.time()
        try:
            value = compute()
        except Exception as exc:
            logger.error(f"❌ Stage {name} failed: {exc}", exc_info=True)
            raise PipelineStageError(name, self.last_completed, str(exc)) from exc
        self.stage_ms[name] = round((time.time() - start) * 1000, 2)
        self.last_completed = name
        return value

    def _workers(self, items: int) -> int:
        return max(1, min(items, self.config.provider.max_concurrent_requests))

    # -- per paragraph --------------------------------------------------

    def _enrich(self, paragraph: Paragraph) -> Dict[str, Any]:
        temps = self.config.temperatures
        entry: Dict[str, Any] = {"paragraph_index": paragraph.index, "explicit": [], "implicit": [], "assignments": []}
        try:
            calls = extract_api_calls(paragraph, self.config.voting, self.gateway, temps, self.table)
            if calls.discarded:
                logger.debug(f"Paragraph {paragraph.index}: no explicit API calls, skipped")
                return entry
            assignments = assign_ttps(calls.candidates, paragraph, self.catalog, self.gateway, temps["ttp"])
        except LlmGatewayError as exc:
            logger.warning(f"⚠️ Paragraph {paragraph.index}: extraction failed, skipped: {exc}")
            entry["error"] = str(exc)
            return entry
        entry["explicit"] = [asdict(c) for c in calls.explicit]
        entry["implicit"] = [asdict(c) for c in calls.implicit]
        entry["assignments"] = [asdict(a) for a in assignments]
        logger.info(
            f"🔍 Paragraph {paragraph.index}: {len(calls.explicit)} explicit, {len(calls.implicit)} implicit, "
            f"{len(assignments)} mapped"
        )
        return entry

    def enriched_paragraphs(self, doc: Document, entries: Sequence[Dict[str, Any]]) -> List[EnrichedParagraph]:
        enriched: List[EnrichedParagraph] = []
        for entry in entries:
            paragraph = doc.paragraph(entry["paragraph_index"])
            assignments = {
                (a["event_source"], a["event_name"]): TtpAssignment(**a) for a in entry["assignments"]
            }
            pairs = []
            for data in entry["explicit"] + entry["implicit"]:
                candidate = ApiCallCandidate(**data)
                assignment = assignments.get((candidate.event_source, candidate.event_name))
                if assignment is None:
                    logger.warning(f"⚠️ Paragraph {candidate.paragraph_index}: {candidate.api_call} has no TTP, dropped")
                    continue
                pairs.append((candidate, assignment))
            if paragraph is not None and pairs:
                enriched.append(EnrichedParagraph(paragraph, tuple(pairs), doc.source_url))
        return enriched

    # -- stages ---------------------------------------------------------

    def execute(self) -> PipelineResult:
        cfg = self.config
        temps = cfg.temperatures
        run_date = cfg.run_date

        document, key = self.stage(
            "ingest", "", {"source": self.source, "content_selectors": cfg.content_selectors},
            lambda: load_source(self.source, cfg.content_selectors, self.session),
            document_to_dict, document_from_dict,
        )
        logger.info(f"🌐 {document.title!r}: {len(document.paragraphs)} paragraph(s), {len(document.images)} image(s)")

        if cfg.toggles.vision:
            document, key = self.stage(
                "vision", key,
                self._settings("image_analyzer", temperature=temps["vision"], inline_remote=cfg.inline_remote_images),
                lambda: transcribe_images(document, self.gateway, temps["vision"], cfg.inline_remote_images, self.session),
                document_to_dict, document_from_dict,
            )
        else:
            logger.info("Vision disabled, image content is not transcribed")
        full_document = document
        document_key = key

        filtered = self.local_stage("filter", lambda: filter_sections(document, cfg.stopwords))
        logger.info(f"Kept {len(filtered.paragraphs)}/{len(document.paragraphs)} paragraph(s) after filtering")

        rejection_log = RejectionLog(self.out_dir / "rejected_rules.jsonl")
        if cfg.toggles.api_extractor:
            entries, key = self.stage(
                "extract", key,
                self._settings(
                    "explicit_api_extractor", "implicit_api_extractor", "ttp_extractor",
                    stopwords=list(cfg.stopwords), voting=asdict(cfg.voting),
                    temperatures={s: temps[s] for s in ("explicit", "implicit", "ttp")},
                    catalog=self.catalog.version, service_table=self.table.version,
                ),
                lambda: self._extract_all(filtered),
                lambda value: value, lambda value: value,
            )
            enriched = self.enriched_paragraphs(filtered, entries)
        else:
            logger.info("API extraction disabled, generating from raw paragraphs")
            key = stage_key("extract", key, {"raw": True, "stopwords": list(cfg.stopwords)})
            enriched = [EnrichedParagraph(p, (), filtered.source_url, raw=True) for p in filtered.paragraphs]

        batches, key = self.stage(
            "generate", key,
            self._settings("rule_generator", temperature=temps["generator"], run_date=run_date),
            lambda: self._generate_all(enriched, rejection_log),
            _batches_to_list, _batches_from_list,
        )
        rule_set = RuleSet.from_batches(batches)
        initial_count = len(rule_set)

        if cfg.toggles.optimizer:
            rule_set, key = self.stage(
                "optimize", key,
                self._settings("rule_optimizer", temperature=temps["optimizer"], run_date=run_date),
                lambda: optimize_set(rule_set, self.gateway, temps["optimizer"], run_date),
                _rule_set_to_dict, _rule_set_from_dict,
            )
        else:
            logger.info("Optimizer disabled")
        optimized_count = len(rule_set)

        refined, key = self.stage(
            "refine", key,
            self._settings("rule_selector", "api_remover", temperatures={s: temps[s] for s in ("selector", "remover")},
                           run_date=run_date),
            lambda: refine_set(
                rule_set,
                selector=llm_selector(self.gateway, temps["selector"]),
                remover=llm_remover(self.gateway, temps["remover"], run_date),
                run_date=run_date,
            ),
            _rule_set_to_dict, _rule_set_from_dict,
        )

        # IoCs come from the whole report, including sections the filter dropped.
        iocs, _ = self.stage(
            "ioc", document_key, self._settings("ioc_extractor", temperature=temps["ioc"]),
            lambda: extract_iocs(full_document.full_text, self.gateway, temps["ioc"]),
            lambda value: value.to_dict(), IocSet.from_dict,
        )

        final = self.local_stage("enhance", lambda: enhance_rules(refined, iocs))
        texts, paths = self.local_stage("emit", lambda: self._emit(final, iocs))

        counts = {
            "paragraphs": len(document.paragraphs),
            "filtered_paragraphs": len(filtered.paragraphs),
            "enriched_paragraphs": len(enriched),
            "api_calls": sum(len(ep.api_calls) for ep in enriched),
            "initial_rules": initial_count,
            "rejected_rules": sum(b.rejected for b in batches),
            "optimized_rules": optimized_count,
            "final_rules": len(final),
            "ip_addresses": len(iocs.ip_addresses),
            "user_agents": len(iocs.user_agents),
        }
        return PipelineResult(self.out_dir, {"counts": counts}, final, texts, iocs, refined, paths)

    def _extract_all(self, doc: Document) -> List[Dict[str, Any]]:
        paragraphs = list(doc.paragraphs)
        if not paragraphs:
            return []
        with ThreadPoolExecutor(max_workers=self._workers(len(paragraphs))) as pool:
            return list(pool.map(self._enrich, paragraphs))

    def _generate_all(self, enriched: Sequence[EnrichedParagraph], rejection_log: RejectionLog) -> List[CandidateBatch]:
        if not enriched:
            logger.warning("⚠️ No paragraph reached rule generation")
            return []
        cfg = self.config

        def generate(ep: EnrichedParagraph) -> CandidateBatch:
            return generate_rules(
                ep, self.gateway, cfg.temperatures["generator"], cfg.run_date, rejection_log, cfg.provider.model_name,
            )

        with ThreadPoolExecutor(max_workers=self._workers(len(enriched))) as pool:
            return list(pool.map(generate, enriched))

    def _emit(self, final: RuleSet, iocs: IocSet) -> Tuple[List[str], List[Path]]:
        rules_dir = self.out_dir / "rules"
        rules_dir.mkdir(parents=True, exist_ok=True)
        for stale in rules_dir.glob("*.yml"):
            stale.unlink()
        rng = random.Random(self.config.seed) if self.config.seed is not None else None
        texts: List[str] = []
        paths: List[Path] = []
        for position, rule in enumerate(final.rules, start=1):
            text = emit_rule(rule, rng=rng)
            path = rules_dir / rule_filename(position, rule.title)
            path.write_text(text, encoding="utf-8")
            texts.append(text)
            paths.append(path)
        iocs.write(self.out_dir / "iocs.json")
        logger.info(f"💾 Wrote {len(paths)} rule file(s) to {rules_dir}")
        return texts, paths


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(out_dir: Path, manifest: Dict[str, Any]) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, ensure_ascii=False, default=str) + "\n", encoding="utf-8")
    return path


def _rule_file_entries(result: PipelineResult) -> List[Dict[str, Any]]:
    return [
        {"file": path.name, "title": rule.title, "paragraph_index": paragraph_index}
        for path, rule, paragraph_index in zip(result.rule_paths, result.rules.rules, result.rules.provenance)
    ]


def _record_history(manifest: Dict[str, Any], result: Optional[PipelineResult]) -> None:
    rows = []
    if result is not None:
        rows = persistence.build_rule_rows(result.rules.rules, result.rules.provenance, result.texts)
    try:
        persistence.record_run(manifest, rows)
    except Exception as exc:
        logger.warning(f"⚠️ Run history not recorded: {exc}")


def run_pipeline(source: str, config: PipelineConfig, gateway: LlmGateway, out_dir: Optional[str] = None,
                 catalog: Optional[TtpCatalog] = None, service_table: Optional[AwsServiceTable] = None,
                 session: Optional[requests.Session] = None) -> PipelineResult:
    """Run every stage for one report and write rules, IoCs and the manifest.

    Raises PipelineStageError when a stage fails; the manifest still records the
    failed stage and the last completed one.
    """
    out = Path(out_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    catalog = catalog or TtpCatalog.load()
    service_table = service_table or AwsServiceTable.load()
    started = time.time()
    manifest: Dict[str, Any] = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "run_id": uuid.uuid4().hex,
        "source": source,
        "variant": config.variant_name(),
        "toggles": asdict(config.toggles),
        "config_hash": config.config_hash(),
        "model_name": config.provider.model_name,
        "provider": config.provider.kind,
        "prompt_versions": prompt_versions(),
        "catalog_version": catalog.version,
        "service_table_version": service_table.version,
        "started_at": _now(),
    }
    logger.info("=" * 70)
    logger.info(f"Huntsmith run {manifest['run_id']} ({manifest['variant']}) on {source}")
    logger.info("=" * 70)

    run = _Run(source, config, gateway, out, catalog, service_table, session)
    result: Optional[PipelineResult] = None
    error: Optional[PipelineStageError] = None
    try:
        result = run.execute()
    except PipelineStageError as exc:
        error = exc

    manifest.update(
        {
            "finished_at": _now(),
            "total_ms": int((time.time() - started) * 1000),
            "status": "failed" if error else "completed",
            "failed_stage": error.stage if error else None,
            "last_completed_stage": run.last_completed,
            "error": str(error) if error else None,
            "stage_keys": run.stage_keys,
            "stage_ms": run.stage_ms,
            "reused_stages": run.reused,
            "token_usage": asdict(gateway.usage),
            "llm_calls": gateway.calls,
            "rule_count": len(result.rules) if result else 0,
            "rule_files": _rule_file_entries(result) if result else [],
        }
    )
    if result is not None:
        manifest.update(result.manifest)
        result.manifest = manifest
    write_manifest(out, manifest)
    if config.record_history:
        _record_history(manifest, result)

    if error is not None:
        logger.error(f"❌ Run failed at stage {error.stage}")
        raise error
    logger.info(
        f"✓ Run complete: {manifest['rule_count']} rule(s) in {manifest['total_ms']}ms, "
        f"{manifest['token_usage']['prompt_tokens']}+{manifest['token_usage']['completion_tokens']} tokens"
    )
    return result  # type: ignore[return-value]
