"""Initial Sigma rule generation per enriched paragraph, and the rule validator."""

from __future__ import annotations

import copy
import datetime as dt
import json
import logging
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union
from urllib.parse import urlparse

from extraction import ApiCallCandidate, TtpAssignment
from ingest import Paragraph
from llm_gateway import LlmGateway, LlmRequest
from prompt_assets import load_prompt
from sigma_core import (
    LEVELS,
    STATUSES,
    SigmaRule,
    SigmaRuleError,
    TtpTag,
    compile_rule,
    condition_identifiers,
    detection_api_calls,
    parse_condition,
    print_condition,
    prune_condition,
    rename_identifiers,
    rule_from_mapping,
    rule_to_mapping,
    same_api_call,
)

logger = logging.getLogger(__name__)

TOOL_NAME = "Huntsmith"
DEFAULT_TEMPERATURE = 0.7
CLOUDTRAIL_LOGSOURCE = {"product": "aws", "service": "cloudtrail"}

SANITIZED_FIELDS = ("errorcode", "errormessage", "eventtime")
ARN_RE = re.compile(r"^arn:aws[a-zA-Z-]*:")


class RuleRejected(ValueError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class PostconditionViolation(RuntimeError):
    """Generated batch does not cover the paragraph's API calls exactly once."""

    def __init__(self, missing: Sequence[str] = (), duplicated: Sequence[str] = ()):
        parts = []
        if missing:
            parts.append(f"ApiCallMissing: {', '.join(missing)}")
        if duplicated:
            parts.append(f"ApiCallDuplicated: {', '.join(duplicated)}")
        super().__init__("; ".join(parts) or "batch coverage violated")
        self.missing = tuple(missing)
        self.duplicated = tuple(duplicated)


@dataclass(frozen=True)
class EnrichedParagraph:
    paragraph: Paragraph
    api_calls: Tuple[Tuple[ApiCallCandidate, TtpAssignment], ...] = ()
    source_url: str = ""
    raw: bool = False  # generation without extracted API calls

    def __post_init__(self):
        if not self.api_calls and not self.raw:
            raise ValueError(f"enriched paragraph {self.paragraph.index} has no API calls")
        if isinstance(self.api_calls, list):
            object.__setattr__(self, "api_calls", tuple(self.api_calls))


@dataclass(frozen=True)
class GeneratorMetadata:
    model_name: str
    prompt_version: str
    timestamp: str


@dataclass(frozen=True)
class CandidateBatch:
    paragraph_index: int
    rules: Tuple[SigmaRule, ...]
    generator_metadata: GeneratorMetadata
    rejected: int = 0


class RejectionLog:
    """Append-only JSON lines audit of rejected rules."""

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path else None
        self.count = 0
        self._lock = threading.Lock()

    def append(self, reason: str, paragraph_index: Optional[int], raw_rule: Any) -> None:
        entry = {"reason": reason, "paragraph_index": paragraph_index, "rule": raw_rule}
        with self._lock:
            self.count += 1
            if self.path is None:
                return
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as handle:
                handle.write(json.dumps(entry, ensure_ascii=False, default=str) + "\n")


# ---------------------------------------------------------------------------
# Validator
# ---------------------------------------------------------------------------

def _scalar(value: Any) -> Optional[str]:
    if value is None:
        return None
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (dt.date, dt.datetime)):
        return value.isoformat()
    return str(value)


def _flatten(value: Any, prefix: str, out: Dict[str, List[str]]) -> None:
    """Nested maps become dotted keys; lists of maps are merged; scalars are collected per key."""
    if isinstance(value, Mapping):
        for key, child in value.items():
            _flatten(child, f"{prefix}.{key}" if prefix else str(key), out)
        return
    if isinstance(value, (list, tuple)):
        for item in value:
            if isinstance(item, (Mapping, list, tuple)):
                _flatten(item, prefix, out)
            else:
                text = _scalar(item)
                if text is not None:
                    out.setdefault(prefix, []).append(text)
        return
    text = _scalar(value)
    if text is not None and prefix:
        out.setdefault(prefix, []).append(text)


def _sanitized(key: str, values: List[str]) -> List[str]:
    path = key.partition("|")[0].strip()
    if path.split(".")[-1].lower() in SANITIZED_FIELDS:
        return []
    return [v for v in values if not ARN_RE.match(v.strip())]


def _selection_name(name: Any, used: set) -> str:
    text = re.sub(r"[^a-z0-9_]", "_", str(name).strip().lower())
    if not text.startswith("selection"):
        text = "selection_" + text.lstrip("_")
    candidate, suffix = text, 2
    while candidate in used:
        candidate = f"{text}_{suffix}"
        suffix += 1
    used.add(candidate)
    return candidate


def _condition_text(condition: Any) -> str:
    if isinstance(condition, (list, tuple)):
        return " or ".join(f"({c})" for c in condition)
    return str(condition)


def _valid_url(text: str) -> bool:
    """http(s) URLs with a host, or file URLs with a path (reports read from disk)."""
    parsed = urlparse(text.strip())
    if " " in text.strip():
        return False
    if parsed.scheme == "file":
        return bool(parsed.path.strip("/"))
    return parsed.scheme in ("http", "https") and bool(parsed.netloc)


def _date_or(value: Any, fallback: dt.date) -> dt.date:
    if isinstance(value, dt.datetime):
        return value.date()
    if isinstance(value, dt.date):
        return value
    try:
        return dt.date.fromisoformat(str(value).strip().replace("/", "-"))
    except (TypeError, ValueError):
        return fallback


def repair_tag(tag: Any) -> Optional[str]:
    """``T1530`` → ``attack.t1530``, ``Collection`` → ``attack.collection``; None when unusable."""
    text = str(tag).strip().lower()
    if text.startswith("attack."):
        text = text[len("attack."):]
    text = re.sub(r"[\s_]+", "-", text)
    try:
        return TtpTag.parse(f"attack.{text}").text
    except SigmaRuleError:
        return None


def _as_list(value: Any) -> List[Any]:
    if value is None:
        return []
    if isinstance(value, (list, tuple)):
        return list(value)
    return [value]


def validate_rule(rule: Union[SigmaRule, Mapping[str, Any]], run_date: Optional[dt.date] = None,
                  tool_name: str = TOOL_NAME) -> SigmaRule:
    """Sanitize, reformat and repair metadata, then re-check every rule invariant.

    Raises RuleRejected when the rule cannot be repaired. Idempotent.
    """
    run_date = run_date or dt.date.today()
    data = rule_to_mapping(rule) if isinstance(rule, SigmaRule) else copy.deepcopy(rule)
    if not isinstance(data, Mapping):
        raise RuleRejected("rule is not a mapping")
    detection = data.get("detection")
    if not isinstance(detection, Mapping):
        raise RuleRejected("missing detection")
    if detection.get("condition") in (None, ""):
        raise RuleRejected("missing condition")

    # Sanitation and reformatting
    used: set = set()
    renames: Dict[str, str] = {}
    selections: Dict[str, Dict[str, Any]] = {}
    emptied: List[str] = []
    for name, body in detection.items():
        if name == "condition":
            continue
        if not isinstance(body, (Mapping, list, tuple)):
            raise RuleRejected(f"selection {name} is not a mapping of field criteria")
        new_name = _selection_name(name, used)
        renames[str(name)] = new_name
        renames.setdefault(str(name).lower(), new_name)
        flat: Dict[str, List[str]] = {}
        _flatten(body, "", flat)
        criteria: Dict[str, Any] = {}
        for key, values in flat.items():
            kept = _sanitized(key, values)
            if kept:
                criteria[key] = kept[0] if len(kept) == 1 else kept
        if criteria:
            selections[new_name] = criteria
        else:
            emptied.append(new_name)

    try:
        condition = parse_condition(_condition_text(detection["condition"]))
    except SigmaRuleError as exc:
        raise RuleRejected(f"condition does not parse: {exc}") from exc
    condition = rename_identifiers(
        condition, {i: renames.get(i, renames.get(i.lower(), i)) for i in condition_identifiers(condition)}
    )
    if emptied:
        logger.debug(f"Sanitation emptied {emptied}")
        condition = prune_condition(condition, emptied)
        if condition is None:
            raise RuleRejected("condition is empty after sanitation")
    if not selections:
        raise RuleRejected("no selection survives sanitation")

    # Metadata
    references = [str(r).strip() for r in _as_list(data.get("references"))]
    valid_refs = []
    for ref in references:
        if _valid_url(ref):
            if ref not in valid_refs:
                valid_refs.append(ref)
        else:
            logger.warning(f"⚠️ Dropping malformed reference {ref!r}")
    tags = []
    for tag in _as_list(data.get("tags")):
        repaired = repair_tag(tag)
        if repaired is None:
            logger.warning(f"⚠️ Dropping unknown tag {tag!r}")
        elif repaired not in tags:
            tags.append(repaired)
    status = str(data.get("status") or "").strip().lower()
    logsource = data.get("logsource")
    if not isinstance(logsource, Mapping):
        raise RuleRejected("missing logsource")

    repaired_doc: Dict[str, Any] = {
        "title": data.get("title"),
        "id": data.get("id"),
        "status": status if status in STATUSES else None,
        "description": data.get("description") or "",
        "references": valid_refs,
        "author": tool_name,
        "date": _date_or(data.get("date"), run_date),
        "modified": _date_or(data.get("modified"), run_date),
        "tags": tags,
        "logsource": dict(logsource),
        "detection": {**selections, "condition": print_condition(condition)},
        "falsepositives": [str(f) for f in _as_list(data.get("falsepositives")) if f is not None],
        "level": str(data.get("level") or "").strip().lower(),
    }
    if repaired_doc["level"] not in LEVELS:
        raise RuleRejected(f"invalid level {data.get('level')!r}")
    try:
        validated = rule_from_mapping(repaired_doc)
        compile_rule(validated)
    except SigmaRuleError as exc:
        raise RuleRejected(str(exc)) from exc
    return validated


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def render_enriched_paragraph(ep: EnrichedParagraph) -> str:
    lines = [ep.paragraph.render()]
    if ep.api_calls:
        lines.append("")
        lines.append("API calls:")
        for candidate, assignment in ep.api_calls:
            sub = assignment.sub_technique or "none"
            lines.append(
                f"- {candidate.event_name} ({candidate.event_source or 'unknown source'}): "
                f"tactic {assignment.tactic_slug}, technique {assignment.technique}, sub-technique {sub}"
            )
    if ep.source_url:
        lines.append("")
        lines.append(f"Report URL: {ep.source_url}")
    return "\n".join(lines)


def _prepare(raw: Any, ep: EnrichedParagraph, tool_name: str) -> Any:
    if not isinstance(raw, dict):
        return raw
    prepared = dict(raw)
    prepared["logsource"] = dict(CLOUDTRAIL_LOGSOURCE)
    prepared["author"] = tool_name
    references = [r for r in _as_list(prepared.get("references"))]
    if ep.source_url and ep.source_url not in references:
        references.insert(0, ep.source_url)
    prepared["references"] = references
    return prepared


def _validate_batch(raw_rules: Sequence[Any], ep: EnrichedParagraph, run_date: Optional[dt.date],
                    rejection_log: Optional[RejectionLog], tool_name: str) -> Tuple[List[SigmaRule], int]:
    rules: List[SigmaRule] = []
    rejected = 0
    for raw in raw_rules:
        try:
            rules.append(validate_rule(_prepare(raw, ep, tool_name), run_date, tool_name))
        except RuleRejected as exc:
            rejected += 1
            logger.warning(f"⚠️ Paragraph {ep.paragraph.index}: rule rejected ({exc.reason})")
            if rejection_log is not None:
                rejection_log.append(exc.reason, ep.paragraph.index, raw)
    return rules, rejected


def batch_coverage(rules: Sequence[SigmaRule], ep: EnrichedParagraph) -> Tuple[List[str], List[str]]:
    """(missing, duplicated) API calls of the paragraph across the batch."""
    missing, duplicated = [], []
    rule_calls = [detection_api_calls(rule.detection) for rule in rules]
    for candidate, _ in ep.api_calls:
        hits = sum(1 for calls in rule_calls if any(same_api_call(candidate.api_call, c) for c in calls))
        if hits == 0:
            missing.append(str(candidate.api_call))
        elif hits > 1:
            duplicated.append(str(candidate.api_call))
    return missing, duplicated


def generate_rules(ep: EnrichedParagraph, gateway: LlmGateway, temperature: float = DEFAULT_TEMPERATURE,
                   run_date: Optional[dt.date] = None, rejection_log: Optional[RejectionLog] = None,
                   model_name: str = "", tool_name: str = TOOL_NAME) -> CandidateBatch:
    """Generate and validate the initial rules for one paragraph.

    A batch that misses or duplicates one of the paragraph's API calls is re-prompted
    once; a second violation raises PostconditionViolation.
    """
    prompt = load_prompt("rule_generator")
    request = LlmRequest.text(prompt.text, render_enriched_paragraph(ep), temperature, "sigma_rules")
    rejected_total = 0
    for attempt in range(2):
        response = gateway.complete(request)
        rules, rejected = _validate_batch(response.parsed_json["rules"], ep, run_date, rejection_log, tool_name)
        rejected_total += rejected
        violation = None
        if not ep.raw:
            missing, duplicated = batch_coverage(rules, ep)
            if missing or duplicated:
                violation = PostconditionViolation(missing, duplicated)
        if violation is None:
            logger.info(f"📝 Paragraph {ep.paragraph.index}: {len(rules)} rule(s), {rejected_total} rejected")
            metadata = GeneratorMetadata(model_name, prompt.version, dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"))
            return CandidateBatch(ep.paragraph.index, tuple(rules), metadata, rejected_total)
        if attempt:
            logger.error(f"❌ Paragraph {ep.paragraph.index}: {violation}")
            raise violation
        logger.warning(f"⚠️ Paragraph {ep.paragraph.index}: {violation}, re-prompting")
        request = request.with_feedback(str(violation))
    raise AssertionError("unreachable")
