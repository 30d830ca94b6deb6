"""Evaluation harness: entity and relationship precision/recall/F1 against annotated
ground truth, and the per-rule candidate criteria.

Ground-truth file (one per report)::

    {"oscti_id": "scarleteel",
     "entities": [{"type": "ApiCall", "value": "GetObject"}, ...],
     "relationships": [{"type": "ApiCall-Technique", "left": "GetObject", "right": "T1530"}, ...]}
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import pandas as pd
import yaml

from ioc import IP_FIELD, USER_AGENT_FIELD, IocSet, canonical_ip, deobfuscate
from refine import RuleSet, extract_apis
from sigma_core import (
    EVENT_NAME_FIELD,
    FieldKey,
    SigmaRule,
    SigmaRuleError,
    block_api_calls,
    compile_rule,
    condition_identifiers,
    parse_condition,
    parse_rule,
    print_condition,
    value_items,
)

logger = logging.getLogger(__name__)

ENTITY_TYPES = ("ApiCall", "Tactic", "Technique", "SubTechnique", "IoC", "Other")
RELATIONSHIP_TYPES = (
    "DetectionEntity-SigmaField",
    "ApiCall-Tactic",
    "ApiCall-Technique",
    "ApiCall-SubTechnique",
    "ApiCall-IoC",
    "ApiCall-Other",
)
WEIGHTED_ROW = "Weighted Avg."
CANDIDATE_COLUMNS = ("#Rules", "Executability", "Condition Accuracy", "Criticality Accuracy", "Descriptive Alignment")

MANUAL_CRITERIA = ("criticality_accurate", "descriptive_aligned")

_IOC_FIELDS = (IP_FIELD, USER_AGENT_FIELD)

Entity = Tuple[str, str]
Relationship = Tuple[str, str, str]


class EvaluationError(ValueError):
    pass


class UnknownEntityType(EvaluationError):
    pass


class UnknownRelationshipType(EvaluationError):
    pass


class MissingEndpoint(EvaluationError):
    pass


class AnnotationMismatch(EvaluationError):
    pass


class MissingGroundTruth(EvaluationError):
    pass


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def _strip_attack(text: str) -> str:
    return text[len("attack."):] if text.lower().startswith("attack.") else text


def normalize_value(entity_type: str, value: Any) -> str:
    text = str(value).strip()
    if entity_type == "ApiCall":
        return text.rpartition(":")[2].strip()
    if entity_type == "Tactic":
        return "-".join(_strip_attack(text).lower().replace("_", " ").split())
    if entity_type in ("Technique", "SubTechnique"):
        return _strip_attack(text).upper()
    if entity_type in ("IoC", "DetectionEntity"):
        return canonical_ip(text) or deobfuscate(text).strip().casefold()
    if entity_type == "SigmaField":
        return FieldKey.parse(text).path.casefold()
    if entity_type == "Other":
        return text.casefold()
    raise UnknownEntityType(f"unknown entity type: {entity_type!r}")


def _endpoint_types(relationship_type: str) -> Tuple[str, str]:
    if relationship_type not in RELATIONSHIP_TYPES:
        raise UnknownRelationshipType(f"unknown relationship type: {relationship_type!r}")
    left, right = relationship_type.split("-", 1)
    return left, right


def relationship(relationship_type: str, left: Any, right: Any) -> Relationship:
    left_type, right_type = _endpoint_types(relationship_type)
    return relationship_type, normalize_value(left_type, left), normalize_value(right_type, right)


# ---------------------------------------------------------------------------
# Ground truth
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GroundTruth:
    oscti_id: str
    entities: FrozenSet[Entity] = frozenset()
    relationships: FrozenSet[Relationship] = frozenset()

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], default_id: str = "") -> "GroundTruth":
        entities = set()
        for item in data.get("entities", []):
            if item.get("type") not in ENTITY_TYPES:
                raise UnknownEntityType(f"unknown entity type: {item.get('type')!r}")
            entities.add((item["type"], normalize_value(item["type"], item["value"])))
        relationships = set()
        for item in data.get("relationships", []):
            rel = relationship(item.get("type"), item["left"], item["right"])
            left_type, right_type = _endpoint_types(rel[0])
            for endpoint_type, value in ((left_type, rel[1]), (right_type, rel[2])):
                if endpoint_type in ENTITY_TYPES and (endpoint_type, value) not in entities:
                    raise MissingEndpoint(f"{rel[0]} endpoint {value!r} is not an annotated {endpoint_type}")
            relationships.add(rel)
        return cls(str(data.get("oscti_id") or default_id), frozenset(entities), frozenset(relationships))


def load_ground_truth(path: Union[str, Path]) -> GroundTruth:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise EvaluationError(f"cannot read ground truth {path}: {exc}") from exc
    return GroundTruth.from_dict(data, default_id=path.stem)


# ---------------------------------------------------------------------------
# Counts and reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        return f1_score(self.precision, self.recall)

    def __add__(self, other: "Counts") -> "Counts":
        return Counts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def f1_score(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


@dataclass(frozen=True)
class MetricRow:
    count: int
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, counts: Counts) -> "MetricRow":
        return cls(counts.tp + counts.fn, counts.precision, counts.recall, counts.f1)

    @classmethod
    def from_pr(cls, count: int, precision: float, recall: float) -> "MetricRow":
        return cls(int(count), float(precision), float(recall), f1_score(float(precision), float(recall)))


def match_sets(predicted: Iterable[Any], truth: Iterable[Any]) -> Counts:
    predicted, truth = set(predicted), set(truth)
    return Counts(len(predicted & truth), len(predicted - truth), len(truth - predicted))


def match_entities(predicted: Iterable[Entity], truth: GroundTruth) -> Dict[str, Counts]:
    predicted = set(predicted)
    return {
        kind: match_sets({e for e in predicted if e[0] == kind}, {e for e in truth.entities if e[0] == kind})
        for kind in ENTITY_TYPES
    }


def match_relationships(predicted: Iterable[Relationship], truth: GroundTruth) -> Dict[str, Counts]:
    predicted = set(predicted)
    return {
        kind: match_sets({r for r in predicted if r[0] == kind}, {r for r in truth.relationships if r[0] == kind})
        for kind in RELATIONSHIP_TYPES
    }


@dataclass
class MetricsReport:
    types: Tuple[str, ...]
    per_oscti: Dict[str, Dict[str, MetricRow]] = field(default_factory=dict)
    weighted_avg: Dict[str, MetricRow] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        rows = {}
        for oscti, per_type in list(self.per_oscti.items()) + [(WEIGHTED_ROW, self.weighted_avg)]:
            row = {}
            for kind in self.types:
                metric = per_type.get(kind)
                if metric is None:
                    continue
                row[(kind, "#")] = metric.count
                row[(kind, "P")] = metric.precision
                row[(kind, "R")] = metric.recall
                row[(kind, "F1")] = metric.f1
            rows[oscti] = row
        frame = pd.DataFrame.from_dict(rows, orient="index")
        if not frame.empty:
            frame.columns = pd.MultiIndex.from_tuples(frame.columns)
        return frame

    def render_table(self) -> str:
        frame = self.to_frame()
        if frame.empty:
            return "(no rows)"
        return frame.to_string(float_format=lambda v: f"{v:.2f}")

    def to_dict(self) -> Dict[str, Any]:
        def row_dict(metric: MetricRow) -> Dict[str, float]:
            return {"count": metric.count, "precision": round(metric.precision, 4),
                    "recall": round(metric.recall, 4), "f1": round(metric.f1, 4)}

        return {
            "per_oscti": {o: {k: row_dict(m) for k, m in rows.items()} for o, rows in self.per_oscti.items()},
            "weighted_avg": {k: row_dict(m) for k, m in self.weighted_avg.items()},
        }


def compute_report(per_oscti: Mapping[str, Mapping[str, Union[Counts, MetricRow]]],
                   types: Optional[Sequence[str]] = None) -> MetricsReport:
    """Per-row P/R/F1 plus averages weighted by each row's # (annotated count)."""
    if not per_oscti:
        raise EvaluationError("compute_report needs at least one report row")
    rows: Dict[str, Dict[str, MetricRow]] = {}
    seen_types: List[str] = list(types or [])
    for oscti, per_type in per_oscti.items():
        rows[str(oscti)] = {}
        for kind, value in per_type.items():
            rows[str(oscti)][kind] = MetricRow.from_counts(value) if isinstance(value, Counts) else value
            if kind not in seen_types:
                seen_types.append(kind)

    weighted: Dict[str, MetricRow] = {}
    for kind in seen_types:
        metrics = [per_type[kind] for per_type in rows.values() if kind in per_type]
        total = sum(m.count for m in metrics)
        if total == 0:
            weighted[kind] = MetricRow(0, 0.0, 0.0, 0.0)
            continue
        weighted[kind] = MetricRow(
            total,
            sum(m.count * m.precision for m in metrics) / total,
            sum(m.count * m.recall for m in metrics) / total,
            sum(m.count * m.f1 for m in metrics) / total,
        )
    return MetricsReport(tuple(seen_types), rows, weighted)


def report_from_published(columns: Mapping[str, Sequence[Sequence[float]]]) -> MetricsReport:
    """Report from per-report (#, P, R) rows given per type; row i is report i + 1."""
    per_oscti: Dict[str, Dict[str, MetricRow]] = {}
    for kind, rows in columns.items():
        for position, (count, precision, recall) in enumerate(rows, start=1):
            per_oscti.setdefault(str(position), {})[kind] = MetricRow.from_pr(count, precision, recall)
    return compute_report(per_oscti, types=list(columns))


def load_count_rows(path: Union[str, Path]) -> MetricsReport:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return report_from_published(data)


def check_thresholds(report: MetricsReport, thresholds: Mapping[str, Mapping[str, float]]) -> List[str]:
    """Every missed acceptance threshold, e.g. ``{"ApiCall": {"precision": 0.9}}``."""
    missed = []
    for kind, limits in thresholds.items():
        metric = report.weighted_avg.get(kind)
        for name, minimum in limits.items():
            value = getattr(metric, name, None) if metric is not None else None
            if value is None:
                missed.append(f"{kind}.{name}: not reported (threshold {minimum:.2f})")
            elif value + 1e-9 < minimum:
                missed.append(f"{kind}.{name}: {value:.2f} < {minimum:.2f}")
    return missed


# ---------------------------------------------------------------------------
# Predictions from final rules
# ---------------------------------------------------------------------------

def _is_ioc_field(key: FieldKey) -> bool:
    return key.path in _IOC_FIELDS


def _is_other_field(key: FieldKey) -> bool:
    return key.path != EVENT_NAME_FIELD and not _is_ioc_field(key)


def _rule_iocs(rule: SigmaRule) -> List[str]:
    return [item for _, key, value in rule.iter_criteria() if _is_ioc_field(key) for item in value_items(value)]


def _rules_of(rules: Union[RuleSet, Sequence[SigmaRule]]) -> Sequence[SigmaRule]:
    return rules.rules if isinstance(rules, RuleSet) else rules


def predicted_entities(rules: Union[RuleSet, Sequence[SigmaRule]], iocs: Optional[IocSet] = None) -> FrozenSet[Entity]:
    entities = set()
    for rule in _rules_of(rules):
        for api in extract_apis(rule):
            entities.add(("ApiCall", normalize_value("ApiCall", api.event_name)))
        for tag in rule.tags:
            kind = {"tactic": "Tactic", "technique": "Technique", "subtechnique": "SubTechnique"}[tag.kind]
            entities.add((kind, normalize_value(kind, tag.value)))
        for _, key, value in rule.iter_criteria():
            if _is_ioc_field(key):
                entities.update(("IoC", normalize_value("IoC", item)) for item in value_items(value))
            elif _is_other_field(key):
                entities.update(("Other", normalize_value("Other", item)) for item in value_items(value))
    if iocs is not None:
        for item in iocs.ip_addresses + iocs.user_agents:
            entities.add(("IoC", normalize_value("IoC", item)))
    return frozenset(entities)


def predicted_relationships(rules: Union[RuleSet, Sequence[SigmaRule]]) -> FrozenSet[Relationship]:
    """Relationships implied by rule structure.

    Detection entity to field for every criterion value; API call to TTP through the
    rule's tags; API call to IoC within one rule; API call to other values within one
    selection.
    """
    relationships = set()
    tag_types = {"tactic": "ApiCall-Tactic", "technique": "ApiCall-Technique", "subtechnique": "ApiCall-SubTechnique"}
    for rule in _rules_of(rules):
        for _, key, value in rule.iter_criteria():
            for item in value_items(value):
                relationships.add(relationship("DetectionEntity-SigmaField", item, key.path))
        apis = [api.event_name for api in extract_apis(rule)]
        iocs = _rule_iocs(rule)
        for api in apis:
            for tag in rule.tags:
                relationships.add(relationship(tag_types[tag.kind], api, tag.value))
            for item in iocs:
                relationships.add(relationship("ApiCall-IoC", api, item))
        for _, block in rule.detection.selections:
            block_apis = {call.event_name for call in block_api_calls(block)}
            others = [item for key, value in block.criteria if _is_other_field(key) for item in value_items(value)]
            for api in block_apis:
                for item in others:
                    relationships.add(relationship("ApiCall-Other", api, item))
    return frozenset(relationships)


# ---------------------------------------------------------------------------
# Candidate criteria
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RuleVerdict:
    rule_id: str
    title: str
    executable: bool
    condition_accurate: bool
    criticality_accurate: Optional[bool] = None
    descriptive_aligned: Optional[bool] = None


@dataclass(frozen=True)
class CandidateCounts:
    rules: int
    executable: int
    condition_accurate: int
    criticality_accurate: Optional[int] = None
    descriptive_aligned: Optional[int] = None


@dataclass(frozen=True)
class CandidateVerdicts:
    verdicts: Tuple[RuleVerdict, ...] = ()

    def counts(self) -> CandidateCounts:
        def manual(name: str) -> Optional[int]:
            values = [getattr(v, name) for v in self.verdicts if getattr(v, name) is not None]
            return sum(values) if values else None

        return CandidateCounts(
            len(self.verdicts),
            sum(v.executable for v in self.verdicts),
            sum(v.condition_accurate for v in self.verdicts),
            manual("criticality_accurate"),
            manual("descriptive_aligned"),
        )

    def summary(self) -> Dict[str, Any]:
        return candidate_totals({"run": self.counts()})


def _condition_accurate(rule: SigmaRule) -> bool:
    try:
        reparsed = parse_condition(print_condition(rule.detection.condition))
    except SigmaRuleError:
        return False
    return reparsed == rule.detection.condition and set(condition_identifiers(reparsed)) == set(rule.detection.names)


def load_annotations(path: Optional[Union[str, Path]]) -> Dict[str, Dict[str, bool]]:
    if path is None or not Path(path).exists():
        return {}
    text = Path(path).read_text(encoding="utf-8").strip()
    return json.loads(text) if text else {}


def save_annotations(path: Union[str, Path], annotations: Mapping[str, Mapping[str, Optional[bool]]]) -> Path:
    """Write manual verdicts; unanswered (None) verdicts are left out."""
    cleaned = {}
    for rule_id, note in annotations.items():
        kept = {k: bool(v) for k, v in note.items() if k in MANUAL_CRITERIA and v is not None}
        if kept:
            cleaned[rule_id] = kept
    path = Path(path)
    path.write_text(json.dumps(cleaned, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(f"💾 Saved {len(cleaned)} annotation(s) to {path}")
    return path


def _rule_verdict(rule: SigmaRule, position: int) -> RuleVerdict:
    try:
        compile_rule(rule)
        executable = True
    except SigmaRuleError:
        executable = False
    return RuleVerdict(rule.id or f"rule-{position}", rule.title, executable, _condition_accurate(rule))


def _unparsed_verdict(text: str, position: int) -> RuleVerdict:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError:
        raw = None
    raw = raw if isinstance(raw, dict) else {}
    return RuleVerdict(str(raw.get("id") or f"rule-{position}"), str(raw.get("title") or ""), False, False)


def check_candidates(rules: Iterable[Union[SigmaRule, str]],
                     annotations: Optional[Mapping[str, Mapping[str, Any]]] = None) -> CandidateVerdicts:
    """Automated executability and condition checks, merged with manual verdicts by rule id.

    Items may be rule values or raw YAML text; text that does not parse counts as
    neither executable nor condition-accurate.
    """
    annotations = dict(annotations or {})
    verdicts: List[RuleVerdict] = []
    for position, item in enumerate(rules, start=1):
        if not isinstance(item, SigmaRule):
            try:
                item = parse_rule(item)
            except SigmaRuleError:
                verdicts.append(_unparsed_verdict(item, position))
                continue
        verdicts.append(_rule_verdict(item, position))

    known = {v.rule_id for v in verdicts}
    unknown = sorted(set(annotations) - known)
    if unknown:
        raise AnnotationMismatch(f"annotations reference unknown rule id(s): {', '.join(unknown)}")
    merged = []
    for verdict in verdicts:
        note = annotations.get(verdict.rule_id, {})
        merged.append(RuleVerdict(
            verdict.rule_id, verdict.title, verdict.executable, verdict.condition_accurate,
            note.get("criticality_accurate"), note.get("descriptive_aligned"),
        ))
    return CandidateVerdicts(tuple(merged))


def _pct(part: Optional[int], whole: int) -> Optional[float]:
    if part is None:
        return None
    return 100.0 * part / whole if whole else 0.0


def candidate_totals(per_oscti: Mapping[str, CandidateCounts]) -> Dict[str, Any]:
    """Totals across reports: mean rules per report and each criterion as a percentage."""
    counts = list(per_oscti.values())
    total = sum(c.rules for c in counts)

    def manual_total(name: str) -> Optional[int]:
        values = [getattr(c, name) for c in counts if getattr(c, name) is not None]
        return sum(values) if values else None

    return {
        "reports": len(counts),
        "rules": total,
        "mean_rules": total / len(counts) if counts else 0.0,
        "executable_pct": _pct(sum(c.executable for c in counts), total),
        "condition_accurate_pct": _pct(sum(c.condition_accurate for c in counts), total),
        "criticality_accurate_pct": _pct(manual_total("criticality_accurate"), total),
        "descriptive_aligned_pct": _pct(manual_total("descriptive_aligned"), total),
    }


def summarize_candidates(per_oscti: Mapping[str, CandidateCounts]) -> pd.DataFrame:
    """One row of counts per report and a closing row of mean rules and percentages."""
    rows: Dict[str, List[Any]] = {}
    for oscti, c in per_oscti.items():
        rows[str(oscti)] = [c.rules, c.executable, c.condition_accurate,
                            "n/a" if c.criticality_accurate is None else c.criticality_accurate,
                            "n/a" if c.descriptive_aligned is None else c.descriptive_aligned]
    totals = candidate_totals(per_oscti)

    def fmt(value: Optional[float]) -> str:
        return "n/a" if value is None else f"{value:.2f}%"

    rows[WEIGHTED_ROW] = [
        round(totals["mean_rules"], 2),
        fmt(totals["executable_pct"]),
        fmt(totals["condition_accurate_pct"]),
        fmt(totals["criticality_accurate_pct"]),
        fmt(totals["descriptive_aligned_pct"]),
    ]
    return pd.DataFrame.from_dict(rows, orient="index", columns=list(CANDIDATE_COLUMNS))


# ---------------------------------------------------------------------------
# Directory evaluation
# ---------------------------------------------------------------------------

@dataclass
class RunOutput:
    rules: List[SigmaRule]
    texts: List[str]
    iocs: IocSet
    annotations: Dict[str, Dict[str, bool]]


@dataclass
class EvaluationResult:
    entities: MetricsReport
    relationships: MetricsReport
    candidates: Dict[str, CandidateVerdicts]

    def write(self, out_dir: Union[str, Path]) -> List[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        per_oscti = {oscti: v.counts() for oscti, v in self.candidates.items()}
        metrics = {
            "entities": self.entities.to_dict(),
            "relationships": self.relationships.to_dict(),
            "candidates": candidate_totals(per_oscti) if per_oscti else {},
        }
        paths = [out / "metrics.json", out / "entities.txt", out / "relationships.txt", out / "candidates.txt"]
        paths[0].write_text(json.dumps(metrics, indent=2) + "\n", encoding="utf-8")
        paths[1].write_text(self.entities.render_table() + "\n", encoding="utf-8")
        paths[2].write_text(self.relationships.render_table() + "\n", encoding="utf-8")
        table = summarize_candidates(per_oscti).to_string() if per_oscti else "(no rules)"
        paths[3].write_text(table + "\n", encoding="utf-8")
        logger.info(f"💾 Wrote evaluation reports to {out}")
        return paths


def _rule_files(run_dir: Path) -> List[Path]:
    rules_dir = run_dir / "rules"
    base = rules_dir if rules_dir.is_dir() else run_dir
    return sorted(list(base.glob("*.yml")) + list(base.glob("*.yaml")))


def load_run_output(run_dir: Union[str, Path]) -> RunOutput:
    run_dir = Path(run_dir)
    rules, texts = [], []
    for path in _rule_files(run_dir):
        text = path.read_text(encoding="utf-8")
        texts.append(text)
        try:
            rules.append(parse_rule(text))
        except SigmaRuleError as exc:
            logger.warning(f"⚠️ {path.name} does not parse: {exc}")
    iocs_path = run_dir / "iocs.json"
    iocs = IocSet.from_dict(json.loads(iocs_path.read_text(encoding="utf-8"))) if iocs_path.exists() else IocSet()
    return RunOutput(rules, texts, iocs, load_annotations(run_dir / "annotations.json"))


def evaluate_run(run: RunOutput, truth: GroundTruth) -> Tuple[Dict[str, Counts], Dict[str, Counts], CandidateVerdicts]:
    entity_counts = match_entities(predicted_entities(run.rules, run.iocs), truth)
    relationship_counts = match_relationships(predicted_relationships(run.rules), truth)
    return entity_counts, relationship_counts, check_candidates(run.texts, run.annotations)


def evaluate_directories(rules_dir: Union[str, Path], truth_dir: Union[str, Path]) -> EvaluationResult:
    """Evaluate run outputs (one sub-directory per report, or a single run) against truth files."""
    rules_dir, truth_dir = Path(rules_dir), Path(truth_dir)
    truths = {t.oscti_id: t for t in (load_ground_truth(p) for p in sorted(truth_dir.glob("*.json")))}
    if not truths:
        raise MissingGroundTruth(f"no ground-truth files in {truth_dir}")

    runs: Dict[str, Optional[Path]] = {}
    if _rule_files(rules_dir):
        runs[rules_dir.name] = rules_dir
    elif rules_dir.is_dir():
        runs = {p.name: p for p in sorted(rules_dir.iterdir()) if p.is_dir() and _rule_files(p)}
    if not runs:
        logger.warning(f"⚠️ No rule files under {rules_dir}, evaluating empty predictions")
        runs = {oscti: None for oscti in truths}

    entity_rows: Dict[str, Dict[str, Counts]] = {}
    relationship_rows: Dict[str, Dict[str, Counts]] = {}
    candidates: Dict[str, CandidateVerdicts] = {}
    for oscti, run_dir in runs.items():
        truth = truths.get(oscti)
        if truth is None and len(truths) == 1 and len(runs) == 1:
            truth = next(iter(truths.values()))
        if truth is None:
            raise MissingGroundTruth(f"no ground-truth file for {oscti} in {truth_dir}")
        run = load_run_output(run_dir) if run_dir is not None else RunOutput([], [], IocSet(), {})
        entity_rows[oscti], relationship_rows[oscti], verdicts = evaluate_run(run, truth)
        if verdicts.verdicts:
            candidates[oscti] = verdicts
        logger.info(f"✓ Evaluated {oscti}: {len(run.rules)} rule(s)")
    return EvaluationResult(
        compute_report(entity_rows, ENTITY_TYPES),
        compute_report(relationship_rows, RELATIONSHIP_TYPES),
        candidates,
    )
