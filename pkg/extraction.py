"""Paragraph-level API call extraction with majority voting, and ATT&CK mapping.

A paragraph first goes through the explicit pass (nExplicit identical runs at
temperature 0). Paragraphs with no explicit call surviving the vote are discarded;
the rest go through the implicit pass (2 x nExplicit runs at 0.9) and keep their
explicit calls whatever the implicit vote yields.
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter, defaultdict
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Hashable, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

from ingest import Paragraph
from llm_gateway import LlmGateway, LlmGatewayError, LlmRequest, LlmResponse
from prompt_assets import load_prompt
from sigma_core import ApiCall, TtpTag, same_api_call

logger = logging.getLogger(__name__)

ASSET_DIR = Path(__file__).resolve().parent / "assets"
CATALOG_PATH = ASSET_DIR / "attack_cloud_catalog.json"
SERVICE_TABLE_PATH = ASSET_DIR / "aws_action_services.json"

DEFAULT_TEMPERATURES = {"explicit": 0.0, "implicit": 0.9, "ttp": 0.5}


class CatalogMiss(LookupError):
    """A TTP assignment that failed catalog validation after its retry."""


@dataclass(frozen=True)
class VotingConfig:
    n_explicit: int = 3
    t_explicit: int = 2
    t_implicit: int = 3

    def __post_init__(self):
        if self.n_explicit < 1:
            raise ValueError("voting.n_explicit must be >= 1")
        if not 1 <= self.t_explicit <= self.n_explicit:
            raise ValueError(f"voting.t_explicit must be within [1, {self.n_explicit}]")
        if not 1 <= self.t_implicit <= self.n_implicit:
            raise ValueError(f"voting.t_implicit must be within [1, {self.n_implicit}]")

    @property
    def n_implicit(self) -> int:
        return 2 * self.n_explicit


@dataclass(frozen=True)
class ApiCallCandidate:
    event_name: str
    event_source: str
    votes: int
    origin: str  # explicit | implicit
    paragraph_index: int

    def __post_init__(self):
        if not self.event_name:
            raise ValueError("eventName must be non-empty")
        if self.votes < 0:
            raise ValueError("votes must be >= 0")
        if self.origin not in ("explicit", "implicit"):
            raise ValueError(f"origin must be explicit or implicit: {self.origin!r}")

    @property
    def api_call(self) -> ApiCall:
        return ApiCall(self.event_source, self.event_name)


@dataclass(frozen=True)
class ParagraphApiCalls:
    paragraph_index: int
    explicit: Tuple[ApiCallCandidate, ...] = ()
    implicit: Tuple[ApiCallCandidate, ...] = ()

    @property
    def discarded(self) -> bool:
        return not self.explicit

    @property
    def candidates(self) -> Tuple[ApiCallCandidate, ...]:
        return self.explicit + self.implicit


# ---------------------------------------------------------------------------
# AWS action table and normalization
# ---------------------------------------------------------------------------

class AwsServiceTable:
    """CloudTrail eventName → eventSource lookups."""

    def __init__(self, actions: Mapping[str, str], prefixes: Mapping[str, str], version: str = ""):
        self.actions = dict(actions)
        self.prefixes = dict(prefixes)
        self.version = version
        self._lower = {name.lower(): source for name, source in self.actions.items()}

    @classmethod
    def load(cls, path: Optional[Union[str, Path]] = None) -> "AwsServiceTable":
        if path is None:
            return _default_service_table()
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(data["actions"], data.get("prefixes", {}), data.get("version", ""))

    def expand_prefix(self, prefix: str) -> Optional[str]:
        return self.prefixes.get(prefix.strip().lower())

    def service_for(self, event_name: str) -> Optional[str]:
        if event_name in self.actions:
            return self.actions[event_name]
        if event_name.lower() in self._lower:
            return self._lower[event_name.lower()]
        try:
            from rapidfuzz import fuzz, process
        except ImportError:
            logger.warning("rapidfuzz not installed, skipping fuzzy service lookup")
            return None
        match = process.extractOne(event_name, list(self.actions), scorer=fuzz.ratio, score_cutoff=92)
        return self.actions[match[0]] if match else None


@lru_cache(maxsize=1)
def _default_service_table() -> AwsServiceTable:
    data = json.loads(SERVICE_TABLE_PATH.read_text(encoding="utf-8"))
    return AwsServiceTable(data["actions"], data.get("prefixes", {}), data.get("version", ""))


def normalize_api_call(event_source: Optional[str], event_name: Optional[str],
                       table: Optional[AwsServiceTable] = None) -> ApiCall:
    """Lower-case the event source, keep the eventName spelling; infer a missing source."""
    table = table or _default_service_table()
    name = (event_name or "").strip()
    source = (event_source or "").strip().lower()
    if ":" in name:
        prefix, _, action = name.partition(":")
        name = action.strip()
        if not source:
            source = table.expand_prefix(prefix) or ""
    if source and "." not in source:
        source = table.expand_prefix(source) or f"{source}.amazonaws.com"
    if not source and name:
        source = table.service_for(name) or ""
    return ApiCall(source, name)


# ---------------------------------------------------------------------------
# Voting
# ---------------------------------------------------------------------------

def _name_key(item: Hashable) -> Tuple[str, str]:
    if isinstance(item, ApiCall):
        return (item.event_name, item.event_source)
    return (str(item), "")


def vote_tally(run_results: Sequence[Iterable[Hashable]], threshold: int) -> List[Tuple[Hashable, int]]:
    """Count each item once per run; keep items with votes >= threshold.

    Sorted by votes descending, then name ascending.
    """
    if not run_results:
        raise ValueError("vote_tally needs at least one run")
    counts: Counter = Counter()
    for run in run_results:
        counts.update(set(run))
    selected = [(item, votes) for item, votes in counts.items() if votes >= threshold]
    return sorted(selected, key=lambda pair: (-pair[1], _name_key(pair[0])))


def _resolve_blank_sources(runs: List[Set[ApiCall]]) -> List[Set[ApiCall]]:
    """Calls without an eventSource adopt the source other runs gave the same eventName."""
    sources: Dict[str, Counter] = defaultdict(Counter)
    for run in runs:
        for call in run:
            if call.event_source:
                sources[call.event_name][call.event_source] += 1
    resolved = []
    for run in runs:
        fixed = set()
        for call in run:
            if not call.event_source and sources.get(call.event_name):
                best = sorted(sources[call.event_name].items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
                call = ApiCall(best, call.event_name)
            fixed.add(call)
        resolved.append(fixed)
    return resolved


def _voting_runs(request: LlmRequest, runs: int, gateway: LlmGateway, table: AwsServiceTable,
                 paragraph_index: int) -> List[Set[ApiCall]]:
    results = gateway.complete_batch([request] * runs)
    run_sets: List[Set[ApiCall]] = []
    for number, result in enumerate(results, start=1):
        if not isinstance(result, LlmResponse):
            logger.warning(f"⚠️ Paragraph {paragraph_index}: run {number}/{runs} abstains ({result})")
            continue
        calls = set()
        for item in result.parsed_json["api_calls"]:
            call = normalize_api_call(item.get("eventSource"), item.get("eventName"), table)
            if call.event_name:
                calls.add(call)
        run_sets.append(calls)
    return _resolve_blank_sources(run_sets)


def _candidates(tally: List[Tuple[ApiCall, int]], origin: str, paragraph_index: int) -> List[ApiCallCandidate]:
    return [ApiCallCandidate(call.event_name, call.event_source, votes, origin, paragraph_index) for call, votes in tally]


def extract_explicit(paragraph: Paragraph, cfg: VotingConfig, gateway: LlmGateway,
                     temperature: float = DEFAULT_TEMPERATURES["explicit"],
                     table: Optional[AwsServiceTable] = None) -> List[ApiCallCandidate]:
    """API calls named verbatim in the paragraph that win the explicit vote."""
    table = table or _default_service_table()
    prompt = load_prompt("explicit_api_extractor")
    request = LlmRequest.text(prompt.text, paragraph.render(), temperature, "explicit_api_calls")
    runs = _voting_runs(request, cfg.n_explicit, gateway, table, paragraph.index)
    if not runs:
        logger.warning(f"⚠️ Paragraph {paragraph.index}: every explicit run failed, discarding")
        return []
    candidates = _candidates(vote_tally(runs, cfg.t_explicit), "explicit", paragraph.index)
    if candidates:
        logger.info(f"🔍 Paragraph {paragraph.index}: explicit {[c.event_name for c in candidates]}")
    else:
        logger.debug(f"Paragraph {paragraph.index}: no explicit API calls, discarded")
    return candidates


def extract_implicit(paragraph: Paragraph, explicit: Sequence[ApiCallCandidate], cfg: VotingConfig,
                     gateway: LlmGateway, temperature: float = DEFAULT_TEMPERATURES["implicit"],
                     table: Optional[AwsServiceTable] = None) -> List[ApiCallCandidate]:
    """API calls implied by the paragraph's operations, excluding the explicit ones."""
    if not explicit:
        raise ValueError(f"paragraph {paragraph.index} did not pass the explicit gate")
    table = table or _default_service_table()
    prompt = load_prompt("implicit_api_extractor")
    named = [{"eventName": c.event_name, "eventSource": c.event_source} for c in explicit]
    user_text = f"Paragraph:\n{paragraph.render()}\n\nExplicit: {json.dumps(named)}"
    request = LlmRequest.text(prompt.text, user_text, temperature, "implicit_api_calls")
    runs = _voting_runs(request, cfg.n_implicit, gateway, table, paragraph.index)
    if not runs:
        logger.warning(f"⚠️ Paragraph {paragraph.index}: every implicit run failed, keeping explicit calls only")
        return []
    known = [c.api_call for c in explicit]
    tally = [(call, votes) for call, votes in vote_tally(runs, cfg.t_implicit) if not any(same_api_call(call, k) for k in known)]
    candidates = _candidates(tally, "implicit", paragraph.index)
    if candidates:
        logger.info(f"🔍 Paragraph {paragraph.index}: implicit {[c.event_name for c in candidates]}")
    return candidates


def extract_api_calls(paragraph: Paragraph, cfg: VotingConfig, gateway: LlmGateway,
                      temperatures: Optional[Mapping[str, float]] = None,
                      table: Optional[AwsServiceTable] = None) -> ParagraphApiCalls:
    """Explicit pass, gate, implicit pass."""
    temps = {**DEFAULT_TEMPERATURES, **(temperatures or {})}
    explicit = extract_explicit(paragraph, cfg, gateway, temps["explicit"], table)
    if not explicit:
        return ParagraphApiCalls(paragraph.index)
    implicit = extract_implicit(paragraph, explicit, cfg, gateway, temps["implicit"], table)
    return ParagraphApiCalls(paragraph.index, tuple(explicit), tuple(implicit))


# ---------------------------------------------------------------------------
# ATT&CK catalog and TTP assignment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Tactic:
    id: str
    slug: str
    name: str


@dataclass(frozen=True)
class Technique:
    id: str
    name: str
    tactics: Tuple[str, ...]
    subtechniques: Tuple[str, ...]


class TtpCatalog:
    """Pinned tactic → technique → sub-technique hierarchy."""

    def __init__(self, version: str, tactics: Iterable[Tactic], techniques: Iterable[Technique]):
        self.version = version
        self.tactics: Dict[str, Tactic] = {}
        self.techniques: Dict[str, Technique] = {}
        for tactic in tactics:
            if tactic.slug in self.tactics or any(t.id == tactic.id for t in self.tactics.values()):
                raise ValueError(f"duplicate tactic in catalog: {tactic.id}")
            self.tactics[tactic.slug] = tactic
        seen_subs: Set[str] = set()
        for technique in techniques:
            if technique.id in self.techniques:
                raise ValueError(f"duplicate technique in catalog: {technique.id}")
            for slug in technique.tactics:
                if slug not in self.tactics:
                    raise ValueError(f"technique {technique.id} references unknown tactic {slug}")
            for sub in technique.subtechniques:
                if not sub.startswith(technique.id + ".") or sub in seen_subs:
                    raise ValueError(f"invalid or duplicate sub-technique {sub} under {technique.id}")
                seen_subs.add(sub)
            self.techniques[technique.id] = technique

    @classmethod
    def load(cls, path: Optional[Union[str, Path]] = None) -> "TtpCatalog":
        if path is None:
            return _default_catalog()
        return cls._from_file(Path(path))

    @classmethod
    def _from_file(cls, path: Path) -> "TtpCatalog":
        data = json.loads(path.read_text(encoding="utf-8"))
        tactics = [Tactic(t["id"], t["slug"], t["name"]) for t in data["tactics"]]
        techniques = [
            Technique(t["id"], t["name"], tuple(t["tactics"]), tuple(s["id"] for s in t.get("subtechniques", ())))
            for t in data["techniques"]
        ]
        return cls(data["version"], tactics, techniques)

    def resolve_tactic(self, value: str) -> Optional[Tactic]:
        text = (value or "").strip()
        if text.lower().startswith("attack."):
            text = text[len("attack."):]
        slug = re.sub(r"[\s_]+", "-", text.lower())
        if slug in self.tactics:
            return self.tactics[slug]
        for tactic in self.tactics.values():
            if tactic.id == text.upper() or tactic.name.lower() == text.lower():
                return tactic
        return None

    def validate(self, tactic: str, technique: str, sub_technique: Optional[str] = None
                 ) -> Optional[Tuple[Tactic, str, Optional[str]]]:
        """Canonical (tactic, technique, sub-technique) or None when the triple is not in the catalog."""
        resolved = self.resolve_tactic(tactic)
        technique_id = _technique_id(technique)
        sub_id = _technique_id(sub_technique) if sub_technique else None
        if technique_id and "." in technique_id:
            technique_id, sub_id = technique_id.split(".", 1)[0], sub_id or technique_id
        if resolved is None or technique_id not in self.techniques:
            return None
        entry = self.techniques[technique_id]
        if resolved.slug not in entry.tactics:
            return None
        if sub_id is not None and sub_id not in entry.subtechniques:
            return None
        return resolved, technique_id, sub_id

    def contains_technique(self, technique_id: str) -> bool:
        technique_id = _technique_id(technique_id) or ""
        base = technique_id.split(".", 1)[0]
        if base not in self.techniques:
            return False
        return technique_id == base or technique_id in self.techniques[base].subtechniques

    def to_prompt_json(self) -> str:
        tree: Dict[str, Dict[str, Any]] = {}
        for tactic in self.tactics.values():
            tree[tactic.slug] = {
                f"{t.id} {t.name}": list(t.subtechniques)
                for t in self.techniques.values()
                if tactic.slug in t.tactics
            }
        return json.dumps(tree, indent=1)


@lru_cache(maxsize=1)
def _default_catalog() -> TtpCatalog:
    return TtpCatalog._from_file(CATALOG_PATH)


def _technique_id(value: Optional[str]) -> Optional[str]:
    if value is None:
        return None
    text = str(value).strip()
    if text.lower() in ("", "null", "none", "n/a", "-"):
        return None
    if text.lower().startswith("attack."):
        text = text[len("attack."):]
    return text.upper()


@dataclass(frozen=True)
class TtpAssignment:
    event_name: str
    event_source: str
    tactic_id: str
    tactic_slug: str
    technique: str
    sub_technique: Optional[str] = None

    @property
    def api_call(self) -> ApiCall:
        return ApiCall(self.event_source, self.event_name)

    @property
    def tags(self) -> Tuple[TtpTag, ...]:
        tags = [TtpTag("tactic", self.tactic_slug), TtpTag("technique", self.technique)]
        if self.sub_technique:
            tags.append(TtpTag("subtechnique", self.sub_technique))
        return tuple(tags)


def _api_lines(candidates: Sequence[ApiCallCandidate]) -> str:
    return "\n".join(f"- {c.event_name} ({c.event_source or 'unknown source'})" for c in candidates)


def _find_item(candidate: ApiCallCandidate, items: Sequence[Mapping[str, Any]]) -> Optional[Mapping[str, Any]]:
    for item in items:
        source = (item.get("eventSource") or "").strip().lower()
        if item.get("eventName", "").strip() == candidate.event_name and (
            not source or not candidate.event_source or source == candidate.event_source
        ):
            return item
    return None


def assign_ttps(candidates: Sequence[ApiCallCandidate], paragraph: Paragraph, catalog: TtpCatalog,
                gateway: LlmGateway, temperature: float = DEFAULT_TEMPERATURES["ttp"]) -> List[TtpAssignment]:
    """One catalog-valid assignment per candidate, in candidate order; misses are dropped."""
    if not candidates:
        raise ValueError("assign_ttps needs at least one candidate")
    prompt = load_prompt("ttp_extractor")
    system_prompt = prompt.text + catalog.to_prompt_json()
    assigned: Dict[int, TtpAssignment] = {}
    pending = list(range(len(candidates)))

    for attempt in range(2):
        if not pending:
            break
        user_text = f"Paragraph:\n{paragraph.render()}\n\nAPI calls:\n{_api_lines([candidates[i] for i in pending])}"
        if attempt:
            user_text += (
                "\n\nThe previous mapping for these API calls was missing or used identifiers outside "
                "the catalog. Use only tactic, technique and sub-technique identifiers from the catalog."
            )
        try:
            response = gateway.complete(LlmRequest.text(system_prompt, user_text, temperature, "ttp_assignments"))
            items = response.parsed_json["assignments"]
        except LlmGatewayError as exc:
            logger.warning(f"⚠️ Paragraph {paragraph.index}: TTP request failed ({exc})")
            items = []

        still_pending = []
        for index in pending:
            candidate = candidates[index]
            item = _find_item(candidate, items)
            valid = catalog.validate(item["tactic"], item["technique"], item.get("subTechnique")) if item else None
            if valid is None:
                still_pending.append(index)
                continue
            tactic, technique, sub = valid
            assigned[index] = TtpAssignment(candidate.event_name, candidate.event_source, tactic.id, tactic.slug, technique, sub)
        pending = still_pending

    for index in pending:
        miss = CatalogMiss(f"no catalog-valid TTP for {candidates[index].event_name} in paragraph {paragraph.index}")
        logger.warning(f"⚠️ {miss}, dropping")
    return [assigned[i] for i in range(len(candidates)) if i in assigned]
