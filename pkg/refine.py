"""Rule-set refinement: per-rule detection optimization and cross-paragraph
API call deduplication.

After ``refine_set`` no (eventSource, eventName) pair is detected by more than
one rule of the set.
"""

from __future__ import annotations

import datetime as dt
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, FrozenSet, Iterable, List, Optional, Sequence, Tuple

from llm_gateway import LlmGateway, LlmGatewayError, LlmRequest
from prompt_assets import load_prompt
from rulegen import TOOL_NAME, CandidateBatch, RuleRejected, validate_rule
from sigma_core import (
    EVENT_NAME_FIELD,
    ApiCall,
    Detection,
    SelectionBlock,
    SigmaRule,
    block_api_calls,
    detection_api_calls,
    prune_condition,
    rule_to_mapping,
    value_items,
)

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.5
TITLE_MATCH_CUTOFF = 90

Selector = Callable[[ApiCall, Sequence[int], Sequence[SigmaRule]], Optional[int]]
Remover = Callable[[SigmaRule, ApiCall], Optional[SigmaRule]]


@dataclass(frozen=True)
class RuleSet:
    rules: Tuple[SigmaRule, ...] = ()
    provenance: Tuple[int, ...] = ()  # paragraph index per rule

    def __post_init__(self):
        object.__setattr__(self, "rules", tuple(self.rules))
        object.__setattr__(self, "provenance", tuple(self.provenance))
        if len(self.rules) != len(self.provenance):
            raise ValueError("every rule needs a provenance paragraph index")

    @classmethod
    def from_batches(cls, batches: Iterable[CandidateBatch]) -> "RuleSet":
        rules: List[SigmaRule] = []
        provenance: List[int] = []
        for batch in batches:
            rules.extend(batch.rules)
            provenance.extend([batch.paragraph_index] * len(batch.rules))
        return cls(tuple(rules), tuple(provenance))

    def with_rules(self, rules: Sequence[SigmaRule]) -> "RuleSet":
        return RuleSet(tuple(rules), self.provenance)

    def __len__(self) -> int:
        return len(self.rules)


def extract_apis(rule: SigmaRule) -> FrozenSet[ApiCall]:
    """(eventSource, eventName) pairs the rule detects."""
    return frozenset(detection_api_calls(rule.detection))


def _event_names(rule: SigmaRule) -> FrozenSet[str]:
    return frozenset(call.event_name for call in extract_apis(rule))


def _rule_json(rule: SigmaRule) -> str:
    return json.dumps(rule_to_mapping(rule), indent=1, ensure_ascii=False, default=str)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def optimize_rule(rule: SigmaRule, gateway: LlmGateway, temperature: float = DEFAULT_TEMPERATURE,
                  run_date: Optional[dt.date] = None) -> SigmaRule:
    """Unify and separate selections; the input comes back unchanged on any failure."""
    prompt = load_prompt("rule_optimizer")
    request = LlmRequest.text(prompt.text, _rule_json(rule), temperature, "optimized_rule")
    try:
        response = gateway.complete(request)
        candidate = validate_rule(response.parsed_json["rule"], run_date or rule.date, rule.author or TOOL_NAME)
    except (LlmGatewayError, RuleRejected) as exc:
        logger.warning(f"⚠️ Optimizer kept {rule.title!r} unchanged: {exc}")
        return rule
    if _event_names(candidate) != _event_names(rule):
        logger.warning(f"⚠️ Optimizer changed the API calls of {rule.title!r}, keeping the original")
        return rule
    # Only the detection logic is taken from the optimizer.
    return replace(rule, detection=candidate.detection)


def optimize_set(rule_set: RuleSet, gateway: LlmGateway, temperature: float = DEFAULT_TEMPERATURE,
                 run_date: Optional[dt.date] = None) -> RuleSet:
    if not rule_set.rules:
        return rule_set
    start = time.time()
    workers = min(len(rule_set.rules), gateway.config.max_concurrent_requests)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        optimized = list(pool.map(lambda r: optimize_rule(r, gateway, temperature, run_date), rule_set.rules))
    changed = sum(1 for before, after in zip(rule_set.rules, optimized) if before != after)
    logger.info(f"✓ Optimized {changed}/{len(optimized)} rule(s) in {(time.time() - start) * 1000:.2f}ms")
    return rule_set.with_rules(optimized)


# ---------------------------------------------------------------------------
# API call duplication remover
# ---------------------------------------------------------------------------

def fallback_select(common: Sequence[int], rules: Sequence[SigmaRule], provenance: Sequence[int]) -> int:
    """Most criteria first, then lowest paragraph index, then earliest position."""
    return min(common, key=lambda i: (-rules[i].criteria_count, provenance[i], i))


def llm_selector(gateway: LlmGateway, temperature: float = DEFAULT_TEMPERATURE) -> Selector:
    prompt = load_prompt("rule_selector")

    def select(api: ApiCall, common: Sequence[int], rules: Sequence[SigmaRule]) -> Optional[int]:
        listing = "\n\n".join(f"[{k}] {rules[i].title}\n{_rule_json(rules[i])}" for k, i in enumerate(common))
        user_text = f"API call: {api.event_name} ({api.event_source or 'unknown source'})\n\nCandidate rules:\n{listing}"
        try:
            answer = gateway.complete(LlmRequest.text(prompt.text, user_text, temperature, "rule_selection")).parsed_json
        except LlmGatewayError as exc:
            logger.warning(f"⚠️ Rule selection for {api} failed: {exc}")
            return None
        index = answer.get("selected_index")
        if isinstance(index, int) and 0 <= index < len(common):
            return common[index]
        title = answer.get("selected_title")
        if title:
            try:
                from rapidfuzz import fuzz, process
            except ImportError:
                logger.warning("rapidfuzz not available, title matching disabled")
                return None
            match = process.extractOne(
                title, [rules[i].title for i in common], scorer=fuzz.ratio, score_cutoff=TITLE_MATCH_CUTOFF
            )
            if match:
                return common[match[2]]
        return None

    return select


def remove_api_mechanically(rule: SigmaRule, api: ApiCall, run_date: Optional[dt.date] = None) -> Optional[SigmaRule]:
    """Delete the eventName value from every selection detecting ``api``.

    A selection left without an eventName is dropped and the condition pruned.
    Returns None when nothing executable remains.
    """
    selections: List[Tuple[str, SelectionBlock]] = []
    dropped: List[str] = []
    for name, block in rule.detection.selections:
        if api not in block_api_calls(block):
            selections.append((name, block))
            continue
        criteria = []
        for key, value in block.criteria:
            if key.path == EVENT_NAME_FIELD and key.modifier is None:
                kept = tuple(v for v in value_items(value) if v.strip() != api.event_name)
                if not kept:
                    continue
                value = kept[0] if len(kept) == 1 else kept
            criteria.append((key, value))
        if any(key.path == EVENT_NAME_FIELD and key.modifier is None for key, _ in criteria):
            selections.append((name, SelectionBlock(tuple(criteria))))
        else:
            dropped.append(name)
    condition = prune_condition(rule.detection.condition, dropped) if dropped else rule.detection.condition
    if condition is None or not selections:
        return None
    try:
        return validate_rule(replace(rule, detection=Detection(tuple(selections), condition)),
                             run_date or rule.date, rule.author or TOOL_NAME)
    except RuleRejected as exc:
        logger.warning(f"⚠️ Mechanical removal of {api} left {rule.title!r} invalid: {exc}")
        return None


def llm_remover(gateway: LlmGateway, temperature: float = DEFAULT_TEMPERATURE,
                run_date: Optional[dt.date] = None) -> Remover:
    prompt = load_prompt("api_remover")

    def remove(rule: SigmaRule, api: ApiCall) -> Optional[SigmaRule]:
        user_text = f"API call to remove: {api.event_name} ({api.event_source or 'unknown source'})\n\nRule:\n{_rule_json(rule)}"
        try:
            response = gateway.complete(LlmRequest.text(prompt.text, user_text, temperature, "api_removal"))
            candidate = validate_rule(response.parsed_json["rule"], run_date or rule.date, rule.author or TOOL_NAME)
        except (LlmGatewayError, RuleRejected) as exc:
            logger.warning(f"⚠️ LLM removal of {api} from {rule.title!r} failed: {exc}")
            candidate = None
        if candidate is not None:
            remaining = extract_apis(rule) - {api}
            got = extract_apis(candidate)
            if got and got <= remaining:
                return replace(rule, detection=candidate.detection)
            logger.warning(f"⚠️ LLM removal of {api} from {rule.title!r} did not verify, removing mechanically")
        return remove_api_mechanically(rule, api, run_date)

    return remove


def refine_set(rule_set: RuleSet, gateway: Optional[LlmGateway] = None, selector: Optional[Selector] = None,
               remover: Optional[Remover] = None, temperature: float = DEFAULT_TEMPERATURE,
               run_date: Optional[dt.date] = None) -> RuleSet:
    """Keep each API call in exactly one rule.

    API calls are processed in (eventSource, eventName) order. For each call shared by
    several rules one rule is selected to keep it; other rules lose the call, and a rule
    whose only call it was is deleted.
    """
    start = time.time()
    if selector is None and gateway is not None:
        selector = llm_selector(gateway, temperature)
    if remover is None:
        remover = llm_remover(gateway, temperature, run_date) if gateway is not None else (
            lambda rule, api: remove_api_mechanically(rule, api, run_date)
        )

    rules: List[Optional[SigmaRule]] = list(rule_set.rules)
    provenance = rule_set.provenance
    all_apis = sorted(
        {api for rule in rule_set.rules for api in extract_apis(rule)},
        key=lambda a: (a.event_source, a.event_name),
    )
    deleted = 0
    for api in all_apis:
        common = [i for i, rule in enumerate(rules) if rule is not None and api in extract_apis(rule)]
        if len(common) < 2:
            continue
        chosen = selector(api, common, rules) if selector else None  # type: ignore[arg-type]
        if chosen not in common:
            if selector is not None:
                logger.warning(f"⚠️ Selection for {api} outside candidates, using fallback")
            chosen = fallback_select(common, rules, provenance)  # type: ignore[arg-type]
        logger.debug(f"{api}: keeping rule {chosen} of {common}")
        for i in common:
            if i == chosen:
                continue
            rule = rules[i]
            if extract_apis(rule) == {api}:
                rules[i] = None
                deleted += 1
                continue
            updated = remover(rule, api)
            if updated is None or api in extract_apis(updated):
                updated = remove_api_mechanically(rule, api, run_date)
            if updated is None:
                rules[i] = None
                deleted += 1
            else:
                rules[i] = updated

    kept = [(rule, provenance[i]) for i, rule in enumerate(rules) if rule is not None]
    logger.info(
        f"✓ Deduplicated {len(all_apis)} API call(s): {len(kept)}/{len(rules)} rule(s) kept, "
        f"{deleted} deleted in {(time.time() - start) * 1000:.2f}ms"
    )
    return RuleSet(tuple(r for r, _ in kept), tuple(p for _, p in kept))
