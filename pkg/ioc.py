"""IoC extraction from the unfiltered report and mechanical IoC enhancement of rules."""

from __future__ import annotations

import ipaddress
import json
import logging
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

from llm_gateway import LlmGateway, LlmRequest
from prompt_assets import load_prompt
from refine import RuleSet
from sigma_core import And, Detection, FieldKey, Identifier, Or, SelectionBlock, SigmaRule

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.5
IP_FIELD = "sourceIPAddress"
USER_AGENT_FIELD = "userAgent"
IP_SELECTION = "selection_ip_address"
USER_AGENT_SELECTION = "selection_user_agent"

_REWRITES: Tuple[Tuple[re.Pattern, str], ...] = (
    (re.compile(r"\[\.\]|\(\.\)|\{\.\}"), "."),
    (re.compile(r"\[dot\]|\(dot\)|\{dot\}", re.IGNORECASE), "."),
    (re.compile(r"(?<=\d) dot (?=\d)", re.IGNORECASE), "."),
    (re.compile(r"\[(:{1,2})\]"), r"\1"),
    (re.compile(r"\bhxxp(s?)\b", re.IGNORECASE), r"http\1"),
)


@dataclass(frozen=True)
class IocSet:
    ip_addresses: Tuple[str, ...] = ()
    user_agents: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "ip_addresses", tuple(self.ip_addresses))
        object.__setattr__(self, "user_agents", tuple(self.user_agents))

    def __bool__(self) -> bool:
        return bool(self.ip_addresses or self.user_agents)

    def to_dict(self) -> Dict[str, Any]:
        return {"ip_addresses": list(self.ip_addresses), "user_agents": list(self.user_agents)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "IocSet":
        return cls(tuple(data.get("ip_addresses", ())), tuple(data.get("user_agents", ())))

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
        return path


def deobfuscate(text: str) -> str:
    """Undo common defanging (``[.]``, ``(.)``, `` dot `` between digits, ``hxxp``). Idempotent."""
    previous = None
    while previous != text:
        previous = text
        for pattern, replacement in _REWRITES:
            text = pattern.sub(replacement, text)
    return text


def canonical_ip(text: str) -> Optional[str]:
    """Canonical IPv4/IPv6 text, or None when the value is not an address."""
    try:
        return str(ipaddress.ip_address(deobfuscate(text.strip())))
    except ValueError:
        return None


def _dedupe(values: Iterable[str]) -> Tuple[str, ...]:
    seen: List[str] = []
    for value in values:
        if value and value not in seen:
            seen.append(value)
    return tuple(seen)


def extract_iocs(full_text: str, gateway: LlmGateway, temperature: float = DEFAULT_TEMPERATURE) -> IocSet:
    """IP addresses and user agents named in the whole report. Gateway errors propagate."""
    prompt = load_prompt("ioc_extractor")
    response = gateway.complete(LlmRequest.text(prompt.text, full_text, temperature, "iocs"))
    ips = []
    for raw in response.parsed_json.get("ip_addresses", []):
        ip = canonical_ip(str(raw))
        if ip is None:
            logger.warning(f"⚠️ Dropping invalid IP address {raw!r}")
            continue
        ips.append(ip)
    agents = [deobfuscate(str(agent)).strip() for agent in response.parsed_json.get("user_agents", [])]
    iocs = IocSet(_dedupe(ips), _dedupe(agents))
    logger.info(f"🔍 Extracted {len(iocs.ip_addresses)} IP address(es) and {len(iocs.user_agents)} user agent(s)")
    return iocs


def _free_name(base: str, taken: List[str]) -> str:
    if base not in taken:
        return base
    suffix = 2
    while f"{base}_{suffix}" in taken:
        suffix += 1
    return f"{base}_{suffix}"


def enhance_rule(rule: SigmaRule, iocs: IocSet) -> SigmaRule:
    """``condition`` becomes ``(condition) and (ip or ua)`` with the IoC selections appended."""
    if not iocs:
        return rule
    taken = list(rule.detection.names)
    selections = list(rule.detection.selections)
    added: List[str] = []
    if iocs.ip_addresses:
        name = _free_name(IP_SELECTION, taken)
        taken.append(name)
        selections.append((name, SelectionBlock(((FieldKey(IP_FIELD), tuple(iocs.ip_addresses)),))))
        added.append(name)
    if iocs.user_agents:
        name = _free_name(USER_AGENT_SELECTION, taken)
        taken.append(name)
        selections.append((name, SelectionBlock(((FieldKey(USER_AGENT_FIELD, "contains"), tuple(iocs.user_agents)),))))
        added.append(name)
    ioc_expr = Identifier(added[0]) if len(added) == 1 else Or(Identifier(added[0]), Identifier(added[1]))
    return replace(rule, detection=Detection(tuple(selections), And(rule.detection.condition, ioc_expr)))


def enhance_rules(rule_set: RuleSet, iocs: IocSet) -> RuleSet:
    """Every rule receives the same document-level IoC set; empty sets are a no-op."""
    if not iocs:
        logger.info("No IoCs to attach")
        return rule_set
    enhanced = rule_set.with_rules([enhance_rule(rule, iocs) for rule in rule_set.rules])
    logger.info(f"✓ Enhanced {len(enhanced)} rule(s) with IoC selections")
    return enhanced
