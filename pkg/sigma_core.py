"""Sigma rule domain model: typed rule values, YAML round-trip, condition grammar
and the internal query compiler used as the executability check.

Query dialect produced by ``compile_rule``:

* a criterion without modifier renders as ``field="value"``
* ``field|contains`` renders as ``field contains "value"`` (``startswith`` and
  ``endswith`` follow the same shape)
* a list value renders as the OR of its atoms, parenthesized unless it is the
  whole selection body
* a selection with more than one criterion renders as a parenthesized AND
* the condition AST composes selections with ``AND`` / ``OR`` / ``NOT``
* values are always double-quoted; backslashes and double quotes are escaped
  with a backslash
"""

from __future__ import annotations

import datetime as dt
import logging
import random
import re
import uuid
from dataclasses import dataclass, replace
from typing import Any, Dict, Iterable, Iterator, List, NamedTuple, Optional, Tuple, Union

import yaml

logger = logging.getLogger(__name__)

LEVELS = ("informational", "low", "medium", "high", "critical")
STATUSES = ("experimental", "test", "stable")
KNOWN_MODIFIERS = ("contains", "startswith", "endswith")

SELECTION_NAME_RE = re.compile(r"^selection[_a-z0-9]*$")
TACTIC_TAG_RE = re.compile(r"^attack\.([a-z][a-z_-]*)$")
TECHNIQUE_TAG_RE = re.compile(r"^attack\.(t\d+)(\.\d+)?$")

# Fields carrying the API identity of a selection.
EVENT_NAME_FIELD = "eventName"
EVENT_SOURCE_FIELD = "eventSource"


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class SigmaRuleError(ValueError):
    """Base class for rule parsing, validation and compilation failures."""


class YamlSyntax(SigmaRuleError):
    pass


class MissingField(SigmaRuleError):
    def __init__(self, name: str):
        super().__init__(f"missing required field: {name}")
        self.name = name


class UnknownConditionIdentifier(SigmaRuleError):
    def __init__(self, name: str):
        super().__init__(f"condition references unknown selection: {name}")
        self.name = name


class UnreferencedSelection(SigmaRuleError):
    def __init__(self, name: str):
        super().__init__(f"selection is not referenced by the condition: {name}")
        self.name = name


class InvalidSelectionName(SigmaRuleError):
    pass


class InvalidLevel(SigmaRuleError):
    pass


class InvalidStatus(SigmaRuleError):
    pass


class InvalidTag(SigmaRuleError):
    pass


class NestedValueStructure(SigmaRuleError):
    pass


class DuplicateFieldKey(SigmaRuleError):
    pass


class UnbalancedParens(SigmaRuleError):
    pass


class UnexpectedToken(SigmaRuleError):
    pass


class UnknownModifier(SigmaRuleError):
    pass


class EmptySelection(SigmaRuleError):
    pass


# ---------------------------------------------------------------------------
# Condition AST
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Identifier:
    name: str


@dataclass(frozen=True)
class Not:
    operand: "ConditionExpr"


@dataclass(frozen=True)
class And:
    left: "ConditionExpr"
    right: "ConditionExpr"


@dataclass(frozen=True)
class Or:
    left: "ConditionExpr"
    right: "ConditionExpr"


ConditionExpr = Union[Identifier, Not, And, Or]

_KEYWORDS = {"and", "or", "not"}
_TOKEN_RE = re.compile(r"\s*(\(|\)|[A-Za-z_][A-Za-z0-9_]*|\S+)")


def _tokenize(text: str) -> List[str]:
    tokens: List[str] = []
    pos = 0
    text = text.rstrip()
    while pos < len(text):
        match = _TOKEN_RE.match(text, pos)
        if not match:
            break
        tokens.append(match.group(1))
        pos = match.end()
    return tokens


class _ConditionParser:
    """Recursive descent: or_expr := and_expr ('or' and_expr)*, and so on down to atoms."""

    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.pos = 0

    def _peek(self) -> Optional[str]:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def _peek_keyword(self) -> Optional[str]:
        token = self._peek()
        return token.lower() if token and token.lower() in _KEYWORDS else None

    def parse(self) -> ConditionExpr:
        if not self.tokens:
            raise UnexpectedToken("empty condition")
        expr = self._or()
        token = self._peek()
        if token is not None:
            if token == ")":
                raise UnbalancedParens(f"unmatched ')' in condition: {self.text!r}")
            raise UnexpectedToken(f"unexpected token {token!r} in condition: {self.text!r}")
        return expr

    def _or(self) -> ConditionExpr:
        expr = self._and()
        while self._peek_keyword() == "or":
            self.pos += 1
            expr = Or(expr, self._and())
        return expr

    def _and(self) -> ConditionExpr:
        expr = self._not()
        while self._peek_keyword() == "and":
            self.pos += 1
            expr = And(expr, self._not())
        return expr

    def _not(self) -> ConditionExpr:
        if self._peek_keyword() == "not":
            self.pos += 1
            return Not(self._not())
        return self._atom()

    def _atom(self) -> ConditionExpr:
        token = self._peek()
        if token is None:
            raise UnexpectedToken(f"condition ends unexpectedly: {self.text!r}")
        if token == "(":
            self.pos += 1
            expr = self._or()
            if self._peek() != ")":
                raise UnbalancedParens(f"missing ')' in condition: {self.text!r}")
            self.pos += 1
            return expr
        if token == ")":
            raise UnbalancedParens(f"unmatched ')' in condition: {self.text!r}")
        if token.lower() in _KEYWORDS or not re.match(r"^[A-Za-z_][A-Za-z0-9_]*$", token):
            raise UnexpectedToken(f"unexpected token {token!r} in condition: {self.text!r}")
        self.pos += 1
        return Identifier(token)


def parse_condition(text: str) -> ConditionExpr:
    """Parse a condition string into an AST (precedence: not > and > or)."""
    if not text or not text.strip():
        raise UnexpectedToken("empty condition")
    return _ConditionParser(text).parse()


_PRECEDENCE = {Or: 1, And: 2, Not: 3, Identifier: 4}


def _render(expr: ConditionExpr, and_word: str, or_word: str, not_word: str, leaf) -> str:
    def wrap(child: ConditionExpr, min_prec: int) -> str:
        text = _render(child, and_word, or_word, not_word, leaf)
        return f"({text})" if _PRECEDENCE[type(child)] < min_prec else text

    if isinstance(expr, Identifier):
        return leaf(expr.name)
    if isinstance(expr, Not):
        return f"{not_word} {wrap(expr.operand, 3)}"
    word = and_word if isinstance(expr, And) else or_word
    prec = _PRECEDENCE[type(expr)]
    # Left-associative grammar: a right child of equal precedence needs parens.
    return f"{wrap(expr.left, prec)} {word} {wrap(expr.right, prec + 1)}"


def print_condition(expr: ConditionExpr) -> str:
    """Render an AST with the minimal parentheses that re-parse to the same AST."""
    return _render(expr, "and", "or", "not", lambda name: name)


def condition_identifiers(expr: ConditionExpr) -> List[str]:
    """Identifiers in left-to-right order, without duplicates."""
    seen: List[str] = []

    def walk(node: ConditionExpr) -> None:
        if isinstance(node, Identifier):
            if node.name not in seen:
                seen.append(node.name)
        elif isinstance(node, Not):
            walk(node.operand)
        else:
            walk(node.left)
            walk(node.right)

    walk(expr)
    return seen


def rename_identifiers(expr: ConditionExpr, mapping: Dict[str, str]) -> ConditionExpr:
    if isinstance(expr, Identifier):
        return Identifier(mapping.get(expr.name, expr.name))
    if isinstance(expr, Not):
        return Not(rename_identifiers(expr.operand, mapping))
    return type(expr)(rename_identifiers(expr.left, mapping), rename_identifiers(expr.right, mapping))


def prune_condition(expr: ConditionExpr, removed: Iterable[str]) -> Optional[ConditionExpr]:
    """Drop identifiers of removed selections and simplify.

    And(x, removed) -> x, Or(x, removed) -> x, Not(removed) -> removed. Returns
    None when nothing survives.
    """
    removed = set(removed)

    def walk(node: ConditionExpr) -> Optional[ConditionExpr]:
        if isinstance(node, Identifier):
            return None if node.name in removed else node
        if isinstance(node, Not):
            inner = walk(node.operand)
            return None if inner is None else Not(inner)
        left, right = walk(node.left), walk(node.right)
        if left is None:
            return right
        if right is None:
            return left
        return type(node)(left, right)

    return walk(expr)


# ---------------------------------------------------------------------------
# Rule values
# ---------------------------------------------------------------------------

class ApiCall(NamedTuple):
    """API identity: (eventSource lower-cased, eventName exact)."""

    event_source: str
    event_name: str

    def __str__(self) -> str:
        return f"{self.event_source or '?'}:{self.event_name}"


def same_api_call(a: ApiCall, b: ApiCall) -> bool:
    """Equal names, and equal sources unless either source is blank."""
    if a.event_name != b.event_name:
        return False
    return a.event_source == b.event_source or not a.event_source or not b.event_source


@dataclass(frozen=True)
class FieldKey:
    path: str
    modifier: Optional[str] = None

    @classmethod
    def parse(cls, text: str) -> "FieldKey":
        path, _, modifier = str(text).partition("|")
        return cls(path.strip(), modifier.strip() or None)

    @property
    def text(self) -> str:
        return f"{self.path}|{self.modifier}" if self.modifier else self.path

    def __str__(self) -> str:
        return self.text


FieldValue = Union[str, Tuple[str, ...]]


def value_items(value: FieldValue) -> Tuple[str, ...]:
    return value if isinstance(value, tuple) else (value,)


@dataclass(frozen=True)
class SelectionBlock:
    criteria: Tuple[Tuple[FieldKey, FieldValue], ...] = ()

    @classmethod
    def of(cls, mapping: Dict[str, Any]) -> "SelectionBlock":
        """Convenience constructor from a flat ``{"field|mod": value}`` mapping."""
        criteria = []
        for key, value in mapping.items():
            if isinstance(value, (list, tuple)):
                value = tuple(str(v) for v in value)
            else:
                value = str(value)
            criteria.append((FieldKey.parse(key), value))
        return cls(tuple(criteria))

    def get(self, path: str) -> Optional[FieldValue]:
        for key, value in self.criteria:
            if key.path == path and key.modifier is None:
                return value
        return None

    def keys(self) -> List[FieldKey]:
        return [key for key, _ in self.criteria]

    def as_dict(self) -> Dict[str, Any]:
        return {key.text: (list(value) if isinstance(value, tuple) else value) for key, value in self.criteria}

    def __len__(self) -> int:
        return len(self.criteria)


@dataclass(frozen=True)
class LogSource:
    product: str
    service: str


@dataclass(frozen=True)
class Detection:
    selections: Tuple[Tuple[str, SelectionBlock], ...]
    condition: ConditionExpr

    @property
    def names(self) -> List[str]:
        return [name for name, _ in self.selections]

    def selection(self, name: str) -> Optional[SelectionBlock]:
        for selection_name, block in self.selections:
            if selection_name == name:
                return block
        return None


@dataclass(frozen=True)
class TtpTag:
    kind: str  # tactic | technique | subtechnique
    value: str  # tactic slug, or technique id like T1530 / T1078.004

    @classmethod
    def parse(cls, text: str) -> "TtpTag":
        raw = str(text).strip()
        technique = TECHNIQUE_TAG_RE.match(raw)
        if technique:
            kind = "subtechnique" if technique.group(2) else "technique"
            return cls(kind, (technique.group(1) + (technique.group(2) or "")).upper())
        tactic = TACTIC_TAG_RE.match(raw)
        if tactic:
            return cls("tactic", tactic.group(1))
        raise InvalidTag(f"tag does not match attack.<tactic> or attack.t<number>[.<number>]: {raw!r}")

    @property
    def text(self) -> str:
        return f"attack.{self.value.lower()}"

    def __str__(self) -> str:
        return self.text


@dataclass(frozen=True)
class SigmaRule:
    title: str
    logsource: LogSource
    detection: Detection
    level: str
    description: str = ""
    references: Tuple[str, ...] = ()
    author: str = ""
    tags: Tuple[TtpTag, ...] = ()
    falsepositives: Tuple[str, ...] = ()
    id: Optional[str] = None
    status: Optional[str] = None
    date: Optional[dt.date] = None
    modified: Optional[dt.date] = None

    def iter_criteria(self) -> Iterator[Tuple[str, FieldKey, FieldValue]]:
        for name, block in self.detection.selections:
            for key, value in block.criteria:
                yield name, key, value

    @property
    def criteria_count(self) -> int:
        return sum(len(block) for _, block in self.detection.selections)


def block_api_calls(block: SelectionBlock) -> List[ApiCall]:
    """eventName values paired with the block's eventSource values."""
    names = block.get(EVENT_NAME_FIELD)
    if names is None:
        return []
    sources = block.get(EVENT_SOURCE_FIELD)
    source_items = [s.strip().lower() for s in value_items(sources)] if sources is not None else [""]
    return [ApiCall(source, name.strip()) for name in value_items(names) for source in source_items if name.strip()]


def detection_api_calls(detection: Detection) -> List[ApiCall]:
    calls: List[ApiCall] = []
    for _, block in detection.selections:
        for call in block_api_calls(block):
            if call not in calls:
                calls.append(call)
    return calls


# ---------------------------------------------------------------------------
# Invariants
# ---------------------------------------------------------------------------

def check_invariants(rule: SigmaRule) -> SigmaRule:
    """Raise the first invariant violation, or return the rule unchanged."""
    if not rule.title or not rule.title.strip():
        raise MissingField("title")
    if not rule.references:
        raise MissingField("references")
    if rule.level not in LEVELS:
        raise InvalidLevel(f"level must be one of {', '.join(LEVELS)}: {rule.level!r}")
    if rule.status is not None and rule.status not in STATUSES:
        raise InvalidStatus(f"status must be one of {', '.join(STATUSES)}: {rule.status!r}")
    if not rule.logsource.product or not rule.logsource.service:
        raise MissingField("logsource")
    for tag in rule.tags:
        TtpTag.parse(tag.text)

    selections = rule.detection.selections
    if not selections:
        raise MissingField("detection")
    names = [name for name, _ in selections]
    for name, block in selections:
        if not SELECTION_NAME_RE.match(name):
            raise InvalidSelectionName(f"selection name must match selection[_a-z0-9]*: {name!r}")
        if not block.criteria:
            raise EmptySelection(f"selection has no criteria: {name}")
        seen = set()
        for key, value in block.criteria:
            if key in seen:
                raise DuplicateFieldKey(f"duplicate field {key.text!r} in {name}")
            seen.add(key)
            if key.modifier is not None and key.modifier not in KNOWN_MODIFIERS:
                raise UnknownModifier(f"unsupported modifier {key.modifier!r} on {key.path}")
            if not key.path:
                raise NestedValueStructure(f"empty field path in {name}")
            for item in value_items(value):
                if not isinstance(item, str):
                    raise NestedValueStructure(f"value of {key.text!r} in {name} is not a scalar")
            if isinstance(value, tuple) and not value:
                raise EmptySelection(f"empty value list for {key.text!r} in {name}")
    if len(set(names)) != len(names):
        raise InvalidSelectionName("duplicate selection name")

    referenced = condition_identifiers(rule.detection.condition)
    for ident in referenced:
        if ident not in names:
            raise UnknownConditionIdentifier(ident)
    for name in names:
        if name not in referenced:
            raise UnreferencedSelection(name)
    return rule


# ---------------------------------------------------------------------------
# YAML
# ---------------------------------------------------------------------------

def _scalar_text(value: Any, where: str) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (str, int, float)):
        return str(value)
    if isinstance(value, (dt.date, dt.datetime)):
        return value.isoformat()
    raise NestedValueStructure(f"value under {where} must be a scalar or a flat list")


def _criterion_value(value: Any, where: str) -> FieldValue:
    if isinstance(value, (list, tuple)):
        return tuple(_scalar_text(item, where) for item in value)
    if isinstance(value, dict) or value is None:
        raise NestedValueStructure(f"value under {where} must be a scalar or a flat list")
    return _scalar_text(value, where)


def _as_date(value: Any, name: str) -> Optional[dt.date]:
    if value is None or value == "":
        return None
    if isinstance(value, dt.datetime):
        return value.date()
    if isinstance(value, dt.date):
        return value
    text = str(value).strip().replace("/", "-")
    try:
        return dt.date.fromisoformat(text)
    except ValueError as exc:
        raise SigmaRuleError(f"{name} is not a calendar date: {value!r}") from exc


def _text_list(value: Any, name: str) -> Tuple[str, ...]:
    if value is None:
        return ()
    if isinstance(value, str):
        return (value,)
    if not isinstance(value, (list, tuple)):
        raise SigmaRuleError(f"{name} must be a list")
    return tuple(str(item) for item in value)


def rule_from_mapping(data: Dict[str, Any]) -> SigmaRule:
    """Build and check a rule from an already-loaded mapping."""
    if not isinstance(data, dict):
        raise YamlSyntax("rule document must be a mapping")
    for required in ("title", "logsource", "detection", "level"):
        if data.get(required) in (None, "", {}):
            raise MissingField(required)

    logsource = data["logsource"]
    if not isinstance(logsource, dict):
        raise MissingField("logsource")
    detection_data = data["detection"]
    if not isinstance(detection_data, dict):
        raise MissingField("detection")
    if "condition" not in detection_data:
        raise MissingField("condition")

    selections: List[Tuple[str, SelectionBlock]] = []
    for name, body in detection_data.items():
        if name == "condition":
            continue
        if not isinstance(body, dict):
            raise NestedValueStructure(f"selection {name} must be a mapping of field criteria")
        criteria = []
        for key, value in body.items():
            criteria.append((FieldKey.parse(key), _criterion_value(value, f"{name}.{key}")))
        selections.append((str(name), SelectionBlock(tuple(criteria))))

    condition_text = detection_data["condition"]
    if isinstance(condition_text, list):
        condition_text = " or ".join(f"({c})" for c in condition_text)
    condition = parse_condition(str(condition_text))

    level = str(data["level"]).strip()
    if level not in LEVELS:
        raise InvalidLevel(f"level must be one of {', '.join(LEVELS)}: {level!r}")

    tags = tuple(TtpTag.parse(tag) for tag in _text_list(data.get("tags"), "tags"))
    status = data.get("status")

    rule = SigmaRule(
        title=str(data["title"]).strip(),
        logsource=LogSource(str(logsource.get("product") or ""), str(logsource.get("service") or "")),
        detection=Detection(tuple(selections), condition),
        level=level,
        description=str(data.get("description") or ""),
        references=_text_list(data.get("references"), "references"),
        author=str(data.get("author") or ""),
        tags=tags,
        falsepositives=_text_list(data.get("falsepositives"), "falsepositives"),
        id=str(data["id"]) if data.get("id") else None,
        status=str(status) if status else None,
        date=_as_date(data.get("date"), "date"),
        modified=_as_date(data.get("modified"), "modified"),
    )
    return check_invariants(rule)


def parse_rule(yaml_text: str) -> SigmaRule:
    """Parse Sigma YAML text, preserving selection and criteria order."""
    try:
        data = yaml.safe_load(yaml_text)
    except yaml.YAMLError as exc:
        raise YamlSyntax(f"invalid YAML: {exc}") from exc
    return rule_from_mapping(data)


def rule_to_mapping(rule: SigmaRule) -> Dict[str, Any]:
    """Ordered plain-data view of a rule (the YAML document body)."""
    doc: Dict[str, Any] = {"title": rule.title}
    if rule.id:
        doc["id"] = rule.id
    if rule.status:
        doc["status"] = rule.status
    doc["description"] = rule.description
    doc["references"] = list(rule.references)
    doc["author"] = rule.author
    if rule.date:
        doc["date"] = rule.date
    if rule.modified:
        doc["modified"] = rule.modified
    if rule.tags:
        doc["tags"] = [tag.text for tag in rule.tags]
    doc["logsource"] = {"product": rule.logsource.product, "service": rule.logsource.service}
    detection: Dict[str, Any] = {name: block.as_dict() for name, block in rule.detection.selections}
    detection["condition"] = print_condition(rule.detection.condition)
    doc["detection"] = detection
    if rule.falsepositives:
        doc["falsepositives"] = list(rule.falsepositives)
    doc["level"] = rule.level
    return doc


def new_rule_id(rng: Optional[random.Random] = None) -> str:
    if rng is None:
        return str(uuid.uuid4())
    return str(uuid.UUID(int=rng.getrandbits(128), version=4))


def emit_rule(rule: SigmaRule, assign_id: bool = True, rng: Optional[random.Random] = None) -> str:
    """Serialize a rule to YAML; a missing id is generated unless assign_id is False."""
    if assign_id and not rule.id:
        rule = replace(rule, id=new_rule_id(rng))
    return yaml.safe_dump(rule_to_mapping(rule), sort_keys=False, allow_unicode=True, default_flow_style=False, width=4096)


# ---------------------------------------------------------------------------
# Query compiler
# ---------------------------------------------------------------------------

def _quote(value: str) -> str:
    return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'


def _atom(key: FieldKey, value: str) -> str:
    if key.modifier is None:
        return f"{key.path}={_quote(value)}"
    if key.modifier in KNOWN_MODIFIERS:
        return f"{key.path} {key.modifier} {_quote(value)}"
    raise UnknownModifier(f"unsupported modifier {key.modifier!r} on {key.path}")


def _compile_criterion(key: FieldKey, value: FieldValue) -> Tuple[str, bool]:
    """Returns (text, is_disjunction)."""
    items = value_items(value)
    if not items:
        raise EmptySelection(f"empty value list for {key.text}")
    atoms = [_atom(key, item) for item in items]
    return " OR ".join(atoms), len(atoms) > 1


def compile_selection(name: str, block: SelectionBlock) -> str:
    if not block.criteria:
        raise EmptySelection(f"selection has no criteria: {name}")
    compiled = [_compile_criterion(key, value) for key, value in block.criteria]
    if len(compiled) == 1:
        text, is_or = compiled[0]
        return f"({text})" if is_or else text
    parts = [f"({text})" if is_or else text for text, is_or in compiled]
    return "(" + " AND ".join(parts) + ")"


def compile_rule(rule: SigmaRule) -> str:
    """Compile a rule into the generic query dialect described in the module docstring."""
    compiled = {name: compile_selection(name, block) for name, block in rule.detection.selections}

    def leaf(name: str) -> str:
        if name not in compiled:
            raise UnknownConditionIdentifier(name)
        return compiled[name]

    return _render(rule.detection.condition, "AND", "OR", "NOT", leaf)
