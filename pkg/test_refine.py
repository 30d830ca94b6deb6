import logging
import random

import pytest

from conftest import RUN_DATE, ScriptedProvider, make_gateway
from refine import (
    RuleSet,
    extract_apis,
    fallback_select,
    llm_remover,
    llm_selector,
    optimize_rule,
    optimize_set,
    refine_set,
    remove_api_mechanically,
)
from sigma_core import And, ApiCall, Detection, Identifier, LogSource, Or, SelectionBlock, SigmaRule, print_condition

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

S3 = "s3.amazonaws.com"
NAMES = ("GetObject", "ListBuckets", "PutObject", "DeleteObject", "GetBucketPolicy", "PutBucketPolicy",
         "GetBucketAcl", "DeleteBucket")


def _rule(title, *selections, condition=None, level="medium"):
    blocks = tuple((f"selection_{i}", SelectionBlock.of(body)) for i, body in enumerate(selections))
    if condition is None:
        condition = Identifier(blocks[0][0])
        for name, _ in blocks[1:]:
            condition = Or(condition, Identifier(name))
    return SigmaRule(
        title=title,
        logsource=LogSource("aws", "cloudtrail"),
        detection=Detection(blocks, condition),
        level=level,
        references=("https://example.com/report",),
        author="Huntsmith",
        date=RUN_DATE,
        modified=RUN_DATE,
    )


def _api(name):
    return ApiCall(S3, name)


# ---------------------------------------------------------------------------
# Deduplication
# ---------------------------------------------------------------------------

def _random_set(rng):
    rules, provenance = [], []
    for position in range(rng.randint(1, 20)):
        selections = []
        for _ in range(rng.randint(1, 3)):
            names = rng.sample(NAMES, rng.randint(1, 3))
            body = {"eventSource": S3, "eventName": names if len(names) > 1 else names[0]}
            if rng.random() < 0.3:
                body["sourceIPAddress"] = "45.9.148.221"
            selections.append(body)
        rules.append(_rule(f"rule {position}", *selections))
        provenance.append(rng.randint(0, 4))
    return RuleSet(tuple(rules), tuple(provenance))


def test_refined_sets_keep_each_api_call_in_exactly_one_rule():
    rng = random.Random(5)

    def scripted(api, common, rules):
        return rng.choice(list(common) + [None])

    for _ in range(1000):
        rule_set = _random_set(rng)
        before = set().union(*(extract_apis(r) for r in rule_set.rules))
        refined = refine_set(rule_set, selector=scripted, run_date=RUN_DATE)

        seen = [api for rule in refined.rules for api in extract_apis(rule)]
        assert len(seen) == len(set(seen))
        assert set(seen) == before
        assert len(refined.rules) == len(refined.provenance) <= len(rule_set.rules)
        assert set(refined.provenance) <= set(rule_set.provenance)


def test_fallback_prefers_most_criteria_then_lowest_paragraph():
    small = _rule("small", {"eventName": "GetObject"})
    large = _rule("large", {"eventName": "GetObject", "eventSource": S3})
    assert fallback_select([0, 1], [small, large], [0, 5]) == 1
    assert fallback_select([0, 1], [small, small], [3, 1]) == 1
    assert fallback_select([0, 1], [small, small], [2, 2]) == 0


def test_rule_whose_only_api_is_shared_is_deleted():
    keep = _rule("keep", {"eventSource": S3, "eventName": ["GetObject", "ListBuckets"]})
    only = _rule("only", {"eventSource": S3, "eventName": "GetObject"})
    refined = refine_set(RuleSet((keep, only), (0, 1)), run_date=RUN_DATE)
    assert [r.title for r in refined.rules] == ["keep"]
    assert refined.provenance == (0,)


def test_mechanical_removal_drops_emptied_selection_and_prunes_condition():
    rule = _rule(
        "two selections",
        {"eventSource": S3, "eventName": "GetObject"},
        {"eventSource": S3, "eventName": ["ListBuckets", "PutObject"]},
        condition=And(Identifier("selection_0"), Identifier("selection_1")),
    )
    without_get = remove_api_mechanically(rule, _api("GetObject"), RUN_DATE)
    assert without_get.detection.names == ["selection_1"]
    assert print_condition(without_get.detection.condition) == "selection_1"

    without_list = remove_api_mechanically(rule, _api("ListBuckets"), RUN_DATE)
    assert without_list.detection.selection("selection_1").get("eventName") == "PutObject"
    assert extract_apis(without_list) == {_api("GetObject"), _api("PutObject")}

    single = _rule("single", {"eventSource": S3, "eventName": "GetObject"})
    assert remove_api_mechanically(single, _api("GetObject"), RUN_DATE) is None


def test_llm_selector_by_index_and_fuzzy_title():
    rules = [_rule("S3 Bucket Enumeration", {"eventName": "ListBuckets"}),
             _rule("Access to Terraform File", {"eventName": "GetObject"})]
    provider = ScriptedProvider([
        {"selected_index": 1, "reason": "more specific"},
        {"selected_title": "Access to Terraform Files"},
        {"selected_index": 7},
        {"selected_title": "Something unrelated"},
    ])
    select = llm_selector(make_gateway(provider))
    assert select(_api("GetObject"), [0, 1], rules) == 1
    assert select(_api("GetObject"), [0, 1], rules) == 1
    assert select(_api("GetObject"), [0, 1], rules) is None
    assert select(_api("GetObject"), [0, 1], rules) is None
    assert "[1] Access to Terraform File" in provider.requests[0].flat_text()
    assert provider.requests[0].response_schema_name == "rule_selection"


def test_refine_with_llm_selector_and_remover():
    broad = _rule("Broad S3 activity", {"eventSource": S3, "eventName": ["GetObject", "ListBuckets"]})
    narrow = _rule("Access to Terraform File", {"eventSource": S3, "eventName": "GetObject",
                                                "requestParameters.key": "terraform.tfstate"})

    def answer(request):
        if request.response_schema_name == "rule_selection":
            return {"selected_title": "Access to Terraform File"}
        return {"rule": {
            "title": "Broad S3 activity",
            "references": ["https://example.com/report"],
            "logsource": {"product": "aws", "service": "cloudtrail"},
            "detection": {"selection": {"eventSource": S3, "eventName": "ListBuckets"}, "condition": "selection"},
            "level": "medium",
        }}

    provider = ScriptedProvider(handler=answer)
    refined = refine_set(RuleSet((broad, narrow), (0, 1)), gateway=make_gateway(provider), run_date=RUN_DATE)
    assert [r.title for r in refined.rules] == ["Broad S3 activity", "Access to Terraform File"]
    assert extract_apis(refined.rules[0]) == {_api("ListBuckets")}
    assert refined.rules[0].detection.names == ["selection"]
    assert [r.response_schema_name for r in provider.requests] == ["rule_selection", "api_removal"]


def test_unverified_llm_removal_falls_back_to_mechanical():
    rule = _rule("pair", {"eventSource": S3, "eventName": ["GetObject", "ListBuckets"]})
    still_there = {"rule": {
        "title": "pair",
        "references": ["https://example.com/report"],
        "logsource": {"product": "aws", "service": "cloudtrail"},
        "detection": {"selection": {"eventName": ["GetObject", "PutObject"]}, "condition": "selection"},
        "level": "medium",
    }}
    remove = llm_remover(make_gateway(ScriptedProvider([still_there])), run_date=RUN_DATE)
    updated = remove(rule, _api("GetObject"))
    assert extract_apis(updated) == {_api("ListBuckets")}
    assert updated.detection.names == ["selection_0"]


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@pytest.fixture
def unoptimized():
    return _rule(
        "Access to Terraform File",
        {"eventSource": S3, "eventName": "GetObject"},
        {"requestParameters.key": "terraform.tfstate"},
        condition=And(Identifier("selection_0"), Identifier("selection_1")),
        level="high",
    )


def _optimized_answer(event_name="GetObject"):
    return {"rule": {
        "title": "renamed by optimizer",
        "logsource": {"product": "aws", "service": "cloudtrail"},
        "references": ["https://example.com/report"],
        "detection": {
            "selection_event": {"eventSource": S3, "eventName": event_name, "requestParameters.key": "terraform.tfstate"},
            "condition": "selection_event",
        },
        "level": "low",
    }}


def test_optimizer_takes_detection_and_keeps_metadata(unoptimized):
    provider = ScriptedProvider([_optimized_answer()])
    optimized = optimize_rule(unoptimized, make_gateway(provider))
    assert optimized.title == "Access to Terraform File"
    assert optimized.level == "high"
    assert optimized.detection.names == ["selection_event"]
    assert print_condition(optimized.detection.condition) == "selection_event"
    assert provider.requests[0].temperature == 0.5
    assert provider.requests[0].response_schema_name == "optimized_rule"


@pytest.mark.parametrize("answer", [
    _optimized_answer(event_name="PutObject"),
    {"rule": {"title": "no detection"}},
    "I could not optimize this rule.",
])
def test_optimizer_failures_keep_the_original(unoptimized, answer):
    provider = ScriptedProvider([answer] * 3)
    assert optimize_rule(unoptimized, make_gateway(provider)) == unoptimized


def test_optimize_set_preserves_order_and_provenance(unoptimized):
    other = _rule("List", {"eventSource": S3, "eventName": "ListBuckets"})

    def answer(request):
        if "terraform.tfstate" in request.flat_text():
            return _optimized_answer()
        return "not json"

    rule_set = RuleSet((unoptimized, other), (3, 1))
    optimized = optimize_set(rule_set, make_gateway(ScriptedProvider(handler=answer), max_retries=0))
    assert optimized.provenance == (3, 1)
    assert optimized.rules[0].detection.names == ["selection_event"]
    assert optimized.rules[1] == other


def test_rule_set_requires_provenance():
    with pytest.raises(ValueError):
        RuleSet((_rule("x", {"eventName": "GetObject"}),), ())
    assert len(RuleSet()) == 0
