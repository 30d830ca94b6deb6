import copy
import datetime as dt
import json
import logging
import random
from dataclasses import replace

import pytest

from conftest import RUN_DATE, SCARLETEEL_DIR, SCARLETEEL_URL, ScriptedProvider, make_gateway, make_paragraph
from extraction import ApiCallCandidate, TtpAssignment
from ingest import load_source
from rulegen import (
    EnrichedParagraph,
    PostconditionViolation,
    RejectionLog,
    RuleRejected,
    batch_coverage,
    generate_rules,
    render_enriched_paragraph,
    repair_tag,
    validate_rule,
)
from sigma_core import compile_rule, print_condition

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

S3 = "s3.amazonaws.com"
PARAGRAPH = make_paragraph(
    "The attacker called the ListBuckets API and then GetObject to download terraform.tfstate.", index=2
)


def _scarleteel_rules():
    routes = json.loads((SCARLETEEL_DIR / "responses.json").read_text(encoding="utf-8"))["routes"]
    route = next(r for r in routes if r["schema"] == "sigma_rules" and r["contains"])
    return route["response"]["rules"]


def _pair(name, tactic_id, tactic, technique):
    return (ApiCallCandidate(name, S3, 3, "explicit", 2), TtpAssignment(name, S3, tactic_id, tactic, technique))


GET_OBJECT = _pair("GetObject", "TA0009", "collection", "T1530")
LIST_BUCKETS = _pair("ListBuckets", "TA0007", "discovery", "T1619")


def _enriched(*pairs, raw=False):
    return EnrichedParagraph(PARAGRAPH, tuple(pairs), SCARLETEEL_URL, raw=raw)


def _rule(**overrides):
    rule = {
        "title": "Secrets read",
        "references": ["https://example.com/report"],
        "logsource": {"product": "aws", "service": "cloudtrail"},
        "detection": {"selection": {"eventName": "GetSecretValue"}, "condition": "selection"},
        "level": "high",
    }
    rule.update(overrides)
    return rule


# ---------------------------------------------------------------------------
# Validator
# ---------------------------------------------------------------------------

def test_generated_rule_validates_to_initial_rule(terraform_rule_initial):
    raw = copy.deepcopy(_scarleteel_rules()[0])
    raw["references"].insert(0, SCARLETEEL_URL)
    rule = validate_rule(raw, run_date=RUN_DATE)
    assert rule == replace(terraform_rule_initial, date=RUN_DATE, modified=RUN_DATE)


def test_nested_maps_flatten_to_dotted_keys():
    rule = validate_rule(_rule(detection={
        "selection": {"eventName": "RunInstances", "requestParameters": {"instanceType": ["p3.16xlarge", "p4d.24xlarge"],
                                                                          "placement": {"tenancy": "dedicated"}}},
        "condition": "selection",
    }), run_date=RUN_DATE)
    block = rule.detection.selection("selection")
    assert [k.text for k in block.keys()] == [
        "eventName", "requestParameters.instanceType", "requestParameters.placement.tenancy",
    ]
    assert block.get("requestParameters.instanceType") == ("p3.16xlarge", "p4d.24xlarge")


def test_error_code_selection_is_removed_and_condition_pruned():
    rule = validate_rule(_rule(detection={
        "selection_event": {"eventName": "GetSecretValue", "errorCode": "AccessDenied"},
        "selection_error": {"errorCode": "AccessDenied", "errorMessage": "not authorized"},
        "condition": "selection_event and not selection_error",
    }), run_date=RUN_DATE)
    assert rule.detection.names == ["selection_event"]
    assert [k.text for k in rule.detection.selection("selection_event").keys()] == ["eventName"]
    assert print_condition(rule.detection.condition) == "selection_event"


def test_arn_values_are_dropped():
    rule = validate_rule(_rule(detection={
        "selection": {"eventName": "AssumeRole",
                      "requestParameters.roleArn": ["arn:aws:iam::123456789012:role/admin", "admin"],
                      "userIdentity.arn": "arn:aws:iam::123456789012:user/bob"},
        "condition": "selection",
    }), run_date=RUN_DATE)
    block = rule.detection.selection("selection")
    assert block.get("requestParameters.roleArn") == "admin"
    assert block.get("userIdentity.arn") is None


def test_selection_names_are_reformatted():
    rule = validate_rule(_rule(detection={
        "SelectionEvent": {"eventName": "GetObject"},
        "filter": {"sourceIPAddress": "10.0.0.1"},
        "condition": "SelectionEvent and not filter",
    }), run_date=RUN_DATE)
    assert rule.detection.names == ["selectionevent", "selection_filter"]
    assert print_condition(rule.detection.condition) == "selectionevent and not selection_filter"


@pytest.mark.parametrize("tag,expected", [
    ("T1530", "attack.t1530"),
    ("attack.T1078.004", "attack.t1078.004"),
    ("Collection", "attack.collection"),
    ("Initial Access", "attack.initial-access"),
    ("bogus tag!", None),
])
def test_repair_tag(tag, expected):
    assert repair_tag(tag) == expected


def test_metadata_repair():
    rule = validate_rule(_rule(
        tags=["attack.discovery", "T1619", "t1619", "???"],
        references=["not a url", "https://example.com/report", "https://example.com/report", "ftp://x/y"],
        level="HIGH",
        status="Experimental",
        author="someone else",
        date="2023/02/28",
        falsepositives="Backups",
    ), run_date=RUN_DATE)
    assert [t.text for t in rule.tags] == ["attack.discovery", "attack.t1619"]
    assert rule.references == ("https://example.com/report",)
    assert rule.level == "high"
    assert rule.status == "experimental"
    assert rule.author == "Huntsmith"
    assert rule.date == dt.date(2023, 2, 28)
    assert rule.modified == RUN_DATE
    assert rule.falsepositives == ("Backups",)


@pytest.mark.parametrize("overrides", [
    {"level": "severe"},
    {"references": ["see the report"]},
    {"detection": {"selection": {"errorCode": "AccessDenied"}, "condition": "selection"}},
    {"detection": {"selection": {"eventName": "X"}}},
    {"detection": {"selection": {"eventName": "X"}, "condition": "selection and other"}},
    {"detection": {"selection": {"eventName": "X"}, "condition": "selection and ("}},
    {"logsource": None},
])
def test_unrepairable_rules_are_rejected(overrides):
    with pytest.raises(RuleRejected):
        validate_rule(_rule(**overrides), run_date=RUN_DATE)


def test_validation_is_idempotent():
    raw = _rule(
        tags=["Collection", "T1530"],
        detection={
            "Selection": {"eventName": "GetObject", "requestParameters": {"key": "terraform.tfstate"}, "errorCode": "x"},
            "selection_ip": {"sourceIPAddress": ["1.2.3.4", "arn:aws:iam::1:user/x"]},
            "condition": ["Selection and selection_ip"],
        },
    )
    once = validate_rule(raw, run_date=RUN_DATE)
    assert validate_rule(once, run_date=dt.date(2030, 1, 1)) == once


def _random_raw_rule(rng):
    names = rng.sample(["selection", "Selection_Event", "selection_ip", "SELECTION_2", "selection_filter"],
                       rng.randint(1, 3))
    detection = {}
    for name in names:
        body = {"eventName": rng.choice(["GetObject", ["ListBuckets", "GetObject"], "AssumeRole"])}
        if rng.random() < 0.4:
            body["requestParameters"] = {"key": rng.choice(["terraform.tfstate", ["a.txt", "b.txt"]])}
        if rng.random() < 0.3:
            body["errorCode"] = "AccessDenied"
        if rng.random() < 0.3:
            body["sourceIPAddress"] = rng.choice(["45.9.148.221", ["1.2.3.4", "arn:aws:iam::123456789012:role/x"]])
        if rng.random() < 0.2:
            body["userAgent|contains"] = "python-requests"
        detection[name] = body
    condition = names[0]
    for name in names[1:]:
        condition += rng.choice([" and ", " or ", " and not "]) + name
    detection["condition"] = condition
    return _rule(
        detection=detection,
        tags=rng.sample(["Collection", "T1530", "attack.t1619", "bogus tag", "attack.Discovery"], rng.randint(0, 3)),
        level=rng.choice(["High", "medium", "LOW", "critical"]),
        falsepositives=rng.choice([None, ["Backups"]]),
    )


def test_validation_is_idempotent_on_random_rules():
    rng = random.Random(8)
    accepted = 0
    for _ in range(1000):
        try:
            once = validate_rule(_random_raw_rule(rng), run_date=RUN_DATE)
        except RuleRejected:
            continue
        accepted += 1
        assert validate_rule(once, run_date=RUN_DATE) == once
        assert compile_rule(once)
    assert accepted


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def test_render_enriched_paragraph():
    text = render_enriched_paragraph(_enriched(GET_OBJECT))
    assert "- GetObject (s3.amazonaws.com): tactic collection, technique T1530, sub-technique none" in text
    assert text.endswith(f"Report URL: {SCARLETEEL_URL}")


def test_generate_rules_covers_each_api_call_once(tmp_path):
    rules = _scarleteel_rules()
    log = RejectionLog(tmp_path / "rejected.jsonl")
    provider = ScriptedProvider([{"rules": rules + [_rule(level="severe")]}])
    batch = generate_rules(_enriched(LIST_BUCKETS, GET_OBJECT), make_gateway(provider), run_date=RUN_DATE,
                           rejection_log=log, model_name="test-model")

    assert [r.title for r in batch.rules] == ["Access to Terraform File", "S3 Bucket Enumeration"]
    assert batch.rules[1].tags[1].text == "attack.t1619"
    assert all(r.references[0] == SCARLETEEL_URL for r in batch.rules)
    assert batch.rejected == 1
    assert batch.paragraph_index == 2
    assert batch.generator_metadata.model_name == "test-model"
    assert provider.requests[0].temperature == 0.7
    entry = json.loads((tmp_path / "rejected.jsonl").read_text(encoding="utf-8").splitlines()[0])
    assert entry["paragraph_index"] == 2
    assert "level" in entry["reason"]


def test_rules_from_a_local_report_reference_the_file():
    doc = load_source(str(SCARLETEEL_DIR / "report.html"))
    rules = copy.deepcopy(_scarleteel_rules())
    for rule in rules:
        rule["references"] = []
    enriched = EnrichedParagraph(doc.paragraphs[2], (LIST_BUCKETS, GET_OBJECT), doc.source_url)
    batch = generate_rules(enriched, make_gateway(ScriptedProvider([{"rules": rules}])), run_date=RUN_DATE)

    assert len(batch.rules) == 2
    assert batch.rejected == 0
    for rule in batch.rules:
        assert rule.references == (doc.source_url,)
        assert rule.references[0].startswith("file://")


@pytest.mark.parametrize("reference,kept", [
    ("file:///tmp/report.html", True),
    ("file:///", False),
    ("https://example.com/report", True),
    ("ftp://example.com/report", False),
])
def test_reference_schemes(reference, kept):
    rule = validate_rule(_rule(references=[reference, "https://example.com/other"]), run_date=RUN_DATE)
    assert (reference in rule.references) is kept


def test_missing_api_call_is_re_prompted_once():
    rules = _scarleteel_rules()
    provider = ScriptedProvider([{"rules": rules[:1]}, {"rules": rules}])
    batch = generate_rules(_enriched(LIST_BUCKETS, GET_OBJECT), make_gateway(provider), run_date=RUN_DATE)
    assert len(batch.rules) == 2
    feedback = provider.requests[1].user_content[-1].text
    assert "ApiCallMissing: s3.amazonaws.com:ListBuckets" in feedback


def test_second_coverage_violation_raises():
    get_object = _scarleteel_rules()[0]
    provider = ScriptedProvider([{"rules": [get_object, get_object]}] * 2)
    with pytest.raises(PostconditionViolation) as info:
        generate_rules(_enriched(GET_OBJECT), make_gateway(provider), run_date=RUN_DATE)
    assert info.value.duplicated == ("s3.amazonaws.com:GetObject",)
    assert len(provider.requests) == 2


def test_raw_paragraphs_skip_coverage():
    provider = ScriptedProvider([{"rules": []}])
    batch = generate_rules(_enriched(raw=True), make_gateway(provider), run_date=RUN_DATE)
    assert batch.rules == ()
    with pytest.raises(ValueError):
        EnrichedParagraph(PARAGRAPH, ())


def test_batch_coverage_accepts_blank_sources():
    rule = validate_rule(_rule(detection={"selection": {"eventName": "GetObject"}, "condition": "selection"}),
                         run_date=RUN_DATE)
    assert batch_coverage([rule], _enriched(GET_OBJECT, LIST_BUCKETS)) == (["s3.amazonaws.com:ListBuckets"], [])
