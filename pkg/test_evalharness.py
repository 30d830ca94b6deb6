import json
import logging
import shutil
from dataclasses import replace

import pytest

from conftest import FIXTURES, REPORT_IPS, SCARLETEEL_DIR
from evalharness import (
    WEIGHTED_ROW,
    AnnotationMismatch,
    CandidateCounts,
    Counts,
    GroundTruth,
    MetricRow,
    MissingEndpoint,
    MissingGroundTruth,
    UnknownEntityType,
    UnknownRelationshipType,
    candidate_totals,
    check_candidates,
    check_thresholds,
    compute_report,
    evaluate_directories,
    load_annotations,
    load_count_rows,
    load_ground_truth,
    normalize_value,
    predicted_entities,
    predicted_relationships,
    report_from_published,
    save_annotations,
    summarize_candidates,
)
from ioc import IocSet, enhance_rule
from sigma_core import emit_rule, parse_rule

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

LIST_BUCKETS_RULE = """title: S3 Bucket Enumeration
id: 0b0f3c52-8a55-4a3e-9d3e-6f1de0c1a001
description: Detects listing of all S3 buckets in the account, used to discover stored data.
references:
  - https://sysdig.com/blog/cloud-breach-terraform-data-theft/
author: Huntsmith
tags:
  - attack.discovery
  - attack.t1619
logsource:
  product: aws
  service: cloudtrail
detection:
  selection_event:
    eventSource: s3.amazonaws.com
    eventName: ListBuckets
  condition: selection_event
level: medium
"""

DETECTION_FIELD_ROWS = [(24, .83, .83), (11, .82, .82), (39, .81, .97), (55, .95, 1), (15, .94, 1), (9, .70, .78),
                        (17, .68, 1), (91, .97, .98), (31, .93, .90), (12, .64, .75), (45, .74, .62), (38, .94, .87)]
API_IOC_ROWS = [(16, 1, 1), (18, 1, 1), (21, .59, .95), (49, .98, 1), (27, 1, 1), (8, 1, 1), (12, .71, 1),
                (952, .91, .90), (80, 1, 1), (0, 1, 1), (110, .91, .91), (105, .93, .87)]
API_OTHER_ROWS = [(18, .85, .94), (10, 1, .70), (32, .82, .97), (49, .88, .90), (10, 1, 1), (4, .75, .75),
                  (12, .65, .92), (20, .85, .85), (20, .86, .90), (10, .58, .70), (29, .76, .55), (25, .91, .84)]
CANDIDATE_ROWS = [(7, 7, 7, 6, 7), (6, 6, 6, 4, 6), (13, 13, 13, 12, 12), (12, 12, 12, 10, 12), (9, 9, 9, 7, 9),
                  (4, 4, 4, 2, 3), (11, 11, 11, 9, 11), (13, 13, 13, 9, 12), (14, 14, 14, 10, 13), (9, 9, 9, 7, 9),
                  (11, 10, 11, 8, 10), (13, 13, 13, 8, 13)]


def _close(metric, precision, recall, f1=None):
    assert abs(metric.precision - precision) <= 0.01
    assert abs(metric.recall - recall) <= 0.01
    if f1 is not None:
        assert abs(metric.f1 - f1) <= 0.01


@pytest.fixture
def final_rules(terraform_rule_final):
    return [terraform_rule_final, enhance_rule(parse_rule(LIST_BUCKETS_RULE), IocSet(REPORT_IPS))]


@pytest.fixture
def truth():
    return load_ground_truth(SCARLETEEL_DIR / "ground_truth.json")


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def test_published_extraction_rows():
    report = load_count_rows(FIXTURES / "published_extraction_counts.json")
    assert list(report.per_oscti) == [str(i) for i in range(1, 13)]
    assert report.weighted_avg["ApiCall"].count == 167
    _close(report.weighted_avg["ApiCall"], 0.92, 0.98, 0.94)
    _close(report.weighted_avg["IoC"], 0.99, 0.98, 0.98)


def test_published_relationship_rows():
    report = report_from_published({
        "DetectionEntity-SigmaField": DETECTION_FIELD_ROWS,
        "ApiCall-IoC": API_IOC_ROWS,
        "ApiCall-Other": API_OTHER_ROWS,
    })
    _close(report.weighted_avg["DetectionEntity-SigmaField"], 0.87, 0.90, 0.88)
    _close(report.weighted_avg["ApiCall-IoC"], 0.92, 0.91)
    _close(report.weighted_avg["ApiCall-Other"], 0.84, 0.85)
    frame = report.to_frame()
    assert WEIGHTED_ROW in frame.index
    assert frame.loc[WEIGHTED_ROW, ("ApiCall-IoC", "#")] == 1398


def test_counts_and_weighting():
    counts = Counts(tp=3, fp=1, fn=1)
    assert (counts.precision, counts.recall, counts.f1) == (0.75, 0.75, 0.75)
    assert Counts() + Counts(1, 2, 3) == Counts(1, 2, 3)
    assert Counts().precision == 0.0 and Counts().f1 == 0.0
    report = compute_report({"a": {"ApiCall": Counts(1, 0, 0)}, "b": {"ApiCall": Counts(0, 1, 3)}})
    assert report.weighted_avg["ApiCall"] == MetricRow(4, 0.25, 0.25, 0.25)
    assert compute_report({"a": {"IoC": Counts()}}).weighted_avg["IoC"] == MetricRow(0, 0.0, 0.0, 0.0)


def test_thresholds():
    report = load_count_rows(FIXTURES / "published_extraction_counts.json")
    assert check_thresholds(report, {"ApiCall": {"precision": 0.9, "recall": 0.95}}) == []
    missed = check_thresholds(report, {"ApiCall": {"precision": 0.95}, "Other": {"f1": 0.5}})
    assert missed == ["ApiCall.precision: 0.92 < 0.95", "Other.f1: not reported (threshold 0.50)"]


# ---------------------------------------------------------------------------
# Ground truth and predictions
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("entity_type,value,expected", [
    ("ApiCall", "s3:GetObject", "GetObject"),
    ("Tactic", "attack.Initial_Access", "initial-access"),
    ("Technique", "attack.t1530", "T1530"),
    ("IoC", "45.9.148[.]221", "45.9.148.221"),
    ("IoC", "Python-Requests/2.28", "python-requests/2.28"),
    ("SigmaField", "userAgent|contains", "useragent"),
    ("Other", "Terraform.TFSTATE", "terraform.tfstate"),
])
def test_normalize_value(entity_type, value, expected):
    assert normalize_value(entity_type, value) == expected


def test_ground_truth_validation(truth):
    assert truth.oscti_id == "scarleteel"
    assert ("IoC", "45.9.249.58") in truth.entities
    assert ("ApiCall-IoC", "GetObject", "80.239.140.66") in truth.relationships
    with pytest.raises(UnknownEntityType):
        GroundTruth.from_dict({"entities": [{"type": "Malware", "value": "x"}]})
    with pytest.raises(UnknownRelationshipType):
        GroundTruth.from_dict({"relationships": [{"type": "ApiCall-Malware", "left": "a", "right": "b"}]})
    with pytest.raises(MissingEndpoint):
        GroundTruth.from_dict({"entities": [{"type": "ApiCall", "value": "GetObject"}],
                               "relationships": [{"type": "ApiCall-Technique", "left": "GetObject", "right": "T1530"}]})


def test_predictions_from_final_rules(final_rules):
    entities = predicted_entities(final_rules)
    assert {e for e in entities if e[0] == "Other"} == {("Other", "s3.amazonaws.com"), ("Other", "terraform.tfstate")}
    relationships = predicted_relationships(final_rules)
    assert ("DetectionEntity-SigmaField", "terraform.tfstate", "requestparameters.key") in relationships
    assert ("ApiCall-Other", "GetObject", "terraform.tfstate") in relationships
    assert ("ApiCall-Other", "ListBuckets", "terraform.tfstate") not in relationships
    assert len([r for r in relationships if r[0] == "ApiCall-IoC"]) == 8


def _write_run(run_dir, rules, iocs=None, annotations=None):
    (run_dir / "rules").mkdir(parents=True)
    for position, rule in enumerate(rules, start=1):
        (run_dir / "rules" / f"{position:02d}_rule.yml").write_text(emit_rule(rule), encoding="utf-8")
    if iocs is not None:
        iocs.write(run_dir / "iocs.json")
    if annotations is not None:
        (run_dir / "annotations.json").write_text(json.dumps(annotations), encoding="utf-8")


def test_evaluate_directories_against_ground_truth(tmp_path, final_rules):
    truth_dir = tmp_path / "truth"
    truth_dir.mkdir()
    shutil.copy(SCARLETEEL_DIR / "ground_truth.json", truth_dir / "scarleteel.json")
    _write_run(tmp_path / "runs" / "scarleteel", final_rules, IocSet(REPORT_IPS))

    result = evaluate_directories(tmp_path / "runs", truth_dir)
    entities = result.entities.per_oscti["scarleteel"]
    for kind in ("ApiCall", "Tactic", "Technique", "IoC"):
        assert (entities[kind].precision, entities[kind].recall) == (1.0, 1.0)
    assert entities["Other"] == MetricRow(1, 0.5, 1.0, pytest.approx(2 / 3))
    assert entities["SubTechnique"].count == 0

    relationships = result.relationships.per_oscti["scarleteel"]
    assert (relationships["DetectionEntity-SigmaField"].count, relationships["DetectionEntity-SigmaField"].precision) == (
        5, pytest.approx(5 / 8))
    assert relationships["ApiCall-Technique"].f1 == 1.0
    assert relationships["ApiCall-IoC"].precision == pytest.approx(0.5)
    assert relationships["ApiCall-IoC"].recall == 1.0
    assert relationships["ApiCall-Other"].precision == pytest.approx(1 / 3)

    counts = result.candidates["scarleteel"].counts()
    assert counts == CandidateCounts(2, 2, 2, None, None)

    written = result.write(tmp_path / "eval")
    assert [p.name for p in written] == ["metrics.json", "entities.txt", "relationships.txt", "candidates.txt"]
    metrics = json.loads(written[0].read_text(encoding="utf-8"))
    assert metrics["entities"]["weighted_avg"]["ApiCall"]["f1"] == 1.0
    assert metrics["candidates"]["executable_pct"] == 100.0


def test_evaluate_directories_needs_ground_truth(tmp_path, final_rules):
    (tmp_path / "truth").mkdir()
    _write_run(tmp_path / "run", final_rules)
    with pytest.raises(MissingGroundTruth):
        evaluate_directories(tmp_path / "run", tmp_path / "truth")


def test_missing_rules_evaluate_as_empty_predictions(tmp_path, truth):
    truth_dir = tmp_path / "truth"
    truth_dir.mkdir()
    shutil.copy(SCARLETEEL_DIR / "ground_truth.json", truth_dir / "scarleteel.json")
    (tmp_path / "empty").mkdir()
    result = evaluate_directories(tmp_path / "empty", truth_dir)
    assert result.entities.per_oscti["scarleteel"]["ApiCall"] == MetricRow(2, 0.0, 0.0, 0.0)
    assert result.candidates == {}


# ---------------------------------------------------------------------------
# Candidate criteria
# ---------------------------------------------------------------------------

def test_candidate_totals_match_published_rows():
    per_oscti = {str(i): CandidateCounts(*row) for i, row in enumerate(CANDIDATE_ROWS, start=1)}
    totals = candidate_totals(per_oscti)
    assert totals["rules"] == 122
    assert totals["mean_rules"] == pytest.approx(10.17, abs=0.01)
    assert totals["executable_pct"] == pytest.approx(99.18, abs=0.01)
    assert totals["condition_accurate_pct"] == 100.0
    assert totals["criticality_accurate_pct"] == pytest.approx(75.41, abs=0.01)
    assert totals["descriptive_aligned_pct"] == pytest.approx(95.90, abs=0.01)
    frame = summarize_candidates(per_oscti)
    assert frame.loc[WEIGHTED_ROW, "Executability"] == "99.18%"
    assert frame.loc["6", "#Rules"] == 4


def test_check_candidates_with_annotations(terraform_rule_final):
    text = emit_rule(replace(terraform_rule_final, id="rule-a"))
    broken = "title: Broken rule\ndetection: [unclosed\n"
    verdicts = check_candidates([text, broken], {"rule-a": {"criticality_accurate": True, "descriptive_aligned": False}})
    first, second = verdicts.verdicts
    assert (first.rule_id, first.executable, first.condition_accurate) == ("rule-a", True, True)
    assert (first.criticality_accurate, first.descriptive_aligned) == (True, False)
    assert (second.rule_id, second.executable, second.condition_accurate) == ("rule-2", False, False)
    assert verdicts.counts() == CandidateCounts(2, 1, 1, 1, 0)
    assert verdicts.summary()["executable_pct"] == 50.0
    with pytest.raises(AnnotationMismatch):
        check_candidates([text], {"rule-z": {"criticality_accurate": True}})


def test_annotation_files(tmp_path):
    path = save_annotations(tmp_path / "annotations.json", {
        "rule-a": {"criticality_accurate": True, "descriptive_aligned": None, "note": "ignored"},
        "rule-b": {"criticality_accurate": None, "descriptive_aligned": None},
    })
    assert load_annotations(path) == {"rule-a": {"criticality_accurate": True}}
    assert load_annotations(tmp_path / "missing.json") == {}
    assert load_annotations(None) == {}
