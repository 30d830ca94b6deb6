import json
import logging
from dataclasses import replace
from pathlib import Path

import pytest

from conftest import REPORT_IPS, RUN_DATE, SCARLETEEL_URL, RoutingProvider, html_session, make_gateway
from llm_gateway import FixtureStore, RecordingProvider, ReplayProvider
from pipeline import PipelineStageError, rule_filename, run_pipeline
from pipeline_config import StageToggles
from sigma_core import parse_rule

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


def _run(config, provider, session, out_dir=None):
    return run_pipeline(SCARLETEEL_URL, config, make_gateway(provider), out_dir=out_dir, session=session)


def _manifest(out_dir):
    return json.loads((Path(out_dir) / "manifest.json").read_text(encoding="utf-8"))


def _ips(rule):
    return list(rule.detection.selection("selection_ip_address").get("sourceIPAddress"))


def test_golden_run_reproduces_the_terraform_rule(pipeline_config, routing_provider, scarleteel_session,
                                                  terraform_rule_initial, terraform_rule_final):
    result = _run(pipeline_config, routing_provider, scarleteel_session)

    assert result.refined.rules[0] == replace(terraform_rule_initial, date=RUN_DATE, modified=RUN_DATE)
    assert [r.title for r in result.rules.rules] == ["Access to Terraform File", "S3 Bucket Enumeration"]
    terraform, buckets = result.rules.rules
    assert terraform.detection == terraform_rule_final.detection
    assert (terraform.tags, terraform.level) == (terraform_rule_final.tags, terraform_rule_final.level)
    assert [t.value for t in buckets.tags] == ["discovery", "T1619"]
    assert _ips(buckets) == REPORT_IPS
    assert result.rules.provenance == (2, 2)
    assert result.iocs.ip_addresses == tuple(REPORT_IPS)


def test_run_writes_rules_iocs_and_manifest(pipeline_config, routing_provider, scarleteel_session):
    result = _run(pipeline_config, routing_provider, scarleteel_session)
    out = Path(pipeline_config.output_dir)

    names = sorted(p.name for p in (out / "rules").glob("*.yml"))
    assert names == ["01_access_to_terraform_file.yml", "02_s3_bucket_enumeration.yml"]
    for path, text in zip(result.rule_paths, result.texts):
        assert path.read_text(encoding="utf-8") == text
        assert parse_rule(text).id
    assert json.loads((out / "iocs.json").read_text(encoding="utf-8"))["ip_addresses"] == REPORT_IPS

    manifest = _manifest(out)
    assert manifest["status"] == "completed"
    assert manifest["variant"] == "full"
    assert manifest["rule_count"] == 2
    assert manifest["config_hash"] == pipeline_config.config_hash()
    assert manifest["reused_stages"] == []
    assert manifest["counts"]["paragraphs"] == 5
    assert manifest["counts"]["filtered_paragraphs"] == 4
    assert manifest["counts"]["enriched_paragraphs"] == 1
    assert manifest["counts"]["api_calls"] == 2
    assert manifest["llm_calls"] == len(routing_provider.requests)
    assert [entry["file"] for entry in manifest["rule_files"]] == names
    assert set(manifest["stage_keys"]) == {"ingest", "vision", "extract", "generate", "optimize", "refine", "ioc"}


def test_replay_of_a_recorded_run_is_byte_identical(tmp_path, pipeline_config, routing_provider, scarleteel_session):
    store = FixtureStore(tmp_path / "fixtures")
    recorded = _run(pipeline_config, RecordingProvider(routing_provider, store), scarleteel_session,
                    out_dir=str(tmp_path / "recorded"))
    assert store.list()

    replayed = _run(pipeline_config, ReplayProvider(store), scarleteel_session,
                    out_dir=str(tmp_path / "replayed"))
    assert replayed.texts == recorded.texts
    for a, b in zip(recorded.rule_paths, replayed.rule_paths):
        assert a.name == b.name
        assert a.read_bytes() == b.read_bytes()


def test_rule_ids_follow_the_seed(tmp_path, pipeline_config, routing_provider, scarleteel_session):
    first = _run(pipeline_config, routing_provider, scarleteel_session, out_dir=str(tmp_path / "a"))
    second = _run(pipeline_config, routing_provider, scarleteel_session, out_dir=str(tmp_path / "b"))
    reseeded = _run(replace(pipeline_config, seed=8), routing_provider, scarleteel_session, out_dir=str(tmp_path / "c"))
    assert first.texts == second.texts
    assert [parse_rule(t).id for t in first.texts] != [parse_rule(t).id for t in reseeded.texts]


def test_failed_stage_is_recorded_and_the_next_run_resumes(pipeline_config, scarleteel_session, routing_provider):
    without_iocs = RoutingProvider([r for r in routing_provider.routes if r["schema"] != "iocs"])
    with pytest.raises(PipelineStageError) as excinfo:
        _run(pipeline_config, without_iocs, scarleteel_session)
    assert (excinfo.value.stage, excinfo.value.last_completed_stage) == ("ioc", "refine")

    out = Path(pipeline_config.output_dir)
    manifest = _manifest(out)
    assert manifest["status"] == "failed"
    assert manifest["failed_stage"] == "ioc"
    assert manifest["last_completed_stage"] == "refine"
    assert manifest["rule_count"] == 0
    assert not (out / "rules").exists()

    resumed_provider = RoutingProvider(routing_provider.routes)
    result = _run(pipeline_config, resumed_provider, scarleteel_session)
    assert _manifest(out)["reused_stages"] == ["ingest", "vision", "extract", "generate", "optimize", "refine"]
    assert [r.response_schema_name for r in resumed_provider.requests] == ["iocs"]
    assert len(result.rules) == 2


def test_ingest_failure_has_no_completed_stage(pipeline_config, routing_provider):
    with pytest.raises(PipelineStageError) as excinfo:
        _run(pipeline_config, routing_provider, html_session("gone", status_code=404))
    assert (excinfo.value.stage, excinfo.value.last_completed_stage) == ("ingest", None)
    assert _manifest(pipeline_config.output_dir)["failed_stage"] == "ingest"
    assert routing_provider.requests == []


def test_stale_rule_files_are_cleared(pipeline_config, routing_provider, scarleteel_session):
    rules_dir = Path(pipeline_config.output_dir) / "rules"
    rules_dir.mkdir(parents=True)
    (rules_dir / "07_left_over.yml").write_text("title: old\n", encoding="utf-8")
    _run(pipeline_config, routing_provider, scarleteel_session)
    assert not (rules_dir / "07_left_over.yml").exists()


def test_without_vision_the_screenshot_address_is_missed(pipeline_config, routing_provider, scarleteel_session):
    config = replace(pipeline_config, toggles=StageToggles(vision=False))
    result = _run(config, routing_provider, scarleteel_session)
    assert "image_transcript" not in {r.response_schema_name for r in routing_provider.requests}
    assert "45.9.249.58" not in result.iocs.ip_addresses
    assert _ips(result.rules.rules[0]) == REPORT_IPS[:3]
    assert _manifest(config.output_dir)["variant"] == "no-vision"


def test_without_api_extractor_rules_come_from_raw_paragraphs(pipeline_config, routing_provider, scarleteel_session,
                                                              terraform_rule_final):
    config = replace(pipeline_config, toggles=StageToggles(api_extractor=False))
    result = _run(config, routing_provider, scarleteel_session)
    schemas = {r.response_schema_name for r in routing_provider.requests}
    assert not schemas & {"explicit_api_calls", "implicit_api_calls", "ttp_assignments"}
    assert result.rules.rules[0].detection == terraform_rule_final.detection
    assert _manifest(config.output_dir)["variant"] == "no-api-extractor"
    assert _manifest(config.output_dir)["counts"]["api_calls"] == 0


def test_without_optimizer(pipeline_config, routing_provider, scarleteel_session, terraform_rule_final):
    config = replace(pipeline_config, toggles=StageToggles(optimizer=False))
    result = _run(config, routing_provider, scarleteel_session)
    assert "optimized_rule" not in {r.response_schema_name for r in routing_provider.requests}
    assert result.rules.rules[0].detection == terraform_rule_final.detection
    manifest = _manifest(config.output_dir)
    assert manifest["variant"] == "no-optimizer"
    assert "optimize" not in manifest["stage_keys"]


@pytest.mark.parametrize("position,title,expected", [
    (1, "Access to Terraform File", "01_access_to_terraform_file.yml"),
    (12, "S3: ListBuckets / GetObject!", "12_s3_listbuckets_getobject.yml"),
    (3, "???", "03_rule.yml"),
])
def test_rule_filename(position, title, expected):
    assert rule_filename(position, title) == expected
