import streamlit as st
from dotenv import load_dotenv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, Optional

# Configure logging FIRST (before any other imports that might use logging)
logging.basicConfig(
    level=os.getenv("HUNTSMITH_LOG_LEVEL", "INFO").upper(),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    handlers=[logging.StreamHandler(sys.stdout)],
    force=True
)
logger = logging.getLogger(__name__)

# Load environment variables from .env file for local development
load_dotenv()

logger.info("🚀 Huntsmith review app starting...")

st.set_page_config(
    page_title="Huntsmith - Sigma Rule Review",
    page_icon=None,
    layout="wide",
    initial_sidebar_state="expanded",
)

import pandas as pd
from evalharness import AnnotationMismatch, check_candidates, load_run_output, save_annotations
from persistence import get_recent_runs
from pipeline_config import DEFAULT_OUTPUT_DIR
from sigma_core import SigmaRuleError, compile_rule, parse_rule

VERDICT_OPTIONS = ("n/a", "yes", "no")


def _to_option(value: Optional[bool]) -> str:
    if value is None:
        return "n/a"
    return "yes" if value else "no"


def _from_option(option: str) -> Optional[bool]:
    return None if option == "n/a" else option == "yes"


def load_manifest(run_dir: Path) -> Dict[str, Any]:
    path = run_dir / "manifest.json"
    if not path.exists():
        return {}
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        st.warning(f"manifest.json is not valid JSON: {e}")
        return {}


def provenance_by_title(manifest: Dict[str, Any]) -> Dict[str, Any]:
    return {entry.get("title"): entry.get("paragraph_index") for entry in manifest.get("rule_files", [])
            if isinstance(entry, dict)}


def render_rules(run_dir: Path, manifest: Dict[str, Any]) -> None:
    run = load_run_output(run_dir)
    if not run.texts:
        st.info("No rule files in this run.")
        return

    try:
        verdicts = check_candidates(run.texts, run.annotations).verdicts
    except AnnotationMismatch as e:
        st.warning(f"Ignoring annotations.json: {e}")
        verdicts = check_candidates(run.texts).verdicts
    provenance = provenance_by_title(manifest)
    annotations: Dict[str, Dict[str, Optional[bool]]] = {}

    for verdict, text in zip(verdicts, run.texts):
        label = verdict.title or verdict.rule_id
        with st.expander(label, expanded=False):
            col1, col2 = st.columns([3, 2])
            with col1:
                st.markdown("**Rule YAML**")
                st.code(text, language="yaml")
            with col2:
                st.markdown("**Compiled query**")
                try:
                    st.code(compile_rule(parse_rule(text)), language="sql")
                except SigmaRuleError as e:
                    st.error(f"Rule does not compile: {e}")
                st.markdown(f"Paragraph: `{provenance.get(verdict.title, 'unknown')}`")
                st.markdown(
                    f"Executable: {'✓' if verdict.executable else '❌'} · "
                    f"Condition accurate: {'✓' if verdict.condition_accurate else '❌'}"
                )
                critical = st.radio(
                    "Criticality accurate", VERDICT_OPTIONS, horizontal=True,
                    index=VERDICT_OPTIONS.index(_to_option(verdict.criticality_accurate)),
                    key=f"crit_{verdict.rule_id}",
                )
                aligned = st.radio(
                    "Descriptive aligned", VERDICT_OPTIONS, horizontal=True,
                    index=VERDICT_OPTIONS.index(_to_option(verdict.descriptive_aligned)),
                    key=f"desc_{verdict.rule_id}",
                )
            annotations[verdict.rule_id] = {
                "criticality_accurate": _from_option(critical),
                "descriptive_aligned": _from_option(aligned),
            }

    if st.button("Save annotations", type="primary"):
        path = save_annotations(run_dir / "annotations.json", annotations)
        st.success(f"Saved to {path}")


def render_manifest(manifest: Dict[str, Any]) -> None:
    if not manifest:
        st.info("No manifest.json in this directory.")
        return
    col1, col2, col3, col4 = st.columns(4)
    col1.metric("Variant", manifest.get("variant", "?"))
    col2.metric("Rules", manifest.get("rule_count", 0))
    col3.metric("Status", manifest.get("status", "?"))
    col4.metric("Duration (ms)", manifest.get("total_ms", 0))
    counts = manifest.get("counts") or {}
    if counts:
        st.dataframe(pd.DataFrame([counts]), hide_index=True, use_container_width=True)
    st.json(manifest, expanded=False)


def render_history() -> None:
    try:
        runs = get_recent_runs(50)
    except ConnectionError as e:
        st.warning(f"Run history unavailable: {e}")
        return
    if runs.empty:
        st.info("No runs recorded yet.")
    else:
        st.dataframe(runs, hide_index=True, use_container_width=True)


def main() -> None:
    st.title("Huntsmith - Sigma Rule Review")
    with st.sidebar:
        run_dir_text = st.text_input("Run directory", value=os.getenv("HUNTSMITH_OUTPUT_DIR", DEFAULT_OUTPUT_DIR))
        st.caption("A directory written by `python cli.py run`.")
    run_dir = Path(run_dir_text)

    tab_rules, tab_manifest, tab_history = st.tabs(["Rules", "Manifest", "Run History"])
    if not run_dir.is_dir():
        with tab_rules:
            st.error(f"Directory not found: {run_dir}")
    else:
        manifest = load_manifest(run_dir)
        with tab_rules:
            render_rules(run_dir, manifest)
        with tab_manifest:
            render_manifest(manifest)
    with tab_history:
        render_history()


main()
