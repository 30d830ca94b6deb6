"""Shared test doubles and fixtures. Nothing here touches the network or a live model."""

from __future__ import annotations

import datetime as dt
import json
import threading
from collections import deque
from pathlib import Path
from typing import Any, Callable, Iterable, List, Optional
from unittest.mock import MagicMock

import pytest

from ingest import Paragraph
from llm_gateway import Completion, LlmGateway, LlmProvider, LlmRequest, MissingFixture, ProviderConfig, TokenUsage
from pipeline_config import PipelineConfig
from sigma_core import parse_rule

FIXTURES = Path(__file__).resolve().parent / "fixtures"
SCARLETEEL_DIR = FIXTURES / "scarleteel"
SCARLETEEL_URL = "https://sysdig.com/blog/cloud-breach-terraform-data-theft/"
REPORT_IPS = ["80.239.140.66", "45.9.148.221", "45.9.148.121", "45.9.249.58"]
RUN_DATE = dt.date(2024, 5, 1)


def as_completion(answer: Any) -> Completion:
    if isinstance(answer, BaseException):
        raise answer
    if isinstance(answer, Completion):
        return answer
    text = answer if isinstance(answer, str) else json.dumps(answer)
    return Completion(text, TokenUsage(12, 7))


class ScriptedProvider(LlmProvider):
    """Answers from a queue (dicts, strings, Completions or exceptions to raise) or a handler."""

    name = "scripted"

    def __init__(self, answers: Iterable[Any] = (), handler: Optional[Callable[[LlmRequest], Any]] = None):
        self.answers = deque(answers)
        self.handler = handler
        self.requests: List[LlmRequest] = []
        self._lock = threading.Lock()

    def send(self, request: LlmRequest) -> Completion:
        with self._lock:
            self.requests.append(request)
            if self.handler is None:
                if not self.answers:
                    raise AssertionError(f"no scripted answer left for {request.response_schema_name}")
                answer = self.answers.popleft()
        if self.handler is not None:
            answer = self.handler(request)
        return as_completion(answer)

    def schemas(self) -> List[str]:
        return [r.response_schema_name for r in self.requests]


class RoutingProvider(LlmProvider):
    """First route whose schema matches and whose substrings all occur in the user content."""

    name = "routing"

    def __init__(self, routes: List[dict]):
        self.routes = routes
        self.requests: List[LlmRequest] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: Path) -> "RoutingProvider":
        return cls(json.loads(Path(path).read_text(encoding="utf-8"))["routes"])

    def send(self, request: LlmRequest) -> Completion:
        with self._lock:
            self.requests.append(request)
        text = request.flat_text()
        for route in self.routes:
            if route["schema"] == request.response_schema_name and all(s in text for s in route.get("contains", [])):
                return Completion(json.dumps(route["response"]), TokenUsage(len(text) // 4, 40))
        raise MissingFixture(f"no route for {request.response_schema_name}")


def make_gateway(provider: LlmProvider, **config: Any) -> LlmGateway:
    settings = {"kind": "replay", "max_concurrent_requests": 4, "max_retries": 2, **config}
    return LlmGateway(provider, ProviderConfig(**settings), sleep=lambda seconds: None)


def make_paragraph(body: str, index: int = 0, headings=((2, "Attack details"),)) -> Paragraph:
    return Paragraph(index, tuple(headings), body)


def html_session(html: str, content_type: str = "text/html; charset=utf-8", status_code: int = 200) -> MagicMock:
    response = MagicMock()
    response.status_code = status_code
    response.headers = {"Content-Type": content_type}
    response.content = html.encode("utf-8")
    session = MagicMock()
    session.get.return_value = response
    return session


@pytest.fixture
def terraform_rule_final():
    return parse_rule((FIXTURES / "terraform_rule_final.yml").read_text(encoding="utf-8"))


@pytest.fixture
def terraform_rule_initial():
    return parse_rule((FIXTURES / "terraform_rule_initial.yml").read_text(encoding="utf-8"))


@pytest.fixture
def scarleteel_html() -> str:
    return (SCARLETEEL_DIR / "report.html").read_text(encoding="utf-8")


@pytest.fixture
def scarleteel_session(scarleteel_html):
    return html_session(scarleteel_html)


@pytest.fixture
def routing_provider():
    return RoutingProvider.from_file(SCARLETEEL_DIR / "responses.json")


@pytest.fixture
def pipeline_config(tmp_path):
    return PipelineConfig(
        provider=ProviderConfig(kind="replay"),
        output_dir=str(tmp_path / "out"),
        run_date=RUN_DATE,
        seed=7,
        record_history=False,
    )
