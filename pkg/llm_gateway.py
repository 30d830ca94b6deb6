"""Chat-completion gateway with enforced JSON responses.

Every call goes through ``LlmGateway.complete``: the provider answers, the raw text
is parsed with a layered JSON extraction and validated against a pydantic response
schema. Schema violations are retried with the violation appended to the prompt,
rate limits are retried with exponential backoff. ``complete_batch`` is the fan-out
primitive used by every stage that issues parallel requests.

Providers:
    GeminiProvider            google-genai client (default live provider)
    OpenAICompatibleProvider  HTTPS chat-completion wire format over requests
    ReplayProvider            answers from hash-keyed fixture files (offline tests)
    RecordingProvider         wraps a live provider and writes fixtures
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Type, Union

import requests
from google import genai
from google.genai import errors as genai_errors
from google.genai import types
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class LlmGatewayError(RuntimeError):
    """Base class for gateway failures."""


class Transport(LlmGatewayError):
    pass


class RateLimited(LlmGatewayError):
    pass


class LlmTimeout(LlmGatewayError):
    pass


class SchemaViolation(LlmGatewayError):
    pass


class MissingFixture(LlmGatewayError):
    pass


# ---------------------------------------------------------------------------
# Response schemas
# ---------------------------------------------------------------------------

class _Schema(BaseModel):
    model_config = ConfigDict(extra="ignore")


class ImageTranscriptResponse(_Schema):
    transcript: str
    confidence_note: Optional[str] = None


class ApiCallItem(_Schema):
    eventName: str
    eventSource: str = ""


class ApiCallsResponse(_Schema):
    api_calls: List[ApiCallItem]


class TtpItem(_Schema):
    eventName: str
    eventSource: str = ""
    tactic: str
    technique: str
    subTechnique: Optional[str] = None


class TtpAssignmentsResponse(_Schema):
    assignments: List[TtpItem]


class SigmaRulesResponse(_Schema):
    rules: List[Dict[str, Any]]


class SingleRuleResponse(_Schema):
    rule: Dict[str, Any]


class RuleSelectionResponse(_Schema):
    selected_index: Optional[int] = None
    selected_title: Optional[str] = None
    reason: Optional[str] = None

    @model_validator(mode="after")
    def _one_answer(self) -> "RuleSelectionResponse":
        if self.selected_index is None and not self.selected_title:
            raise ValueError("either selected_index or selected_title is required")
        return self


class IocResponse(_Schema):
    ip_addresses: List[str] = Field(default_factory=list)
    user_agents: List[str] = Field(default_factory=list)


RESPONSE_SCHEMAS: Dict[str, Type[BaseModel]] = {
    "image_transcript": ImageTranscriptResponse,
    "explicit_api_calls": ApiCallsResponse,
    "implicit_api_calls": ApiCallsResponse,
    "ttp_assignments": TtpAssignmentsResponse,
    "sigma_rules": SigmaRulesResponse,
    "optimized_rule": SingleRuleResponse,
    "api_removal": SingleRuleResponse,
    "rule_selection": RuleSelectionResponse,
    "iocs": IocResponse,
}


def extract_json(text: str) -> Optional[Any]:
    """Extract a JSON object from model output.

    1. Direct parse
    2. Strip markdown code fences then parse
    3. Outermost {...} block (catches preamble/postamble prose)
    """
    text = (text or "").strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass

    stripped = re.sub(r"^```(?:json)?\s*", "", text, flags=re.IGNORECASE)
    stripped = re.sub(r"\s*```$", "", stripped).strip()
    try:
        return json.loads(stripped)
    except json.JSONDecodeError:
        pass

    match = re.search(r"\{.*\}", text, re.DOTALL)
    if match:
        try:
            return json.loads(match.group(0))
        except json.JSONDecodeError as exc:
            logger.debug(f"Regex-extracted JSON still invalid: {exc}")
    return None


def validate_response(schema_name: str, raw_text: str) -> Dict[str, Any]:
    """Parse and validate raw model text; raises SchemaViolation."""
    schema = RESPONSE_SCHEMAS.get(schema_name)
    if schema is None:
        raise SchemaViolation(f"unknown response schema: {schema_name}")
    payload = extract_json(raw_text)
    if payload is None:
        raise SchemaViolation(f"response is not JSON (schema {schema_name})")
    try:
        return schema.model_validate(payload).model_dump(mode="json")
    except ValidationError as exc:
        errors = "; ".join(f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors()[:5])
        raise SchemaViolation(f"response does not match {schema_name}: {errors}") from exc


# ---------------------------------------------------------------------------
# Requests and responses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    url: Optional[str] = None
    data: Optional[bytes] = None
    mime_type: str = "image/png"

    def __post_init__(self):
        if not self.url and not self.data:
            raise ValueError("image part needs a url or inline data")


ContentPart = Union[TextPart, ImagePart]


@dataclass(frozen=True)
class LlmRequest:
    system_prompt: str
    user_content: Tuple[ContentPart, ...]
    temperature: float
    response_schema_name: str
    max_output_tokens: int = 8192

    def __post_init__(self):
        if not 0 <= self.temperature <= 2:
            raise ValueError(f"temperature must be within [0, 2]: {self.temperature}")
        if not self.user_content:
            raise ValueError("request needs at least one content part")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")
        if isinstance(self.user_content, list):
            object.__setattr__(self, "user_content", tuple(self.user_content))

    @classmethod
    def text(cls, system_prompt: str, user_text: str, temperature: float, schema: str, **kwargs) -> "LlmRequest":
        return cls(system_prompt, (TextPart(user_text),), temperature, schema, **kwargs)

    def request_hash(self) -> str:
        """Content hash over system prompt, user content, temperature and schema name."""
        content = []
        for part in self.user_content:
            if isinstance(part, TextPart):
                content.append({"type": "text", "text": part.text})
            elif part.data is not None:
                content.append({"type": "image", "sha256": hashlib.sha256(part.data).hexdigest(), "mime": part.mime_type})
            else:
                content.append({"type": "image", "url": part.url})
        canonical = json.dumps(
            {
                "system": self.system_prompt,
                "content": content,
                "temperature": round(float(self.temperature), 6),
                "schema": self.response_schema_name,
            },
            sort_keys=True,
            ensure_ascii=False,
        )
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def flat_text(self) -> str:
        """User content as plain text (image parts as ``image:<ref>`` lines)."""
        lines = []
        for part in self.user_content:
            if isinstance(part, TextPart):
                lines.append(part.text)
            else:
                lines.append(f"image:{part.url or hashlib.sha256(part.data).hexdigest()}")
        return "\n".join(lines)

    def with_feedback(self, violation: str) -> "LlmRequest":
        note = (
            f"Your previous answer was rejected: {violation}. "
            f"Answer again with a single JSON object in the {self.response_schema_name} format."
        )
        return replace(self, user_content=self.user_content + (TextPart(note),))


@dataclass(frozen=True)
class TokenUsage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __add__(self, other: "TokenUsage") -> "TokenUsage":
        return TokenUsage(self.prompt_tokens + other.prompt_tokens, self.completion_tokens + other.completion_tokens)


@dataclass(frozen=True)
class Completion:
    """What a provider returns before validation."""

    text: str
    usage: TokenUsage = TokenUsage()


@dataclass(frozen=True)
class LlmResponse:
    raw_text: str
    parsed_json: Dict[str, Any]
    usage: TokenUsage = TokenUsage()
    retry_count: int = 0


@dataclass
class ProviderConfig:
    kind: str = "gemini"  # gemini | openai | replay
    endpoint_url: str = "https://generativelanguage.googleapis.com"
    model_name: str = "gemini-2.5-flash"
    api_key_ref: str = "GEMINI_API_KEY"
    request_timeout: float = 120.0
    max_retries: int = 2
    max_concurrent_requests: int = 4
    max_output_tokens: int = 8192

    def __post_init__(self):
        if self.kind not in ("gemini", "openai", "replay"):
            raise ValueError(f"provider.kind must be gemini, openai or replay: {self.kind!r}")
        if self.max_concurrent_requests < 1:
            raise ValueError("provider.max_concurrent_requests must be >= 1")
        if self.max_retries < 0:
            raise ValueError("provider.max_retries must be >= 0")
        if self.request_timeout <= 0:
            raise ValueError("provider.request_timeout must be positive")


def resolve_api_key(config: ProviderConfig) -> str:
    api_key = os.getenv(config.api_key_ref, "")
    if not api_key:
        logger.error(f"❌ {config.api_key_ref} not set")
        raise LlmGatewayError(f"{config.api_key_ref} must be set in the environment or a .env file")
    logger.info(f"✓ API key loaded from environment variable {config.api_key_ref}")
    return api_key


# ---------------------------------------------------------------------------
# Providers
# ---------------------------------------------------------------------------

class LlmProvider(ABC):
    name = "provider"

    @abstractmethod
    def send(self, request: LlmRequest) -> Completion:
        """Return the raw completion; must tolerate concurrent calls."""


class GeminiProvider(LlmProvider):
    name = "gemini"

    def __init__(self, config: ProviderConfig, api_key: Optional[str] = None):
        self.config = config
        self.api_key = api_key or resolve_api_key(config)
        try:
            logger.info("Initializing Gemini client...")
            self.client = genai.Client(
                api_key=self.api_key,
                http_options=types.HttpOptions(timeout=int(config.request_timeout * 1000)),
            )
            logger.info("✓ Gemini client initialized successfully")
        except Exception as exc:
            logger.error(f"❌ Failed to initialize Gemini client: {exc}")
            raise LlmGatewayError(f"Failed to initialize Gemini client: {exc}") from exc

    def _parts(self, request: LlmRequest) -> List[Any]:
        parts = []
        for part in request.user_content:
            if isinstance(part, TextPart):
                parts.append(types.Part.from_text(text=part.text))
            elif part.data is not None:
                parts.append(types.Part.from_bytes(data=part.data, mime_type=part.mime_type))
            else:
                parts.append(types.Part.from_uri(file_uri=part.url, mime_type=part.mime_type))
        return parts

    def send(self, request: LlmRequest) -> Completion:
        config = types.GenerateContentConfig(
            system_instruction=request.system_prompt,
            temperature=request.temperature,
            max_output_tokens=request.max_output_tokens,
            response_mime_type="application/json",
        )
        try:
            response = self.client.models.generate_content(
                model=self.config.model_name,
                contents=[types.Content(role="user", parts=self._parts(request))],
                config=config,
            )
        except genai_errors.ClientError as exc:
            if getattr(exc, "code", None) == 429:
                raise RateLimited(f"Gemini rate limit: {exc}") from exc
            raise Transport(f"Gemini API client error: {exc}") from exc
        except genai_errors.ServerError as exc:
            raise Transport(f"Gemini API server error: {exc}") from exc
        except Exception as exc:
            if "timed out" in str(exc).lower() or isinstance(exc, TimeoutError):
                raise LlmTimeout(f"Gemini request timed out after {self.config.request_timeout}s") from exc
            raise Transport(f"Gemini API call failed: {exc}") from exc

        usage = getattr(response, "usage_metadata", None)
        return Completion(
            text=self._get_response_text(response),
            usage=TokenUsage(
                int(getattr(usage, "prompt_token_count", 0) or 0),
                int(getattr(usage, "candidates_token_count", 0) or 0),
            ),
        )

    def _get_response_text(self, response: Any) -> str:
        """Answer text without thought parts."""
        try:
            if response.candidates:
                parts = response.candidates[0].content.parts
                text_parts = [
                    p.text for p in parts
                    if hasattr(p, "text") and p.text and not getattr(p, "thought", False)
                ]
                if text_parts:
                    return "\n".join(text_parts).strip()
        except Exception as exc:
            logger.debug(f"Could not extract parts directly, falling back to response.text: {exc}")
        return response.text or ""


class OpenAICompatibleProvider(LlmProvider):
    """``POST {endpoint}/chat/completions`` with JSON response format."""

    name = "openai"

    def __init__(self, config: ProviderConfig, api_key: Optional[str] = None, session: Optional[requests.Session] = None):
        self.config = config
        self.api_key = api_key or resolve_api_key(config)
        self.session = session or requests.Session()
        base = config.endpoint_url.rstrip("/")
        self.url = base if base.endswith("/chat/completions") else f"{base}/chat/completions"

    @staticmethod
    def _content(request: LlmRequest) -> List[Dict[str, Any]]:
        content: List[Dict[str, Any]] = []
        for part in request.user_content:
            if isinstance(part, TextPart):
                content.append({"type": "text", "text": part.text})
            else:
                url = part.url
                if part.data is not None:
                    url = f"data:{part.mime_type};base64,{base64.b64encode(part.data).decode('ascii')}"
                content.append({"type": "image_url", "image_url": {"url": url}})
        return content

    def send(self, request: LlmRequest) -> Completion:
        payload = {
            "model": self.config.model_name,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
            "response_format": {"type": "json_object"},
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": self._content(request)},
            ],
        }
        try:
            response = self.session.post(
                self.url,
                json=payload,
                headers={"Authorization": f"Bearer {self.api_key}"},
                timeout=self.config.request_timeout,
            )
        except requests.Timeout as exc:
            raise LlmTimeout(f"chat completion timed out after {self.config.request_timeout}s") from exc
        except requests.RequestException as exc:
            raise Transport(f"chat completion request failed: {exc}") from exc

        if response.status_code == 429:
            raise RateLimited("chat completion rate limited (HTTP 429)")
        if response.status_code >= 400:
            raise Transport(f"chat completion failed with HTTP {response.status_code}: {response.text[:200]}")
        try:
            data = response.json()
            text = data["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise Transport(f"unexpected chat completion payload: {exc}") from exc
        usage = data.get("usage") or {}
        return Completion(text, TokenUsage(int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0))))


class FixtureStore:
    """Hash-keyed replay fixtures, one JSON file per request."""

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)
        self._lock = threading.Lock()

    def _path(self, request_hash: str) -> Path:
        return self.directory / f"{request_hash}.json"

    def record(self, name: str, request: LlmRequest, completion: Completion) -> Path:
        request_hash = request.request_hash()
        payload = {
            "name": name,
            "request_hash": request_hash,
            "schema": request.response_schema_name,
            "temperature": request.temperature,
            "recorded_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "raw_text": completion.text,
            "usage": {"prompt_tokens": completion.usage.prompt_tokens, "completion_tokens": completion.usage.completion_tokens},
        }
        path = self._path(request_hash)
        with self._lock:
            self.directory.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(payload, indent=2, ensure_ascii=False), encoding="utf-8")
        logger.debug(f"💾 Recorded fixture {name} ({request_hash[:12]})")
        return path

    def lookup(self, request: LlmRequest) -> Completion:
        request_hash = request.request_hash()
        path = self._path(request_hash)
        if not path.exists():
            raise MissingFixture(f"no replay fixture for request {request_hash[:12]} (schema {request.response_schema_name})")
        data = json.loads(path.read_text(encoding="utf-8"))
        usage = data.get("usage") or {}
        return Completion(data["raw_text"], TokenUsage(usage.get("prompt_tokens", 0), usage.get("completion_tokens", 0)))

    def list(self) -> List[Dict[str, Any]]:
        if not self.directory.exists():
            return []
        entries = []
        for path in sorted(self.directory.glob("*.json")):
            data = json.loads(path.read_text(encoding="utf-8"))
            entries.append({key: data.get(key) for key in ("name", "request_hash", "schema", "temperature", "recorded_at")})
        return entries


def record_replay_fixture(store: FixtureStore, name: str, request: LlmRequest, response: LlmResponse) -> Path:
    return store.record(name, request, Completion(response.raw_text, response.usage))


class ReplayProvider(LlmProvider):
    name = "replay"

    def __init__(self, store: FixtureStore):
        self.store = store

    def send(self, request: LlmRequest) -> Completion:
        return self.store.lookup(request)


class RecordingProvider(LlmProvider):
    name = "recording"

    def __init__(self, inner: LlmProvider, store: FixtureStore):
        self.inner = inner
        self.store = store

    def send(self, request: LlmRequest) -> Completion:
        completion = self.inner.send(request)
        self.store.record(f"{request.response_schema_name}-{request.request_hash()[:8]}", request, completion)
        return completion


def build_provider(config: ProviderConfig, replay_dir: Optional[Union[str, Path]] = None,
                   record_dir: Optional[Union[str, Path]] = None) -> LlmProvider:
    if replay_dir is not None:
        logger.info(f"♻️  Replaying LLM responses from {replay_dir}")
        return ReplayProvider(FixtureStore(replay_dir))
    if config.kind == "replay":
        raise LlmGatewayError("provider kind 'replay' needs a fixture directory (--replay)")
    provider: LlmProvider = GeminiProvider(config) if config.kind == "gemini" else OpenAICompatibleProvider(config)
    if record_dir is not None:
        logger.info(f"💾 Recording LLM responses into {record_dir}")
        provider = RecordingProvider(provider, FixtureStore(record_dir))
    return provider


# ---------------------------------------------------------------------------
# Gateway
# ---------------------------------------------------------------------------

BatchResult = Union[LlmResponse, LlmGatewayError]


class LlmGateway:
    """Thread-safe front door to a provider."""

    initial_backoff = 1.0

    def __init__(self, provider: LlmProvider, config: Optional[ProviderConfig] = None,
                 sleep: Callable[[float], None] = time.sleep, rng: Optional[random.Random] = None):
        self.provider = provider
        self.config = config or ProviderConfig(kind="replay")
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._slots = threading.BoundedSemaphore(self.config.max_concurrent_requests)
        self._lock = threading.Lock()
        self.usage = TokenUsage()
        self.calls = 0

    def _send(self, request: LlmRequest) -> Completion:
        delay = self.initial_backoff
        attempt = 0
        while True:
            try:
                with self._slots:
                    completion = self.provider.send(request)
                break
            except RateLimited:
                if attempt >= self.config.max_retries:
                    raise
                wait = delay * self._rng.uniform(0.8, 1.2)
                logger.warning(f"⚠️ Rate limited, retrying in {wait:.2f}s (attempt {attempt + 1}/{self.config.max_retries})")
                self._sleep(wait)
                delay *= 2
                attempt += 1
            except LlmGatewayError:
                raise
            except Exception as exc:
                raise Transport(f"provider {self.provider.name} failed: {exc}") from exc
        with self._lock:
            self.usage = self.usage + completion.usage
            self.calls += 1
        return completion

    def complete(self, request: LlmRequest) -> LlmResponse:
        attempt_request = request
        last_violation: Optional[SchemaViolation] = None
        for attempt in range(self.config.max_retries + 1):
            start = time.time()
            completion = self._send(attempt_request)
            try:
                parsed = validate_response(request.response_schema_name, completion.text)
            except SchemaViolation as exc:
                last_violation = exc
                logger.warning(f"⚠️ Schema violation on attempt {attempt + 1}: {exc}")
                attempt_request = request.with_feedback(str(exc))
                continue
            logger.debug(
                f"✓ {request.response_schema_name} completed in {(time.time() - start) * 1000:.2f}ms "
                f"(retries: {attempt})"
            )
            return LlmResponse(completion.text, parsed, completion.usage, retry_count=attempt)
        logger.error(f"❌ {request.response_schema_name}: schema retries exhausted")
        raise SchemaViolation(
            f"{request.response_schema_name}: no valid response after {self.config.max_retries + 1} attempts: {last_violation}"
        ) from last_violation

    def complete_batch(self, requests_: Sequence[LlmRequest]) -> List[BatchResult]:
        """Dispatch concurrently; slot i holds the response or the error for request i."""
        if not requests_:
            raise ValueError("complete_batch needs at least one request")
        results: List[Optional[BatchResult]] = [None] * len(requests_)
        workers = min(len(requests_), self.config.max_concurrent_requests)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(self.complete, request): i for i, request in enumerate(requests_)}
            for future in as_completed(futures):
                index = futures[future]
                try:
                    results[index] = future.result()
                except LlmGatewayError as exc:
                    logger.warning(f"⚠️ Batch request {index + 1}/{len(requests_)} failed: {exc}")
                    results[index] = exc
        return results  # type: ignore[return-value]
