"""Image transcription: every [IMG:n] placeholder becomes a delimited transcript block."""

from __future__ import annotations

import logging
import mimetypes
import re
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional
from urllib.parse import unquote, urlparse

import requests

from ingest import IMAGE_TOKEN_RE, USER_AGENT, Document, ImageRef
from llm_gateway import ImagePart, LlmGateway, LlmRequest, LlmResponse, TextPart
from prompt_assets import load_prompt

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 1.0


@dataclass(frozen=True)
class ImageTranscript:
    ordinal: int
    text: str
    confidence_note: Optional[str] = None


def transcript_block(ordinal: int, text: str) -> str:
    return f"<<image {ordinal} transcript>>\n{text.strip()}\n<<end>>"


def unavailable_marker(ordinal: int) -> str:
    return f"[IMG:{ordinal} UNAVAILABLE]"


def _guess_mime(url: str) -> str:
    mime, _ = mimetypes.guess_type(urlparse(url).path)
    return mime if mime and mime.startswith("image/") else "image/png"


def image_part(ref: ImageRef, inline_remote: bool = False, session: Optional[requests.Session] = None) -> ImagePart:
    """Local images are inlined; remote ones are passed by URL unless inline_remote is set."""
    parsed = urlparse(ref.url)
    mime = _guess_mime(ref.url)
    if parsed.scheme == "file" or (not parsed.scheme and Path(ref.url).exists()):
        path = Path(unquote(parsed.path)) if parsed.scheme == "file" else Path(ref.url)
        if path.exists():
            return ImagePart(data=path.read_bytes(), mime_type=mime)
        logger.warning(f"⚠️ Local image {path} not found, passing its URL")
        return ImagePart(url=ref.url, mime_type=mime)
    if inline_remote and parsed.scheme in ("http", "https"):
        try:
            response = (session or requests).get(ref.url, headers={"User-Agent": USER_AGENT}, timeout=30)
            if response.status_code < 400 and response.content:
                content_type = response.headers.get("Content-Type", "").split(";")[0].strip()
                return ImagePart(data=response.content, mime_type=content_type if content_type.startswith("image/") else mime)
            logger.warning(f"⚠️ Image {ref.url} returned HTTP {response.status_code}, passing its URL")
        except requests.RequestException as exc:
            logger.warning(f"⚠️ Could not inline image {ref.url}: {exc}")
    return ImagePart(url=ref.url, mime_type=mime)


def _build_request(ref: ImageRef, part: ImagePart, temperature: float) -> LlmRequest:
    prompt = load_prompt("image_analyzer")
    note = f"Image {ref.ordinal} of the report."
    if ref.alt_text:
        note += f" Alt text: {ref.alt_text}"
    return LlmRequest(prompt.text, (TextPart(note), part), temperature, "image_transcript")


def splice(text: str, replacements: Dict[int, str]) -> str:
    """Replace [IMG:n] tokens; text outside the tokens is untouched."""
    def substitute(match: re.Match) -> str:
        return replacements.get(int(match.group(1)), match.group(0))

    return IMAGE_TOKEN_RE.sub(substitute, text)


def transcribe_images(doc: Document, gateway: LlmGateway, temperature: float = DEFAULT_TEMPERATURE,
                      inline_remote: bool = False, session: Optional[requests.Session] = None) -> Document:
    """Transcribe all images in one batch and splice the transcripts back in."""
    if not doc.images:
        logger.info("No images to transcribe")
        return doc

    start = time.time()
    logger.info(f"🔍 Transcribing {len(doc.images)} image(s)")
    requests_ = [_build_request(ref, image_part(ref, inline_remote, session), temperature) for ref in doc.images]
    results = gateway.complete_batch(requests_)

    transcripts: Dict[int, ImageTranscript] = {}
    replacements: Dict[int, str] = {}
    for ref, result in zip(doc.images, results):
        if isinstance(result, LlmResponse):
            transcript = ImageTranscript(ref.ordinal, result.parsed_json["transcript"], result.parsed_json.get("confidence_note"))
            transcripts[ref.ordinal] = transcript
            replacements[ref.ordinal] = transcript_block(ref.ordinal, transcript.text)
        else:
            logger.warning(f"⚠️ Image {ref.ordinal} unavailable: {result}")
            replacements[ref.ordinal] = unavailable_marker(ref.ordinal)

    paragraphs = []
    for paragraph in doc.paragraphs:
        ordinals = paragraph.image_ordinals
        if not ordinals:
            paragraphs.append(paragraph)
            continue
        paragraphs.append(
            replace(
                paragraph,
                body=splice(paragraph.body, replacements),
                image_transcripts=tuple(transcripts[n].text for n in ordinals if n in transcripts),
            )
        )

    logger.info(
        f"✓ Transcribed {len(transcripts)}/{len(doc.images)} image(s) in {(time.time() - start) * 1000:.2f}ms"
    )
    return replace(doc, paragraphs=tuple(paragraphs), full_text=splice(doc.full_text, replacements))
