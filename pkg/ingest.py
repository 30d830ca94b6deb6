"""Report download and HTML → unified text conversion.

Unified text format:
    headings        '#' * level + ' ' + heading text
    paragraphs      separated by one blank line
    tables          one line per row, cells joined with ' | '
    lists           '- item' (or 'n. item'), one tab of indentation per nesting level
    images          '[IMG:<n>]' placeholder at the image's original position
    code blocks     verbatim, blank lines collapsed so a block stays one paragraph
"""

from __future__ import annotations

import json
import logging
import re
import time
from dataclasses import asdict, dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union
from urllib.parse import urljoin, urlparse

import requests
from bs4 import BeautifulSoup
from bs4.element import Comment, Declaration, Doctype, NavigableString, ProcessingInstruction, Tag

logger = logging.getLogger(__name__)

DOCUMENT_SCHEMA_VERSION = 1
DEFAULT_STOPWORDS = ("recommendation", "conclusion", "about ", "overview", "summary", "mitigation", "how .* can help")
USER_AGENT = "Mozilla/5.0 (compatible; huntsmith/1.0; +https://github.com/huntsmith)"
HTML_MIME_TYPES = ("text/html", "application/xhtml+xml")

IMAGE_TOKEN_RE = re.compile(r"\[IMG:(\d+)\]")

_STRIP_TAGS = ("script", "style", "noscript", "nav", "aside", "footer", "form", "iframe", "svg", "button", "template")
_NOISE_RE = re.compile(r"sidebar|advert|social-share|share-buttons|newsletter|related-posts|cookie", re.IGNORECASE)
_HEADINGS = {"h1": 1, "h2": 2, "h3": 3, "h4": 4, "h5": 5, "h6": 6}
_INLINE_TAGS = {"a", "span", "strong", "em", "b", "i", "u", "code", "small", "sup", "sub", "mark", "abbr", "time", "kbd", "s", "q", "cite", "label"}
_SKIPPED_STRINGS = (Comment, Declaration, Doctype, ProcessingInstruction)


class IngestError(RuntimeError):
    """Base class for download and parsing failures."""


class NetworkError(IngestError):
    pass


class NonHtmlContent(IngestError):
    pass


class HttpStatus(IngestError):
    def __init__(self, status_code: int, url: str = ""):
        super().__init__(f"HTTP {status_code} for {url}")
        self.status_code = status_code


class EmptyContent(IngestError):
    pass


@dataclass(frozen=True)
class ImageRef:
    ordinal: int
    url: str
    alt_text: Optional[str] = None
    paragraph_index: int = 0


@dataclass(frozen=True)
class Paragraph:
    index: int
    heading_path: Tuple[Tuple[int, str], ...]
    body: str
    image_transcripts: Tuple[str, ...] = ()

    def __post_init__(self):
        levels = [level for level, _ in self.heading_path]
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError(f"heading levels must strictly increase: {levels}")
        if not self.body.strip():
            raise ValueError("paragraph body is empty")

    def render(self) -> str:
        """Paragraph text with its heading path, as sent to the extraction prompts."""
        headings = [f"{'#' * level} {text}" for level, text in self.heading_path]
        return "\n".join(headings + [self.body])

    @property
    def image_ordinals(self) -> List[int]:
        return [int(n) for n in IMAGE_TOKEN_RE.findall(self.body)]


@dataclass(frozen=True)
class Document:
    source_url: str
    title: str
    paragraphs: Tuple[Paragraph, ...]
    full_text: str
    images: Tuple[ImageRef, ...] = ()
    fetched_at: str = ""

    def paragraph(self, index: int) -> Optional[Paragraph]:
        for paragraph in self.paragraphs:
            if paragraph.index == index:
                return paragraph
        return None


# ---------------------------------------------------------------------------
# Fetching
# ---------------------------------------------------------------------------

def fetch(url: str, session: Optional[requests.Session] = None, timeout: float = 30.0) -> str:
    """Download a page and decode it per its declared charset (UTF-8 by default)."""
    if urlparse(url).scheme not in ("http", "https"):
        raise ValueError(f"only http(s) URLs can be fetched: {url}")
    logger.info(f"🌐 Fetching {url}")
    start = time.time()
    try:
        response = (session or requests).get(url, headers={"User-Agent": USER_AGENT}, timeout=timeout)
    except requests.RequestException as exc:
        logger.error(f"❌ Network error fetching {url}: {exc}")
        raise NetworkError(f"could not fetch {url}: {exc}") from exc

    if response.status_code >= 400:
        raise HttpStatus(response.status_code, url)

    content_type = response.headers.get("Content-Type", "")
    mime = content_type.split(";")[0].strip().lower()
    if mime and mime not in HTML_MIME_TYPES:
        raise NonHtmlContent(f"{url} returned {mime}, expected HTML")

    match = re.search(r"charset=[\"']?([\w.:-]+)", content_type, re.IGNORECASE)
    charset = match.group(1) if match else "utf-8"
    try:
        html = response.content.decode(charset, errors="replace")
    except LookupError:
        logger.warning(f"⚠️ Unknown charset {charset!r} for {url}, decoding as UTF-8")
        html = response.content.decode("utf-8", errors="replace")
    logger.info(f"✓ Fetched {len(html)} characters in {(time.time() - start) * 1000:.2f}ms")
    return html


def load_html(source: str, session: Optional[requests.Session] = None) -> Tuple[str, str]:
    """Returns (html, source_url) for an http(s) URL or a local .html path."""
    if urlparse(source).scheme in ("http", "https"):
        return fetch(source, session=session), source
    path = Path(source)
    if not path.exists():
        raise IngestError(f"no such file: {source}")
    return path.read_text(encoding="utf-8", errors="replace"), path.resolve().as_uri()


def selector_for(url: str, content_selectors: Mapping[str, str]) -> Optional[str]:
    """Per-site selector: the longest configured domain that the URL's host ends with."""
    host = (urlparse(url).hostname or "").lower()
    matches = [domain for domain in content_selectors if host == domain or host.endswith("." + domain)]
    return content_selectors[max(matches, key=len)] if matches else None


def load_source(source: str, content_selectors: Optional[Mapping[str, str]] = None,
                session: Optional[requests.Session] = None) -> "Document":
    """Fetch or read a report and parse it into an unfiltered Document."""
    html, source_url = load_html(source, session=session)
    return parse_html(html, selector_for(source_url, content_selectors or {}), source_url)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

@dataclass
class _Block:
    kind: str  # heading | text
    text: str
    level: int = 0

    def render(self) -> str:
        return f"{'#' * self.level} {self.text}" if self.kind == "heading" else self.text


def _squash(text: str) -> str:
    return re.sub(r"\s+", " ", text)


def _finish_inline(text: str) -> str:
    lines = [re.sub(r"[ \t\f\v\r]+", " ", line).strip() for line in text.split("\n")]
    return "\n".join(line for line in lines if line)


class _Renderer:
    def __init__(self, base_url: str):
        self.base_url = base_url
        self.blocks: List[_Block] = []
        self.images: List[Tuple[int, str, Optional[str]]] = []
        self._inline: List[str] = []

    def _flush(self) -> None:
        text = _finish_inline("".join(self._inline))
        if text:
            self.blocks.append(_Block("text", text))
        self._inline = []

    def _image(self, tag: Tag) -> str:
        src = tag.get("src") or tag.get("data-src") or tag.get("data-lazy-src")
        if not src:
            return ""
        url = urljoin(self.base_url, src) if self.base_url else src
        ordinal = len(self.images) + 1
        alt = (tag.get("alt") or "").strip() or None
        self.images.append((ordinal, url, alt))
        return f"[IMG:{ordinal}]"

    def _inline_text(self, node: Tag, skip: Sequence[str] = ()) -> str:
        parts: List[str] = []
        for child in node.children:
            if isinstance(child, _SKIPPED_STRINGS):
                continue
            if isinstance(child, NavigableString):
                parts.append(_squash(str(child)))
            elif isinstance(child, Tag):
                if child.name in skip:
                    continue
                if child.name == "img":
                    token = self._image(child)
                    if token:
                        parts.append(f" {token} ")
                elif child.name == "br":
                    parts.append("\n")
                else:
                    parts.append(self._inline_text(child, skip))
        return "".join(parts)

    def _list_lines(self, node: Tag, depth: int) -> List[str]:
        lines: List[str] = []
        ordered = node.name == "ol"
        for number, item in enumerate(node.find_all("li", recursive=False), start=1):
            marker = f"{number}. " if ordered else "- "
            text = _finish_inline(self._inline_text(item, skip=("ul", "ol"))).replace("\n", " ")
            if text:
                lines.append("\t" * depth + marker + text)
            for nested in item.find_all(["ul", "ol"], recursive=False):
                lines.extend(self._list_lines(nested, depth + 1))
        return lines

    def _table_lines(self, node: Tag) -> List[str]:
        lines = []
        for row in node.find_all("tr"):
            cells = row.find_all(["td", "th"], recursive=False)
            values = [_finish_inline(self._inline_text(cell)).replace("\n", " ") for cell in cells]
            if any(values):
                lines.append(" | ".join(values))
        return lines

    def walk(self, node: Tag) -> None:
        for child in node.children:
            if isinstance(child, _SKIPPED_STRINGS):
                continue
            if isinstance(child, NavigableString):
                self._inline.append(_squash(str(child)))
                continue
            if not isinstance(child, Tag):
                continue
            name = child.name
            if name in _HEADINGS:
                self._flush()
                text = _squash(child.get_text(" ")).strip()
                if text:
                    self.blocks.append(_Block("heading", text, _HEADINGS[name]))
            elif name == "p":
                self._flush()
                self._inline.append(self._inline_text(child))
                self._flush()
            elif name in ("ul", "ol"):
                self._flush()
                lines = self._list_lines(child, 0)
                if lines:
                    self.blocks.append(_Block("text", "\n".join(lines)))
            elif name == "table":
                self._flush()
                lines = self._table_lines(child)
                if lines:
                    self.blocks.append(_Block("text", "\n".join(lines)))
            elif name == "pre":
                self._flush()
                code = re.sub(r"\n\s*\n", "\n", child.get_text()).strip("\n")
                if code.strip():
                    self.blocks.append(_Block("text", code))
            elif name == "img":
                self._flush()
                token = self._image(child)
                if token:
                    self.blocks.append(_Block("text", token))
            elif name == "br":
                self._inline.append("\n")
            elif name in _INLINE_TAGS:
                self._inline.append(self._inline_text(child))
            else:
                self._flush()
                self.walk(child)
                self._flush()


def _content_root(soup: BeautifulSoup, selector: Optional[str]) -> Tag:
    if selector:
        node = soup.select_one(selector)
        if node is None:
            raise EmptyContent(f"content selector {selector!r} matched nothing")
        return node
    articles = soup.find_all("article")
    if articles:
        return max(articles, key=lambda a: len(a.get_text(" ", strip=True)))
    for candidate in (soup.find("main"), soup.find(attrs={"role": "main"})):
        if candidate is not None:
            return candidate
    return soup.body or soup


def _strip_noise(root: Tag) -> None:
    for tag in root.find_all(list(_STRIP_TAGS)):
        tag.decompose()
    for tag in root.find_all(["div", "section", "ul", "header"]):
        if tag.decomposed:
            continue
        marker = " ".join(tag.get("class") or []) + " " + (tag.get("id") or "")
        if _NOISE_RE.search(marker):
            tag.decompose()


def split_paragraphs(blocks: Iterable[_Block]) -> List[Paragraph]:
    """Heading-anchored paragraphs: a new paragraph at every heading and blank-line run."""
    paragraphs: List[Paragraph] = []
    stack: List[Tuple[int, str]] = []
    for block in blocks:
        if block.kind == "heading":
            while stack and stack[-1][0] >= block.level:
                stack.pop()
            stack.append((block.level, block.text))
            continue
        for chunk in re.split(r"\n\s*\n", block.text):
            if chunk.strip():
                paragraphs.append(Paragraph(len(paragraphs), tuple(stack), chunk.strip("\n")))
    return paragraphs


def parse_html(html: str, content_selector: Optional[str] = None, source_url: str = "") -> Document:
    """Convert HTML into a Document (paragraphs not yet filtered)."""
    start = time.time()
    soup = BeautifulSoup(html, "lxml")
    title_tag = soup.find("title")
    root = _content_root(soup, content_selector)
    _strip_noise(root)

    renderer = _Renderer(source_url)
    renderer.walk(root)
    renderer._flush()
    if not any(block.kind == "text" for block in renderer.blocks):
        raise EmptyContent("no text content found in the page")

    paragraphs = split_paragraphs(renderer.blocks)
    owner: Dict[int, int] = {}
    for paragraph in paragraphs:
        for ordinal in paragraph.image_ordinals:
            owner.setdefault(ordinal, paragraph.index)
    images = tuple(ImageRef(ordinal, url, alt, owner.get(ordinal, 0)) for ordinal, url, alt in renderer.images)

    title = _squash(title_tag.get_text(" ")).strip() if title_tag else ""
    if not title:
        first_h1 = next((b.text for b in renderer.blocks if b.kind == "heading" and b.level == 1), "")
        title = first_h1

    doc = Document(
        source_url=source_url,
        title=title,
        paragraphs=tuple(paragraphs),
        full_text="\n\n".join(block.render() for block in renderer.blocks),
        images=images,
        fetched_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )
    logger.info(
        f"✓ Parsed '{title[:60]}': {len(paragraphs)} paragraphs, {len(images)} images "
        f"in {(time.time() - start) * 1000:.2f}ms"
    )
    return doc


def _stopword_patterns(stopwords: Sequence[str]) -> List[re.Pattern]:
    patterns = []
    for word in stopwords:
        try:
            patterns.append(re.compile(word, re.IGNORECASE))
        except re.error:
            patterns.append(re.compile(re.escape(word), re.IGNORECASE))
    return patterns


def filter_sections(doc: Document, stopwords: Sequence[str] = DEFAULT_STOPWORDS) -> Document:
    """Drop paragraphs that sit under a stopword heading (the heading's whole subtree).

    The document title heading is never treated as a section heading.
    """
    patterns = _stopword_patterns(stopwords)

    def excluded(heading: str) -> bool:
        if doc.title and heading.strip() == doc.title.strip():
            return False
        return any(pattern.search(heading) for pattern in patterns)

    kept = tuple(p for p in doc.paragraphs if not any(excluded(text) for _, text in p.heading_path))
    removed = len(doc.paragraphs) - len(kept)
    if removed:
        logger.info(f"🔍 Filtered {removed} paragraph(s) under non-essential headings")
    return replace(doc, paragraphs=kept)


# ---------------------------------------------------------------------------
# Document JSON
# ---------------------------------------------------------------------------

def document_to_dict(doc: Document) -> Dict[str, Any]:
    data = asdict(doc)
    data["schema_version"] = DOCUMENT_SCHEMA_VERSION
    return data


def document_from_dict(data: Mapping[str, Any]) -> Document:
    version = data.get("schema_version", DOCUMENT_SCHEMA_VERSION)
    if version != DOCUMENT_SCHEMA_VERSION:
        raise ValueError(f"unsupported document schema version: {version}")
    paragraphs = tuple(
        Paragraph(
            index=p["index"],
            heading_path=tuple((int(level), text) for level, text in p["heading_path"]),
            body=p["body"],
            image_transcripts=tuple(p.get("image_transcripts", ())),
        )
        for p in data["paragraphs"]
    )
    images = tuple(ImageRef(i["ordinal"], i["url"], i.get("alt_text"), i.get("paragraph_index", 0)) for i in data.get("images", ()))
    return Document(data["source_url"], data["title"], paragraphs, data["full_text"], images, data.get("fetched_at", ""))


def document_to_json(doc: Document) -> str:
    return json.dumps(document_to_dict(doc), indent=2, ensure_ascii=False)


def document_from_json(text: str) -> Document:
    return document_from_dict(json.loads(text))
