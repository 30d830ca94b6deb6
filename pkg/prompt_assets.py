"""Versioned prompt assets under prompts/."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict

logger = logging.getLogger(__name__)

PROMPT_DIR = Path(__file__).resolve().parent / "prompts"
PROMPT_NAMES = (
    "image_analyzer",
    "explicit_api_extractor",
    "implicit_api_extractor",
    "ttp_extractor",
    "rule_generator",
    "rule_optimizer",
    "rule_selector",
    "api_remover",
    "ioc_extractor",
)

_VERSION_RE = re.compile(r"^#\s*prompt-version:\s*(\S+)\s*$")


@dataclass(frozen=True)
class Prompt:
    name: str
    version: str
    text: str


@lru_cache(maxsize=None)
def load_prompt(name: str) -> Prompt:
    path = PROMPT_DIR / f"{name}.txt"
    if not path.exists():
        raise FileNotFoundError(f"prompt asset not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    match = _VERSION_RE.match(lines[0]) if lines else None
    if not match:
        raise ValueError(f"prompt {name} is missing its '# prompt-version:' header")
    return Prompt(name, match.group(1), "\n".join(lines[1:]).strip() + "\n")


def prompt_versions() -> Dict[str, str]:
    return {name: load_prompt(name).version for name in PROMPT_NAMES}
