"""Structured captions: one global sentence, per-cue local sentences, a summary.

The plain-text wire format is line based::

    Global: <sentence>
    Local:
    - <sentence>
    - <sentence>
    Summary: <sentence>

Sentences may not contain newlines, so parsing is unambiguous and
``parse_structured_caption(serialize_structured_caption(c)) == c`` holds for
every valid caption. Tokenization is a fixed hash scheme (FNV-1a 64-bit folded
into the vocabulary), shared by training and evaluation so the same word
always lands on the same id.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

DEFAULT_VOCAB_SIZE = 4096

GLOBAL_PREFIX = "Global: "
LOCAL_HEADER = "Local:"
BULLET_PREFIX = "- "
SUMMARY_PREFIX = "Summary: "

_WORD_RE = re.compile(r"[a-z0-9]+")

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = (1 << 64) - 1


class CaptionFormatError(ValueError):
    """Raised when caption text does not follow the wire format."""


class MissingSection(CaptionFormatError):
    def __init__(self, name: str):
        super().__init__(f"missing caption section: {name}")
        self.section = name


class EmptySection(CaptionFormatError):
    def __init__(self, name: str):
        super().__init__(f"empty caption section: {name}")
        self.section = name


def _check_sentence(text: str, section: str) -> str:
    if "\n" in text or "\r" in text:
        raise CaptionFormatError(f"{section} sentence contains a line break")
    if not text.strip():
        raise EmptySection(section)
    return text


@dataclass(frozen=True)
class StructuredCaption:
    """A caption with a global view, local cue sentences, and a summary."""

    global_sentence: str
    local_sentences: tuple[str, ...]
    summary_sentence: str

    def __post_init__(self):
        _check_sentence(self.global_sentence, "Global")
        object.__setattr__(self, "local_sentences", tuple(self.local_sentences))
        if not self.local_sentences:
            raise EmptySection("Local")
        for s in self.local_sentences:
            _check_sentence(s, "Local")
        _check_sentence(self.summary_sentence, "Summary")


def serialize_structured_caption(caption: StructuredCaption) -> str:
    lines = [GLOBAL_PREFIX + caption.global_sentence, LOCAL_HEADER]
    lines.extend(BULLET_PREFIX + s for s in caption.local_sentences)
    lines.append(SUMMARY_PREFIX + caption.summary_sentence)
    return "\n".join(lines)


def parse_structured_caption(text: str) -> StructuredCaption:
    """Parse the line-based format; blank lines between sections are ignored."""
    lines = [ln.rstrip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln.strip()]
    pos = 0

    if pos >= len(lines) or not lines[pos].startswith(GLOBAL_PREFIX.rstrip()):
        raise MissingSection("Global")
    global_text = lines[pos][len(GLOBAL_PREFIX.rstrip()) :].strip()
    if not global_text:
        raise EmptySection("Global")
    pos += 1

    if pos >= len(lines) or lines[pos].strip() != LOCAL_HEADER:
        raise MissingSection("Local")
    pos += 1

    locals_: list[str] = []
    while pos < len(lines) and lines[pos].startswith(BULLET_PREFIX):
        bullet = lines[pos][len(BULLET_PREFIX) :].strip()
        if not bullet:
            raise EmptySection("Local")
        locals_.append(bullet)
        pos += 1
    if not locals_:
        raise EmptySection("Local")

    if pos >= len(lines) or not lines[pos].startswith(SUMMARY_PREFIX.rstrip()):
        raise MissingSection("Summary")
    summary = lines[pos][len(SUMMARY_PREFIX.rstrip()) :].strip()
    if not summary:
        raise EmptySection("Summary")
    pos += 1

    if pos != len(lines):
        raise CaptionFormatError(f"unexpected trailing content: {lines[pos]!r}")
    return StructuredCaption(global_text, tuple(locals_), summary)


def sample_local_sentences(
    caption: StructuredCaption, count: int, rng: np.random.Generator
) -> list[str]:
    """Choose min(count, available) local sentences without replacement.

    Selection is uniform over subsets; the chosen sentences keep their
    original caption order. Deterministic for a seeded generator.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    available = len(caption.local_sentences)
    take = min(count, available)
    idx = np.sort(rng.choice(available, size=take, replace=False))
    return [caption.local_sentences[i] for i in idx]


GLOBAL_TEXT_POLICIES = ("summary", "full")


def select_global_text(caption: StructuredCaption, policy: str = "summary") -> str:
    """Text routed to the global text encoder.

    ``summary`` uses the concluding sentence alone; ``full`` joins every
    sentence of the caption with single spaces.
    """
    if policy == "summary":
        return caption.summary_sentence
    if policy == "full":
        parts = [caption.global_sentence, *caption.local_sentences, caption.summary_sentence]
        return " ".join(parts)
    raise ValueError(f"policy must be one of {GLOBAL_TEXT_POLICIES}, got {policy!r}")


def fnv1a64(data: bytes) -> int:
    """FNV-1a 64-bit hash with standard offset basis and prime."""
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _U64
    return h


@dataclass(frozen=True)
class TokenSequence:
    """Hashed token ids for one piece of text."""

    ids: tuple[int, ...]
    vocab_size: int = DEFAULT_VOCAB_SIZE

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        if any(i < 0 or i >= self.vocab_size for i in self.ids):
            raise ValueError("token id out of vocabulary range")

    def __len__(self) -> int:
        return len(self.ids)


def tokenize(text: str, vocab_size: int = DEFAULT_VOCAB_SIZE) -> TokenSequence:
    """Lowercase, split on [a-z0-9]+ runs, hash each word into the vocabulary."""
    words = _WORD_RE.findall(text.lower())
    ids = tuple(fnv1a64(w.encode("utf-8")) % vocab_size for w in words)
    return TokenSequence(ids=ids, vocab_size=vocab_size)
