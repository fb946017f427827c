"""Source-text loading, boilerplate stripping, and overlapping chunking."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

# Gutenberg distributions bracket the body with START/END marker lines whose
# capitalization varies across vintages.
_START_MARKER = re.compile(
    r"^\s*\*{3}\s*START OF (?:THE|THIS) PROJECT GUTENBERG EBOOK.*$",
    re.IGNORECASE | re.MULTILINE,
)
_END_MARKER = re.compile(
    r"^\s*\*{3}\s*END OF (?:THE|THIS) PROJECT GUTENBERG EBOOK.*$",
    re.IGNORECASE | re.MULTILINE,
)

DEFAULT_CHUNK_SIZE = 6000
DEFAULT_OVERLAP = 1000


class ManifestError(ValueError):
    """The corpus manifest itself is unusable (fatal configuration error)."""


@dataclass(frozen=True)
class ChunkingConfig:
    chunk_size: int = DEFAULT_CHUNK_SIZE
    overlap: int = DEFAULT_OVERLAP

    def __post_init__(self):
        if self.chunk_size <= 0:
            raise ValueError(f"chunk_size must be positive, got {self.chunk_size}")
        if not 0 <= self.overlap < self.chunk_size:
            raise ValueError(
                f"overlap must satisfy 0 <= overlap < chunk_size, got "
                f"overlap={self.overlap}, chunk_size={self.chunk_size}"
            )

    @property
    def stride(self) -> int:
        return self.chunk_size - self.overlap


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    book_id: str
    index: int
    start_offset: int
    end_offset: int
    text: str

    def to_dict(self) -> dict:
        return {
            "chunk_id": self.chunk_id,
            "book_id": self.book_id,
            "index": self.index,
            "start_offset": self.start_offset,
            "end_offset": self.end_offset,
            "text": self.text,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "Chunk":
        return cls(**{k: payload[k] for k in (
            "chunk_id", "book_id", "index", "start_offset", "end_offset", "text")})


@dataclass
class SourceText:
    book_id: str
    title: str
    gutenberg_id: int
    raw_text: str
    clean_text: str
    characters: list[str] = field(default_factory=list)
    book_context: str = ""
    book_summary: str = ""


def strip_boilerplate(raw: str) -> str:
    """Return the text between the Gutenberg START/END marker lines.

    Missing END keeps everything after START; missing both returns the input.
    Always trims surrounding whitespace.
    """
    start = _START_MARKER.search(raw)
    if start is None:
        return raw.strip()
    end = _END_MARKER.search(raw, start.end())
    body = raw[start.end():end.start()] if end else raw[start.end():]
    return body.strip()


def chunk_text(clean: str, cfg: ChunkingConfig, book_id: str = "book") -> list[Chunk]:
    """Split text into fixed-size windows advancing by chunk_size - overlap.

    Offsets count Unicode scalar values. Emission stops once a window's end
    reaches the text end, so the final chunk may be short but is never fully
    contained in its predecessor.
    """
    if not clean:
        return []
    chunks: list[Chunk] = []
    index = 0
    length = len(clean)
    while True:
        start = index * cfg.stride
        end = min(start + cfg.chunk_size, length)
        chunks.append(
            Chunk(
                chunk_id=f"{book_id}-{index:04d}",
                book_id=book_id,
                index=index,
                start_offset=start,
                end_offset=end,
                text=clean[start:end],
            )
        )
        if end >= length:
            break
        index += 1
    return chunks


def _read_characters(path: Path) -> list[str]:
    names = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            names.append(line)
    return names


def load_manifest(manifest_path: Path | str) -> list[dict]:
    """Load and structurally check the manifest; raises ManifestError when unusable."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise ManifestError(f"manifest not found: {manifest_path}")
    try:
        payload = yaml.safe_load(manifest_path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ManifestError(f"manifest is not valid YAML/JSON: {exc}") from exc
    if isinstance(payload, dict):
        payload = payload.get("books")
    if not isinstance(payload, list):
        raise ManifestError("manifest must be a list of books or {'books': [...]}")
    entries = []
    for i, entry in enumerate(payload):
        if not isinstance(entry, dict):
            raise ManifestError(f"manifest entry {i} is not a mapping")
        for key in ("book_id", "title", "gutenberg_id", "path"):
            if key not in entry:
                raise ManifestError(f"manifest entry {i} missing '{key}'")
        entries.append(entry)
    return entries


def load_corpus(
    manifest_path: Path | str,
) -> tuple[list[SourceText], list[str]]:
    """Load every book named in the manifest, stripping boilerplate.

    A missing or unreadable book file is recorded as an error without stopping
    the other books; a malformed manifest raises ManifestError.
    """
    manifest_path = Path(manifest_path)
    entries = load_manifest(manifest_path)
    base = manifest_path.parent
    texts: list[SourceText] = []
    errors: list[str] = []
    for entry in entries:
        book_id = str(entry["book_id"])
        path = Path(entry["path"])
        if not path.is_absolute():
            path = base / path
        try:
            raw = path.read_text(encoding="utf-8")
        except OSError as exc:
            errors.append(f"{book_id}: cannot read {path}: {exc}")
            continue
        clean = strip_boilerplate(raw)
        if not clean:
            errors.append(f"{book_id}: text empty after boilerplate stripping")
            continue
        characters: list[str] = list(entry.get("characters", []))
        chars_path = entry.get("characters_path")
        if chars_path:
            cp = Path(chars_path)
            if not cp.is_absolute():
                cp = base / cp
            try:
                characters.extend(_read_characters(cp))
            except OSError as exc:
                errors.append(f"{book_id}: cannot read characters file {cp}: {exc}")
        texts.append(
            SourceText(
                book_id=book_id,
                title=str(entry["title"]),
                gutenberg_id=int(entry["gutenberg_id"]),
                raw_text=raw,
                clean_text=clean,
                characters=characters,
                book_context=str(entry.get("book_context", "")),
                book_summary=str(entry.get("book_summary", "")),
            )
        )
    return texts, errors


def write_chunks_jsonl(chunks: list[Chunk], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for chunk in chunks:
            fh.write(json.dumps(chunk.to_dict(), ensure_ascii=False, sort_keys=True))
            fh.write("\n")


def read_chunks_jsonl(path: Path) -> list[Chunk]:
    chunks = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                chunks.append(Chunk.from_dict(json.loads(line)))
    return chunks
