"""SFT/GRPO training-pair assembly with no-flow downsampling and splits."""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .extraction import ChunkRecord
from .prompts import PromptLibrary
from .schema import FlowExtraction, canonical_json

logger = logging.getLogger(__name__)


class InvalidFractions(ValueError):
    pass


@dataclass(frozen=True)
class TrainingPair:
    prompt: str
    target: str
    chunk_id: str
    book_id: str
    is_no_flow: bool

    def to_dict(self) -> dict:
        return {
            "prompt": self.prompt,
            "target": self.target,
            "chunk_id": self.chunk_id,
            "book_id": self.book_id,
            "is_no_flow": self.is_no_flow,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainingPair":
        return cls(**{k: payload[k] for k in (
            "prompt", "target", "chunk_id", "book_id", "is_no_flow")})


def build_prompt(prompts: PromptLibrary, chunk_text: str) -> str:
    """Render the extraction task prompt: instruction plus chunk text."""
    template = prompts["task_flow_extraction"]
    return template.render_user(
        instruction=template.system.strip(), chunk_text=chunk_text
    )


def build_target(extraction: FlowExtraction) -> str:
    """Serialize the target exactly as the task prompt requests: the raw
    envelope JSON (reasoning included), no surrounding markdown."""
    return canonical_json(extraction)


def build_sft_pairs(
    records: Sequence[ChunkRecord], prompts: PromptLibrary
) -> tuple[list[TrainingPair], int]:
    """One pair per chunk with a successful flow stage; returns (pairs, skipped)."""
    pairs: list[TrainingPair] = []
    skipped = 0
    for record in records:
        if record.flow_extraction is None:
            skipped += 1
            continue
        extraction = record.flow_extraction
        pairs.append(
            TrainingPair(
                prompt=build_prompt(prompts, record.chunk.text),
                target=build_target(extraction),
                chunk_id=record.chunk.chunk_id,
                book_id=record.chunk.book_id,
                is_no_flow=not extraction.flows,
            )
        )
    return pairs, skipped


def downsample_no_flow(
    pairs: Sequence[TrainingPair], target_ratio: float = 1.0, seed: int = 0
) -> list[TrainingPair]:
    """Sample the no-flow class down to target_ratio x flow count.

    Flow pairs are always all kept; sampling is uniform without replacement and
    the result is reshuffled under the same seed. A single-class input is
    returned unmodified with a warning.
    """
    flow_pairs = [p for p in pairs if not p.is_no_flow]
    no_flow_pairs = [p for p in pairs if p.is_no_flow]
    if not flow_pairs or not no_flow_pairs:
        missing = "flow" if not flow_pairs else "no-flow"
        logger.warning("downsample_no_flow: %s class is empty, returning input", missing)
        return list(pairs)
    rng = random.Random(seed)
    keep = min(int(round(target_ratio * len(flow_pairs))), len(no_flow_pairs))
    sampled = rng.sample(no_flow_pairs, keep)
    result = flow_pairs + sampled
    rng.shuffle(result)
    return result


def export_splits(
    pairs: Sequence[TrainingPair],
    fractions: Sequence[float],
    seed: int,
    out_dir: Path | str,
) -> dict:
    """Stratified-by-class shuffle split written as line-delimited JSON.

    Returns the manifest (also written to manifest.json): file names, counts
    per class, fractions, and seed.
    """
    fractions = list(fractions)
    if not fractions or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidFractions(f"fractions must be non-negative and sum to 1.0: {fractions}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if len(fractions) == 2:
        names = ["train", "val"]
    elif len(fractions) == 3:
        names = ["train", "val", "test"]
    else:
        names = [f"split_{i}" for i in range(len(fractions))]

    rng = random.Random(seed)
    buckets: list[list[TrainingPair]] = [[] for _ in fractions]
    for is_no_flow in (False, True):
        members = [p for p in pairs if p.is_no_flow == is_no_flow]
        rng.shuffle(members)
        counts = _allocate(len(members), fractions)
        cursor = 0
        for i, count in enumerate(counts):
            buckets[i].extend(members[cursor : cursor + count])
            cursor += count
    manifest = {
        "seed": seed,
        "fractions": fractions,
        "total_pairs": len(pairs),
        "files": {},
    }
    for name, bucket in zip(names, buckets):
        rng.shuffle(bucket)
        path = out_dir / f"{name}.jsonl"
        with open(path, "w", encoding="utf-8") as fh:
            for pair in bucket:
                fh.write(json.dumps(pair.to_dict(), ensure_ascii=False, sort_keys=True))
                fh.write("\n")
        manifest["files"][name] = {
            "path": path.name,
            "count": len(bucket),
            "flow": sum(not p.is_no_flow for p in bucket),
            "no_flow": sum(p.is_no_flow for p in bucket),
        }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(
        json.dumps(manifest, ensure_ascii=False, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    return manifest


def _allocate(total: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder allocation of counts to fractions."""
    raw = [total * f for f in fractions]
    counts = [int(x) for x in raw]
    remainder = total - sum(counts)
    order = sorted(
        range(len(fractions)), key=lambda i: (-(raw[i] - counts[i]), i)
    )
    for i in order[:remainder]:
        counts[i] += 1
    return counts


def load_pairs_jsonl(path: Path | str) -> list[TrainingPair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                pairs.append(TrainingPair.from_dict(json.loads(line)))
    return pairs
