"""Two-stage flow/norm extraction over chunks, plus norm abstraction.

Stage 1 asks for free-text reasoning with per-item leads; stage 2 formalizes
each lead into typed tuples. Flow stage 2 runs once per lead (one flow per
call); norm stage 2 formalizes all leads in a single call. Books are processed
sequentially chunk-by-chunk with an atomically written checkpoint so an
interrupted run resumes at the last completed chunk.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .corpus import Chunk, ChunkingConfig, SourceText, chunk_text
from .gateway import CompletionRequest, GatewayError, LLMGateway, strip_think_blocks
from .prompts import PromptLibrary
from . import schema
from .schema import (
    AbstractedNorm,
    AbstractionRewrite,
    FlowExtraction,
    FlowReasoning,
    InformationFlow,
    InvariantError,
    NormExtraction,
    NormReasoning,
    ParseError,
    RazNorm,
    SchemaError,
)

ABSTRACTION_FIELDS = (
    "norm_subject",
    "norm_act",
    "condition_of_application",
    "norm_articulation",
)


class AbstractionFailed(Exception):
    """The rewrite still contained character names after the retry."""


class GoldLabel(dict):
    pass


def make_gold_label(chunk_id: str, flow_count: int) -> dict:
    return {"chunk_id": chunk_id, "has_flows": flow_count > 0, "flow_count": flow_count}


@dataclass
class ChunkRecord:
    chunk: Chunk
    flow_reasoning: Optional[str] = None
    flow_extraction: Optional[FlowExtraction] = None
    norm_reasoning: Optional[str] = None
    norm_extraction: Optional[NormExtraction] = None
    abstracted_norms: list[AbstractedNorm] = field(default_factory=list)
    quarantined_norms: list[dict] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "chunk": self.chunk.to_dict(),
            "flow_reasoning": self.flow_reasoning,
            "flow_extraction": (
                json.loads(self.flow_extraction.model_dump_json(exclude_none=True))
                if self.flow_extraction is not None
                else None
            ),
            "norm_reasoning": self.norm_reasoning,
            "norm_extraction": (
                json.loads(self.norm_extraction.model_dump_json(exclude_none=True))
                if self.norm_extraction is not None
                else None
            ),
            "abstracted_norms": [
                json.loads(n.model_dump_json(exclude_none=True))
                for n in self.abstracted_norms
            ],
            "quarantined_norms": self.quarantined_norms,
            "errors": self.errors,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ChunkRecord":
        return cls(
            chunk=Chunk.from_dict(payload["chunk"]),
            flow_reasoning=payload.get("flow_reasoning"),
            flow_extraction=(
                FlowExtraction.model_validate(payload["flow_extraction"])
                if payload.get("flow_extraction") is not None
                else None
            ),
            norm_reasoning=payload.get("norm_reasoning"),
            norm_extraction=(
                NormExtraction.model_validate(payload["norm_extraction"])
                if payload.get("norm_extraction") is not None
                else None
            ),
            abstracted_norms=[
                AbstractedNorm.model_validate(n)
                for n in payload.get("abstracted_norms", [])
            ],
            quarantined_norms=payload.get("quarantined_norms", []),
            errors=payload.get("errors", []),
        )


def _structured(gateway: LLMGateway, system: str, user: str, model_cls) -> str:
    request = CompletionRequest(
        system_prompt=system,
        user_prompt=user,
        schema_descriptor=schema.schema_descriptor(model_cls),
    )
    return strip_think_blocks(gateway.complete_structured(request))


def run_flow_stage(
    chunk: Chunk, gateway: LLMGateway, prompts: PromptLibrary
) -> tuple[str, FlowExtraction, list[str]]:
    """Reason about flows, then extract exactly one flow per stage-1 lead.

    Returns (stage-1 reasoning, assembled envelope, stage-tagged errors). A
    failed lead is dropped; the surviving flows are kept.
    """
    errors: list[str] = []
    stage1_tpl = prompts["flow_reasoning"]
    raw = _structured(
        gateway,
        stage1_tpl.system,
        stage1_tpl.render_user(article_text=chunk.text),
        FlowReasoning,
    )
    stage1 = schema.parse_envelope(raw, FlowReasoning)
    if stage1.has_information_exchange is not True or not stage1.flows:
        extraction = FlowExtraction(
            reasoning=stage1.reasoning or "no information exchange identified",
            has_information_exchange=False,
            flows=[],
        )
        return stage1.reasoning, schema.validate_flow_extraction(extraction), errors

    stage2_tpl = prompts["flow_extraction"]
    flows: list[InformationFlow] = []
    for i, lead in enumerate(stage1.flows):
        slice_json = schema.canonical_json(lead)
        try:
            raw_flow = _structured(
                gateway,
                stage2_tpl.system,
                stage2_tpl.render_user(article_text=chunk.text, reasoning_trace=slice_json),
                InformationFlow,
            )
            flow = schema.parse_envelope(raw_flow, InformationFlow)
            probe = FlowExtraction(
                reasoning=stage1.reasoning or "stage-1 reasoning",
                has_information_exchange=True,
                flows=[flow],
            )
            schema.validate_flow_extraction(probe)
            flows.append(flow)
        except (GatewayError, ParseError, SchemaError, InvariantError) as exc:
            errors.append(f"flow_stage2[{i}]: {type(exc).__name__}: {exc}")
    extraction = FlowExtraction(
        reasoning=stage1.reasoning,
        has_information_exchange=bool(flows),
        flows=flows,
    )
    return stage1.reasoning, schema.validate_flow_extraction(extraction), errors


def run_norm_stage(
    chunk: Chunk,
    gateway: LLMGateway,
    prompts: PromptLibrary,
    book_context: str = "",
) -> tuple[str, NormExtraction, list[str]]:
    """Reason about norms, then formalize every lead in one extraction call."""
    errors: list[str] = []
    context_prefix = f"{book_context}\n\n" if book_context else ""
    stage1_tpl = prompts["norm_reasoning"]
    raw = _structured(
        gateway,
        stage1_tpl.system,
        stage1_tpl.render_user(book_context=context_prefix, article_text=chunk.text),
        NormReasoning,
    )
    stage1 = schema.parse_envelope(raw, NormReasoning)
    reasoning = stage1.reasoning or "\n\n".join(lead.reasoning for lead in stage1.norms)
    if stage1.has_prescriptive_content is not True or not stage1.norms:
        reasoning = reasoning or "no prescriptive content identified"
        return reasoning, NormExtraction(has_prescriptive_content=False, norms=[]), errors

    trace = "\n\n".join(lead.reasoning for lead in stage1.norms)
    stage2_tpl = prompts["norm_extraction"]
    raw_norms = _structured(
        gateway,
        stage2_tpl.system,
        stage2_tpl.render_user(
            book_context=context_prefix, article_text=chunk.text, reasoning_trace=trace
        ),
        NormExtraction,
    )
    extraction = schema.validate_norm_extraction(raw_norms)
    return reasoning, extraction, errors


def detect_quality_flags(
    norm: RazNorm, character_lexicon: set[str]
) -> Optional[list[str]]:
    """Field names whose text contains a character name, or None when clean."""
    if not character_lexicon:
        return None
    patterns = [
        re.compile(rf"(?<!\w){re.escape(name)}(?!\w)", re.IGNORECASE)
        for name in sorted(character_lexicon)
    ]
    flagged = []
    for field_name in ABSTRACTION_FIELDS:
        value = getattr(norm, field_name)
        if value and any(p.search(value) for p in patterns):
            flagged.append(field_name)
    return flagged or None


def abstract_norm(
    norm: RazNorm,
    flags: Optional[list[str]],
    book_summary: str,
    chunk_text: str,
    gateway: LLMGateway,
    prompts: PromptLibrary,
    character_lexicon: set[str],
) -> AbstractedNorm:
    """Rewrite a flagged norm to functional roles; pass clean norms through.

    The rewrite is re-checked against the lexicon and retried once; a result
    still carrying names raises AbstractionFailed so the caller can quarantine.
    """
    base = norm.model_dump()
    if not flags:
        return AbstractedNorm(
            **base,
            quality_flags=None,
            role_rationale="No character names detected; norm passed through without rewrite.",
        )
    template = prompts["norm_abstraction"]
    variables = dict(
        book_summary=book_summary or "(not provided)",
        article_text=chunk_text,
        prescriptive_element=norm.prescriptive_element,
        norm_subject=norm.norm_subject,
        norm_act=norm.norm_act,
        condition_of_application=norm.condition_of_application or "null",
        normative_force=norm.normative_force.value,
        norm_articulation=norm.norm_articulation,
        context=norm.context,
        quality_flags=json.dumps(flags),
    )
    for attempt in range(2):
        raw = _structured(
            gateway, template.system, template.render_user(**variables), AbstractionRewrite
        )
        rewrite = schema.parse_envelope(raw, AbstractionRewrite)
        merged = dict(base)
        merged.update(
            norm_subject=rewrite.norm_subject,
            norm_act=rewrite.norm_act,
            condition_of_application=rewrite.condition_of_application,
            norm_articulation=rewrite.norm_articulation,
        )
        candidate = AbstractedNorm(
            **merged, quality_flags=flags, role_rationale=rewrite.role_rationale
        )
        schema.validate_norm(candidate)
        if detect_quality_flags(candidate, character_lexicon) is None:
            return candidate
    raise AbstractionFailed(
        f"rewrite still contains character names after retry: {norm.norm_articulation!r}"
    )


@dataclass
class PipelineConfig:
    chunking: ChunkingConfig = field(default_factory=ChunkingConfig)
    resume: bool = True
    stop_after_chunks: Optional[int] = None


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _records_path(out_dir: Path, book_id: str) -> Path:
    return out_dir / f"{book_id}.records.jsonl"


def load_records(out_dir: Path, book_id: str) -> list[ChunkRecord]:
    path = _records_path(Path(out_dir), book_id)
    if not path.exists():
        return []
    records = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line:
            records.append(ChunkRecord.from_dict(json.loads(line)))
    return records


def _dump_records(records: list[ChunkRecord]) -> str:
    return "".join(
        json.dumps(r.to_dict(), ensure_ascii=False, sort_keys=True) + "\n"
        for r in records
    )


def run_book_pipeline(
    book: SourceText,
    cfg: PipelineConfig,
    gateway: LLMGateway,
    prompts: PromptLibrary,
    out_dir: Path | str,
    chunks: Optional[list[Chunk]] = None,
) -> tuple[list[ChunkRecord], list[dict]]:
    """Process one book's chunks in order, checkpointing after every chunk.

    Per-chunk failures are recorded on the record and the run continues;
    quarantined norms are persisted on the record, never dropped.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if chunks is None:
        chunks = chunk_text(book.clean_text, cfg.chunking, book_id=book.book_id)
    lexicon = set(book.characters)

    records: list[ChunkRecord] = []
    done_ids: set[str] = set()
    if cfg.resume:
        records = load_records(out_dir, book.book_id)
        done_ids = {r.chunk.chunk_id for r in records}

    records_path = _records_path(out_dir, book.book_id)
    processed = 0
    for chunk in chunks:
        if chunk.chunk_id in done_ids:
            continue
        if cfg.stop_after_chunks is not None and processed >= cfg.stop_after_chunks:
            break
        record = ChunkRecord(chunk=chunk)
        try:
            reasoning, extraction, errs = run_flow_stage(chunk, gateway, prompts)
            record.flow_reasoning = reasoning
            record.flow_extraction = extraction
            record.errors.extend(errs)
        except (GatewayError, ParseError, SchemaError, InvariantError) as exc:
            record.errors.append(f"flow_stage1: {type(exc).__name__}: {exc}")
        try:
            reasoning, extraction, errs = run_norm_stage(
                chunk, gateway, prompts, book_context=book.book_context
            )
            record.norm_reasoning = reasoning
            record.norm_extraction = extraction
            record.errors.extend(errs)
        except (GatewayError, ParseError, SchemaError, InvariantError) as exc:
            record.errors.append(f"norm_stage: {type(exc).__name__}: {exc}")
        if record.norm_extraction is not None:
            for i, norm in enumerate(record.norm_extraction.norms):
                flags = detect_quality_flags(norm, lexicon)
                try:
                    abstracted = abstract_norm(
                        norm, flags, book.book_summary, chunk.text,
                        gateway, prompts, lexicon,
                    )
                    record.abstracted_norms.append(abstracted)
                except AbstractionFailed as exc:
                    record.errors.append(f"abstraction[{i}]: AbstractionFailed: {exc}")
                    record.quarantined_norms.append(
                        json.loads(norm.model_dump_json(exclude_none=True))
                    )
                except (GatewayError, ParseError, SchemaError, InvariantError) as exc:
                    record.errors.append(f"abstraction[{i}]: {type(exc).__name__}: {exc}")
                    record.quarantined_norms.append(
                        json.loads(norm.model_dump_json(exclude_none=True))
                    )
        records.append(record)
        processed += 1
        _atomic_write(records_path, _dump_records(records))

    gold_labels = [
        make_gold_label(r.chunk.chunk_id, len(r.flow_extraction.flows))
        for r in records
        if r.flow_extraction is not None
    ]
    return records, gold_labels


def export_book_outputs(
    records: list[ChunkRecord], gold_labels: list[dict], out_dir: Path | str, book_id: str
) -> dict[str, Path]:
    """Write the per-book flows / norms / abstracted-norms / gold-labels files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "flows": out_dir / f"{book_id}.flows.jsonl",
        "norms": out_dir / f"{book_id}.norms.jsonl",
        "abstracted": out_dir / f"{book_id}.abstracted.jsonl",
        "gold": out_dir / f"{book_id}.gold.jsonl",
        "quarantine": out_dir / f"{book_id}.quarantine.jsonl",
    }
    def dump(obj) -> str:
        return json.dumps(obj, ensure_ascii=False, sort_keys=True) + "\n"

    with open(paths["flows"], "w", encoding="utf-8") as fh:
        for r in records:
            if r.flow_extraction is None:
                continue
            for flow in r.flow_extraction.flows:
                fh.write(dump({
                    "chunk_id": r.chunk.chunk_id,
                    "flow": json.loads(flow.model_dump_json(exclude_none=True)),
                }))
    with open(paths["norms"], "w", encoding="utf-8") as fh:
        for r in records:
            if r.norm_extraction is None:
                continue
            for norm in r.norm_extraction.norms:
                fh.write(dump({
                    "chunk_id": r.chunk.chunk_id,
                    "norm": json.loads(norm.model_dump_json(exclude_none=True)),
                }))
    with open(paths["abstracted"], "w", encoding="utf-8") as fh:
        for r in records:
            for norm in r.abstracted_norms:
                fh.write(dump({
                    "chunk_id": r.chunk.chunk_id,
                    "norm": json.loads(norm.model_dump_json(exclude_none=True)),
                }))
    with open(paths["quarantine"], "w", encoding="utf-8") as fh:
        for r in records:
            for norm in r.quarantined_norms:
                fh.write(dump({"chunk_id": r.chunk.chunk_id, "norm": norm}))
    with open(paths["gold"], "w", encoding="utf-8") as fh:
        for label in gold_labels:
            fh.write(dump(label))
    return paths
