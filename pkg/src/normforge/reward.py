"""Composite reward for extraction completions, grounded in normative universes.

Six components: task clarity, structural completeness, internal consistency,
context identification, reasoning-to-extraction coherence, and normative
grounding. Grounding is contrastive: every completion is judged against both
the correct universe and a randomly chosen wrong one, with a clamped margin.
Completions that declare no flows get asymmetric gating rewards keyed on the
gold label and are grounded through a coverage judge instead of per-flow
verdicts.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from pydantic import BaseModel

from .corpus import Chunk
from .gateway import (
    CompletionRequest,
    GatewayError,
    LLMGateway,
    TransportError,
    strip_think_blocks,
)
from .prompts import PromptLibrary
from . import schema
from .schema import (
    FlowExtraction,
    InformationFlow,
    InvariantError,
    JudgeVerdict,
    ParseError,
    SchemaError,
)
from .universe import (
    NormativeUniverse,
    NormRecord,
    RetrievalConfig,
    retrieve_top_k,
    sample_wrong_universe,
)

COMPONENT_NAMES = ("uncert", "complete", "consist", "context", "cohere", "ground")

# Per-flow judge sub-score combination: norm awareness, flow governance,
# appropriateness consistency.
JUDGE_WEIGHT_MATCH = 0.4
JUDGE_WEIGHT_GOVERNANCE = 0.4
JUDGE_WEIGHT_CONSISTENCY = 0.2

# Task-clarity facets: schema validity, flag presence, scaled confidence.
UNCERT_SCHEMA_POINTS = 0.6
UNCERT_FLAG_POINTS = 0.2
UNCERT_CONFIDENCE_POINTS = 0.2


class ServiceUnavailable(Exception):
    """Scoring infrastructure (judge or embedding endpoint) is unreachable."""


@dataclass(frozen=True)
class RewardWeights:
    uncert: float = 0.10
    complete: float = 0.05
    consist: float = 0.05
    context: float = 0.20
    cohere: float = 0.10
    ground: float = 0.50

    def __post_init__(self):
        values = self.as_tuple()
        for name, value in zip(COMPONENT_NAMES, values):
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"weight '{name}' outside [0,1]: {value}")
        total = math.fsum(values)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1.0, got {total!r}")

    def as_tuple(self) -> tuple[float, ...]:
        return (
            self.uncert, self.complete, self.consist,
            self.context, self.cohere, self.ground,
        )

    @classmethod
    def from_mapping(cls, mapping: dict) -> "RewardWeights":
        return cls(**{k: float(v) for k, v in mapping.items()})


@dataclass(frozen=True)
class ContrastiveConfig:
    lam: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")


@dataclass(frozen=True)
class ShapingConfig:
    """No-flow shaping constants; the gating pair comes from the reward design,
    the context/coherence floors are this artifact's completion of it."""

    gating_match: float = 0.6
    gating_mismatch: float = 0.1
    no_flow_context: float = 0.0
    no_flow_cohere: float = 1.0


class RewardBreakdown(BaseModel):
    r_uncert: float
    r_complete: float
    r_consist: float
    r_context: float
    r_cohere: float
    r_ground: float
    composite: float
    no_flow_predicted: bool
    gold_has_flows: bool
    grounding_detail: dict = {}
    flags: list[str] = []

    def components(self) -> tuple[float, ...]:
        return (
            self.r_uncert, self.r_complete, self.r_consist,
            self.r_context, self.r_cohere, self.r_ground,
        )


def combine(weights: RewardWeights, components: Sequence[float]) -> float:
    """Exact weighted sum of the six component scores."""
    return math.fsum(w * r for w, r in zip(weights.as_tuple(), components))


def contrastive_clamp(r_correct: float, r_wrong: float, lam: float) -> float:
    return min(max(r_correct - lam * r_wrong, 0.0), 1.0)


def score_uncertainty(raw_completion: str) -> tuple[float, Optional[FlowExtraction]]:
    """Task clarity: schema validity, flag presence, scaled confidence.

    Never raises; an unparseable completion scores 0.0 with no envelope.
    """
    try:
        fe = schema.parse_flow_extraction(raw_completion)
    except (ParseError, SchemaError):
        return 0.0, None
    score = UNCERT_SCHEMA_POINTS
    if fe.has_information_exchange is not None:
        score += UNCERT_FLAG_POINTS
    confidences = [f.confidence for f in fe.flows if f.confidence is not None]
    if confidences:
        mean_conf = sum(confidences) / len(confidences)
        score += UNCERT_CONFIDENCE_POINTS * min(max(mean_conf / 10.0, 0.0), 1.0)
    return score, fe


def score_gating(
    fe: FlowExtraction,
    gold: dict,
    shaping: ShapingConfig = ShapingConfig(),
) -> tuple[float, float]:
    """Completeness and consistency, with asymmetric no-flow shaping.

    A completion that predicts no flows earns the match value when the gold
    label confirms no flows and the mismatch value when flows were present.
    """
    if not fe.flows:
        value = shaping.gating_match if not gold["has_flows"] else shaping.gating_mismatch
        return value, value
    completeness = schema.completeness_score(fe)
    proportion, _failed = schema.check_internal_invariants(fe)
    return completeness if completeness is not None else 0.0, proportion


_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


def _tokens(text: str) -> list[str]:
    return [t for t in _TOKEN_SPLIT.split(text.casefold()) if t]


def _contains_phrase(haystack: list[str], needle: list[str]) -> bool:
    if not needle:
        return False
    n = len(needle)
    return any(haystack[i : i + n] == needle for i in range(len(haystack) - n + 1))


def score_coherence(reasoning: str, fe: FlowExtraction) -> float:
    """Fraction of extracted entities that appear in the reasoning text.

    Checks sender, recipient, and information type per flow after case folding
    and punctuation stripping; a no-flow envelope scores 1.0 when any
    reasoning is present.
    """
    if not fe.flows:
        return 1.0 if reasoning.strip() else 0.0
    if not reasoning.strip():
        return 0.0
    hay = _tokens(reasoning)
    per_flow = []
    for flow in fe.flows:
        entities = (flow.sender, flow.recipient, flow.information_type)
        hits = sum(
            _contains_phrase(hay, _tokens(entity or "")) for entity in entities
        )
        per_flow.append(hits / len(entities))
    return sum(per_flow) / len(per_flow)


def render_flow_query(flow: InformationFlow) -> str:
    """Canonical retrieval-query rendering of a flow."""
    return (
        f"{flow.sender} → {flow.recipient} : {flow.information_type} "
        f"[{flow.context or ''}]"
    )


def _norms_json(retrieved: list[tuple[NormRecord, float]]) -> str:
    entries = []
    for record, sim in retrieved:
        norm = record.norm
        entries.append(
            {
                "norm_articulation": norm.norm_articulation,
                "normative_force": norm.normative_force.value,
                "norm_subject": norm.norm_subject,
                "norm_act": norm.norm_act,
                "condition_of_application": norm.condition_of_application,
                "context": norm.context,
                "governs_information_flow": norm.governs_information_flow,
                "similarity": round(sim, 6),
            }
        )
    return json.dumps(entries, ensure_ascii=False)


class _CallLog:
    """Per-completion tally used to tell partial failures from dead endpoints."""

    def __init__(self):
        self.judge_attempts = 0
        self.judge_transport_failures = 0
        self.embed_attempts = 0
        self.embed_transport_failures = 0

    def endpoint_dead(self) -> Optional[str]:
        if self.judge_attempts and self.judge_transport_failures == self.judge_attempts:
            return "judge"
        if self.embed_attempts and self.embed_transport_failures == self.embed_attempts:
            return "embedder"
        return None


class RewardEngine:
    """Scores completions against chunks, gold labels, and normative universes."""

    def __init__(
        self,
        judge: LLMGateway,
        embedder: LLMGateway,
        prompts: PromptLibrary,
        *,
        weights: RewardWeights = RewardWeights(),
        retrieval: RetrievalConfig = RetrievalConfig(),
        contrastive: ContrastiveConfig = ContrastiveConfig(),
        shaping: ShapingConfig = ShapingConfig(),
        audit_path: Optional[Path | str] = None,
    ):
        self.judge = judge
        self.embedder = embedder
        self.prompts = prompts
        self.weights = weights
        self.retrieval = retrieval
        self.contrastive = contrastive
        self.shaping = shaping
        self.audit_path = Path(audit_path) if audit_path else None
        self._audit_lock = threading.Lock()

    # -- embedding helpers ----------------------------------------------------

    def _embed(self, texts: list[str], log: _CallLog):
        log.embed_attempts += 1
        try:
            return self.embedder.embed_batch(texts)
        except TransportError:
            log.embed_transport_failures += 1
            raise

    # -- components needing gateways -------------------------------------------

    def score_context(
        self, fe: FlowExtraction, universe: NormativeUniverse, log: Optional[_CallLog] = None
    ) -> tuple[float, list[str]]:
        """Mean best-match context similarity across flows, negatives clamped."""
        log = log or _CallLog()
        if not fe.flows:
            return self.shaping.no_flow_context, []
        stated = [(flow.context or "").strip() for flow in fe.flows]
        queries = [i for i, s in enumerate(stated) if s]
        scores = [0.0] * len(fe.flows)
        flags: list[str] = []
        if queries:
            try:
                vectors = self._embed([stated[i] for i in queries], log)
            except GatewayError as exc:
                return 0.0, [f"context_embedding_failure: {type(exc).__name__}"]
            import numpy as np

            labels = universe.context_embeddings.astype(np.float64)
            for i, vec in zip(queries, vectors):
                best = float(np.max(labels @ vec.astype(np.float64)))
                scores[i] = max(0.0, best)
        return sum(scores) / len(scores), flags

    def judge_flow(
        self,
        flow: InformationFlow,
        chunk_text: str,
        retrieved_norms: list[tuple[NormRecord, float]],
        log: Optional[_CallLog] = None,
    ) -> tuple[JudgeVerdict, float, Optional[str]]:
        """One structured grounding-judge call; failures floor to zeros.

        Returns (verdict, combined per-flow score, failure kind or None).
        """
        log = log or _CallLog()
        template = self.prompts["judge_grounding"]
        request = CompletionRequest(
            system_prompt=template.system,
            user_prompt=template.render_user(
                chunk_text=chunk_text,
                flow_json=schema.canonical_json(flow),
                norm_universe_json=_norms_json(retrieved_norms),
            ),
            schema_descriptor=schema.schema_descriptor(JudgeVerdict),
        )
        log.judge_attempts += 1
        zeros = JudgeVerdict(
            norm_match_score=0.0,
            governance_score=0.0,
            appropriateness_consistent=False,
            explanation="judge call failed",
        )
        try:
            content = strip_think_blocks(self.judge.complete_structured(request))
            verdict = schema.parse_judge_verdict(content)
        except TransportError:
            log.judge_transport_failures += 1
            return zeros, 0.0, "transport"
        except (GatewayError, ParseError, SchemaError, InvariantError):
            return zeros, 0.0, "validation"
        score = (
            JUDGE_WEIGHT_MATCH * verdict.norm_match_score
            + JUDGE_WEIGHT_GOVERNANCE * verdict.governance_score
            + JUDGE_WEIGHT_CONSISTENCY * (1.0 if verdict.appropriateness_consistent else 0.0)
        )
        return verdict, score, None

    def _judge_coverage(
        self,
        chunk_text: str,
        retrieved_norms: list[tuple[NormRecord, float]],
        log: _CallLog,
    ) -> tuple[float, Optional[str]]:
        """Coverage score in [0,1] for a no-flow completion; failure floors to 0."""
        template = self.prompts["judge_coverage"]
        request = CompletionRequest(
            system_prompt=template.system,
            user_prompt=template.render_user(
                chunk_text=chunk_text,
                norm_universe_json=_norms_json(retrieved_norms),
            ),
            schema_descriptor=schema.schema_descriptor(schema.CoverageVerdict),
        )
        log.judge_attempts += 1
        try:
            content = strip_think_blocks(self.judge.complete_structured(request))
            verdict = schema.parse_coverage_verdict(content)
        except TransportError:
            log.judge_transport_failures += 1
            return 0.0, "transport"
        except (GatewayError, ParseError, SchemaError, InvariantError):
            return 0.0, "validation"
        return verdict.coverage_score, None

    def score_grounding(
        self,
        fe: FlowExtraction,
        chunk_text: str,
        correct_universe: NormativeUniverse,
        wrong_universe: NormativeUniverse,
        *,
        contrastive: Optional[ContrastiveConfig] = None,
        log: Optional[_CallLog] = None,
    ) -> tuple[float, dict, list[str]]:
        """Contrastive normative grounding against correct and wrong universes."""
        lam = (contrastive or self.contrastive).lam
        log = log or _CallLog()
        flags: list[str] = []
        if fe.flows:
            try:
                queries = self._embed([render_flow_query(f) for f in fe.flows], log)
            except GatewayError as exc:
                flags.append(f"grounding_embedding_failure: {type(exc).__name__}")
                detail = {"mode": "flows", "lambda": lam, "error": "embedding_failure"}
                return 0.0, detail, flags
            sides = {}
            for side, universe in (("correct", correct_universe), ("wrong", wrong_universe)):
                per_flow = []
                for flow, query in zip(fe.flows, queries):
                    retrieved = retrieve_top_k(universe, query, self.retrieval)
                    verdict, score, failure = self.judge_flow(
                        flow, chunk_text, retrieved, log
                    )
                    if failure:
                        flags.append(f"judge_{failure}:{side}")
                    per_flow.append(
                        {
                            "norm_match_score": verdict.norm_match_score,
                            "governance_score": verdict.governance_score,
                            "appropriateness_consistent": verdict.appropriateness_consistent,
                            "score": score,
                            "retrieved": [r.norm.norm_articulation for r, _ in retrieved],
                        }
                    )
                sides[side] = {
                    "per_flow": per_flow,
                    "mean": sum(p["score"] for p in per_flow) / len(per_flow),
                }
            value = contrastive_clamp(sides["correct"]["mean"], sides["wrong"]["mean"], lam)
            detail = {"mode": "flows", "lambda": lam, "k": self.retrieval.k, **sides}
            return value, detail, flags

        # No-flow completion: coverage judge with the chunk text as query.
        try:
            query = self._embed([chunk_text], log)[0]
        except GatewayError as exc:
            flags.append(f"grounding_embedding_failure: {type(exc).__name__}")
            detail = {"mode": "no_flow", "lambda": lam, "error": "embedding_failure"}
            return 0.0, detail, flags
        sides = {}
        for side, universe in (("correct", correct_universe), ("wrong", wrong_universe)):
            retrieved = retrieve_top_k(universe, query, self.retrieval)
            coverage, failure = self._judge_coverage(chunk_text, retrieved, log)
            if failure:
                flags.append(f"coverage_{failure}:{side}")
            sides[side] = {
                "coverage": coverage,
                # High coverage means the passage did contain governed flows the
                # completion missed, so alignment is the complement.
                "alignment": 1.0 - coverage,
                "retrieved": [r.norm.norm_articulation for r, _ in retrieved],
            }
        value = contrastive_clamp(
            sides["correct"]["alignment"], sides["wrong"]["alignment"], lam
        )
        detail = {"mode": "no_flow", "lambda": lam, "k": self.retrieval.k, **sides}
        return value, detail, flags

    # -- composition ------------------------------------------------------------

    def composite_reward(
        self,
        raw_completion: str,
        chunk_text: str,
        gold: dict,
        correct_universe: NormativeUniverse,
        wrong_universe: NormativeUniverse,
        *,
        weights: Optional[RewardWeights] = None,
        contrastive: Optional[ContrastiveConfig] = None,
    ) -> RewardBreakdown:
        """Score one completion. Bad completions yield low rewards, never errors;
        a dead judge or embedding endpoint raises ServiceUnavailable."""
        weights = weights or self.weights
        log = _CallLog()
        stripped = strip_think_blocks(raw_completion)
        r_uncert, fe = score_uncertainty(stripped)
        gold_has_flows = bool(gold["has_flows"])
        if fe is None:
            components = (r_uncert, 0.0, 0.0, 0.0, 0.0, 0.0)
            return RewardBreakdown(
                r_uncert=components[0],
                r_complete=components[1],
                r_consist=components[2],
                r_context=components[3],
                r_cohere=components[4],
                r_ground=components[5],
                composite=combine(weights, components),
                no_flow_predicted=False,
                gold_has_flows=gold_has_flows,
                grounding_detail={"mode": "unparseable"},
                flags=["unparseable_completion"],
            )
        no_flow = not fe.flows
        r_complete, r_consist = score_gating(fe, gold, self.shaping)
        r_context, context_flags = self.score_context(fe, correct_universe, log)
        if no_flow:
            r_cohere = (
                self.shaping.no_flow_cohere if fe.reasoning.strip() else 0.0
            )
        else:
            r_cohere = score_coherence(fe.reasoning, fe)
        r_ground, detail, ground_flags = self.score_grounding(
            fe, chunk_text, correct_universe, wrong_universe,
            contrastive=contrastive, log=log,
        )
        dead = log.endpoint_dead()
        if dead:
            raise ServiceUnavailable(f"{dead} endpoint unreachable during scoring")
        components = (r_uncert, r_complete, r_consist, r_context, r_cohere, r_ground)
        return RewardBreakdown(
            r_uncert=components[0],
            r_complete=components[1],
            r_consist=components[2],
            r_context=components[3],
            r_cohere=components[4],
            r_ground=components[5],
            composite=combine(weights, components),
            no_flow_predicted=no_flow,
            gold_has_flows=gold_has_flows,
            grounding_detail=detail,
            flags=context_flags + ground_flags,
        )

    def score_group(
        self,
        completions: Sequence[str],
        chunk: Chunk,
        gold: dict,
        universes: dict[str, NormativeUniverse],
        *,
        seed: Optional[int] = None,
        weights: Optional[RewardWeights] = None,
        contrastive: Optional[ContrastiveConfig] = None,
    ) -> tuple[list[RewardBreakdown], dict]:
        """Score a completion group sharing one prompt context.

        The wrong universe is drawn once per group from the group's seed so
        within-group advantages compare on a common footing.
        """
        if chunk.book_id not in universes:
            raise KeyError(f"no universe loaded for book '{chunk.book_id}'")
        effective_seed = seed if seed is not None else random.getrandbits(32)
        correct = universes[chunk.book_id]
        wrong = sample_wrong_universe(universes, chunk.book_id, effective_seed)
        breakdowns = [
            self.composite_reward(
                completion, chunk.text, gold, correct, wrong,
                weights=weights, contrastive=contrastive,
            )
            for completion in completions
        ]
        n = len(breakdowns)
        diagnostics = {
            "group_size": n,
            "seed": effective_seed,
            "wrong_universe": wrong.book_id,
            "no_flow_rate": sum(b.no_flow_predicted for b in breakdowns) / n,
            "component_means": {
                name: sum(b.components()[i] for b in breakdowns) / n
                for i, name in enumerate(COMPONENT_NAMES)
            },
        }
        if self.audit_path is not None:
            self._append_audit(completions, breakdowns, chunk.chunk_id, effective_seed)
        return breakdowns, diagnostics

    def _append_audit(
        self,
        completions: Sequence[str],
        breakdowns: Sequence[RewardBreakdown],
        chunk_id: str,
        seed: int,
    ) -> None:
        lines = []
        for completion, breakdown in zip(completions, breakdowns):
            record = {
                "chunk_id": chunk_id,
                "completion_sha256": hashlib.sha256(completion.encode("utf-8")).hexdigest(),
                "seed": seed,
                "breakdown": breakdown.model_dump(),
            }
            lines.append(json.dumps(record, ensure_ascii=False, sort_keys=True))
        with self._audit_lock:
            self.audit_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.audit_path, "a", encoding="utf-8") as fh:
                fh.write("\n".join(lines) + "\n")
