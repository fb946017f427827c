"""Typed envelopes for information-flow and norm extractions, with validation.

Validation is layered: :func:`parse_flow_extraction` / :func:`parse_norm_extraction`
accept anything that is well-formed and type-correct (lenient, used by the reward
scorer), while :func:`validate_flow_extraction` / :func:`validate_norm_extraction`
additionally enforce required fields and internal invariants (strict, used before
anything is persisted). The two error classes they raise are deliberately distinct
because downstream reward components treat them differently.
"""

from __future__ import annotations

import enum
import json
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, ValidationError, field_validator


class ParseError(ValueError):
    """The document is not well-formed JSON."""


class SchemaError(ValueError):
    """The document is JSON but does not fit the envelope schema."""

    def __init__(self, message: str, field_path: str = ""):
        super().__init__(message)
        self.field_path = field_path


class InvariantError(ValueError):
    """The document fits the schema but violates an internal invariant."""

    def __init__(self, message: str, field_path: str = ""):
        super().__init__(message)
        self.field_path = field_path


class Appropriateness(str, enum.Enum):
    APPROPRIATE = "appropriate"
    INAPPROPRIATE = "inappropriate"
    AMBIGUOUS = "ambiguous"


class NormSource(str, enum.Enum):
    EXPLICIT = "explicit"
    IMPLICIT = "implicit"
    BOTH = "both"


class NormativeForce(str, enum.Enum):
    OBLIGATORY = "obligatory"
    PROHIBITED = "prohibited"
    PERMITTED = "permitted"
    RECOMMENDED = "recommended"
    DISCOURAGED = "discouraged"


class ConfidenceQual(str, enum.Enum):
    VERY_UNCERTAIN = "very_uncertain"
    UNCERTAIN = "uncertain"
    SOMEWHAT_CERTAIN = "somewhat_certain"
    CERTAIN = "certain"
    VERY_CERTAIN = "very_certain"


# Qualitative rating -> admissible numeric confidence band (inclusive).
CONFIDENCE_BANDS: dict[ConfidenceQual, tuple[int, int]] = {
    ConfidenceQual.VERY_CERTAIN: (9, 10),
    ConfidenceQual.CERTAIN: (7, 8),
    ConfidenceQual.SOMEWHAT_CERTAIN: (5, 6),
    ConfidenceQual.UNCERTAIN: (3, 4),
    ConfidenceQual.VERY_UNCERTAIN: (0, 2),
}

# Values that do not count as substantive tuple components.
DEFAULT_PLACEHOLDERS = frozenset({"unknown", "n/a", "none"})

MAX_NORMS_PER_CHUNK = 10


def _fold_enum(value: Any) -> Any:
    if isinstance(value, str):
        return value.strip().lower()
    return value


class _Envelope(BaseModel):
    """Shared config: unknown fields are ignored, never rejected."""

    model_config = ConfigDict(extra="ignore", use_enum_values=False)


class InformationFlow(_Envelope):
    """One contextual-integrity flow: the 5-tuple plus appropriateness metadata."""

    sender: str
    recipient: str
    subject: Optional[str] = None
    information_type: str
    transmission_principle: Optional[str] = None
    context: Optional[str] = None
    appropriateness: Optional[Appropriateness] = None
    norms_invoked: list[str] = []
    norm_source: Optional[NormSource] = None
    is_new_flow: bool = False
    confidence: Optional[int] = None

    _fold = field_validator("appropriateness", "norm_source", mode="before")(_fold_enum)


class FlowExtraction(_Envelope):
    """Top-level flow envelope produced by the extraction task."""

    reasoning: str = ""
    has_information_exchange: Optional[bool] = None
    flows: list[InformationFlow] = []


class RazNorm(_Envelope):
    """One norm decomposed into prescriptive element, subject, act, and condition."""

    prescriptive_element: str
    norm_subject: str
    norm_act: str
    condition_of_application: Optional[str] = None
    normative_force: NormativeForce
    context: str
    norm_articulation: str
    norm_source: Optional[NormSource] = None
    governs_information_flow: bool = False
    information_flow_note: Optional[str] = None
    confidence_qual: Optional[ConfidenceQual] = None
    confidence_quant: Optional[int] = None

    _fold = field_validator(
        "normative_force", "norm_source", "confidence_qual", mode="before"
    )(_fold_enum)


class NormExtraction(_Envelope):
    has_prescriptive_content: Optional[bool] = None
    norms: list[RazNorm] = []


class AbstractedNorm(RazNorm):
    """A norm whose components have been rewritten to functional social roles."""

    quality_flags: Optional[list[str]] = None
    role_rationale: str = ""


# --- Stage-1 reasoning envelopes ------------------------------------------
# These carry per-item reasoning entries that the second extraction stage
# consumes one at a time.


class FlowLead(_Envelope):
    original_text_snippet: str = ""
    reasoning: str = ""
    context_identified: Optional[str] = None
    flow_direction: Optional[str] = None
    potential_appropriateness: Optional[str] = None
    is_new_flow: bool = False


class FlowReasoning(_Envelope):
    reasoning: str = ""
    has_information_exchange: Optional[bool] = None
    flows: list[FlowLead] = []


class NormLead(_Envelope):
    original_text_snippet: str = ""
    reasoning: str = ""
    preliminary_normative_force: Optional[str] = None
    governs_information_flow: bool = False


class NormReasoning(_Envelope):
    reasoning: str = ""
    has_prescriptive_content: Optional[bool] = None
    norms: list[NormLead] = []


class AbstractionRewrite(_Envelope):
    """The abstraction stage rewrites only these fields; the rest are preserved."""

    norm_subject: str
    norm_act: str
    condition_of_application: Optional[str] = None
    norm_articulation: str
    role_rationale: str = ""


class JudgeVerdict(_Envelope):
    """Grounding judge output: criteria (a), (b), (c)."""

    norm_match_score: float
    governance_score: float
    appropriateness_consistent: bool
    explanation: str = ""


class CoverageVerdict(_Envelope):
    """Coverage judge output for completions that declared no flows."""

    passage_contains_governed_flows: bool
    coverage_score: float
    explanation: str = ""


# --- Parsing ---------------------------------------------------------------


def _loc_path(err: dict) -> str:
    return ".".join(str(p) for p in err.get("loc", ()))


def _parse(document: str | dict, model: type[BaseModel]) -> Any:
    if isinstance(document, str):
        try:
            payload = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ParseError(f"not well-formed JSON: {exc}") from exc
    else:
        payload = document
    if not isinstance(payload, dict):
        raise SchemaError(f"expected a JSON object, got {type(payload).__name__}")
    try:
        return model.model_validate(payload)
    except ValidationError as exc:
        first = exc.errors()[0]
        path = _loc_path(first)
        raise SchemaError(f"{path}: {first['msg']}", field_path=path) from exc


def parse_envelope(document: str | dict, model: type[BaseModel]):
    """Parse any envelope type with the shared error taxonomy."""
    return _parse(document, model)


def parse_flow_extraction(document: str | dict) -> FlowExtraction:
    """Lenient parse: type- and enum-checked, optional fields may be absent."""
    return _parse(document, FlowExtraction)


def parse_norm_extraction(document: str | dict) -> NormExtraction:
    return _parse(document, NormExtraction)


def parse_judge_verdict(document: str | dict) -> JudgeVerdict:
    verdict = _parse(document, JudgeVerdict)
    for name in ("norm_match_score", "governance_score"):
        value = getattr(verdict, name)
        if not 0.0 <= value <= 1.0:
            raise InvariantError(f"{name} out of [0,1]: {value}", field_path=name)
    return verdict


def parse_coverage_verdict(document: str | dict) -> CoverageVerdict:
    verdict = _parse(document, CoverageVerdict)
    if not 0.0 <= verdict.coverage_score <= 1.0:
        raise InvariantError(
            f"coverage_score out of [0,1]: {verdict.coverage_score}",
            field_path="coverage_score",
        )
    return verdict


# --- Strict validation -----------------------------------------------------


def _require(value: Any, path: str) -> None:
    if value is None:
        raise SchemaError(f"{path}: missing required field", field_path=path)


def _require_nonempty(value: Optional[str], path: str) -> None:
    _require(value, path)
    if not str(value).strip():
        raise InvariantError(f"{path}: must be non-empty", field_path=path)


def validate_flow_extraction(document: str | dict | FlowExtraction) -> FlowExtraction:
    """Parse and enforce every envelope invariant, raising on the first failure."""
    fe = document if isinstance(document, FlowExtraction) else parse_flow_extraction(document)
    _require(fe.has_information_exchange, "has_information_exchange")
    _require_nonempty(fe.reasoning, "reasoning")
    if fe.has_information_exchange is False and fe.flows:
        raise InvariantError(
            "has_information_exchange is false but flows is non-empty",
            field_path="has_information_exchange",
        )
    for i, flow in enumerate(fe.flows):
        base = f"flows.{i}"
        _require_nonempty(flow.sender, f"{base}.sender")
        _require_nonempty(flow.recipient, f"{base}.recipient")
        _require_nonempty(flow.information_type, f"{base}.information_type")
        _require(flow.transmission_principle, f"{base}.transmission_principle")
        _require(flow.context, f"{base}.context")
        _require(flow.appropriateness, f"{base}.appropriateness")
        _require(flow.norm_source, f"{base}.norm_source")
        _require(flow.confidence, f"{base}.confidence")
        if not 0 <= int(flow.confidence) <= 10:
            raise InvariantError(
                f"{base}.confidence: {flow.confidence} outside 0-10",
                field_path=f"{base}.confidence",
            )
    return fe


def validate_norm(norm: RazNorm, base: str = "") -> RazNorm:
    prefix = f"{base}." if base else ""
    _require_nonempty(norm.prescriptive_element, f"{prefix}prescriptive_element")
    _require_nonempty(norm.norm_subject, f"{prefix}norm_subject")
    _require_nonempty(norm.norm_act, f"{prefix}norm_act")
    _require_nonempty(norm.context, f"{prefix}context")
    _require_nonempty(norm.norm_articulation, f"{prefix}norm_articulation")
    _require(norm.norm_source, f"{prefix}norm_source")
    _require(norm.confidence_qual, f"{prefix}confidence_qual")
    _require(norm.confidence_quant, f"{prefix}confidence_quant")
    quant = int(norm.confidence_quant)
    if not 0 <= quant <= 10:
        raise InvariantError(
            f"{prefix}confidence_quant: {quant} outside 0-10",
            field_path=f"{prefix}confidence_quant",
        )
    lo, hi = CONFIDENCE_BANDS[norm.confidence_qual]
    if not lo <= quant <= hi:
        raise InvariantError(
            f"{prefix}confidence_quant: {quant} incongruent with "
            f"'{norm.confidence_qual.value}' (expects {lo}-{hi})",
            field_path=f"{prefix}confidence_quant",
        )
    if not norm.governs_information_flow and norm.information_flow_note is not None:
        raise InvariantError(
            f"{prefix}information_flow_note: present although "
            "governs_information_flow is false",
            field_path=f"{prefix}information_flow_note",
        )
    return norm


def validate_norm_extraction(document: str | dict | NormExtraction) -> NormExtraction:
    ne = document if isinstance(document, NormExtraction) else parse_norm_extraction(document)
    _require(ne.has_prescriptive_content, "has_prescriptive_content")
    if ne.has_prescriptive_content is False and ne.norms:
        raise InvariantError(
            "has_prescriptive_content is false but norms is non-empty",
            field_path="has_prescriptive_content",
        )
    if len(ne.norms) > MAX_NORMS_PER_CHUNK:
        raise InvariantError(
            f"norms: {len(ne.norms)} entries exceed the cap of {MAX_NORMS_PER_CHUNK}",
            field_path="norms",
        )
    for i, norm in enumerate(ne.norms):
        validate_norm(norm, base=f"norms.{i}")
    return ne


# --- Scored checks over (possibly invariant-violating) parsed envelopes ----


def check_internal_invariants(fe: FlowExtraction) -> tuple[float, list[str]]:
    """Proportion of the fixed invariant-check list that passes.

    Checks: (1) the no-exchange flag pairs with an empty flows array; per flow,
    (2) a flow marked novel carries an inappropriate or ambiguous judgment and
    (3) the confidence score sits inside 0-10.
    """
    failed: list[str] = []
    total = 1
    if fe.has_information_exchange is False and fe.flows:
        failed.append("flag_flows_pairing")
    for i, flow in enumerate(fe.flows):
        total += 2
        if flow.is_new_flow and flow.appropriateness not in (
            Appropriateness.INAPPROPRIATE,
            Appropriateness.AMBIGUOUS,
        ):
            failed.append(f"flows.{i}.new_flow_appropriateness")
        if flow.confidence is None or not 0 <= flow.confidence <= 10:
            failed.append(f"flows.{i}.confidence_range")
    return (total - len(failed)) / total, failed


def completeness_score(
    fe: FlowExtraction,
    placeholders: frozenset[str] = DEFAULT_PLACEHOLDERS,
) -> Optional[float]:
    """Mean fraction of substantive 5-tuple components across flows.

    Returns None for envelopes with no flows; the reward layer applies its own
    shaping for that case instead of a score.
    """
    if not fe.flows:
        return None

    def substantive(value: Optional[str]) -> bool:
        if value is None:
            return False
        trimmed = value.strip()
        return bool(trimmed) and trimmed.casefold() not in placeholders

    per_flow = []
    for flow in fe.flows:
        parts = (
            flow.sender,
            flow.recipient,
            flow.subject,
            flow.information_type,
            flow.transmission_principle,
        )
        per_flow.append(sum(substantive(p) for p in parts) / len(parts))
    return sum(per_flow) / len(per_flow)


# --- Serialization / schema descriptors ------------------------------------


def canonical_json(model: BaseModel) -> str:
    """Stable serialization used for persisted records and SFT targets."""
    return model.model_dump_json(exclude_none=True)


def schema_descriptor(model: type[BaseModel]) -> dict:
    """JSON-schema descriptor handed to the gateway's guided-decoding request."""
    return model.model_json_schema()
