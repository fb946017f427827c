"""normforge: normative-universe extraction and composite reward tooling."""

__version__ = "0.1.0"

from .corpus import Chunk, ChunkingConfig, SourceText, chunk_text, strip_boilerplate
from .gateway import CompletionRequest, EndpointConfig, LLMGateway, strip_think_blocks
from .reward import (
    ContrastiveConfig,
    RewardBreakdown,
    RewardEngine,
    RewardWeights,
    contrastive_clamp,
)
from .schema import (
    AbstractedNorm,
    FlowExtraction,
    InformationFlow,
    NormExtraction,
    RazNorm,
    validate_flow_extraction,
    validate_norm_extraction,
)
from .universe import (
    NormativeUniverse,
    RetrievalConfig,
    build_universe,
    retrieve_top_k,
    sample_wrong_universe,
)

__all__ = [
    "AbstractedNorm",
    "Chunk",
    "ChunkingConfig",
    "CompletionRequest",
    "ContrastiveConfig",
    "EndpointConfig",
    "FlowExtraction",
    "InformationFlow",
    "LLMGateway",
    "NormExtraction",
    "NormativeUniverse",
    "RazNorm",
    "RetrievalConfig",
    "RewardBreakdown",
    "RewardEngine",
    "RewardWeights",
    "SourceText",
    "build_universe",
    "chunk_text",
    "contrastive_clamp",
    "retrieve_top_k",
    "sample_wrong_universe",
    "strip_boilerplate",
    "strip_think_blocks",
    "validate_flow_extraction",
    "validate_norm_extraction",
]
