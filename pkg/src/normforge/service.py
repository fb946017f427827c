"""HTTP reward service for external GRPO trainers.

All served data (chunks, gold labels, universes) is loaded once at startup and
immutable for the service lifetime so reward cannot drift mid-training. The
only mutable state is the diagnostics window, updated under a lock after each
fully scored request.
"""

from __future__ import annotations

import collections
import json
import threading
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, HTTPException
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .config import AppConfig
from .corpus import Chunk, read_chunks_jsonl
from .gateway import LLMGateway
from .prompts import PromptLibrary
from .reward import (
    COMPONENT_NAMES,
    ContrastiveConfig,
    RewardBreakdown,
    RewardEngine,
    RewardWeights,
    ServiceUnavailable,
)
from .universe import NormativeUniverse


class ScoreRequest(BaseModel):
    chunk_id: str
    completions: list[str] = Field(min_length=1)
    seed: Optional[int] = None
    lambda_override: Optional[float] = Field(default=None, ge=0.0)
    weight_override: Optional[dict[str, float]] = None


class ScoreResponse(BaseModel):
    rewards: list[float]
    breakdowns: list[RewardBreakdown]
    diagnostics: dict


class ServiceState:
    def __init__(
        self,
        chunks: dict[str, Chunk],
        gold: dict[str, dict],
        universes: dict[str, NormativeUniverse],
        engine: RewardEngine,
        window_size: int = 256,
    ):
        self.chunks = chunks
        self.gold = gold
        self.universes = universes
        self.engine = engine
        self._window: collections.deque[RewardBreakdown] = collections.deque(
            maxlen=window_size
        )
        self._lock = threading.Lock()

    def record(self, breakdowns: list[RewardBreakdown]) -> None:
        with self._lock:
            self._window.extend(breakdowns)

    def diagnostics(self) -> dict:
        with self._lock:
            window = list(self._window)
        n = len(window)
        if n == 0:
            return {
                "window_size": 0,
                "no_flow_rate": 0.0,
                "component_means": {name: 0.0 for name in COMPONENT_NAMES},
                "composite_mean": 0.0,
            }
        return {
            "window_size": n,
            "no_flow_rate": sum(b.no_flow_predicted for b in window) / n,
            "component_means": {
                name: sum(b.components()[i] for b in window) / n
                for i, name in enumerate(COMPONENT_NAMES)
            },
            "composite_mean": sum(b.composite for b in window) / n,
        }

    def score(self, request: ScoreRequest) -> ScoreResponse:
        chunk = self.chunks.get(request.chunk_id)
        if chunk is None:
            raise HTTPException(
                status_code=404,
                detail=f"unknown chunk_id '{request.chunk_id}'",
            )
        gold = self.gold.get(request.chunk_id)
        if gold is None:
            raise HTTPException(
                status_code=404,
                detail=f"no gold label for chunk_id '{request.chunk_id}'",
            )
        weights = None
        contrastive = None
        try:
            if request.weight_override:
                weights = RewardWeights.from_mapping(request.weight_override)
            if request.lambda_override is not None:
                contrastive = ContrastiveConfig(lam=request.lambda_override)
        except (TypeError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        try:
            breakdowns, diagnostics = self.engine.score_group(
                request.completions,
                chunk,
                gold,
                self.universes,
                seed=request.seed,
                weights=weights,
                contrastive=contrastive,
            )
        except ServiceUnavailable as exc:
            raise HTTPException(status_code=503, detail=str(exc)) from exc
        self.record(breakdowns)
        return ScoreResponse(
            rewards=[b.composite for b in breakdowns],
            breakdowns=breakdowns,
            diagnostics=diagnostics,
        )


def load_service_state(
    cfg: AppConfig,
    *,
    judge: Optional[LLMGateway] = None,
    embedder: Optional[LLMGateway] = None,
) -> ServiceState:
    """Load chunks, gold labels, and universes, failing fast on gaps."""
    chunks: dict[str, Chunk] = {}
    chunk_files = sorted(cfg.chunks_dir.glob("*.chunks.jsonl"))
    if not chunk_files:
        raise FileNotFoundError(f"no chunk files found under {cfg.chunks_dir}")
    for path in chunk_files:
        for chunk in read_chunks_jsonl(path):
            chunks[chunk.chunk_id] = chunk

    gold: dict[str, dict] = {}
    gold_files = sorted(cfg.records_dir.glob("*.gold.jsonl"))
    if not gold_files:
        raise FileNotFoundError(f"no gold-label files found under {cfg.records_dir}")
    for path in gold_files:
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                label = json.loads(line)
                gold[label["chunk_id"]] = label

    universes: dict[str, NormativeUniverse] = {}
    for path in sorted(cfg.universes_dir.glob("*.universe.npz")):
        universe = NormativeUniverse.load(path)
        universes[universe.book_id] = universe
    if len(universes) < 2:
        raise FileNotFoundError(
            f"need at least 2 universe files under {cfg.universes_dir} for "
            f"contrastive scoring, found {len(universes)}"
        )
    books_without_universe = {
        c.book_id for c in chunks.values() if c.book_id not in universes
    }
    if books_without_universe:
        raise FileNotFoundError(
            f"missing universes for books: {sorted(books_without_universe)}"
        )

    prompts = PromptLibrary.load(cfg.prompts_dir)
    judge = judge or LLMGateway(cfg.endpoint("judge"))
    embedder = embedder or LLMGateway(cfg.endpoint("embedder"))
    engine = RewardEngine(
        judge,
        embedder,
        prompts,
        weights=cfg.weights,
        retrieval=cfg.retrieval,
        contrastive=cfg.contrastive,
        audit_path=cfg.audit_log,
    )
    return ServiceState(
        chunks, gold, universes, engine, window_size=cfg.service.diagnostics_window
    )


def create_app(state: ServiceState) -> FastAPI:
    app = FastAPI(title="normforge reward service", version="1.0")

    @app.post("/v1/score", response_model=ScoreResponse)
    def score(request: ScoreRequest) -> ScoreResponse:
        return state.score(request)

    @app.get("/v1/health")
    def health() -> JSONResponse:
        judge_ok = state.engine.judge.ping()
        embedder_ok = state.engine.embedder.ping()
        ok = judge_ok and embedder_ok
        return JSONResponse(
            status_code=200 if ok else 503,
            content={
                "status": "ok" if ok else "degraded",
                "judge": judge_ok,
                "embedder": embedder_ok,
                "chunks": len(state.chunks),
                "universes": len(state.universes),
            },
        )

    @app.get("/v1/diagnostics")
    def diagnostics() -> dict:
        return state.diagnostics()

    @app.get("/v1/schema")
    def schemas() -> dict:
        return {
            "score_request": ScoreRequest.model_json_schema(),
            "score_response": ScoreResponse.model_json_schema(),
        }

    return app


def serve(cfg: AppConfig) -> None:
    import uvicorn

    state = load_service_state(cfg)
    app = create_app(state)
    uvicorn.run(app, host=cfg.service.host, port=cfg.service.port, log_level="info")


def score_batch_offline(
    state: ServiceState, requests_file: Path | str, out_file: Path | str
) -> dict:
    """Score a file of line-delimited requests, resumable by chunk_id."""
    requests_file = Path(requests_file)
    out_file = Path(out_file)
    done: set[str] = set()
    if out_file.exists():
        for line in out_file.read_text(encoding="utf-8").splitlines():
            if line.strip():
                try:
                    payload = json.loads(line)
                except json.JSONDecodeError:
                    continue
                # Error records carry chunk_id too but should be retried.
                if "chunk_id" in payload and "rewards" in payload:
                    done.add(payload["chunk_id"])
    summary = {"scored": 0, "skipped": 0, "errors": 0}
    with open(out_file, "a", encoding="utf-8") as out:
        for lineno, line in enumerate(
            requests_file.read_text(encoding="utf-8").splitlines(), start=1
        ):
            if not line.strip():
                continue
            try:
                request = ScoreRequest.model_validate_json(line)
            except Exception as exc:
                summary["errors"] += 1
                out.write(json.dumps(
                    {"line": lineno, "error": f"invalid request: {exc}"},
                    ensure_ascii=False, sort_keys=True,
                ) + "\n")
                continue
            if request.chunk_id in done:
                summary["skipped"] += 1
                continue
            try:
                response = state.score(request)
            except HTTPException as exc:
                summary["errors"] += 1
                out.write(json.dumps(
                    {"line": lineno, "chunk_id": request.chunk_id,
                     "error": exc.detail},
                    ensure_ascii=False, sort_keys=True,
                ) + "\n")
                continue
            done.add(request.chunk_id)
            summary["scored"] += 1
            out.write(json.dumps(
                {
                    "chunk_id": request.chunk_id,
                    "rewards": response.rewards,
                    "breakdowns": [b.model_dump() for b in response.breakdowns],
                    "diagnostics": response.diagnostics,
                },
                ensure_ascii=False, sort_keys=True,
            ) + "\n")
    return summary
