"""Per-book normative universes: embedded norms, retrieval, and statistics.

A built universe is immutable. Universe files are npz containers written
through a fixed-timestamp zip writer so identical inputs produce identical
bytes; `numpy.load` reads them back unchanged.
"""

from __future__ import annotations

import io
import json
import math
import os
import random
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .gateway import LLMGateway
from .schema import AbstractedNorm, NormativeForce

SCHEMA_VERSION = 1
UNIT_NORM_TOLERANCE = 1e-6


class UniverseError(Exception):
    pass


class EmbeddingFailure(UniverseError):
    """An embedding call failed; the build is aborted, nothing is persisted."""


class DimensionMismatch(UniverseError):
    pass


class OnlyOneUniverse(UniverseError):
    pass


@dataclass(frozen=True)
class RetrievalConfig:
    k: int = 3

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")


@dataclass
class NormRecord:
    norm: AbstractedNorm
    embedding: np.ndarray
    context_embedding: np.ndarray


@dataclass
class UniverseStats:
    deontic_histogram: dict[str, int]
    context_histogram: dict[str, int]
    context_entropy_bits: float
    governs_flow_fraction: float

    def to_dict(self) -> dict:
        return {
            "deontic_histogram": self.deontic_histogram,
            "context_histogram": self.context_histogram,
            "context_entropy_bits": self.context_entropy_bits,
            "governs_flow_fraction": self.governs_flow_fraction,
        }


def shannon_entropy_bits(counts: Sequence[int]) -> float:
    """Entropy of a count distribution in bits, with 0*log0 = 0."""
    total = sum(counts)
    if total == 0:
        return 0.0
    entropy = 0.0
    for count in counts:
        if count > 0:
            p = count / total
            entropy -= p * math.log2(p)
    return entropy


def compute_stats(norms: Sequence[AbstractedNorm]) -> UniverseStats:
    deontic = {force.value: 0 for force in NormativeForce}
    contexts: dict[str, int] = {}
    governs = 0
    for norm in norms:
        deontic[norm.normative_force.value] += 1
        contexts[norm.context] = contexts.get(norm.context, 0) + 1
        governs += bool(norm.governs_information_flow)
    return UniverseStats(
        deontic_histogram=deontic,
        context_histogram=dict(sorted(contexts.items())),
        context_entropy_bits=shannon_entropy_bits(list(contexts.values())),
        governs_flow_fraction=governs / len(norms) if norms else 0.0,
    )


@dataclass
class NormativeUniverse:
    book_id: str
    norms: list[AbstractedNorm]
    embeddings: np.ndarray          # (n, d) float32, unit rows
    context_embeddings: np.ndarray  # (n, d) float32, unit rows
    built_at: str
    stats: UniverseStats = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.stats is None:
            self.stats = compute_stats(self.norms)
        self._check()

    def _check(self) -> None:
        n = len(self.norms)
        if n == 0:
            raise UniverseError("a universe must contain at least one norm")
        for name, matrix in (
            ("embeddings", self.embeddings),
            ("context_embeddings", self.context_embeddings),
        ):
            if matrix.shape[0] != n:
                raise UniverseError(f"{name} rows ({matrix.shape[0]}) != norms ({n})")
            norms = np.linalg.norm(matrix.astype(np.float64), axis=1)
            if not np.allclose(norms, 1.0, atol=UNIT_NORM_TOLERANCE * 10):
                raise UniverseError(f"{name} contains non-unit rows")
        if self.embeddings.shape[1] != self.context_embeddings.shape[1]:
            raise UniverseError("embedding dimensions differ between matrices")

    @property
    def embedding_dim(self) -> int:
        return int(self.embeddings.shape[1])

    def record(self, index: int) -> NormRecord:
        return NormRecord(
            norm=self.norms[index],
            embedding=self.embeddings[index],
            context_embedding=self.context_embeddings[index],
        )

    # -- persistence ----------------------------------------------------------

    def save(self, path: Path | str) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {
            "schema_version": SCHEMA_VERSION,
            "book_id": self.book_id,
            "built_at": self.built_at,
            "embedding_dim": self.embedding_dim,
            "norms": [
                json.loads(n.model_dump_json(exclude_none=True)) for n in self.norms
            ],
            "stats": self.stats.to_dict(),
        }
        arrays = {
            "embeddings": self.embeddings.astype(np.float32),
            "context_embeddings": self.context_embeddings.astype(np.float32),
            "meta_json": np.frombuffer(
                json.dumps(meta, ensure_ascii=False, sort_keys=True).encode("utf-8"),
                dtype=np.uint8,
            ),
        }
        _write_npz_deterministic(path, arrays)

    @classmethod
    def load(cls, path: Path | str) -> "NormativeUniverse":
        with np.load(Path(path)) as data:
            meta = json.loads(bytes(data["meta_json"]).decode("utf-8"))
            embeddings = data["embeddings"]
            context_embeddings = data["context_embeddings"]
        if meta.get("schema_version") != SCHEMA_VERSION:
            raise UniverseError(
                f"unsupported universe schema version {meta.get('schema_version')}"
            )
        stats = UniverseStats(**meta["stats"])
        return cls(
            book_id=meta["book_id"],
            norms=[AbstractedNorm.model_validate(n) for n in meta["norms"]],
            embeddings=embeddings,
            context_embeddings=context_embeddings,
            built_at=meta["built_at"],
            stats=stats,
        )

    def export_json(self, path: Path | str) -> None:
        """Companion inspection file: everything except the embedding matrices."""
        payload = {
            "schema_version": SCHEMA_VERSION,
            "book_id": self.book_id,
            "built_at": self.built_at,
            "embedding_dim": self.embedding_dim,
            "norm_count": len(self.norms),
            "stats": self.stats.to_dict(),
            "norms": [
                json.loads(n.model_dump_json(exclude_none=True)) for n in self.norms
            ],
        }
        Path(path).write_text(
            json.dumps(payload, ensure_ascii=False, sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )


def _write_npz_deterministic(path: Path, arrays: dict[str, np.ndarray]) -> None:
    """npz with fixed zip timestamps so identical arrays give identical bytes."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buffer = io.BytesIO()
            np.lib.format.write_array(buffer, np.asarray(arrays[name]))
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buffer.getvalue())


def build_universe(
    book_id: str,
    norms: Sequence[AbstractedNorm],
    embedder: LLMGateway,
    *,
    built_at: Optional[str] = None,
) -> NormativeUniverse:
    """Embed every norm articulation and context label and assemble the universe."""
    norms = list(norms)
    if not norms:
        raise UniverseError(f"no norms to build a universe for '{book_id}'")
    if built_at is None:
        built_at = os.environ.get("NORMFORGE_BUILT_AT") or _utc_now()
    try:
        embeddings = embedder.embed_batch([n.norm_articulation for n in norms])
        context_embeddings = embedder.embed_batch([n.context for n in norms])
    except Exception as exc:
        raise EmbeddingFailure(f"embedding failed while building '{book_id}': {exc}") from exc
    return NormativeUniverse(
        book_id=book_id,
        norms=norms,
        embeddings=embeddings,
        context_embeddings=context_embeddings,
        built_at=built_at,
    )


def _utc_now() -> str:
    import datetime

    return datetime.datetime.now(datetime.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def top_k_cosine(matrix: np.ndarray, query: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Exact top-k by descending dot product; ties break on ascending index."""
    sims = matrix.astype(np.float64) @ query.astype(np.float64)
    order = np.lexsort((np.arange(len(sims)), -sims))
    return [(int(i), float(sims[i])) for i in order[: min(k, len(sims))]]


def retrieve_top_k(
    universe: NormativeUniverse, query: np.ndarray, cfg: RetrievalConfig
) -> list[tuple[NormRecord, float]]:
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (universe.embedding_dim,):
        raise DimensionMismatch(
            f"query shape {query.shape} does not match universe dim "
            f"{universe.embedding_dim}"
        )
    return [
        (universe.record(i), sim)
        for i, sim in top_k_cosine(universe.embeddings, query, cfg.k)
    ]


def context_max_similarity(
    universe: NormativeUniverse, stated_context: str, embedder: LLMGateway
) -> float:
    """Best cosine match of the stated context against all norm context labels."""
    try:
        query = embedder.embed_batch([stated_context])[0]
    except Exception as exc:
        raise EmbeddingFailure(f"embedding failed for context query: {exc}") from exc
    if query.shape[0] != universe.embedding_dim:
        raise DimensionMismatch(
            f"context query dim {query.shape[0]} != universe dim {universe.embedding_dim}"
        )
    sims = universe.context_embeddings.astype(np.float64) @ query.astype(np.float64)
    return float(np.max(sims))


def sample_wrong_universe(
    all_universes: dict[str, NormativeUniverse] | Sequence[NormativeUniverse],
    correct_book_id: str,
    rng_seed: int,
) -> NormativeUniverse:
    """Uniform choice over the loaded universes excluding the correct book."""
    if isinstance(all_universes, dict):
        pool = [u for bid, u in sorted(all_universes.items()) if bid != correct_book_id]
    else:
        pool = sorted(
            (u for u in all_universes if u.book_id != correct_book_id),
            key=lambda u: u.book_id,
        )
    if not pool:
        raise OnlyOneUniverse(
            f"cannot sample a wrong universe: only '{correct_book_id}' is loaded"
        )
    return pool[random.Random(rng_seed).randrange(len(pool))]


def centroid_similarity_matrix(
    universes: Sequence[NormativeUniverse],
) -> tuple[list[str], np.ndarray]:
    """Pairwise cosine similarity of re-normalized per-book mean embeddings."""
    book_ids = [u.book_id for u in universes]
    centroids = []
    for u in universes:
        mean = u.embeddings.astype(np.float64).mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm == 0.0:
            raise UniverseError(f"degenerate centroid for '{u.book_id}'")
        centroids.append(mean / norm)
    stacked = np.vstack(centroids)
    return book_ids, stacked @ stacked.T


def universe_stats_report(universes: Sequence[NormativeUniverse]) -> dict:
    """Machine-readable descriptive report across universes."""
    if not universes:
        raise UniverseError("at least one universe is required")
    book_ids, matrix = centroid_similarity_matrix(universes)
    per_book = {}
    for u in universes:
        per_book[u.book_id] = {
            "norm_count": len(u.norms),
            "deontic_histogram": u.stats.deontic_histogram,
            "context_entropy_bits": u.stats.context_entropy_bits,
            "governs_flow_fraction": u.stats.governs_flow_fraction,
            "top_contexts": sorted(
                u.stats.context_histogram.items(), key=lambda kv: (-kv[1], kv[0])
            )[:10],
        }
    return {
        "books": per_book,
        "centroid_similarity": {
            "book_ids": book_ids,
            "matrix": [[float(x) for x in row] for row in matrix],
        },
    }


def format_stats_table(report: dict) -> str:
    """Plain-text table for terminal consumption."""
    lines = []
    header = f"{'book':<16} {'norms':>6} {'entropy(bits)':>14} {'governs-flow':>13}  deontic distribution"
    lines.append(header)
    lines.append("-" * len(header))
    for book_id, row in sorted(report["books"].items()):
        deontic = " ".join(
            f"{k[:4]}={v}" for k, v in sorted(row["deontic_histogram"].items())
        )
        lines.append(
            f"{book_id:<16} {row['norm_count']:>6} "
            f"{row['context_entropy_bits']:>14.3f} "
            f"{row['governs_flow_fraction']:>13.3f}  {deontic}"
        )
    lines.append("")
    lines.append("centroid cosine similarity:")
    ids = report["centroid_similarity"]["book_ids"]
    matrix = report["centroid_similarity"]["matrix"]
    lines.append(" " * 16 + " ".join(f"{b[:8]:>8}" for b in ids))
    for book_id, row in zip(ids, matrix):
        lines.append(f"{book_id:<16}" + " ".join(f"{x:>8.4f}" for x in row))
    return "\n".join(lines) + "\n"
