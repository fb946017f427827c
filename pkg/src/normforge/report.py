"""Render descriptive-statistics figures alongside the machine-readable report."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .schema import NormativeForce
from .universe import (
    NormativeUniverse,
    centroid_similarity_matrix,
    format_stats_table,
    universe_stats_report,
)


def _fig_deontic(universes: Sequence[NormativeUniverse], path: Path) -> None:
    forces = [f.value for f in NormativeForce]
    book_ids = [u.book_id for u in universes]
    shares = np.zeros((len(universes), len(forces)))
    for i, u in enumerate(universes):
        total = max(1, len(u.norms))
        for j, force in enumerate(forces):
            shares[i, j] = u.stats.deontic_histogram.get(force, 0) / total
    fig, ax = plt.subplots(figsize=(max(6, len(book_ids) * 0.9), 4.5))
    bottom = np.zeros(len(universes))
    for j, force in enumerate(forces):
        ax.bar(book_ids, shares[:, j], bottom=bottom, label=force)
        bottom += shares[:, j]
    ax.set_ylabel("share of norms")
    ax.set_title("Deontic force composition by book")
    ax.legend(fontsize=8)
    plt.xticks(rotation=45, ha="right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _fig_entropy(universes: Sequence[NormativeUniverse], path: Path) -> None:
    book_ids = [u.book_id for u in universes]
    entropies = [u.stats.context_entropy_bits for u in universes]
    fig, ax = plt.subplots(figsize=(max(6, len(book_ids) * 0.9), 4))
    ax.bar(book_ids, entropies, color="#4c72b0")
    ax.set_ylabel("context entropy (bits)")
    ax.set_title("Contextual diversity of norms by book")
    plt.xticks(rotation=45, ha="right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _fig_centroids(universes: Sequence[NormativeUniverse], path: Path) -> None:
    book_ids, matrix = centroid_similarity_matrix(universes)
    fig, ax = plt.subplots(figsize=(6.5, 5.5))
    image = ax.imshow(matrix, vmin=-1.0, vmax=1.0, cmap="viridis")
    ax.set_xticks(range(len(book_ids)), book_ids, rotation=45, ha="right", fontsize=8)
    ax.set_yticks(range(len(book_ids)), book_ids, fontsize=8)
    ax.set_title("Per-book norm centroid similarity")
    fig.colorbar(image, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_stats_outputs(
    universes: Sequence[NormativeUniverse], out_dir: Path | str
) -> dict[str, Path]:
    """Write report.json, report.txt, and the three summary figures."""
    import json

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = universe_stats_report(universes)
    paths = {
        "report_json": out_dir / "report.json",
        "report_txt": out_dir / "report.txt",
        "fig_deontic": out_dir / "deontic_by_book.png",
        "fig_entropy": out_dir / "context_entropy.png",
        "fig_centroids": out_dir / "centroid_similarity.png",
    }
    paths["report_json"].write_text(
        json.dumps(report, ensure_ascii=False, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    paths["report_txt"].write_text(format_stats_table(report), encoding="utf-8")
    _fig_deontic(universes, paths["fig_deontic"])
    _fig_entropy(universes, paths["fig_entropy"])
    _fig_centroids(universes, paths["fig_centroids"])
    return paths
