"""Single entry point driving the pipeline: ingest, extract, build-universe,
dataset, score, serve, stats.

Progress goes to stderr, data to files. Exit codes: 0 ok, 1 runtime error,
2 usage error / missing upstream artifact.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import corpus, dataset, extraction, universe as universe_mod
from .config import AppConfig, ConfigError, load_config
from .gateway import LLMGateway
from .prompts import PromptLibrary

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class MissingArtifact(Exception):
    """An upstream output this command depends on does not exist."""


def _progress(message: str) -> None:
    print(message, file=sys.stderr)


def _require_path(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{what} not found: {path}")
    return path


def _load_books(cfg: AppConfig) -> list[corpus.SourceText]:
    if cfg.manifest is None:
        raise MissingArtifact("no manifest configured (set manifest in config or --manifest)")
    _require_path(cfg.manifest, "manifest")
    books, errors = corpus.load_corpus(cfg.manifest)
    for error in errors:
        _progress(f"warning: {error}")
    return books


def cmd_ingest(cfg: AppConfig, args) -> int:
    books = _load_books(cfg)
    cfg.chunks_dir.mkdir(parents=True, exist_ok=True)
    total = 0
    for book in books:
        chunks = corpus.chunk_text(book.clean_text, cfg.chunking, book_id=book.book_id)
        corpus.write_chunks_jsonl(chunks, cfg.chunks_dir / f"{book.book_id}.chunks.jsonl")
        _progress(f"{book.book_id}: {len(chunks)} chunks")
        total += len(chunks)
    _progress(f"ingested {len(books)} books, {total} chunks -> {cfg.chunks_dir}")
    return EXIT_OK


def _select_books(cfg: AppConfig, which: str) -> list[corpus.SourceText]:
    books = _load_books(cfg)
    if which != "all":
        books = [b for b in books if b.book_id == which]
        if not books:
            raise MissingArtifact(f"book '{which}' not in manifest")
    return books


def cmd_extract(cfg: AppConfig, args) -> int:
    _require_path(cfg.chunks_dir, "chunks directory (run 'ingest' first)")
    books = _select_books(cfg, args.book)
    prompts = PromptLibrary.load(cfg.prompts_dir)
    gateway = LLMGateway(cfg.endpoint("extractor"))
    pipeline_cfg = extraction.PipelineConfig(
        chunking=cfg.chunking,
        resume=not args.no_resume,
        stop_after_chunks=args.limit,
    )

    def run_one(book: corpus.SourceText) -> tuple[str, int, int]:
        chunk_file = cfg.chunks_dir / f"{book.book_id}.chunks.jsonl"
        _require_path(chunk_file, f"chunk file for '{book.book_id}' (run 'ingest' first)")
        chunks = corpus.read_chunks_jsonl(chunk_file)
        records, gold = extraction.run_book_pipeline(
            book, pipeline_cfg, gateway, prompts, cfg.records_dir, chunks=chunks
        )
        extraction.export_book_outputs(records, gold, cfg.records_dir, book.book_id)
        return book.book_id, len(records), len(gold)

    if args.jobs > 1 and len(books) > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(run_one, books))
    else:
        results = [run_one(book) for book in books]
    for book_id, n_records, n_gold in results:
        _progress(f"{book_id}: {n_records} records, {n_gold} gold labels")
    return EXIT_OK


def cmd_build_universe(cfg: AppConfig, args) -> int:
    _require_path(cfg.records_dir, "records directory (run 'extract' first)")
    books = _select_books(cfg, args.book)
    embedder = LLMGateway(cfg.endpoint("embedder"))
    cfg.universes_dir.mkdir(parents=True, exist_ok=True)
    from .schema import AbstractedNorm

    for book in books:
        abstracted_path = cfg.records_dir / f"{book.book_id}.abstracted.jsonl"
        _require_path(
            abstracted_path, f"abstracted norms for '{book.book_id}' (run 'extract' first)"
        )
        norms = []
        for line in abstracted_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                norms.append(AbstractedNorm.model_validate(json.loads(line)["norm"]))
        built = universe_mod.build_universe(book.book_id, norms, embedder)
        out = cfg.universes_dir / f"{book.book_id}.universe.npz"
        built.save(out)
        built.export_json(cfg.universes_dir / f"{book.book_id}.universe.json")
        _progress(f"{book.book_id}: universe of {len(norms)} norms -> {out}")
    return EXIT_OK


def cmd_dataset(cfg: AppConfig, args) -> int:
    _require_path(cfg.records_dir, "records directory (run 'extract' first)")
    prompts = PromptLibrary.load(cfg.prompts_dir)
    record_files = sorted(cfg.records_dir.glob("*.records.jsonl"))
    if not record_files:
        raise MissingArtifact(f"no record files under {cfg.records_dir} (run 'extract' first)")
    records = []
    for path in record_files:
        records.extend(
            extraction.ChunkRecord.from_dict(json.loads(line))
            for line in path.read_text(encoding="utf-8").splitlines()
            if line.strip()
        )
    pairs, skipped = dataset.build_sft_pairs(records, prompts)
    _progress(f"built {len(pairs)} pairs ({skipped} chunks skipped)")
    balanced = dataset.downsample_no_flow(pairs, target_ratio=args.ratio, seed=args.seed)
    _progress(f"downsampled to {len(balanced)} pairs at ratio {args.ratio}")
    fractions = [float(f) for f in args.fractions.split(",")]
    manifest = dataset.export_splits(balanced, fractions, args.seed, cfg.dataset_dir)
    _progress(f"wrote splits -> {cfg.dataset_dir}: "
              + ", ".join(f"{k}={v['count']}" for k, v in manifest["files"].items()))
    return EXIT_OK


def _service_state(cfg: AppConfig):
    from .service import load_service_state

    try:
        return load_service_state(cfg)
    except FileNotFoundError as exc:
        raise MissingArtifact(str(exc)) from exc


def cmd_score(cfg: AppConfig, args) -> int:
    from .service import score_batch_offline

    requests_file = _require_path(Path(args.requests), "requests file")
    state = _service_state(cfg)
    summary = score_batch_offline(state, requests_file, Path(args.out))
    _progress(
        f"scored={summary['scored']} skipped={summary['skipped']} "
        f"errors={summary['errors']} -> {args.out}"
    )
    return EXIT_OK


def cmd_serve(cfg: AppConfig, args) -> int:
    from .service import serve

    if args.host:
        cfg.service.host = args.host
    if args.port:
        cfg.service.port = args.port
    try:
        serve(cfg)
    except FileNotFoundError as exc:
        raise MissingArtifact(str(exc)) from exc
    return EXIT_OK


def cmd_stats(cfg: AppConfig, args) -> int:
    from .report import render_stats_outputs

    universes_dir = Path(args.universes) if args.universes else cfg.universes_dir
    _require_path(universes_dir, "universes directory (run 'build-universe' first)")
    paths = sorted(universes_dir.glob("*.universe.npz"))
    if not paths:
        raise MissingArtifact(f"no universe files under {universes_dir}")
    universes = [universe_mod.NormativeUniverse.load(p) for p in paths]
    outputs = render_stats_outputs(universes, cfg.reports_dir)
    for name, path in outputs.items():
        _progress(f"{name}: {path}")
    sys.stdout.write(universe_mod.format_stats_table(
        universe_mod.universe_stats_report(universes)
    ))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="normforge",
        description="Normative-universe extraction and reward pipeline",
    )
    parser.add_argument("--config", type=Path, default=None, help="YAML/JSON config file")
    parser.add_argument("--manifest", type=Path, default=None, help="corpus manifest override")
    parser.add_argument("--workdir", type=Path, default=None, help="output directory override")
    parser.add_argument("--seed", type=int, default=None, help="seed override")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("ingest", help="chunk every book in the manifest")

    p_extract = sub.add_parser("extract", help="run flow/norm extraction over chunks")
    p_extract.add_argument("--book", default="all", help="book_id or 'all'")
    p_extract.add_argument("--jobs", type=int, default=1, help="books processed in parallel")
    p_extract.add_argument("--limit", type=int, default=None,
                           help="stop after N chunks per book (for smoke runs)")
    p_extract.add_argument("--no-resume", action="store_true",
                           help="ignore existing checkpoints")

    p_universe = sub.add_parser("build-universe", help="embed norms into universes")
    p_universe.add_argument("--book", default="all", help="book_id or 'all'")

    p_dataset = sub.add_parser("dataset", help="assemble SFT pairs with downsampling")
    p_dataset.add_argument("--ratio", type=float, default=1.0,
                           help="no-flow to flow ratio after downsampling")
    p_dataset.add_argument("--seed", type=int, default=0, dest="seed")
    p_dataset.add_argument("--fractions", default="0.9,0.1",
                           help="comma-separated split fractions summing to 1")

    p_score = sub.add_parser("score", help="score a file of completion groups offline")
    p_score.add_argument("--requests", required=True, help="line-delimited score requests")
    p_score.add_argument("--out", required=True, help="output breakdown file")

    p_serve = sub.add_parser("serve", help="run the HTTP reward service")
    p_serve.add_argument("--host", default=None)
    p_serve.add_argument("--port", type=int, default=None)

    p_stats = sub.add_parser("stats", help="descriptive statistics report and figures")
    p_stats.add_argument("--universes", default=None, help="universes directory")

    return parser


COMMANDS = {
    "ingest": cmd_ingest,
    "extract": cmd_extract,
    "build-universe": cmd_build_universe,
    "dataset": cmd_dataset,
    "score": cmd_score,
    "serve": cmd_serve,
    "stats": cmd_stats,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.manifest is not None:
            cfg.manifest = args.manifest
        if args.workdir is not None:
            cfg.workdir = args.workdir
        if args.seed is not None:
            cfg.seed = args.seed
    except ConfigError as exc:
        _progress(f"error: {exc}")
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](cfg, args)
    except MissingArtifact as exc:
        _progress(f"error: {exc}")
        return EXIT_USAGE
    except (ConfigError, corpus.ManifestError) as exc:
        _progress(f"error: {exc}")
        return EXIT_USAGE
    except Exception as exc:  # runtime failure
        _progress(f"error: {type(exc).__name__}: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
