from __future__ import annotations

import textwrap
from pathlib import Path

import pytest

from normforge.gateway import EndpointConfig, LLMGateway
from normforge.stubs import FLOW_MARKER, NORM_MARKER, StubBehavior, StubServer

BOOK_CHARACTERS = {
    "alpha": ["Mervyn", "Oddly"],
    "beta": ["Petra"],
    "gamma": ["Quill"],
}
NAME_REWRITES = {
    "Mervyn": "a reformed clerk",
    "Oddly": "a town magistrate",
    "Petra": "a visiting widow",
    "Quill": "an apprentice scribe",
}


def synthetic_book_text(book_idx: int, paragraphs: int = 36) -> str:
    """Deterministic book body with planted flow/norm markers."""
    parts = []
    for i in range(paragraphs):
        sentence = (
            f"Paragraph {i} of book {book_idx} follows the long road to town, "
            f"past hedgerows and the old mill, while the light fades slowly. "
        )
        if i % 3 == 0:
            sentence += f"{FLOW_MARKER} A messenger shares the news with the household. "
        if i % 4 == 0:
            sentence += f"{NORM_MARKER} Custom requires a guest to greet the host first. "
        parts.append(sentence)
    return "\n\n".join(parts)


def write_corpus(root: Path, book_ids: tuple[str, ...] = ("alpha", "beta", "gamma")) -> Path:
    """Write synthetic Gutenberg-style books plus a manifest; returns manifest path."""
    root.mkdir(parents=True, exist_ok=True)
    lines = ["books:"]
    for idx, book_id in enumerate(book_ids):
        body = synthetic_book_text(idx, paragraphs=30 + idx * 6)
        text = (
            "Gutenberg front matter that must be stripped.\n"
            f"*** START OF THE PROJECT GUTENBERG EBOOK {book_id.upper()} ***\n"
            + body
            + f"\n*** END OF THE PROJECT GUTENBERG EBOOK {book_id.upper()} ***\n"
            "License trailer that must be stripped.\n"
        )
        (root / f"{book_id}.txt").write_text(text, encoding="utf-8")
        characters = BOOK_CHARACTERS.get(book_id, [])
        lines.append(
            textwrap.dedent(
                f"""\
                - book_id: {book_id}
                  title: Book {book_id.title()}
                  gutenberg_id: {1000 + idx}
                  path: {book_id}.txt
                  characters: {characters}
                  book_context: "Context notes for {book_id}."
                  book_summary: "A short tale labelled {book_id}."
                """
            ).rstrip()
        )
    manifest = root / "manifest.yaml"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def pipeline_behavior() -> StubBehavior:
    return StubBehavior(
        plant_names=[name for names in BOOK_CHARACTERS.values() for name in names],
        name_rewrites=dict(NAME_REWRITES),
    )


def make_gateway(stub: StubServer, **overrides) -> LLMGateway:
    params = dict(base_url=stub.base_url, model_name="stub-model", max_retries=2)
    params.update(overrides)
    return LLMGateway(EndpointConfig(**params), sleep=lambda _s: None)


@pytest.fixture
def stub():
    with StubServer() as server:
        yield server


@pytest.fixture
def pipeline_stub():
    with StubServer(pipeline_behavior()) as server:
        yield server


@pytest.fixture
def gateway(stub):
    gw = make_gateway(stub)
    yield gw
    gw.close()
