import json
from pathlib import Path

import pytest

from normforge.corpus import Chunk, ChunkingConfig, SourceText, chunk_text
from normforge.extraction import (
    AbstractionFailed,
    ChunkRecord,
    PipelineConfig,
    abstract_norm,
    detect_quality_flags,
    load_records,
    run_book_pipeline,
    run_flow_stage,
    run_norm_stage,
)
from normforge.prompts import PromptLibrary
from normforge.schema import NormativeForce, RazNorm
from normforge.stubs import FLOW_MARKER, NORM_MARKER, StubServer

from conftest import make_gateway, pipeline_behavior, synthetic_book_text, write_corpus


@pytest.fixture(scope="module")
def prompts():
    return PromptLibrary.load()


def make_chunk(text: str, index: int = 0, book_id: str = "bk") -> Chunk:
    return Chunk(
        chunk_id=f"{book_id}-{index:04d}",
        book_id=book_id,
        index=index,
        start_offset=0,
        end_offset=len(text),
        text=text,
    )


class TestFlowStage:
    def test_no_flow_short_circuits(self, pipeline_stub, prompts):
        gw = make_gateway(pipeline_stub)
        chunk = make_chunk("a calm paragraph with nothing to report")
        _reasoning, extraction, errors = run_flow_stage(chunk, gw, prompts)
        assert extraction.has_information_exchange is False
        assert extraction.flows == []
        assert errors == []
        assert pipeline_stub.count("flow_stage2") == 0
        gw.close()

    def test_two_leads_two_calls(self, pipeline_stub, prompts):
        gw = make_gateway(pipeline_stub)
        chunk = make_chunk(f"first {FLOW_MARKER} then {FLOW_MARKER} end")
        _reasoning, extraction, errors = run_flow_stage(chunk, gw, prompts)
        assert len(extraction.flows) == 2
        assert errors == []
        assert pipeline_stub.count("flow_stage2") == 2

    def test_one_malformed_lead_kept_partial(self, pipeline_stub, prompts):
        gw = make_gateway(pipeline_stub)
        pipeline_stub.behavior.canned["flow_stage2"] = [{"content": "garbage not json"}]
        chunk = make_chunk(f"first {FLOW_MARKER} then {FLOW_MARKER} end")
        _reasoning, extraction, errors = run_flow_stage(chunk, gw, prompts)
        assert len(extraction.flows) == 1
        assert len(errors) == 1 and "flow_stage2[0]" in errors[0]


class TestNormStage:
    def test_descriptive_chunk(self, pipeline_stub, prompts):
        gw = make_gateway(pipeline_stub)
        _reasoning, extraction, _ = run_norm_stage(
            make_chunk("nothing prescriptive here"), gw, prompts
        )
        assert extraction.has_prescriptive_content is False

    def test_three_norms_validated(self, pipeline_stub, prompts):
        gw = make_gateway(pipeline_stub)
        chunk = make_chunk(f"{NORM_MARKER} a {NORM_MARKER} b {NORM_MARKER} c")
        _reasoning, extraction, _ = run_norm_stage(chunk, gw, prompts)
        assert len(extraction.norms) == 3
        assert all(isinstance(n.normative_force, NormativeForce) for n in extraction.norms)

    def test_norm_cap_violation_recorded_by_pipeline(self, prompts, tmp_path):
        with StubServer(pipeline_behavior()) as stub:
            gw = make_gateway(stub)
            text = " ".join([NORM_MARKER] * 12)
            book = SourceText(
                book_id="capbook", title="Cap", gutenberg_id=1,
                raw_text=text, clean_text=text,
            )
            cfg = PipelineConfig(chunking=ChunkingConfig(chunk_size=500, overlap=100))
            records, _gold = run_book_pipeline(
                book, cfg, gw, PromptLibrary.load(), tmp_path
            )
            assert records[0].norm_extraction is None
            assert any("InvariantError" in e and "cap" in e for e in records[0].errors)
            gw.close()


class TestQualityFlags:
    def make_norm(self, **overrides) -> RazNorm:
        payload = {
            "prescriptive_element": "must",
            "norm_subject": "a mother of the gentry",
            "norm_act": "promote advantageous matches",
            "condition_of_application": "when daughters are of marriageable age",
            "normative_force": "obligatory",
            "context": "courtship",
            "norm_articulation": "A mother must promote advantageous matches.",
            "norm_source": "implicit",
            "governs_information_flow": False,
            "confidence_qual": "certain",
            "confidence_quant": 7,
        }
        payload.update(overrides)
        return RazNorm.model_validate(payload)

    def test_surname_hit_in_subject(self):
        norm = self.make_norm(norm_subject="Mrs. Bennet")
        assert detect_quality_flags(norm, {"Bennet"}) == ["norm_subject"]

    def test_role_based_clean(self):
        norm = self.make_norm(norm_subject="a host")
        assert detect_quality_flags(norm, {"Bennet", "Winston"}) is None

    def test_name_in_subject_and_condition(self):
        norm = self.make_norm(
            norm_subject="Winston",
            condition_of_application="when Winston is observed by the telescreen",
        )
        flags = detect_quality_flags(norm, {"Winston"})
        assert flags == ["norm_subject", "condition_of_application"]

    def test_case_insensitive_whole_word(self):
        norm = self.make_norm(norm_act="consult bennet about the estate")
        assert detect_quality_flags(norm, {"Bennet"}) == ["norm_act"]
        # substring inside a longer word must not match
        embedded = self.make_norm(norm_act="the bennetian custom")
        assert detect_quality_flags(embedded, {"Bennet"}) is None

    def test_empty_lexicon(self):
        assert detect_quality_flags(self.make_norm(norm_subject="Winston"), set()) is None


class TestAbstraction:
    def test_unflagged_pass_through(self, pipeline_stub, prompts):
        gw = make_gateway(pipeline_stub)
        norm = TestQualityFlags().make_norm()
        result = abstract_norm(norm, None, "summary", "chunk", gw, prompts, {"Bennet"})
        assert result.norm_subject == norm.norm_subject
        assert result.quality_flags is None
        assert "without rewrite" in result.role_rationale
        assert pipeline_stub.count("abstraction") == 0

    def test_flagged_rewritten_clean(self, prompts):
        with StubServer(pipeline_behavior()) as stub:
            gw = make_gateway(stub)
            norm = TestQualityFlags().make_norm(norm_subject="Mervyn the steward")
            flags = detect_quality_flags(norm, {"Mervyn"})
            assert flags == ["norm_subject"]
            result = abstract_norm(
                norm, flags, "summary", "chunk text", gw, prompts, {"Mervyn"}
            )
            assert "Mervyn" not in result.norm_subject
            assert result.quality_flags == ["norm_subject"]
            assert detect_quality_flags(result, {"Mervyn"}) is None
            gw.close()

    def test_still_flagged_after_retry_quarantined(self, prompts):
        behavior = pipeline_behavior()
        behavior.abstraction_keep_names = True
        with StubServer(behavior) as stub:
            gw = make_gateway(stub)
            norm = TestQualityFlags().make_norm(norm_subject="Mervyn the steward")
            with pytest.raises(AbstractionFailed):
                abstract_norm(
                    norm, ["norm_subject"], "summary", "chunk", gw, prompts, {"Mervyn"}
                )
            assert stub.count("abstraction") == 2
            gw.close()


def make_stub_book(book_id: str = "alpha", paragraphs: int = 18) -> SourceText:
    body = synthetic_book_text(0, paragraphs=paragraphs)
    return SourceText(
        book_id=book_id,
        title="Alpha",
        gutenberg_id=1,
        raw_text=body,
        clean_text=body,
        characters=["Mervyn", "Oddly"],
        book_context="Context notes.",
        book_summary="A short tale.",
    )


class TestBookPipeline:
    CFG = PipelineConfig(chunking=ChunkingConfig(chunk_size=600, overlap=150))

    def test_records_in_order_and_gold_totals(self, prompts, tmp_path):
        with StubServer(pipeline_behavior()) as stub:
            gw = make_gateway(stub)
            book = make_stub_book()
            records, gold = run_book_pipeline(book, self.CFG, gw, prompts, tmp_path)
            chunks = chunk_text(book.clean_text, self.CFG.chunking, book.book_id)
            assert [r.chunk.chunk_id for r in records] == [c.chunk_id for c in chunks]
            planted_flows = sum(c.text.count(FLOW_MARKER) for c in chunks)
            assert sum(g["flow_count"] for g in gold) == planted_flows
            assert all(g["has_flows"] == (g["flow_count"] > 0) for g in gold)
            # every norm was abstracted or quarantined, never dropped
            for record in records:
                if record.norm_extraction is not None:
                    assert len(record.abstracted_norms) + len(record.quarantined_norms) \
                        == len(record.norm_extraction.norms)
            gw.close()

    def test_abstracted_norms_are_name_free(self, prompts, tmp_path):
        with StubServer(pipeline_behavior()) as stub:
            gw = make_gateway(stub)
            book = make_stub_book()
            records, _ = run_book_pipeline(book, self.CFG, gw, prompts, tmp_path)
            lexicon = set(book.characters)
            abstracted = [n for r in records for n in r.abstracted_norms]
            assert abstracted, "pipeline produced no abstracted norms"
            assert all(detect_quality_flags(n, lexicon) is None for n in abstracted)
            gw.close()

    def test_resume_skips_completed_chunks(self, prompts, tmp_path):
        book = make_stub_book()
        with StubServer(pipeline_behavior()) as stub:
            gw = make_gateway(stub)
            partial_cfg = PipelineConfig(
                chunking=self.CFG.chunking, stop_after_chunks=2
            )
            run_book_pipeline(book, partial_cfg, gw, prompts, tmp_path)
            first_run_calls = stub.count("flow_stage1")
            assert first_run_calls == 2
            records, _ = run_book_pipeline(book, self.CFG, gw, prompts, tmp_path)
            chunks = chunk_text(book.clean_text, self.CFG.chunking, book.book_id)
            assert len(records) == len(chunks)
            # chunks 0-1 were not re-queried
            assert stub.count("flow_stage1") == len(chunks)
            gw.close()

    def test_deterministic_across_runs(self, prompts, tmp_path):
        book = make_stub_book()
        outputs = []
        for run in ("one", "two"):
            with StubServer(pipeline_behavior()) as stub:
                gw = make_gateway(stub)
                out = tmp_path / run
                run_book_pipeline(book, self.CFG, gw, prompts, out)
                outputs.append((out / "alpha.records.jsonl").read_bytes())
                gw.close()
        assert outputs[0] == outputs[1]

    def test_record_round_trip(self, prompts, tmp_path):
        with StubServer(pipeline_behavior()) as stub:
            gw = make_gateway(stub)
            book = make_stub_book(paragraphs=8)
            records, _ = run_book_pipeline(book, self.CFG, gw, prompts, tmp_path)
            reloaded = load_records(tmp_path, book.book_id)
            assert [r.to_dict() for r in reloaded] == [r.to_dict() for r in records]
            gw.close()

    def test_stage1_outage_recorded_and_continues(self, prompts, tmp_path):
        behavior = pipeline_behavior()
        with StubServer(behavior) as stub:
            gw = make_gateway(stub, max_retries=0)
            behavior.canned["flow_stage1"] = [{"status": 500}]
            book = make_stub_book(paragraphs=8)
            records, gold = run_book_pipeline(book, self.CFG, gw, prompts, tmp_path)
            assert any("flow_stage1" in e for e in records[0].errors)
            assert records[0].flow_extraction is None
            # later chunks unaffected
            assert all(r.flow_extraction is not None for r in records[1:])
            # failed chunk contributes no gold label
            assert len(gold) == len(records) - 1
            gw.close()


def test_write_corpus_helper(tmp_path):
    manifest = write_corpus(tmp_path)
    payload = manifest.read_text(encoding="utf-8")
    assert "alpha" in payload and "gamma" in payload
