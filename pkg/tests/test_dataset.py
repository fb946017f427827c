import hashlib
import json

import pytest

from normforge.corpus import Chunk
from normforge.dataset import (
    InvalidFractions,
    TrainingPair,
    build_sft_pairs,
    downsample_no_flow,
    export_splits,
    load_pairs_jsonl,
)
from normforge.extraction import ChunkRecord
from normforge.prompts import PromptLibrary
from normforge.schema import FlowExtraction, InformationFlow, validate_flow_extraction

PROMPTS = PromptLibrary.load()


def make_record(index: int, n_flows: int, failed: bool = False) -> ChunkRecord:
    chunk = Chunk(f"bk-{index:04d}", "bk", index, 0, 20, f"chunk text {index}")
    if failed:
        return ChunkRecord(chunk=chunk, errors=["flow_stage1: TransportError: down"])
    flows = [
        InformationFlow(
            sender=f"sender{i}",
            recipient=f"recipient{i}",
            subject=None,
            information_type=f"news {i}",
            transmission_principle="custom",
            context="family",
            appropriateness="appropriate",
            norm_source="implicit",
            confidence=8,
        )
        for i in range(n_flows)
    ]
    extraction = FlowExtraction(
        reasoning=f"reasoning for chunk {index}",
        has_information_exchange=n_flows > 0,
        flows=flows,
    )
    return ChunkRecord(
        chunk=chunk, flow_reasoning=extraction.reasoning, flow_extraction=extraction
    )


def make_pairs(n_flow: int, n_no_flow: int) -> list[TrainingPair]:
    records = [make_record(i, 1) for i in range(n_flow)]
    records += [make_record(n_flow + i, 0) for i in range(n_no_flow)]
    pairs, _ = build_sft_pairs(records, PROMPTS)
    return pairs


class TestBuildPairs:
    def test_flow_record(self):
        pairs, skipped = build_sft_pairs([make_record(0, 2)], PROMPTS)
        assert skipped == 0
        assert pairs[0].is_no_flow is False
        assert pairs[0].chunk_id == "bk-0000"
        assert "chunk text 0" in pairs[0].prompt

    def test_no_flow_record(self):
        pairs, _ = build_sft_pairs([make_record(0, 0)], PROMPTS)
        assert pairs[0].is_no_flow is True

    def test_failed_records_skipped_and_counted(self):
        records = [make_record(i, 1) for i in range(7)]
        records += [make_record(100 + i, 0, failed=True) for i in range(3)]
        pairs, skipped = build_sft_pairs(records, PROMPTS)
        assert len(pairs) == 7 and skipped == 3

    def test_target_round_trips(self):
        pairs, _ = build_sft_pairs([make_record(0, 1), make_record(1, 0)], PROMPTS)
        for pair in pairs:
            envelope = validate_flow_extraction(pair.target)
            assert pair.is_no_flow == (not envelope.flows)

    def test_prompt_carries_instruction_and_chunk(self):
        pairs, _ = build_sft_pairs([make_record(0, 1)], PROMPTS)
        prompt = pairs[0].prompt
        assert "Contextual Integrity" in prompt
        assert prompt.rstrip().endswith("chunk text 0")


class TestDownsample:
    def test_87_13_to_26(self):
        pairs = make_pairs(n_flow=13, n_no_flow=87)
        balanced = downsample_no_flow(pairs, target_ratio=1.0, seed=42)
        assert len(balanced) == 26
        assert sum(not p.is_no_flow for p in balanced) == 13
        assert sum(p.is_no_flow for p in balanced) == 13

    def test_cap_keeps_everything(self):
        pairs = make_pairs(n_flow=10, n_no_flow=5)
        balanced = downsample_no_flow(pairs, target_ratio=1.0, seed=0)
        assert len(balanced) == 15

    def test_seed_replay(self):
        pairs = make_pairs(n_flow=13, n_no_flow=87)
        first = downsample_no_flow(pairs, 1.0, seed=7)
        second = downsample_no_flow(pairs, 1.0, seed=7)
        assert first == second
        third = downsample_no_flow(pairs, 1.0, seed=8)
        assert third != first

    def test_never_drops_flow_pairs(self):
        pairs = make_pairs(n_flow=20, n_no_flow=200)
        balanced = downsample_no_flow(pairs, target_ratio=0.5, seed=3)
        flow_ids = {p.chunk_id for p in pairs if not p.is_no_flow}
        assert flow_ids <= {p.chunk_id for p in balanced}
        assert sum(p.is_no_flow for p in balanced) == 10

    def test_single_class_returned_unmodified(self, caplog):
        pairs = make_pairs(n_flow=0, n_no_flow=5)
        assert downsample_no_flow(pairs, 1.0, seed=0) == pairs

    def test_ratio_two(self):
        pairs = make_pairs(n_flow=10, n_no_flow=50)
        balanced = downsample_no_flow(pairs, target_ratio=2.0, seed=1)
        assert sum(p.is_no_flow for p in balanced) == 20


class TestExportSplits:
    def test_stratified_90_10(self, tmp_path):
        pairs = make_pairs(n_flow=40, n_no_flow=60)
        manifest = export_splits(pairs, [0.9, 0.1], seed=5, out_dir=tmp_path)
        files = manifest["files"]
        assert files["train"]["count"] == 90 and files["val"]["count"] == 10
        # class ratios preserved within one item
        assert abs(files["train"]["flow"] - 36) <= 1
        assert abs(files["val"]["flow"] - 4) <= 1
        total = files["train"]["flow"] + files["val"]["flow"]
        assert total == 40

    def test_invalid_fractions(self, tmp_path):
        with pytest.raises(InvalidFractions):
            export_splits(make_pairs(2, 2), [0.5, 0.6], seed=0, out_dir=tmp_path)
        with pytest.raises(InvalidFractions):
            export_splits(make_pairs(2, 2), [], seed=0, out_dir=tmp_path)

    def test_seed_replay_identical_files(self, tmp_path):
        pairs = make_pairs(n_flow=15, n_no_flow=25)
        digests = []
        for run in ("a", "b"):
            out = tmp_path / run
            export_splits(pairs, [0.8, 0.2], seed=9, out_dir=out)
            digests.append(
                [
                    hashlib.sha256(path.read_bytes()).hexdigest()
                    for path in sorted(out.glob("*.jsonl"))
                ]
            )
        assert digests[0] == digests[1]

    def test_round_trip(self, tmp_path):
        pairs = make_pairs(n_flow=6, n_no_flow=4)
        export_splits(pairs, [0.5, 0.5], seed=2, out_dir=tmp_path)
        reloaded = load_pairs_jsonl(tmp_path / "train.jsonl") + load_pairs_jsonl(
            tmp_path / "val.jsonl"
        )
        assert sorted(p.chunk_id for p in reloaded) == sorted(p.chunk_id for p in pairs)
        assert set(reloaded) == set(pairs)

    def test_three_way_names(self, tmp_path):
        pairs = make_pairs(n_flow=10, n_no_flow=10)
        manifest = export_splits(pairs, [0.6, 0.2, 0.2], seed=0, out_dir=tmp_path)
        assert set(manifest["files"]) == {"train", "val", "test"}
        assert (tmp_path / "test.jsonl").exists()

    def test_manifest_written(self, tmp_path):
        pairs = make_pairs(n_flow=3, n_no_flow=3)
        export_splits(pairs, [0.5, 0.5], seed=4, out_dir=tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["seed"] == 4
        assert manifest["total_pairs"] == 6
