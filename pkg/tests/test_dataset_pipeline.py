import json
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT_DIR = Path(__file__).resolve().parents[1]
SCRIPTS_DIR = ROOT_DIR / "scripts"
if str(SCRIPTS_DIR) not in sys.path:
    sys.path.insert(0, str(SCRIPTS_DIR))

import dataset_pipeline as dp
import policy_toy
from qrt_core import ConfigError, ContractError, DataError, ScoreItem
from reward_shaping import RewardSpec


VOCAB = policy_toy.Vocabulary()


def _items(n=30, seed=0):
    world = policy_toy.make_toy_world(4, VOCAB, seed)
    return policy_toy.make_toy_items(world, n, seed + 1)


def _candidate(item, index, score):
    return dp.PlanReasonRecord(
        item_id=item.item_id,
        task_kind=item.task_kind,
        question=dp.QUESTION_TEMPLATES[item.task_kind],
        plan=["Assess sharpness."],
        reasoning_tokens=[index % VOCAB.reason_tokens],
        final_score=score,
        candidate_index=index,
    )


def test_noiseless_teacher_reproduces_truth():
    teacher = dp.SimulatedTeacher(VOCAB, noise=0.0, task_bias={})
    rng = np.random.default_rng(0)
    for item in _items(9):
        candidates = dp.generate_candidates(item, teacher, 4, rng)
        assert [c.final_score for c in candidates] == [item.truth_score] * 4
        assert [c.candidate_index for c in candidates] == [0, 1, 2, 3]
        assert all(len(c.reasoning_tokens) == teacher.reason_len for c in candidates)
        assert all(c.plan for c in candidates)


def test_filter_keeps_best_passing_candidates_by_reward_then_index():
    item = ScoreItem("img-1", "technical", 3.0)
    scores = [4.5, 1.5, 3.5, 4.9, 2.5, 1.0, 3.0, 5.0]
    candidates = [_candidate(item, i, s) for i, s in enumerate(scores)]
    records, ledger = dp.filter_items([(item, candidates)], dp.RejectionPolicy(), RewardSpec())
    assert [r.score for r in records] == [3.0, 3.5]
    assert ledger[0].disposition == "kept"
    assert ledger[0].n_pass == 3
    assert ledger[0].kept_indices == [6, 2]


def test_all_passing_is_easy_and_none_passing_is_hard():
    item = ScoreItem("img-2", "aesthetic", 3.0)
    easy = [_candidate(item, i, 3.0) for i in range(4)]
    hard = [_candidate(item, i, 5.0) for i in range(4)]
    policy = dp.RejectionPolicy(teacher_samples_per_item=4)
    records, ledger = dp.filter_items([(item, easy)], policy, RewardSpec())
    assert records == [] and ledger[0].disposition == "easy"
    records, ledger = dp.filter_items([(item, hard)], policy, RewardSpec())
    assert records == [] and ledger[0].disposition == "hard"


def test_single_candidate_is_never_kept():
    item = ScoreItem("img-3", "alignment", 2.0)
    policy = dp.RejectionPolicy(teacher_samples_per_item=1, keep_per_item=1)
    for score in (2.0, 4.0):
        records, ledger = dp.filter_items([(item, [_candidate(item, 0, score)])], policy, RewardSpec())
        assert records == []
        assert ledger[0].disposition in ("easy", "hard")


def test_filter_rejects_mixed_candidates():
    a, b = ScoreItem("a", "technical", 3.0), ScoreItem("b", "technical", 3.0)
    with pytest.raises(ContractError):
        dp.filter_items([(a, [_candidate(b, 0, 3.0)])], dp.RejectionPolicy(), RewardSpec())


@pytest.mark.parametrize(
    "kwargs",
    [
        {"teacher_samples_per_item": 0},
        {"accept_reward_min": 0.0},
        {"accept_reward_min": 1.2},
        {"teacher_samples_per_item": 2, "keep_per_item": 3},
    ],
)
def test_rejection_policy_validation(kwargs):
    with pytest.raises(ConfigError):
        dp.RejectionPolicy(**kwargs)


def test_ledger_partitions_items():
    items = _items(40)
    build = dp.build_corpus(items, dp.SimulatedTeacher(VOCAB), dp.RejectionPolicy(), RewardSpec(), seed=1)
    assert [entry.item_id for entry in build.ledger] == [item.item_id for item in items]
    assert sum(build.counts().values()) == len(items)
    kept_ids = {entry.item_id for entry in build.ledger if entry.disposition == "kept"}
    assert {record.item_id for record in build.records} == kept_ids
    for entry in build.ledger:
        if entry.disposition == "kept":
            assert 1 <= len(entry.kept_indices) <= 2
            assert 0 < entry.n_pass < entry.n_candidates


def test_exported_records_carry_no_plan(tmp_path):
    items = _items(20)
    build = dp.build_corpus(items, dp.SimulatedTeacher(VOCAB), dp.RejectionPolicy(), RewardSpec(), seed=2)
    path = tmp_path / "corpus.jsonl"
    dp.export_corpus(build.records, path, build.ledger)
    for line in path.read_text().splitlines():
        record = json.loads(line)
        assert "plan" not in record
        assert record["provenance"] == "teacher"
    assert dp.load_corpus(path) == build.records


def test_corpus_is_byte_identical_across_runs_and_workers(tmp_path):
    items = _items(25)
    outputs = []
    for run, workers in enumerate((1, 1, 4)):
        build = dp.build_corpus(
            items, dp.SimulatedTeacher(VOCAB), dp.RejectionPolicy(), RewardSpec(), seed=7, workers=workers
        )
        path = tmp_path / f"corpus_{run}.jsonl"
        dp.export_corpus(build.records, path, build.ledger)
        outputs.append(path.read_bytes())
    assert outputs[0] == outputs[1] == outputs[2]


def test_stricter_acceptance_moves_items_from_easy_to_hard():
    items = _items(60)
    teacher = dp.SimulatedTeacher(VOCAB, noise=0.5)
    counts = []
    for r_keep in (0.3, 0.5, 0.7, 0.9, 1.0):
        build = dp.build_corpus(
            items, teacher, dp.RejectionPolicy(accept_reward_min=r_keep), RewardSpec(), seed=3
        )
        counts.append(build.counts())
    hard = [c["hard"] for c in counts]
    easy = [c["easy"] for c in counts]
    assert hard == sorted(hard)
    assert easy == sorted(easy, reverse=True)


def test_manifest_counts_match_records(tmp_path):
    items = _items(30)
    build = dp.build_corpus(items, dp.SimulatedTeacher(VOCAB), dp.RejectionPolicy(), RewardSpec(), seed=4)
    path = tmp_path / "corpus.jsonl"
    manifest = dp.export_corpus(build.records, path, build.ledger, config_hash="deadbeef")
    on_disk = json.loads(dp.manifest_path(path).read_text())
    assert on_disk == manifest
    assert dp.manifest_path(path).name == "corpus.manifest.json"
    assert manifest["n_records"] == len(build.records)
    assert sum(manifest["per_task"].values()) == len(build.records)
    assert manifest["per_disposition"] == build.counts()
    assert manifest["n_items"] == 30
    assert manifest["config_hash"] == "deadbeef"


def test_empty_corpus_export(tmp_path):
    path = tmp_path / "empty.jsonl"
    manifest = dp.export_corpus([], path, [])
    assert path.read_text() == ""
    assert manifest["n_records"] == 0
    assert dp.load_corpus(path) == []


def test_teacher_failures_are_skipped_not_fatal():
    items = _items(40)
    teacher = dp.SimulatedTeacher(VOCAB, failure_rate=0.5)
    build = dp.build_corpus(items, teacher, dp.RejectionPolicy(), RewardSpec(), seed=5)
    skipped = [entry for entry in build.ledger if entry.disposition == "skipped"]
    assert 0 < len(skipped) < len(items)
    assert all("Teacher failed" in entry.reason for entry in skipped)
    assert not {r.item_id for r in build.records} & {e.item_id for e in skipped}


def test_corpus_to_sft_pairs_records_with_items():
    items = _items(20)
    build = dp.build_corpus(items, dp.SimulatedTeacher(VOCAB), dp.RejectionPolicy(), RewardSpec(), seed=6)
    by_id = {item.item_id: item for item in items}
    pairs = dp.corpus_to_sft(build.records, by_id, VOCAB)
    assert len(pairs) == len(build.records)
    for (item, tokens), record in zip(pairs, build.records):
        assert item.item_id == record.item_id
        assert VOCAB.decode(tokens[-1]) == record.score
    with pytest.raises(DataError):
        dp.corpus_to_sft(build.records[:1], {}, VOCAB)


def test_malformed_corpus_record_is_a_data_error():
    with pytest.raises(DataError):
        dp.CorpusRecord.from_record({"item_id": "a", "reasoning": "rX", "score": 3})


def test_items_round_trip_through_jsonl(tmp_path):
    items = _items(5)
    path = tmp_path / "items.jsonl"
    assert dp.write_items(path, items) == 5
    assert dp.read_items(path) == items


def test_teacher_validation():
    with pytest.raises(ConfigError):
        dp.SimulatedTeacher(VOCAB, noise=-1.0)
    with pytest.raises(ConfigError):
        dp.SimulatedTeacher(VOCAB, failure_rate=1.0)
