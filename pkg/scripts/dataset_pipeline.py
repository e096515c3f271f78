#!/usr/bin/env python3
"""
Cold-start corpus construction.

For every item a teacher writes an analysis plan, reasons conditioned on that
plan, and commits to a score. ``K`` such candidates are drawn per item and
scored with the Gaussian reward. Items where every candidate passes are too
easy, items where none passes are too hard; both are dropped. Up to ``m``
passing candidates of the remaining items are exported for SFT with the plan
removed, so only the question, the reasoning and the score survive.

At desk scale the teacher is simulated: truth plus Gaussian noise plus a
per-task bias, with seeded placeholder reasoning.

Author: QRTune Team
Version: 1.0.0
"""

import concurrent.futures
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from policy_toy import ToyItem, Vocabulary
from qrt_core import (
    TASK_KINDS,
    ConfigError,
    ContractError,
    DataError,
    QrtError,
    ScoreItem,
    read_jsonl,
    write_json,
    write_jsonl,
)
from reward_shaping import RewardSpec, gaussian_reward

logger = logging.getLogger(__name__)

PROVENANCES = ("teacher", "human", "synthetic")
DISPOSITIONS = ("kept", "easy", "hard", "skipped")

QUESTION_TEMPLATES = {
    "technical": "Please provide a technical quality rating for the image.",
    "aesthetic": "How would you rate the aesthetic quality of this image?",
    "alignment": "How well does the image match the prompt? Give an alignment rating.",
}

PLAN_STEPS = {
    "technical": ["clarity", "noise", "exposure", "compression artifacts", "technical issues"],
    "aesthetic": ["composition", "color and contrast", "lighting", "subject emphasis", "style"],
    "alignment": [
        "prompt objects",
        "object count",
        "attributes",
        "spatial relations",
        "prompt-object correspondence",
    ],
}


class TeacherError(QrtError):
    """The teacher could not produce a candidate for an item."""

    exit_code = 3


# ============================================================================
# Records and policy
# ============================================================================


@dataclass
class PlanReasonRecord:
    """One teacher candidate, plan included."""

    item_id: str
    task_kind: str
    question: str
    plan: List[str]
    reasoning_tokens: List[int]
    final_score: float
    provenance: str = "teacher"
    candidate_index: int = 0

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ContractError(f"Unknown provenance: {self.provenance!r}")

    def to_training(self) -> "CorpusRecord":
        return CorpusRecord(
            item_id=self.item_id,
            task_kind=self.task_kind,
            question=self.question,
            reasoning_tokens=tuple(int(t) for t in self.reasoning_tokens),
            score=float(self.final_score),
            provenance=self.provenance,
        )


@dataclass(frozen=True)
class CorpusRecord:
    """Exported training form of a candidate; carries no plan."""

    item_id: str
    task_kind: str
    question: str
    reasoning_tokens: Tuple[int, ...]
    score: float
    provenance: str = "teacher"

    def to_record(self) -> Dict[str, Any]:
        return {
            "item_id": self.item_id,
            "task": self.task_kind,
            "question": self.question,
            "reasoning": " ".join(f"r{t}" for t in self.reasoning_tokens),
            "score": self.score,
            "provenance": self.provenance,
        }

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "CorpusRecord":
        try:
            words = record["reasoning"].split()
            tokens = tuple(int(w[1:]) for w in words)
            return cls(
                item_id=str(record["item_id"]),
                task_kind=record["task"],
                question=record["question"],
                reasoning_tokens=tokens,
                score=float(record["score"]),
                provenance=record.get("provenance", "teacher"),
            )
        except (KeyError, ValueError, AttributeError) as e:
            raise DataError(f"Malformed corpus record {record!r}: {e}") from e

    def tokens(self, vocab: Vocabulary) -> np.ndarray:
        """Reason tokens followed by the score token."""
        return np.asarray([*self.reasoning_tokens, vocab.encode(self.score)], dtype=np.int64)


@dataclass(frozen=True)
class RejectionPolicy:
    teacher_samples_per_item: int = 8
    accept_reward_min: float = 0.7
    keep_per_item: int = 2

    def __post_init__(self):
        if self.teacher_samples_per_item < 1:
            raise ConfigError("dataset.rejection.teacher_samples_per_item must be >= 1")
        if not 0.0 < self.accept_reward_min <= 1.0:
            raise ConfigError(
                f"dataset.rejection.accept_reward_min must be in (0, 1], got {self.accept_reward_min}"
            )
        if not 1 <= self.keep_per_item <= self.teacher_samples_per_item:
            raise ConfigError(
                "dataset.rejection.keep_per_item must be in [1, teacher_samples_per_item]"
            )


@dataclass
class ItemDisposition:
    item_id: str
    task_kind: str
    disposition: str
    n_pass: int = 0
    n_candidates: int = 0
    kept_indices: List[int] = field(default_factory=list)
    reason: str = ""

    def to_record(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class CorpusBuild:
    records: List[CorpusRecord]
    ledger: List[ItemDisposition]

    def counts(self) -> Dict[str, int]:
        counts = {name: 0 for name in DISPOSITIONS}
        for entry in self.ledger:
            counts[entry.disposition] += 1
        return counts


# ============================================================================
# Teacher
# ============================================================================


@dataclass
class SimulatedTeacher:
    """Noisy, biased stand-in for a strong multimodal teacher.

    ``failure_rate`` makes the teacher fail on a random share of calls.
    """

    vocab: Vocabulary
    noise: float = 0.4
    task_bias: Dict[str, float] = field(
        default_factory=lambda: {"technical": 0.0, "aesthetic": 0.1, "alignment": -0.1}
    )
    reason_len: int = 6
    plan_len: int = 3
    failure_rate: float = 0.0

    def __post_init__(self):
        if self.noise < 0:
            raise ConfigError(f"dataset.teacher.noise must be >= 0, got {self.noise}")
        if not 0.0 <= self.failure_rate < 1.0:
            raise ConfigError("dataset.teacher.failure_rate must be in [0, 1)")
        if self.reason_len < 0 or self.plan_len < 1:
            raise ConfigError("dataset.teacher.reason_len must be >= 0 and plan_len >= 1")

    def plan(self, item: ScoreItem, rng: np.random.Generator) -> List[str]:
        steps = PLAN_STEPS[item.task_kind]
        order = rng.permutation(len(steps))[: min(self.plan_len, len(steps))]
        return [f"Assess {steps[i]}." for i in order]

    def reason(self, item: ScoreItem, plan: List[str], rng: np.random.Generator) -> List[int]:
        # leading tokens follow the plan, the rest are free
        steps = PLAN_STEPS[item.task_kind]
        anchored = [
            next(i for i, s in enumerate(steps) if step == f"Assess {s}.") % self.vocab.reason_tokens
            for step in plan
        ][: self.reason_len]
        free = rng.integers(0, self.vocab.reason_tokens, size=self.reason_len - len(anchored))
        return anchored + [int(t) for t in free]

    def score(self, item: ScoreItem, rng: np.random.Generator) -> float:
        raw = item.truth_score + self.task_bias.get(item.task_kind, 0.0)
        if self.noise > 0:
            raw += self.noise * rng.normal()
        return self.vocab.snap(raw)

    def check_available(self, item: ScoreItem, rng: np.random.Generator) -> None:
        if self.failure_rate > 0 and rng.random() < self.failure_rate:
            raise TeacherError(f"Teacher failed on item {item.item_id}")


def generate_candidates(
    item: ScoreItem, teacher: SimulatedTeacher, k: int, rng: np.random.Generator
) -> List[PlanReasonRecord]:
    """``k`` independent plan-then-reason candidates for one item."""
    if k < 1:
        raise ContractError(f"K must be >= 1, got {k}")
    teacher.check_available(item, rng)
    question = QUESTION_TEMPLATES[item.task_kind]
    candidates = []
    for index in range(k):
        plan = teacher.plan(item, rng)
        candidates.append(
            PlanReasonRecord(
                item_id=item.item_id,
                task_kind=item.task_kind,
                question=question,
                plan=plan,
                reasoning_tokens=teacher.reason(item, plan, rng),
                final_score=teacher.score(item, rng),
                candidate_index=index,
            )
        )
    return candidates


# ============================================================================
# Rejective filtering
# ============================================================================


def _dispose(
    item: ScoreItem,
    candidates: List[PlanReasonRecord],
    policy: RejectionPolicy,
    reward_spec: RewardSpec,
) -> Tuple[List[CorpusRecord], ItemDisposition]:
    rewards = [
        gaussian_reward(c.final_score, item.truth_score, reward_spec.sigma) for c in candidates
    ]
    passing = [i for i, r in enumerate(rewards) if r >= policy.accept_reward_min]
    entry = ItemDisposition(
        item_id=item.item_id,
        task_kind=item.task_kind,
        disposition="kept",
        n_pass=len(passing),
        n_candidates=len(candidates),
    )
    if len(passing) == len(candidates):
        entry.disposition = "easy"
        return [], entry
    if not passing:
        entry.disposition = "hard"
        return [], entry
    chosen = sorted(passing, key=lambda i: (-rewards[i], i))[: policy.keep_per_item]
    entry.kept_indices = chosen
    return [candidates[i].to_training() for i in chosen], entry


def filter_items(
    candidates: Sequence[Tuple[ScoreItem, List[PlanReasonRecord]]],
    policy: RejectionPolicy,
    reward_spec: RewardSpec,
) -> Tuple[List[CorpusRecord], List[ItemDisposition]]:
    """Drop easy and hard items and export the best passing candidates of the rest.

    A candidate passes when its Gaussian reward against the item's truth is at
    least ``accept_reward_min``. Kept candidates are ranked by reward, then
    by candidate index.
    """
    records: List[CorpusRecord] = []
    ledger: List[ItemDisposition] = []
    for item, item_candidates in candidates:
        if any(c.item_id != item.item_id for c in item_candidates):
            raise ContractError(f"Candidates for {item.item_id} are not grouped by item")
        kept, entry = _dispose(item, item_candidates, policy, reward_spec)
        records.extend(kept)
        ledger.append(entry)
    return records, ledger


def _build_one(item, teacher, policy, reward_spec, seed_seq):
    rng = np.random.default_rng(seed_seq)
    try:
        candidates = generate_candidates(item, teacher, policy.teacher_samples_per_item, rng)
    except TeacherError as e:
        logger.warning(f"Skipping {item.item_id}: {e}")
        return [], ItemDisposition(
            item_id=item.item_id, task_kind=item.task_kind, disposition="skipped", reason=str(e)
        )
    return _dispose(item, candidates, policy, reward_spec)


def build_corpus(
    items: Sequence[ScoreItem],
    teacher: SimulatedTeacher,
    policy: RejectionPolicy,
    reward_spec: RewardSpec,
    seed: int,
    workers: int = 1,
) -> CorpusBuild:
    """Generate, filter and collect records for every item.

    Each item draws from its own spawned RNG stream and results are
    assembled in item order, so the corpus does not depend on ``workers``.
    """
    seeds = np.random.SeedSequence(seed).spawn(len(items))
    results: List[Optional[Tuple[List[CorpusRecord], ItemDisposition]]] = [None] * len(items)
    if workers <= 1:
        for index, (item, seed_seq) in enumerate(
            tqdm(list(zip(items, seeds)), desc="corpus", unit="item", leave=False, disable=None)
        ):
            results[index] = _build_one(item, teacher, policy, reward_spec, seed_seq)
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
            future_to_index = {
                executor.submit(_build_one, item, teacher, policy, reward_spec, seed_seq): index
                for index, (item, seed_seq) in enumerate(zip(items, seeds))
            }
            for future in concurrent.futures.as_completed(future_to_index):
                results[future_to_index[future]] = future.result()

    build = CorpusBuild(records=[], ledger=[])
    for kept, entry in results:
        build.records.extend(kept)
        build.ledger.append(entry)

    counts = build.counts()
    logger.info(
        f"Corpus: {len(build.records)} records from {counts['kept']} items "
        f"(easy {counts['easy']}, hard {counts['hard']}, skipped {counts['skipped']})"
    )
    if items and counts["hard"] > len(items) / 2:
        logger.warning(
            f"{counts['hard']} of {len(items)} items were hard-dropped; "
            f"accept_reward_min={policy.accept_reward_min} may be too strict for this teacher"
        )
    return build


# ============================================================================
# Files
# ============================================================================


def manifest_path(corpus_path: Path) -> Path:
    corpus_path = Path(corpus_path)
    return corpus_path.with_name(f"{corpus_path.stem}.manifest.json")


def export_corpus(
    records: Sequence[CorpusRecord],
    path: Path,
    ledger: Optional[Sequence[ItemDisposition]] = None,
    config_hash: str = "",
) -> Dict[str, Any]:
    """Write the corpus as JSONL plus a manifest of counts; returns the manifest."""
    path = Path(path)
    write_jsonl(path, (record.to_record() for record in records))
    per_task = {task: 0 for task in TASK_KINDS}
    for record in records:
        per_task[record.task_kind] += 1
    per_disposition = {name: 0 for name in DISPOSITIONS}
    for entry in ledger or ():
        per_disposition[entry.disposition] += 1
    manifest = {
        "config_hash": config_hash,
        "corpus": path.name,
        "n_records": len(records),
        "n_items": len(ledger) if ledger is not None else 0,
        "per_task": per_task,
        "per_disposition": per_disposition,
    }
    write_json(manifest_path(path), manifest)
    logger.info(f"Corpus written: {path} ({len(records)} records)")
    return manifest


def load_corpus(path: Path) -> List[CorpusRecord]:
    return [CorpusRecord.from_record(record) for record in read_jsonl(path)]


def corpus_to_sft(
    records: Sequence[CorpusRecord], items: Dict[str, ScoreItem], vocab: Vocabulary
) -> List[Tuple[ScoreItem, np.ndarray]]:
    """Pair every record with its item for supervised fitting."""
    pairs = []
    for record in records:
        if record.item_id not in items:
            raise DataError(f"Corpus record refers to unknown item {record.item_id!r}")
        pairs.append((items[record.item_id], record.tokens(vocab)))
    return pairs


def write_items(path: Path, items: Sequence[ToyItem]) -> int:
    return write_jsonl(path, (item.to_record() for item in items))


def read_items(path: Path) -> List[ToyItem]:
    try:
        return [ToyItem.from_record(record) for record in read_jsonl(path)]
    except (KeyError, ValueError, TypeError) as e:
        raise DataError(f"Malformed item file {path}: {e}") from e
