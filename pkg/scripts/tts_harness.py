#!/usr/bin/env python3
"""
Reward-guided test-time scaling for generation.

``best_of_n`` draws N candidates for a prompt, scores each on the configured
task kinds, combines the scores and keeps the argmax. ``reflect_loop`` then
repeatedly turns the running best's scores into textual feedback, asks the
generator for a refined candidate and keeps whichever is better.

Generators and scorers are reached through small client protocols. HTTP
clients talk to remote services; the mock clients are deterministic
in-process stand-ins driven by a seeded latent quality.

Author: QRTune Team
Version: 1.0.0
"""

import concurrent.futures
import logging
import threading
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import requests
from tqdm import tqdm

from qrt_core import TASK_KINDS, ConfigError, ContractError, QrtError, write_jsonl

logger = logging.getLogger(__name__)

COMBINER_KINDS = ("mean", "weighted", "single")


class ClientError(QrtError):
    """A generator or scorer request failed."""

    exit_code = 3


class SelectionError(QrtError):
    """Every candidate for a prompt failed."""

    exit_code = 3


# ============================================================================
# Types
# ============================================================================


@dataclass(frozen=True)
class Prompt:
    prompt_id: str
    text: str


@dataclass(frozen=True)
class Feedback:
    text: str
    base_handle: str
    scores: Dict[str, float]
    round: int


@dataclass
class Candidate:
    prompt_id: str
    handle: str
    scores: Dict[str, float]
    combined: float
    generation_round: int = 0
    candidate_index: int = 0


@dataclass(frozen=True)
class Combiner:
    """``mean`` over ``tasks``, ``weighted`` by ``weights`` or ``single`` ``task``."""

    kind: str = "mean"
    tasks: Tuple[str, ...] = ("aesthetic", "technical")
    weights: Dict[str, float] = field(default_factory=dict)
    task: Optional[str] = None

    def __post_init__(self):
        if self.kind not in COMBINER_KINDS:
            raise ConfigError(f"tts.combiner.kind must be one of {COMBINER_KINDS}, got {self.kind!r}")
        object.__setattr__(self, "tasks", tuple(self.tasks))
        unknown = [t for t in (*self.tasks, *self.weights, self.task) if t and t not in TASK_KINDS]
        if unknown:
            raise ConfigError(f"tts.combiner refers to unknown task kinds: {unknown}")
        if self.kind == "mean" and not self.tasks:
            raise ConfigError("tts.combiner.tasks must not be empty")
        if self.kind == "weighted":
            if any(w < 0 for w in self.weights.values()) or sum(self.weights.values()) <= 0:
                raise ConfigError("tts.combiner.weights must be non-negative with a positive sum")
        if self.kind == "single" and self.task is None:
            raise ConfigError("tts.combiner.task is required for the single combiner")

    @property
    def required_tasks(self) -> Tuple[str, ...]:
        if self.kind == "mean":
            return self.tasks
        if self.kind == "weighted":
            return tuple(t for t, w in self.weights.items() if w > 0)
        return (self.task,)

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "tasks": list(self.tasks), "weights": dict(self.weights), "task": self.task}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Combiner":
        return cls(**data)


def combine_scores(scores: Dict[str, float], combiner: Combiner) -> float:
    missing = [t for t in combiner.required_tasks if t not in scores]
    if missing:
        raise ContractError(f"Missing scores for {missing}")
    if combiner.kind == "mean":
        return sum(scores[t] for t in combiner.tasks) / len(combiner.tasks)
    if combiner.kind == "weighted":
        active = combiner.required_tasks
        total = sum(combiner.weights[t] for t in active)
        return sum(combiner.weights[t] * scores[t] for t in active) / total
    return float(scores[combiner.task])


def default_feedback(best: Candidate, round_index: int) -> Feedback:
    """Name every score and ask for the weakest aspect to be improved."""
    parts = ", ".join(f"{task} {value:.2f}" for task, value in sorted(best.scores.items()))
    weakest = min(sorted(best.scores), key=lambda t: best.scores[t])
    return Feedback(
        text=f"Round {round_index}: current scores {parts}. Improve the {weakest} quality.",
        base_handle=best.handle,
        scores=dict(best.scores),
        round=round_index,
    )


@dataclass
class TtsConfig:
    n: int = 20
    combiner: Combiner = field(default_factory=Combiner)
    reflection_rounds: int = 20
    retries: int = 2
    backoff_seconds: float = 0.5
    max_consecutive_failures: int = 3
    workers: int = 1
    feedback_builder: Callable[[Candidate, int], Feedback] = default_feedback

    def __post_init__(self):
        if isinstance(self.combiner, dict):
            self.combiner = Combiner.from_dict(self.combiner)
        if self.n < 1:
            raise ConfigError(f"tts.n must be >= 1, got {self.n}")
        if self.reflection_rounds < 0 or self.retries < 0 or self.backoff_seconds < 0:
            raise ConfigError("tts.reflection_rounds, retries and backoff_seconds must be >= 0")
        if self.max_consecutive_failures < 1:
            raise ConfigError("tts.max_consecutive_failures must be >= 1")


# ============================================================================
# Clients
# ============================================================================


class GeneratorClient(Protocol):
    def generate(
        self, prompt: Prompt, feedback: Optional[Feedback], candidate_index: int, round_index: int
    ) -> str: ...


class ScorerClient(Protocol):
    def score(self, handle: str, task_kind: str) -> float: ...


def with_retry(
    fn: Callable[[], Any],
    retries: int,
    backoff_seconds: float,
    sleep: Callable[[float], None] = time.sleep,
    description: str = "request",
) -> Any:
    """Call ``fn`` up to ``retries + 1`` times with exponential backoff."""
    for attempt in range(retries + 1):
        try:
            return fn()
        except (ClientError, requests.RequestException) as e:
            if attempt == retries:
                raise ClientError(f"{description} failed after {retries + 1} attempts: {e}") from e
            delay = backoff_seconds * (2**attempt)
            logger.debug(f"{description} failed ({e}), retrying in {delay:.2f}s")
            sleep(delay)


class _HttpClient:
    def __init__(self, base_url: str, timeout: float = 30.0, session: Optional[requests.Session] = None):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.session = session or requests.Session()

    def _post(self, path: str, payload: Dict[str, Any]) -> Dict[str, Any]:
        url = f"{self.base_url}/{path}"
        try:
            response = self.session.post(url, json=payload, timeout=self.timeout)
            response.raise_for_status()
            return response.json()
        except requests.RequestException as e:
            raise ClientError(f"POST {url}: {e}") from e
        except ValueError as e:
            raise ClientError(f"POST {url}: invalid JSON response ({e})") from e


class HttpGeneratorClient(_HttpClient):
    """``POST {base}/generate`` returning ``{"handle": ...}``."""

    def generate(self, prompt, feedback, candidate_index, round_index):
        payload = {
            "prompt_id": prompt.prompt_id,
            "prompt": prompt.text,
            "candidate_index": candidate_index,
            "round": round_index,
            "feedback": None
            if feedback is None
            else {"text": feedback.text, "base_handle": feedback.base_handle, "scores": feedback.scores},
        }
        data = self._post("generate", payload)
        if "handle" not in data:
            raise ClientError(f"generate response without handle: {data!r}")
        return str(data["handle"])


class HttpScorerClient(_HttpClient):
    """``POST {base}/score`` returning ``{"score": ...}``."""

    def score(self, handle, task_kind):
        data = self._post("score", {"handle": handle, "task_kind": task_kind})
        try:
            return float(data["score"])
        except (KeyError, TypeError, ValueError) as e:
            raise ClientError(f"score response without numeric score: {data!r}") from e


# ============================================================================
# Mock clients
# ============================================================================


class MockWorld:
    """Latent quality of every generated artifact.

    Fresh generations draw a quality from a stream keyed by
    ``(seed, prompt, round, index)``; feedback-conditioned generations move
    the base artifact's quality by ``delta`` (negative worsens), clipped to
    the score range.
    """

    def __init__(
        self,
        seed: int = 0,
        score_range: Tuple[float, float] = (1.0, 5.0),
        delta: float = 0.2,
        spread: float = 0.8,
        task_offsets: Optional[Dict[str, float]] = None,
        failure_rate: float = 0.0,
    ) -> None:
        self.seed = seed
        self.score_min, self.score_max = score_range
        self.delta = delta
        self.spread = spread
        self.task_offsets = task_offsets or {}
        self.failure_rate = failure_rate
        self._quality: Dict[str, float] = {}
        self._lock = threading.Lock()

    def _rng(self, prompt_id: str, round_index: int, index: int, salt: int = 0) -> np.random.Generator:
        return np.random.default_rng(
            [self.seed, zlib.crc32(prompt_id.encode("utf-8")), round_index, index, salt]
        )

    def clip(self, value: float) -> float:
        return min(max(value, self.score_min), self.score_max)

    def create(self, prompt_id: str, round_index: int, index: int, base: Optional[str]) -> str:
        if self.failure_rate > 0 and self._rng(prompt_id, round_index, index, 1).random() < self.failure_rate:
            raise ClientError(f"mock generator failed on {prompt_id} round {round_index} #{index}")
        handle = f"{prompt_id}/r{round_index}/c{index}"
        if base is None:
            middle = 0.5 * (self.score_min + self.score_max)
            quality = self.clip(middle + self.spread * self._rng(prompt_id, round_index, index).normal())
        else:
            quality = self.clip(self.quality(base) + self.delta)
        with self._lock:
            self._quality[handle] = quality
        return handle

    def quality(self, handle: str) -> float:
        with self._lock:
            if handle not in self._quality:
                raise ClientError(f"Unknown artifact handle {handle!r}")
            return self._quality[handle]


class MockGenerator:
    def __init__(self, world: MockWorld) -> None:
        self.world = world

    def generate(self, prompt, feedback, candidate_index, round_index):
        base = feedback.base_handle if feedback is not None else None
        return self.world.create(prompt.prompt_id, round_index, candidate_index, base)


class MockScorer:
    def __init__(self, world: MockWorld) -> None:
        self.world = world

    def score(self, handle, task_kind):
        return self.world.clip(self.world.quality(handle) + self.world.task_offsets.get(task_kind, 0.0))


def make_mock_prompts(n: int, seed: int = 0) -> List[Prompt]:
    subjects = ["a red bicycle", "two cats on a sofa", "a lighthouse at dusk", "a bowl of fruit"]
    return [Prompt(f"prompt-{i:03d}", f"A photo of {subjects[(i + seed) % len(subjects)]}") for i in range(n)]


# ============================================================================
# Selection
# ============================================================================


class TranscriptLog:
    """Line-delimited record of every scored candidate and the selection made."""

    def __init__(self) -> None:
        self.records: List[Dict[str, Any]] = []

    def add(self, candidate: Candidate, chosen: bool) -> None:
        self.records.append(
            {
                "prompt_id": candidate.prompt_id,
                "round": candidate.generation_round,
                "candidate_index": candidate.candidate_index,
                "scores": dict(candidate.scores),
                "combined": candidate.combined,
                "chosen": chosen,
                "random_pick": False,
            }
        )

    def mark_random_pick(self, candidate: Candidate) -> None:
        for record in self.records:
            if (
                record["prompt_id"] == candidate.prompt_id
                and record["round"] == candidate.generation_round
                and record["candidate_index"] == candidate.candidate_index
            ):
                record["random_pick"] = True
                return
        raise ContractError(f"{candidate.prompt_id}: random pick is not a logged candidate")

    def write(self, path: Path, config_hash: str = "") -> Path:
        write_jsonl(path, ({**record, "config_hash": config_hash} for record in self.records))
        return Path(path)


def _make_candidate(prompt, generator, scorer, cfg, index, round_index, feedback) -> Candidate:
    label = f"{prompt.prompt_id} round {round_index} #{index}"
    handle = with_retry(
        lambda: generator.generate(prompt, feedback, index, round_index),
        cfg.retries,
        cfg.backoff_seconds,
        description=f"generate {label}",
    )
    scores = {}
    for task in cfg.combiner.required_tasks:
        scores[task] = float(
            with_retry(
                lambda: scorer.score(handle, task),
                cfg.retries,
                cfg.backoff_seconds,
                description=f"score {task} {label}",
            )
        )
    return Candidate(
        prompt_id=prompt.prompt_id,
        handle=handle,
        scores=scores,
        combined=combine_scores(scores, cfg.combiner),
        generation_round=round_index,
        candidate_index=index,
    )


def _try_candidate(*args) -> Optional[Candidate]:
    try:
        return _make_candidate(*args)
    except ClientError as e:
        logger.warning(f"Candidate dropped: {e}")
        return None


def best_of_n(
    prompt: Prompt,
    generator: GeneratorClient,
    scorer: ScorerClient,
    cfg: TtsConfig,
    transcript: Optional[TranscriptLog] = None,
) -> Tuple[Candidate, List[Candidate]]:
    """Highest combined score among N candidates; lowest index wins ties."""
    slots: List[Optional[Candidate]] = [None] * cfg.n
    if cfg.workers <= 1:
        for index in range(cfg.n):
            slots[index] = _try_candidate(prompt, generator, scorer, cfg, index, 0, None)
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=cfg.workers) as executor:
            future_to_index = {
                executor.submit(_try_candidate, prompt, generator, scorer, cfg, index, 0, None): index
                for index in range(cfg.n)
            }
            for future in concurrent.futures.as_completed(future_to_index):
                slots[future_to_index[future]] = future.result()

    candidates = [c for c in slots if c is not None]
    if not candidates:
        raise SelectionError(f"All {cfg.n} candidates failed for {prompt.prompt_id}")
    winner = candidates[0]
    for candidate in candidates[1:]:
        if candidate.combined > winner.combined:
            winner = candidate
    if transcript is not None:
        for candidate in candidates:
            transcript.add(candidate, candidate is winner)
    return winner, candidates


def reflect_loop(
    prompt: Prompt,
    seed_winner: Candidate,
    generator: GeneratorClient,
    scorer: ScorerClient,
    cfg: TtsConfig,
    transcript: Optional[TranscriptLog] = None,
) -> Candidate:
    """Refine from feedback for ``reflection_rounds`` rounds, keeping the best.

    A failed round is skipped; ``max_consecutive_failures`` failures in a row
    stop the loop early.
    """
    best = seed_winner
    failures = 0
    for round_index in range(1, cfg.reflection_rounds + 1):
        feedback = cfg.feedback_builder(best, round_index)
        candidate = _try_candidate(prompt, generator, scorer, cfg, 0, round_index, feedback)
        if candidate is None:
            failures += 1
            if failures >= cfg.max_consecutive_failures:
                logger.warning(
                    f"{prompt.prompt_id}: {failures} consecutive reflection failures, "
                    f"stopping after round {round_index}"
                )
                break
            continue
        failures = 0
        improved = candidate.combined > best.combined
        if improved:
            best = candidate
        if transcript is not None:
            transcript.add(candidate, improved)
    return best


def random_pick(candidates: Sequence[Candidate], rng: np.random.Generator) -> Candidate:
    """Selection without a reward model."""
    if not candidates:
        raise ContractError("random_pick needs at least one candidate")
    return candidates[int(rng.integers(len(candidates)))]


@dataclass
class SelectionResult:
    prompt_id: str
    best_of_n: Candidate
    reflected: Candidate
    random: Candidate


def run_selection(
    prompts: Sequence[Prompt],
    generator: GeneratorClient,
    scorer: ScorerClient,
    cfg: TtsConfig,
    transcript: Optional[TranscriptLog] = None,
    seed: int = 0,
) -> List[SelectionResult]:
    """Best-of-N followed by reflection for every prompt, in prompt order.

    A reward-free random pick from the same N candidates is kept as the
    baseline; its draw depends only on ``seed`` and the prompt id.
    """
    results = []
    for prompt in tqdm(prompts, desc="select", unit="prompt", leave=False, disable=None):
        winner, candidates = best_of_n(prompt, generator, scorer, cfg, transcript)
        rng = np.random.default_rng([seed, zlib.crc32(prompt.prompt_id.encode("utf-8"))])
        baseline = random_pick(candidates, rng)
        if transcript is not None:
            transcript.mark_random_pick(baseline)
        final = reflect_loop(prompt, winner, generator, scorer, cfg, transcript)
        logger.debug(
            f"{prompt.prompt_id}: random {baseline.combined:.3f}, best-of-{cfg.n} {winner.combined:.3f}"
            f" -> reflected {final.combined:.3f}"
        )
        results.append(SelectionResult(prompt.prompt_id, winner, final, baseline))
    return results
