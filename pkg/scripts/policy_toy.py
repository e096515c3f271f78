#!/usr/bin/env python3
"""
Toy score-prediction policies with exact log-probabilities and gradients.

A response is ``prefix_len`` reason tokens followed by one score token. Each
step is a categorical draw from the active head: the reason head ranges over
the reason tokens, the score head over the score grid. Policies condition on
the item's feature vector and on the previous token.

Two architectures are registered:

- ``tabular``: per-head bias, a linear feature table and a previous-token
  table, all summed into the logits.
- ``mlp``: a tanh feed-forward trunk over ``[features; onehot(prev)]`` feeding
  separate reason and score heads.

Both expose ``step_logits`` and ``step_backward`` (the vector-Jacobian product
of the logits), which is all the generic sampling, scoring, gradient and SFT
code below needs.
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, log_softmax
from tqdm import tqdm

from qrt_core import TASK_KINDS, ContractError, ScoreItem, Trajectory

logger = logging.getLogger(__name__)

REASON = "reason"
SCORE = "score"
_MAX_STEP_HALVINGS = 30


# ============================================================================
# Vocabulary
# ============================================================================


@dataclass(frozen=True)
class Vocabulary:
    """Reason tokens ``0..R-1`` followed by one token per score-grid point.

    The score token terminates a response. Context index ``R`` stands for the
    beginning of the response in the previous-token tables.
    """

    reason_tokens: int = 8
    score_min: float = 1.0
    score_max: float = 5.0
    score_step: float = 0.1

    def __post_init__(self):
        if self.reason_tokens < 1:
            raise ContractError("vocab.reason_tokens must be >= 1")
        if not self.score_step > 0 or not self.score_max > self.score_min:
            raise ContractError("vocab score grid must be strictly increasing")
        span = (self.score_max - self.score_min) / self.score_step
        if abs(span - round(span)) > 1e-6:
            raise ContractError("vocab score range must be a multiple of score_step")

    @property
    def n_scores(self) -> int:
        return int(round((self.score_max - self.score_min) / self.score_step)) + 1

    @property
    def size(self) -> int:
        return self.reason_tokens + self.n_scores

    @property
    def bos(self) -> int:
        return self.reason_tokens

    @property
    def n_contexts(self) -> int:
        return self.reason_tokens + 1

    @property
    def score_grid(self) -> np.ndarray:
        return np.round(self.score_min + self.score_step * np.arange(self.n_scores), 10)

    def head_size(self, head: str) -> int:
        return self.reason_tokens if head == REASON else self.n_scores

    def is_score_token(self, token: int) -> bool:
        return self.reason_tokens <= int(token) < self.size

    def decode(self, token: int) -> float:
        if not self.is_score_token(token):
            raise ContractError(f"Token {token} is not a score token")
        return float(self.score_grid[int(token) - self.reason_tokens])

    def encode(self, score: float) -> int:
        if not math.isfinite(float(score)):
            raise ContractError(f"Score {score} is not finite")
        index = int(round((float(score) - self.score_min) / self.score_step))
        if not 0 <= index < self.n_scores:
            raise ContractError(
                f"Score {score} outside grid [{self.score_min}, {self.score_max}]"
            )
        return self.reason_tokens + index

    def snap(self, score: float) -> float:
        """Nearest grid score, clipped to the grid range."""
        clipped = min(max(float(score), self.score_min), self.score_max)
        return self.decode(self.encode(clipped))

    def render(self, tokens: Sequence[int]) -> str:
        """Response text for a token sequence: ``r3 r0 ... SCORE: 3.4``."""
        words = [f"r{int(t)}" for t in tokens if not self.is_score_token(t)]
        if len(tokens) and self.is_score_token(tokens[-1]):
            words.append(f"SCORE: {self.decode(tokens[-1]):g}")
        return " ".join(words)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "reason_tokens": self.reason_tokens,
            "score_min": self.score_min,
            "score_max": self.score_max,
            "score_step": self.score_step,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Vocabulary":
        return cls(**data)


# ============================================================================
# Items
# ============================================================================


@dataclass(frozen=True)
class ToyItem(ScoreItem):
    """Synthetic item: a feature vector stands in for image and prompt."""

    features: np.ndarray = field(default=None, compare=False)

    def to_record(self) -> Dict[str, Any]:
        return {
            "item_id": self.item_id,
            "task": self.task_kind,
            "score": self.truth_score,
            "features": [float(v) for v in self.features],
        }

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "ToyItem":
        return cls(
            item_id=str(record["item_id"]),
            task_kind=record["task"],
            truth_score=float(record["score"]),
            features=np.asarray(record["features"], dtype=np.float64),
        )


@dataclass(frozen=True)
class ToyWorld:
    """Hidden affine-sigmoid map from features to truth scores."""

    vocab: Vocabulary
    weights: np.ndarray = field(compare=False)
    task_offsets: Dict[str, float] = field(default_factory=dict)

    @property
    def feature_dim(self) -> int:
        return int(self.weights.shape[0])

    def truth(self, features: np.ndarray, task_kind: str) -> float:
        logit = float(self.weights @ features) + self.task_offsets.get(task_kind, 0.0)
        span = self.vocab.score_max - self.vocab.score_min
        return self.vocab.snap(self.vocab.score_min + span * float(expit(logit)))


def make_toy_world(feature_dim: int, vocab: Vocabulary, seed: int) -> ToyWorld:
    rng = np.random.default_rng([seed, 7919])
    weights = rng.normal(0.0, 1.5 / math.sqrt(feature_dim), size=feature_dim)
    offsets = dict(zip(TASK_KINDS, (0.0, -0.3, 0.3)))
    return ToyWorld(vocab=vocab, weights=weights, task_offsets=offsets)


def make_toy_items(
    world: ToyWorld, n_items: int, seed: int, prefix: str = "item"
) -> List[ToyItem]:
    rng = np.random.default_rng(seed)
    features = rng.normal(size=(n_items, world.feature_dim))
    items = []
    for i in range(n_items):
        task = TASK_KINDS[i % len(TASK_KINDS)]
        items.append(
            ToyItem(
                item_id=f"{prefix}-{i:04d}",
                task_kind=task,
                truth_score=world.truth(features[i], task),
                features=features[i].copy(),
            )
        )
    return items


# ============================================================================
# Architectures
# ============================================================================


class ParamLayout:
    """Named, shaped views into one flat parameter vector."""

    def __init__(self, shapes: List[Tuple[str, Tuple[int, ...]]]):
        self.shapes = shapes
        self.offsets = {}
        offset = 0
        for name, shape in shapes:
            size = int(np.prod(shape))
            self.offsets[name] = (offset, offset + size, shape)
            offset += size
        self.size = offset

    def views(self, flat: np.ndarray) -> Dict[str, np.ndarray]:
        return {
            name: flat[start:stop].reshape(shape)
            for name, (start, stop, shape) in self.offsets.items()
        }


class ToyPolicy(ABC):
    """Architecture contract used by the generic policy functions."""

    name = ""

    @abstractmethod
    def layout(self, vocab: Vocabulary, feature_dim: int, hidden: Tuple[int, ...]) -> ParamLayout:
        """Parameter layout for this architecture."""

    @abstractmethod
    def init(self, params_layout: ParamLayout, rng: np.random.Generator, init_scale: float) -> np.ndarray:
        """Initial flat parameter vector."""

    @abstractmethod
    def step_logits(self, views, x: np.ndarray, prev: int, head: str) -> Tuple[np.ndarray, Any]:
        """Logits of the active head and a cache for ``step_backward``."""

    @abstractmethod
    def step_backward(self, views, x, prev, head, cache, g_logits, grad_views) -> None:
        """Accumulate ``J^T g_logits`` into ``grad_views``."""


class TabularSoftmaxPolicy(ToyPolicy):
    name = "tabular"

    def layout(self, vocab, feature_dim, hidden):
        r, s, b = vocab.reason_tokens, vocab.n_scores, vocab.n_contexts
        return ParamLayout(
            [
                ("reason_bias", (r,)),
                ("reason_feat", (r, feature_dim)),
                ("reason_prev", (b, r)),
                ("score_bias", (s,)),
                ("score_feat", (s, feature_dim)),
                ("score_prev", (b, s)),
            ]
        )

    def init(self, params_layout, rng, init_scale):
        return rng.normal(0.0, 1.0, size=params_layout.size) * init_scale

    def step_logits(self, views, x, prev, head):
        logits = views[f"{head}_bias"] + views[f"{head}_feat"] @ x + views[f"{head}_prev"][prev]
        return logits, None

    def step_backward(self, views, x, prev, head, cache, g_logits, grad_views):
        grad_views[f"{head}_bias"] += g_logits
        grad_views[f"{head}_feat"] += np.outer(g_logits, x)
        grad_views[f"{head}_prev"][prev] += g_logits


class FeedForwardPolicy(ToyPolicy):
    name = "mlp"

    def layout(self, vocab, feature_dim, hidden):
        if not hidden:
            raise ContractError("mlp policy needs at least one hidden layer")
        shapes = []
        fan_in = feature_dim + vocab.n_contexts
        for k, width in enumerate(hidden):
            shapes.append((f"trunk_w{k}", (width, fan_in)))
            shapes.append((f"trunk_b{k}", (width,)))
            fan_in = width
        shapes += [
            ("reason_w", (vocab.reason_tokens, fan_in)),
            ("reason_b", (vocab.reason_tokens,)),
            ("score_w", (vocab.n_scores, fan_in)),
            ("score_b", (vocab.n_scores,)),
        ]
        return ParamLayout(shapes)

    def init(self, params_layout, rng, init_scale):
        theta = np.zeros(params_layout.size)
        views = params_layout.views(theta)
        for name, (_, _, shape) in params_layout.offsets.items():
            if name.startswith("trunk_w"):
                views[name][...] = rng.normal(0.0, 1.0 / math.sqrt(shape[1]), size=shape)
            elif name.endswith("_w"):
                views[name][...] = rng.normal(0.0, 1.0, size=shape) * init_scale
        return theta

    def _n_layers(self, views):
        return sum(1 for name in views if name.startswith("trunk_w"))

    def step_logits(self, views, x, prev, head):
        n_contexts = views["trunk_w0"].shape[1] - x.shape[0]
        z = np.concatenate([x, np.eye(n_contexts)[prev]])
        activations = [z]
        for k in range(self._n_layers(views)):
            z = np.tanh(views[f"trunk_w{k}"] @ z + views[f"trunk_b{k}"])
            activations.append(z)
        logits = views[f"{head}_w"] @ z + views[f"{head}_b"]
        return logits, activations

    def step_backward(self, views, x, prev, head, cache, g_logits, grad_views):
        activations = cache
        grad_views[f"{head}_w"] += np.outer(g_logits, activations[-1])
        grad_views[f"{head}_b"] += g_logits
        g_a = views[f"{head}_w"].T @ g_logits
        for k in reversed(range(self._n_layers(views))):
            g_pre = g_a * (1.0 - activations[k + 1] ** 2)
            grad_views[f"trunk_w{k}"] += np.outer(g_pre, activations[k])
            grad_views[f"trunk_b{k}"] += g_pre
            g_a = views[f"trunk_w{k}"].T @ g_pre


ARCHITECTURES: Dict[str, ToyPolicy] = {
    TabularSoftmaxPolicy.name: TabularSoftmaxPolicy(),
    FeedForwardPolicy.name: FeedForwardPolicy(),
}


# ============================================================================
# Parameters
# ============================================================================


@dataclass(frozen=True, eq=False)
class PolicyParams:
    """Immutable parameter version of a toy policy.

    ``theta`` is stored read-only; updates go through ``with_theta``.
    """

    arch: str
    vocab: Vocabulary
    feature_dim: int
    theta: np.ndarray
    hidden: Tuple[int, ...] = ()
    version: int = 0

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ContractError(f"Unknown policy architecture: {self.arch!r}")
        hidden = tuple(int(h) for h in self.hidden) if self.arch == "mlp" else ()
        object.__setattr__(self, "hidden", hidden)
        theta = np.array(self.theta, dtype=np.float64).reshape(-1)
        expected = self.layout.size
        if theta.size != expected:
            raise ContractError(
                f"{self.arch} policy expects {expected} parameters, got {theta.size}"
            )
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @property
    def policy(self) -> ToyPolicy:
        return ARCHITECTURES[self.arch]

    @property
    def layout(self) -> ParamLayout:
        return ARCHITECTURES[self.arch].layout(self.vocab, self.feature_dim, self.hidden)

    def views(self) -> Dict[str, np.ndarray]:
        return self.layout.views(self.theta)

    def with_theta(self, theta: np.ndarray) -> "PolicyParams":
        return PolicyParams(
            arch=self.arch,
            vocab=self.vocab,
            feature_dim=self.feature_dim,
            theta=theta,
            hidden=self.hidden,
            version=self.version + 1,
        )

    def descriptor(self) -> Dict[str, Any]:
        return {
            "arch": self.arch,
            "hidden": list(self.hidden),
            "feature_dim": self.feature_dim,
            "vocab": self.vocab.to_dict(),
        }

    @classmethod
    def from_descriptor(cls, descriptor: Dict[str, Any], theta: np.ndarray, version: int = 0):
        return cls(
            arch=descriptor["arch"],
            vocab=Vocabulary.from_dict(descriptor["vocab"]),
            feature_dim=int(descriptor["feature_dim"]),
            theta=theta,
            hidden=tuple(descriptor.get("hidden", ())),
            version=version,
        )


def init_params(
    arch: str,
    vocab: Vocabulary,
    feature_dim: int,
    hidden: Sequence[int] = (16,),
    rng: Optional[np.random.Generator] = None,
    init_scale: float = 0.0,
) -> PolicyParams:
    """Fresh parameters; with ``init_scale=0`` every head starts uniform."""
    if arch not in ARCHITECTURES:
        raise ContractError(f"Unknown policy architecture: {arch!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    hidden = tuple(hidden) if arch == "mlp" else ()
    layout = ARCHITECTURES[arch].layout(vocab, feature_dim, hidden)
    theta = ARCHITECTURES[arch].init(layout, rng, init_scale)
    return PolicyParams(arch=arch, vocab=vocab, feature_dim=feature_dim, theta=theta, hidden=hidden)


# ============================================================================
# Generic policy operations
# ============================================================================


def _features(params: PolicyParams, item: ScoreItem) -> np.ndarray:
    x = getattr(item, "features", None)
    if x is None:
        raise ContractError(f"Item {item.item_id} carries no feature vector")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.feature_dim,):
        raise ContractError(
            f"Item {item.item_id} has {x.shape} features, policy expects ({params.feature_dim},)"
        )
    return x


def _check_tokens(vocab: Vocabulary, tokens: Sequence[int]) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size < 1:
        raise ContractError("Token sequence must be a non-empty 1-D sequence")
    if np.any(tokens < 0) or np.any(tokens >= vocab.size):
        raise ContractError(f"Token out of vocabulary (size {vocab.size}): {tokens.tolist()}")
    if not vocab.is_score_token(tokens[-1]):
        raise ContractError("Token sequence must end with a score token")
    if np.any(tokens[:-1] >= vocab.reason_tokens):
        raise ContractError("Only the final token may be a score token")
    return tokens


def _head_index(vocab: Vocabulary, head: str, token: int) -> int:
    return int(token) - vocab.reason_tokens if head == SCORE else int(token)


def _entropy(logp: np.ndarray) -> float:
    return max(0.0, float(-np.sum(np.exp(logp) * logp)))


def _steps(n_tokens: int):
    """(position, head) for a response of ``n_tokens`` tokens."""
    for t in range(n_tokens):
        yield t, (SCORE if t == n_tokens - 1 else REASON)


def sample(
    params: PolicyParams, item: ScoreItem, prefix_len: int, rng: np.random.Generator
) -> Trajectory:
    """Draw ``prefix_len`` reason tokens then one score token."""
    if prefix_len < 0:
        raise ContractError(f"prefix_len must be >= 0, got {prefix_len}")
    x = _features(params, item)
    vocab = params.vocab
    views = params.views()
    tokens, logps, entropies = [], [], []
    prev = vocab.bos
    for _, head in _steps(prefix_len + 1):
        logits, _ = params.policy.step_logits(views, x, prev, head)
        logp = log_softmax(logits)
        cdf = np.cumsum(np.exp(logp))
        k = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), cdf.size - 1)
        token = k + vocab.reason_tokens if head == SCORE else k
        tokens.append(token)
        logps.append(logp[k])
        entropies.append(_entropy(logp))
        prev = token
    return Trajectory(
        item_id=item.item_id,
        tokens=np.asarray(tokens),
        logp_old=np.asarray(logps),
        entropy=np.asarray(entropies),
        parsed_score=vocab.decode(tokens[-1]),
    )


def logprob_and_entropy(
    params: PolicyParams, item: ScoreItem, tokens: Sequence[int]
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-token log-probabilities and categorical entropies of ``tokens``."""
    tokens = _check_tokens(params.vocab, tokens)
    x = _features(params, item)
    views = params.views()
    logps = np.empty(tokens.size)
    entropies = np.empty(tokens.size)
    prev = params.vocab.bos
    for t, head in _steps(tokens.size):
        logits, _ = params.policy.step_logits(views, x, prev, head)
        logp = log_softmax(logits)
        logps[t] = logp[_head_index(params.vocab, head, tokens[t])]
        entropies[t] = _entropy(logp)
        prev = int(tokens[t])
    return logps, entropies


def grad_logprob(
    params: PolicyParams,
    item: ScoreItem,
    tokens: Sequence[int],
    token_weights: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Gradient of ``sum_t w_t * logp[t]`` w.r.t. the flat parameter vector.

    With ``token_weights=None`` every weight is 1.
    """
    tokens = _check_tokens(params.vocab, tokens)
    if token_weights is None:
        token_weights = np.ones(tokens.size)
    token_weights = np.asarray(token_weights, dtype=np.float64)
    if token_weights.shape != tokens.shape:
        raise ContractError("token_weights must match the token sequence length")
    x = _features(params, item)
    layout = params.layout
    views = layout.views(params.theta)
    grad = np.zeros(layout.size)
    grad_views = layout.views(grad)
    prev = params.vocab.bos
    for t, head in _steps(tokens.size):
        weight = token_weights[t]
        if weight != 0.0:
            logits, cache = params.policy.step_logits(views, x, prev, head)
            g_logits = -np.exp(log_softmax(logits))
            g_logits[_head_index(params.vocab, head, tokens[t])] += 1.0
            params.policy.step_backward(
                views, x, prev, head, cache, weight * g_logits, grad_views
            )
        prev = int(tokens[t])
    return grad


def greedy_decode(params: PolicyParams, item: ScoreItem, prefix_len: int) -> np.ndarray:
    """Most likely token at every step (lowest index on ties)."""
    x = _features(params, item)
    views = params.views()
    tokens = []
    prev = params.vocab.bos
    for _, head in _steps(prefix_len + 1):
        logits, _ = params.policy.step_logits(views, x, prev, head)
        k = int(np.argmax(logits))
        token = k + params.vocab.reason_tokens if head == SCORE else k
        tokens.append(token)
        prev = token
    return np.asarray(tokens, dtype=np.int64)


def expected_score(params: PolicyParams, item: ScoreItem, prefix: Sequence[int]) -> float:
    """Mean of the score head's distribution after the given reason prefix."""
    x = _features(params, item)
    prev = int(prefix[-1]) if len(prefix) else params.vocab.bos
    logits, _ = params.policy.step_logits(params.views(), x, prev, SCORE)
    return float(np.exp(log_softmax(logits)) @ params.vocab.score_grid)


# ============================================================================
# Supervised fitting
# ============================================================================


def _corpus_nll_and_grad(params, corpus):
    n_tokens = sum(len(tokens) for _, tokens in corpus)
    total_logp = 0.0
    grad = np.zeros(params.theta.size)
    for item, tokens in corpus:
        logps, _ = logprob_and_entropy(params, item, tokens)
        total_logp += float(np.sum(logps))
        grad += grad_logprob(params, item, tokens)
    return -total_logp / n_tokens, grad / n_tokens


def sequence_nll(params: PolicyParams, corpus: Sequence[Tuple[ScoreItem, Sequence[int]]]) -> float:
    """Mean per-token negative log-likelihood of a corpus."""
    if not corpus:
        raise ContractError("Corpus is empty")
    n_tokens = sum(len(tokens) for _, tokens in corpus)
    total = sum(float(np.sum(logprob_and_entropy(params, item, tokens)[0])) for item, tokens in corpus)
    return -total / n_tokens


def sft_fit(
    params: PolicyParams,
    trajectories: Sequence[Tuple[ScoreItem, Sequence[int]]],
    epochs: int,
    lr: float,
    history: Optional[List[float]] = None,
) -> PolicyParams:
    """Full-batch gradient ascent on mean token log-likelihood.

    A step that would raise the corpus NLL is halved until it does not, and
    the smaller step is kept for later epochs, so the NLL never increases.
    When ``history`` is given, the corpus NLL before every epoch's update is
    appended to it.
    """
    if not trajectories:
        raise ContractError("sft_fit needs a non-empty corpus")
    step = lr
    nll, grad = _corpus_nll_and_grad(params, trajectories)
    for epoch in tqdm(range(epochs), desc="SFT", unit="epoch", leave=False, disable=None):
        if history is not None:
            history.append(nll)
        logger.debug(f"SFT epoch {epoch + 1}/{epochs}: nll={nll:.6f} step={step:.4g}")
        for _ in range(_MAX_STEP_HALVINGS + 1):
            candidate = params.with_theta(params.theta + step * grad)
            candidate_nll, candidate_grad = _corpus_nll_and_grad(candidate, trajectories)
            if candidate_nll <= nll:
                params, nll, grad = candidate, candidate_nll, candidate_grad
                break
            step *= 0.5
        else:
            logger.debug(f"SFT epoch {epoch + 1}: no step lowers the NLL, keeping parameters")
    return params
