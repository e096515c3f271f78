#!/usr/bin/env python3
"""
Reward shaping for score regression.

Turns a predicted score and a ground-truth score into a scalar reward, either
with the continuous Gaussian kernel used for training or with the binary
margin rule kept as the ablation baseline. All functions here are pure.
"""

import math
from dataclasses import asdict, dataclass
from typing import Any, Dict

from qrt_core import ConfigError, ContractError, DomainError, ScoreItem, Trajectory

REWARD_KINDS = ("gaussian", "threshold")


@dataclass(frozen=True)
class RewardSpec:
    """How a parsed score is turned into a reward.

    sigma and margin are in score units; format_penalty is the reward given
    to a response whose score could not be parsed.
    """

    kind: str = "gaussian"
    sigma: float = 0.8
    margin: float = 0.3
    format_penalty: float = 0.0

    def __post_init__(self):
        if self.kind not in REWARD_KINDS:
            raise ConfigError(f"reward.kind must be one of {REWARD_KINDS}, got {self.kind!r}")
        if not self.sigma > 0:
            raise ConfigError(f"reward.sigma must be > 0, got {self.sigma}")
        if not self.margin > 0:
            raise ConfigError(f"reward.margin must be > 0, got {self.margin}")
        if not -1.0 <= self.format_penalty <= 0.0:
            raise ConfigError(
                f"reward.format_penalty must be in [-1, 0], got {self.format_penalty}"
            )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RewardSpec":
        return cls(**data)


def _check_scores(pred: float, truth: float) -> None:
    if not (math.isfinite(pred) and math.isfinite(truth)):
        raise DomainError(f"Scores must be finite (pred={pred}, truth={truth})")


def gaussian_reward(pred: float, truth: float, sigma: float) -> float:
    """exp(-(pred - truth)^2 / (2 sigma^2)); 1 only for an exact hit."""
    if not sigma > 0:
        raise ConfigError(f"sigma must be > 0, got {sigma}")
    _check_scores(pred, truth)
    err = pred - truth
    return math.exp(-(err * err) / (2.0 * sigma * sigma))


def threshold_reward(pred: float, truth: float, margin: float) -> float:
    """1 when |pred - truth| < margin (boundary excluded), else 0."""
    if not margin > 0:
        raise ConfigError(f"margin must be > 0, got {margin}")
    _check_scores(pred, truth)
    return 1.0 if abs(pred - truth) < margin else 0.0


def score_reward(pred: float, truth: float, spec: RewardSpec) -> float:
    if spec.kind == "gaussian":
        return gaussian_reward(pred, truth, spec.sigma)
    return threshold_reward(pred, truth, spec.margin)


def reward_trajectory(traj: Trajectory, item: ScoreItem, spec: RewardSpec) -> float:
    """Reward for one sampled response; unparseable responses get the format penalty."""
    if traj.item_id != item.item_id:
        raise ContractError(
            f"Trajectory for {traj.item_id!r} scored against item {item.item_id!r}"
        )
    if traj.parsed_score is None:
        return float(spec.format_penalty)
    return score_reward(float(traj.parsed_score), float(item.truth_score), spec)
