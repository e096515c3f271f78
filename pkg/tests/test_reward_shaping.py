import math
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT_DIR = Path(__file__).resolve().parents[1]
SCRIPTS_DIR = ROOT_DIR / "scripts"
if str(SCRIPTS_DIR) not in sys.path:
    sys.path.insert(0, str(SCRIPTS_DIR))

from qrt_core import ConfigError, ContractError, DomainError, ScoreItem, Trajectory
from reward_shaping import (
    RewardSpec,
    gaussian_reward,
    reward_trajectory,
    score_reward,
    threshold_reward,
)


def _traj(item_id="a", parsed_score=3.0):
    return Trajectory(
        item_id=item_id,
        tokens=[0, 9],
        logp_old=[-1.0, -2.0],
        entropy=[0.5, 0.7],
        parsed_score=parsed_score,
    )


def test_gaussian_reward_one_sigma_below_peak():
    assert gaussian_reward(3.8, 3.0, 0.8) == pytest.approx(math.exp(-0.5), abs=1e-12)


def test_gaussian_reward_is_one_on_exact_hit():
    rng = np.random.default_rng(0)
    for s, sigma in zip(rng.uniform(-10, 10, 1000), rng.uniform(1e-3, 5, 1000)):
        assert gaussian_reward(float(s), float(s), float(sigma)) == 1.0


def test_gaussian_reward_is_symmetric_and_decreasing():
    rewards = [gaussian_reward(3.0 + d, 3.0, 0.8) for d in (0.0, 0.25, 0.5, 1.0, 2.0)]
    assert rewards == sorted(rewards, reverse=True)
    assert gaussian_reward(2.5, 3.0, 0.8) == gaussian_reward(3.5, 3.0, 0.8)
    assert 0.0 < gaussian_reward(5.0, 1.0, 0.8) < 1.0


def test_gaussian_reward_depends_only_on_error_over_sigma():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        pred, truth = rng.uniform(1.0, 5.0, 2)
        sigma = rng.uniform(0.1, 2.0)
        c = rng.uniform(0.05, 20.0)
        assert gaussian_reward(pred / c, truth / c, sigma / c) == pytest.approx(
            gaussian_reward(pred, truth, sigma), rel=1e-9, abs=1e-300
        )


def test_gaussian_reward_is_positive_wherever_threshold_reward_is_zero():
    rng = np.random.default_rng(12)
    misses = 0
    for _ in range(2000):
        pred, truth = rng.uniform(1.0, 5.0, 2)
        width = rng.uniform(0.2, 1.5)
        if threshold_reward(pred, truth, width) == 0.0:
            misses += 1
            assert gaussian_reward(pred, truth, width) > 0.0
    assert misses > 500


def test_rewards_never_increase_with_absolute_error():
    rng = np.random.default_rng(13)
    for _ in range(1000):
        truth = rng.uniform(1.0, 5.0)
        sigma = rng.uniform(0.2, 2.0)
        near, far = sorted(rng.uniform(0.0, 4.0, 2))
        sign_near, sign_far = rng.choice([-1.0, 1.0], 2)
        assert gaussian_reward(truth + sign_near * near, truth, sigma) >= gaussian_reward(
            truth + sign_far * far, truth, sigma
        )
        assert threshold_reward(truth + sign_near * near, truth, sigma) >= threshold_reward(
            truth + sign_far * far, truth, sigma
        )
        if far - near > 1e-6:
            assert gaussian_reward(truth + near, truth, sigma) > gaussian_reward(truth + far, truth, sigma)


def test_threshold_reward_excludes_boundary():
    assert threshold_reward(3.0, 3.0, 0.5) == 1.0
    assert threshold_reward(3.25, 3.0, 0.5) == 1.0
    assert threshold_reward(3.5, 3.0, 0.5) == 0.0
    assert threshold_reward(1.25, 1.0, 0.25) == 0.0


@pytest.mark.parametrize("pred,truth", [(float("nan"), 3.0), (3.0, float("inf"))])
def test_non_finite_scores_raise_domain_error(pred, truth):
    with pytest.raises(DomainError):
        gaussian_reward(pred, truth, 0.8)
    with pytest.raises(DomainError):
        threshold_reward(pred, truth, 0.3)


def test_non_positive_width_is_a_config_error():
    with pytest.raises(ConfigError, match="sigma"):
        gaussian_reward(3.0, 3.0, 0.0)
    with pytest.raises(ConfigError, match="margin"):
        threshold_reward(3.0, 3.0, -0.1)


def test_reward_spec_validation():
    with pytest.raises(ConfigError, match="reward.kind"):
        RewardSpec(kind="binary")
    with pytest.raises(ConfigError, match="format_penalty"):
        RewardSpec(format_penalty=0.5)
    spec = RewardSpec(kind="threshold", margin=0.5)
    assert RewardSpec.from_dict(spec.to_dict()) == spec


def test_score_reward_dispatches_on_kind():
    assert score_reward(3.25, 3.0, RewardSpec(kind="threshold", margin=0.5)) == 1.0
    assert score_reward(3.8, 3.0, RewardSpec()) == pytest.approx(math.exp(-0.5))


def test_reward_trajectory_uses_parsed_score_and_format_penalty():
    item = ScoreItem("a", "technical", 3.0)
    assert reward_trajectory(_traj(parsed_score=3.0), item, RewardSpec()) == 1.0
    assert reward_trajectory(_traj(parsed_score=None), item, RewardSpec(format_penalty=-0.5)) == -0.5


def test_reward_trajectory_rejects_foreign_item():
    with pytest.raises(ContractError, match="scored against"):
        reward_trajectory(_traj(item_id="b"), ScoreItem("a", "technical", 3.0), RewardSpec())
