#!/usr/bin/env python3
"""
Group-relative policy optimisation for score-prediction policies.

One training step samples ``group_size`` responses per item from the old
policy, rewards them, normalises rewards inside each group, optionally drops
groups whose reward spread is too small (stage 2), optionally restricts the
update to high-entropy tokens (stage 2), and takes one SGD step on the
clipped token-level surrogate with a k3 KL penalty towards a frozen
reference snapshot.

Author: QRTune Team
Version: 1.0.0
"""

import concurrent.futures
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

import policy_toy
from policy_toy import PolicyParams
from qrt_core import (
    ConfigError,
    ContractError,
    DataError,
    NumericalError,
    QrtError,
    ScoreItem,
    Trajectory,
)
from reward_shaping import RewardSpec, reward_trajectory

logger = logging.getLogger(__name__)

GATE_MODES = ("off", "quantile", "fixed")
STAGES = ("stage1", "stage2")
ADV_EPS = 1e-8
CHECKPOINT_FORMAT_VERSION = 1

__all__ = ["Trajectory"]


# ============================================================================
# Configuration
# ============================================================================


@dataclass(frozen=True)
class EntropyGate:
    """Token gate: ``off``, batch ``quantile`` (top ``rho``) or ``fixed`` ``tau_h``."""

    mode: str = "quantile"
    rho: float = 0.2
    tau_h: float = 0.0

    def __post_init__(self):
        if self.mode not in GATE_MODES:
            raise ConfigError(f"entropy_gate.mode must be one of {GATE_MODES}, got {self.mode!r}")
        if not 0.0 < self.rho < 1.0:
            raise ConfigError(f"entropy_gate.rho must be in (0, 1), got {self.rho}")
        if not self.tau_h >= 0.0:
            raise ConfigError(f"entropy_gate.tau_h must be >= 0, got {self.tau_h}")


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 16
    eps_low: float = 0.2
    eps_high: float = 0.2
    beta: float = 0.04
    tau_std: float = 1e-3
    entropy_gate: EntropyGate = field(default_factory=EntropyGate)
    sigma: float = 0.8
    stage: str = "stage1"
    adv_std_normalize: bool = True
    learning_rate: float = 5.0
    momentum: float = 0.0
    batch_size: int = 64
    prefix_len: int = 6

    def __post_init__(self):
        if isinstance(self.entropy_gate, dict):
            object.__setattr__(self, "entropy_gate", EntropyGate(**self.entropy_gate))
        if self.group_size < 1:
            raise ConfigError(f"grpo.group_size must be >= 1, got {self.group_size}")
        if not (self.eps_low > 0 and self.eps_high > 0):
            raise ConfigError("grpo.eps_low and grpo.eps_high must be > 0")
        if self.eps_low >= 1.0:
            raise ConfigError("grpo.eps_low must be < 1")
        if self.beta < 0 or self.tau_std < 0:
            raise ConfigError("grpo.beta and grpo.tau_std must be >= 0")
        if not self.sigma > 0:
            raise ConfigError(f"grpo.sigma must be > 0, got {self.sigma}")
        if self.stage not in STAGES:
            raise ConfigError(f"grpo.stage must be one of {STAGES}, got {self.stage!r}")
        if not self.learning_rate > 0 or not 0.0 <= self.momentum < 1.0:
            raise ConfigError("grpo.learning_rate must be > 0 and momentum in [0, 1)")
        if self.batch_size < 1 or self.prefix_len < 0:
            raise ConfigError("grpo.batch_size must be >= 1 and prefix_len >= 0")

    @property
    def filtering_active(self) -> bool:
        return self.stage == "stage2"

    @property
    def gating_active(self) -> bool:
        return self.stage == "stage2" and self.entropy_gate.mode != "off"

    def for_stage(self, stage: str) -> "GrpoConfig":
        return replace(self, stage=stage)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data.pop("stage")
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GrpoConfig":
        return cls(**data)


@dataclass(frozen=True)
class Schedule:
    stage1_epochs: int = 2
    stage2_epochs: int = 2

    def __post_init__(self):
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ConfigError("schedule epochs must be >= 0")

    def stages(self) -> List[str]:
        return ["stage1"] * self.stage1_epochs + ["stage2"] * self.stage2_epochs


def training_reward_spec(spec: RewardSpec, cfg: GrpoConfig) -> RewardSpec:
    """Rollouts use the GRPO section's sigma for the Gaussian kernel."""
    return replace(spec, sigma=cfg.sigma) if spec.kind == "gaussian" else spec


# ============================================================================
# Groups, gate and surrogate
# ============================================================================


@dataclass
class RewardGroup:
    item_id: str
    trajectories: List[Trajectory]
    rewards: np.ndarray
    reward_mean: float
    reward_std: float
    retained: bool
    advantages: np.ndarray


def compute_group(rewards: Sequence[float], cfg: GrpoConfig) -> Tuple[bool, np.ndarray]:
    """Retained flag and per-response advantages for one group.

    Groups are filtered before normalisation; a filtered group gets all-zero
    advantages. The std divisor is floored at 1e-8 so that retained groups
    have exactly unit advantage spread.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.shape != (cfg.group_size,):
        raise ContractError(f"Expected {cfg.group_size} rewards, got shape {r.shape}")
    if not np.all(np.isfinite(r)):
        raise ContractError("Rewards must be finite")
    std = float(r.std())
    retained = std > cfg.tau_std if cfg.filtering_active else True
    if not retained:
        return False, np.zeros_like(r)
    centered = r - r.mean()
    if cfg.adv_std_normalize:
        return True, centered / max(std, ADV_EPS)
    return True, centered


def build_group(
    item_id: str, trajectories: List[Trajectory], rewards: Sequence[float], cfg: GrpoConfig
) -> RewardGroup:
    r = np.asarray(rewards, dtype=np.float64)
    retained, advantages = compute_group(r, cfg)
    return RewardGroup(
        item_id=item_id,
        trajectories=list(trajectories),
        rewards=r,
        reward_mean=float(r.mean()),
        reward_std=float(r.std()),
        retained=retained,
        advantages=advantages,
    )


def entropy_threshold(batch_entropies: Sequence[float], gate: EntropyGate) -> float:
    """Entropy a token needs (``H >= threshold``) to receive gradient.

    Quantile mode takes the nearest-rank value from the top: with ``N``
    pooled entropies the threshold is the ``ceil(rho * N)``-th largest one,
    and every token tied with it passes.
    """
    if gate.mode == "off":
        return -math.inf
    if gate.mode == "fixed":
        return float(gate.tau_h)
    values = np.asarray(batch_entropies, dtype=np.float64).ravel()
    if values.size == 0:
        raise ContractError("Quantile entropy gate needs a non-empty batch")
    k = max(1, math.ceil(round(gate.rho * values.size, 9)))
    return float(np.sort(values)[values.size - k])


def gate_mask(entropy: np.ndarray, threshold: float) -> np.ndarray:
    return (np.asarray(entropy) >= threshold).astype(np.float64)


def kl_penalty(traj: Trajectory) -> float:
    """Token-mean k3 estimate of KL(pi_theta || pi_ref); never negative."""
    if traj.logp_ref is None:
        raise ConfigError(f"Trajectory for {traj.item_id} has no reference log-probs")
    delta = traj.logp_ref - traj.logp_new
    return float(np.mean(np.maximum(np.expm1(delta) - delta, 0.0)))


@dataclass
class SurrogateResult:
    loss: float
    objective: float
    grad_coeffs: List[np.ndarray]
    trajectories: List[Trajectory]
    n_tokens: int
    n_gated_in: int
    kl: float = 0.0
    clip_fraction: float = 0.0


def surrogate_loss(
    groups: Sequence[RewardGroup], gate_threshold: float, cfg: GrpoConfig
) -> SurrogateResult:
    """Negative gated DAPO objective over the retained groups.

    ``grad_coeffs[i][t]`` is d(loss)/d(logp_new[t]) of the i-th retained
    trajectory. The token denominator counts every token of the retained
    groups, gated in or not. The KL penalty is applied to the same gated
    tokens as the surrogate.
    """
    pairs = [
        (traj, float(adv))
        for group in groups
        if group.retained
        for traj, adv in zip(group.trajectories, group.advantages)
    ]
    n_tokens = sum(len(traj) for traj, _ in pairs)
    if n_tokens == 0:
        return SurrogateResult(0.0, 0.0, [], [], 0, 0)

    lo, hi = 1.0 - cfg.eps_low, 1.0 + cfg.eps_high
    surrogate_total = 0.0
    kl_total = 0.0
    n_gated_in = 0
    n_clipped = 0
    coeffs = []
    for index, (traj, adv) in enumerate(pairs):
        ratio = np.exp(traj.logp_new - traj.logp_old)
        bad = ~np.isfinite(ratio)
        if bad.any():
            raise NumericalError(
                f"Non-finite probability ratio in trajectory {index} ({traj.item_id}) "
                f"at token {int(np.argmax(bad))}"
            )
        unclipped = ratio * adv
        clipped = np.clip(ratio, lo, hi) * adv
        use_unclipped = unclipped <= clipped
        terms = np.where(use_unclipped, unclipped, clipped)
        mask = gate_mask(traj.entropy, gate_threshold)
        surrogate_total += float(np.sum(mask * terms))
        coeff = -(mask * np.where(use_unclipped, unclipped, 0.0)) / n_tokens
        if cfg.beta > 0:
            if traj.logp_ref is None:
                raise ConfigError(
                    f"beta={cfg.beta} needs reference log-probs (trajectory {traj.item_id})"
                )
            delta = traj.logp_ref - traj.logp_new
            kl_total += float(np.sum(mask * (np.expm1(delta) - delta)))
            coeff = coeff - cfg.beta * mask * np.expm1(delta) / n_tokens
        n_gated_in += int(mask.sum())
        n_clipped += int(np.sum(mask * ~use_unclipped))
        coeffs.append(coeff)

    objective = surrogate_total / n_tokens - cfg.beta * kl_total / n_tokens
    return SurrogateResult(
        loss=-objective,
        objective=objective,
        grad_coeffs=coeffs,
        trajectories=[traj for traj, _ in pairs],
        n_tokens=n_tokens,
        n_gated_in=n_gated_in,
        kl=kl_total / n_tokens,
        clip_fraction=n_clipped / n_tokens,
    )


def _rescore(
    groups: Sequence[RewardGroup], params: PolicyParams, items: Dict[str, ScoreItem]
) -> List[RewardGroup]:
    rescored = []
    for group in groups:
        if not group.retained:
            rescored.append(group)
            continue
        trajectories = []
        for traj in group.trajectories:
            logp_new, _ = policy_toy.logprob_and_entropy(params, items[traj.item_id], traj.tokens)
            trajectories.append(replace(traj, logp_new=logp_new))
        rescored.append(replace(group, trajectories=trajectories))
    return rescored


def total_loss(
    params: PolicyParams,
    groups: Sequence[RewardGroup],
    items: Dict[str, ScoreItem],
    gate_threshold: float,
    cfg: GrpoConfig,
) -> float:
    return surrogate_loss(_rescore(groups, params, items), gate_threshold, cfg).loss


def loss_and_grad(
    params: PolicyParams,
    groups: Sequence[RewardGroup],
    items: Dict[str, ScoreItem],
    gate_threshold: float,
    cfg: GrpoConfig,
) -> Tuple[float, np.ndarray, SurrogateResult]:
    """Loss under ``params`` and its exact gradient w.r.t. ``params.theta``."""
    result = surrogate_loss(_rescore(groups, params, items), gate_threshold, cfg)
    grad = np.zeros(params.theta.size)
    for traj, coeff in zip(result.trajectories, result.grad_coeffs):
        if np.any(coeff != 0.0):
            grad += policy_toy.grad_logprob(params, items[traj.item_id], traj.tokens, coeff)
    return result.loss, grad, result


def check_gradient(
    params: PolicyParams,
    groups: Sequence[RewardGroup],
    items: Dict[str, ScoreItem],
    gate_threshold: float,
    cfg: GrpoConfig,
    h: float = 1e-5,
    n_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Relative error between the analytic gradient and central differences.

    With ``n_coords`` set, only that many coordinates are checked: half the
    largest-magnitude analytic entries and half drawn at random.
    """
    _, grad, _ = loss_and_grad(params, groups, items, gate_threshold, cfg)
    size = grad.size
    if n_coords is None or n_coords >= size:
        coords = np.arange(size)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        top = np.argsort(-np.abs(grad), kind="stable")[: max(1, n_coords // 2)]
        rest = np.setdiff1d(np.arange(size), top)
        extra = rng.choice(rest, size=n_coords - top.size, replace=False)
        coords = np.concatenate([top, extra])
    numeric = np.empty(coords.size)
    for j, i in enumerate(coords):
        bumped = np.array(params.theta)
        bumped[i] += h
        plus = total_loss(params.with_theta(bumped), groups, items, gate_threshold, cfg)
        bumped[i] -= 2 * h
        minus = total_loss(params.with_theta(bumped), groups, items, gate_threshold, cfg)
        numeric[j] = (plus - minus) / (2 * h)
    analytic = grad[coords]
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-300)
    return float(np.linalg.norm(analytic - numeric) / scale)


# ============================================================================
# Optimiser
# ============================================================================


@dataclass
class SgdOptimizer:
    learning_rate: float
    momentum: float = 0.0
    velocity: Optional[np.ndarray] = None

    def step(self, params: PolicyParams, grad: np.ndarray) -> PolicyParams:
        update = grad
        if self.momentum > 0:
            if self.velocity is None:
                self.velocity = np.zeros_like(grad)
            self.velocity = self.momentum * self.velocity + grad
            update = self.velocity
        return params.with_theta(params.theta - self.learning_rate * update)


# ============================================================================
# Rollouts and steps
# ============================================================================


@dataclass
class StepReport:
    step: int
    epoch: int
    stage: str
    mean_reward: float
    retained_fraction: float
    gated_in_fraction: float
    mean_entropy: float
    loss: float
    updated: bool
    n_groups: int

    def to_record(self) -> Dict[str, Any]:
        record = asdict(self)
        record["kind"] = "step"
        return record


def _rollout_item(item, old_policy, ref_policy, cfg, reward_spec, seed_seq):
    rng = np.random.default_rng(seed_seq)
    trajectories, rewards = [], []
    for _ in range(cfg.group_size):
        traj = policy_toy.sample(old_policy, item, cfg.prefix_len, rng)
        if cfg.beta > 0:
            if ref_policy is None:
                raise ConfigError(f"beta={cfg.beta} requires a reference policy")
            traj.logp_ref, _ = policy_toy.logprob_and_entropy(ref_policy, item, traj.tokens)
        trajectories.append(traj)
        rewards.append(reward_trajectory(traj, item, reward_spec))
    return build_group(item.item_id, trajectories, rewards, cfg)


def rollout(
    batch: Sequence[ScoreItem],
    old_policy: PolicyParams,
    ref_policy: Optional[PolicyParams],
    cfg: GrpoConfig,
    rng_seed: Any,
    reward_spec: RewardSpec,
    workers: int = 1,
) -> List[RewardGroup]:
    """Sample and reward one group per item; order follows ``batch``.

    Every item gets its own RNG stream spawned from ``rng_seed``, so the
    result does not depend on ``workers``.
    """
    spec = training_reward_spec(reward_spec, cfg)
    seeds = np.random.SeedSequence(rng_seed).spawn(len(batch))
    if workers <= 1 or len(batch) <= 1:
        return [
            _rollout_item(item, old_policy, ref_policy, cfg, spec, seed)
            for item, seed in zip(batch, seeds)
        ]
    groups: List[Optional[RewardGroup]] = [None] * len(batch)
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
        future_to_index = {
            executor.submit(_rollout_item, item, old_policy, ref_policy, cfg, spec, seed): index
            for index, (item, seed) in enumerate(zip(batch, seeds))
        }
        for future in concurrent.futures.as_completed(future_to_index):
            groups[future_to_index[future]] = future.result()
    return groups


def train_step(
    batch: Sequence[ScoreItem],
    policy: PolicyParams,
    old_policy: PolicyParams,
    ref_policy: Optional[PolicyParams],
    cfg: GrpoConfig,
    rng_seed: Any,
    *,
    reward_spec: RewardSpec,
    optimizer: SgdOptimizer,
    step: int = 0,
    epoch: int = 0,
    workers: int = 1,
) -> Tuple[PolicyParams, StepReport]:
    """Roll out, filter, gate and apply one optimiser update.

    A batch whose groups are all filtered leaves the policy untouched.
    """
    groups = rollout(batch, old_policy, ref_policy, cfg, rng_seed, reward_spec, workers)
    all_entropies = np.concatenate([t.entropy for g in groups for t in g.trajectories])
    all_rewards = np.concatenate([g.rewards for g in groups])
    n_retained = sum(1 for g in groups if g.retained)

    if cfg.stage == "stage2":
        threshold = entropy_threshold(all_entropies, cfg.entropy_gate)
    else:
        threshold = -math.inf

    report = StepReport(
        step=step,
        epoch=epoch,
        stage=cfg.stage,
        mean_reward=float(all_rewards.mean()),
        retained_fraction=n_retained / len(groups),
        gated_in_fraction=0.0,
        mean_entropy=float(all_entropies.mean()),
        loss=0.0,
        updated=False,
        n_groups=len(groups),
    )
    if n_retained == 0:
        logger.warning(f"Step {step}: every group filtered (zero reward spread), skipping update")
        return policy, report

    items = {item.item_id: item for item in batch}
    loss, grad, result = loss_and_grad(policy, groups, items, threshold, cfg)
    if not np.all(np.isfinite(grad)):
        raise NumericalError(f"Step {step}: non-finite policy gradient")
    report.loss = loss
    report.gated_in_fraction = result.n_gated_in / result.n_tokens
    report.updated = True
    logger.debug(
        f"Step {step} ({cfg.stage}): reward={report.mean_reward:.4f} "
        f"retained={report.retained_fraction:.2f} gated_in={report.gated_in_fraction:.2f} "
        f"kl={result.kl:.5f} clip={result.clip_fraction:.3f} loss={loss:.6f}"
    )
    return optimizer.step(policy, grad), report


class GrpoTrainer:
    """Owns the live policy, its optimiser and the frozen reference snapshot."""

    def __init__(
        self,
        policy: PolicyParams,
        cfg: GrpoConfig,
        reward_spec: RewardSpec,
        *,
        optimizer: Optional[SgdOptimizer] = None,
        reference: Optional[PolicyParams] = None,
        workers: int = 1,
        global_step: int = 0,
    ) -> None:
        self.policy = policy
        self.cfg = cfg
        self.reward_spec = reward_spec
        self.optimizer = optimizer or SgdOptimizer(cfg.learning_rate, cfg.momentum)
        self.reference = reference if reference is not None else policy
        self.workers = workers
        self.global_step = global_step

    def snapshot_reference(self) -> None:
        self.reference = self.policy

    def train_step(self, batch: Sequence[ScoreItem], rng_seed: Any, stage: str, epoch: int) -> StepReport:
        # old policy refreshed from the live one for every rollout batch
        old_policy = self.policy
        self.policy, report = train_step(
            batch,
            self.policy,
            old_policy,
            self.reference,
            self.cfg.for_stage(stage),
            rng_seed,
            reward_spec=self.reward_spec,
            optimizer=self.optimizer,
            step=self.global_step,
            epoch=epoch,
            workers=self.workers,
        )
        self.global_step += 1
        return report


# ============================================================================
# Checkpoints
# ============================================================================


class TrainingAborted(QrtError):
    """Training stopped; ``checkpoint`` names the last resumable state, if any."""

    exit_code = 3

    def __init__(self, message: str, checkpoint: Optional[Path] = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class Checkpoint:
    policy: PolicyParams
    reference: Optional[PolicyParams]
    velocity: Optional[np.ndarray]
    epoch: int
    global_step: int
    stage: str
    seed: int
    config_hash: str = ""

    @property
    def rng_state(self) -> Dict[str, Any]:
        return {"root_seed": self.seed, "next_epoch": self.epoch + 1, "next_step": self.global_step}


class CheckpointStore:
    """Versioned ``.npz`` checkpoints, one per completed epoch."""

    def __init__(self, directory: Path) -> None:
        self.directory = Path(directory)

    def path_for(self, epoch: int) -> Path:
        return self.directory / f"epoch_{epoch + 1:03d}.npz"

    def save(self, checkpoint: Checkpoint, path: Optional[Path] = None) -> Path:
        path = Path(path) if path is not None else self.path_for(checkpoint.epoch)
        meta = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "policy": checkpoint.policy.descriptor(),
            "policy_version": checkpoint.policy.version,
            "has_reference": checkpoint.reference is not None,
            "has_velocity": checkpoint.velocity is not None,
            "epoch": checkpoint.epoch,
            "global_step": checkpoint.global_step,
            "stage": checkpoint.stage,
            "config_hash": checkpoint.config_hash,
            "rng_state": checkpoint.rng_state,
        }
        empty = np.zeros(0)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "wb") as f:
                np.savez(
                    f,
                    theta=np.asarray(checkpoint.policy.theta),
                    ref_theta=np.asarray(checkpoint.reference.theta) if checkpoint.reference else empty,
                    velocity=checkpoint.velocity if checkpoint.velocity is not None else empty,
                    meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8),
                )
        except OSError as e:
            raise DataError(f"Could not write checkpoint {path}: {e}") from e
        logger.info(f"Checkpoint written: {path}")
        return path

    @staticmethod
    def load(path: Path) -> Checkpoint:
        path = Path(path)
        try:
            with np.load(path, allow_pickle=False) as data:
                meta = json.loads(data["meta"].tobytes().decode("utf-8"))
                theta = data["theta"].copy()
                ref_theta = data["ref_theta"].copy()
                velocity = data["velocity"].copy()
        except FileNotFoundError as e:
            raise DataError(f"Checkpoint not found: {path}") from e
        except (OSError, KeyError, ValueError) as e:
            raise DataError(f"Could not read checkpoint {path}: {e}") from e
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise DataError(f"Unsupported checkpoint format in {path}: {meta.get('format_version')}")
        descriptor = meta["policy"]
        policy = PolicyParams.from_descriptor(descriptor, theta, version=meta["policy_version"])
        reference = PolicyParams.from_descriptor(descriptor, ref_theta) if meta["has_reference"] else None
        return Checkpoint(
            policy=policy,
            reference=reference,
            velocity=velocity if meta["has_velocity"] else None,
            epoch=int(meta["epoch"]),
            global_step=int(meta["global_step"]),
            stage=meta["stage"],
            seed=int(meta["rng_state"]["root_seed"]),
            config_hash=meta.get("config_hash", ""),
        )

    def latest(self) -> Optional[Path]:
        candidates = sorted(self.directory.glob("epoch_*.npz"))
        return candidates[-1] if candidates else None


# ============================================================================
# Training schedule
# ============================================================================


@dataclass
class EpochSummary:
    epoch: int
    stage: str
    mean_reward: float
    retained_fraction: float
    gated_in_fraction: float
    mean_entropy: float
    loss: float
    n_steps: int
    n_updates: int

    def to_record(self) -> Dict[str, Any]:
        record = asdict(self)
        record["kind"] = "epoch"
        return record


@dataclass
class TrainingLog:
    config_hash: str = ""
    steps: List[StepReport] = field(default_factory=list)
    epochs: List[EpochSummary] = field(default_factory=list)
    policy: Optional[PolicyParams] = None
    checkpoints: List[Path] = field(default_factory=list)

    def records(self) -> List[Dict[str, Any]]:
        """Step records of each epoch followed by that epoch's summary."""
        out = []
        for summary in self.epochs:
            for report in self.steps:
                if report.epoch == summary.epoch:
                    out.append({**report.to_record(), "config_hash": self.config_hash})
            out.append({**summary.to_record(), "config_hash": self.config_hash})
        return out


def _summarise(epoch: int, stage: str, reports: List[StepReport]) -> EpochSummary:
    updated = [r for r in reports if r.updated]
    return EpochSummary(
        epoch=epoch,
        stage=stage,
        mean_reward=float(np.mean([r.mean_reward for r in reports])),
        retained_fraction=float(np.mean([r.retained_fraction for r in reports])),
        gated_in_fraction=float(np.mean([r.gated_in_fraction for r in updated])) if updated else 0.0,
        mean_entropy=float(np.mean([r.mean_entropy for r in reports])),
        loss=float(np.mean([r.loss for r in updated])) if updated else 0.0,
        n_steps=len(reports),
        n_updates=len(updated),
    )


def run_training(
    dataset: Sequence[ScoreItem],
    schedule: Schedule,
    cfg: GrpoConfig,
    checkpoint_sink: Optional[CheckpointStore],
    *,
    policy: PolicyParams,
    reward_spec: RewardSpec,
    seed: int,
    workers: int = 1,
    resume: Optional[Checkpoint] = None,
    config_hash: str = "",
) -> TrainingLog:
    """Run stage-1 epochs (Gaussian reward only) then stage-2 epochs.

    The reference policy is snapshotted at the start of each stage and the
    item order of every epoch is derived from ``(seed, epoch)``, so resuming
    from an epoch checkpoint reproduces the remaining log exactly.
    """
    if not dataset:
        raise ContractError("run_training needs a non-empty dataset")
    stages = schedule.stages()
    trainer = GrpoTrainer(policy, cfg, reward_spec, workers=workers)
    start_epoch = 0
    last_checkpoint: Optional[Path] = None
    if resume is not None:
        trainer.policy = resume.policy
        trainer.reference = resume.reference if resume.reference is not None else resume.policy
        trainer.optimizer.velocity = resume.velocity
        trainer.global_step = resume.global_step
        start_epoch = resume.epoch + 1
        seed = resume.seed
        logger.info(f"Resuming after epoch {start_epoch} at step {resume.global_step}")

    log = TrainingLog(config_hash=config_hash)
    n_items = len(dataset)
    for epoch in range(start_epoch, len(stages)):
        stage = stages[epoch]
        if epoch == start_epoch and resume is not None and stages[resume.epoch] == stage:
            pass
        elif epoch == 0 or stages[epoch - 1] != stage:
            trainer.snapshot_reference()
            logger.info(f"=== {stage.upper()} (epoch {epoch + 1}/{len(stages)}) ===")

        order = np.random.default_rng([seed, epoch]).permutation(n_items)
        starts = range(0, n_items, cfg.batch_size)
        reports = []
        for batch_index, start in enumerate(
            tqdm(starts, desc=f"epoch {epoch + 1} {stage}", unit="batch", leave=False, disable=None)
        ):
            batch = [dataset[i] for i in order[start : start + cfg.batch_size]]
            reports.append(
                trainer.train_step(batch, [seed, epoch, batch_index], stage, epoch + 1)
            )
        log.steps.extend(reports)
        summary = _summarise(epoch + 1, stage, reports)
        log.epochs.append(summary)
        logger.info(
            f"Epoch {epoch + 1} ({stage}): reward={summary.mean_reward:.4f} "
            f"retained={summary.retained_fraction:.2f} gated_in={summary.gated_in_fraction:.2f} "
            f"entropy={summary.mean_entropy:.3f} updates={summary.n_updates}/{summary.n_steps}"
        )

        if checkpoint_sink is not None:
            checkpoint = Checkpoint(
                policy=trainer.policy,
                reference=trainer.reference,
                velocity=trainer.optimizer.velocity,
                epoch=epoch,
                global_step=trainer.global_step,
                stage=stage,
                seed=seed,
                config_hash=config_hash,
            )
            try:
                last_checkpoint = checkpoint_sink.save(checkpoint)
            except DataError as e:
                raise TrainingAborted(
                    f"Checkpoint write failed after epoch {epoch + 1}: {e}", last_checkpoint
                ) from e
            log.checkpoints.append(last_checkpoint)

    log.policy = trainer.policy
    return log
