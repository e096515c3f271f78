#!/usr/bin/env python3
"""
Toy-scale training runs and the ablations built on them.

Every experiment trains a fresh toy policy on seeded synthetic items and
compares held-out SRCC/PLCC before and after. Sweeps write a Markdown table
and a JSON payload side by side and print a console table.

Author: QRTune Team
Version: 1.0.0
"""

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from rich.table import Table

import dataset_pipeline
import eval_metrics
import grpo_engine
import policy_toy
from grpo_engine import Schedule
from policy_toy import PolicyParams, ToyItem
from qrt_core import write_json
from reward_shaping import gaussian_reward
from run_config import RunConfig

logger = logging.getLogger(__name__)


# ============================================================================
# Shared workflow
# ============================================================================


@dataclass
class ToySetup:
    world: policy_toy.ToyWorld
    train_items: List[ToyItem]
    eval_items: List[ToyItem]


def make_toy_setup(cfg: RunConfig, seed: Optional[int] = None) -> ToySetup:
    seed = cfg.seed if seed is None else seed
    world = policy_toy.make_toy_world(cfg.toy.feature_dim, cfg.vocab, seed)
    return ToySetup(
        world=world,
        train_items=policy_toy.make_toy_items(world, cfg.toy.n_train, seed * 1000 + 1, "train"),
        eval_items=policy_toy.make_toy_items(world, cfg.toy.n_eval, seed * 1000 + 2, "eval"),
    )


def initial_policy(cfg: RunConfig, seed: Optional[int] = None) -> PolicyParams:
    seed = cfg.seed if seed is None else seed
    return policy_toy.init_params(
        cfg.policy.arch,
        cfg.vocab,
        cfg.toy.feature_dim,
        hidden=cfg.policy.hidden,
        rng=np.random.default_rng([seed, 11]),
        init_scale=cfg.policy.init_scale,
    )


def mean_reward(
    params: PolicyParams,
    items: Sequence[ToyItem],
    prefix_len: int,
    sigma: float,
    seed: int,
    samples: int = 4,
) -> float:
    """Mean Gaussian reward of sampled responses; a fixed yardstick across runs."""
    rng = np.random.default_rng([seed, 99])
    rewards = []
    for item in items:
        for _ in range(samples):
            traj = policy_toy.sample(params, item, prefix_len, rng)
            rewards.append(gaussian_reward(traj.parsed_score, item.truth_score, sigma))
    return float(np.mean(rewards))


def heldout_report(cfg: RunConfig, params: PolicyParams, items: Sequence[ToyItem], seed: int):
    predictor = eval_metrics.policy_predictor(params, cfg.grpo.prefix_len, cfg.eval.mode, seed)
    return eval_metrics.evaluate(
        items,
        predictor,
        dataset_id="toy-eval",
        workers=cfg.runtime.effective_workers,
        score_range=(cfg.vocab.score_min, cfg.vocab.score_max),
    )


def sft_warm_start(cfg: RunConfig, params: PolicyParams, items: Sequence[ToyItem], seed: int) -> PolicyParams:
    """SFT on the rejection-sampled corpus of ``items``; no-op if nothing is kept."""
    build = dataset_pipeline.build_corpus(
        items,
        cfg.teacher(),
        cfg.dataset.rejection,
        cfg.reward,
        seed,
        workers=cfg.runtime.effective_workers,
    )
    if not build.records:
        logger.warning("Rejection sampling kept no records; skipping SFT")
        return params
    by_id = {item.item_id: item for item in items}
    corpus = dataset_pipeline.corpus_to_sft(build.records, by_id, cfg.vocab)
    return policy_toy.sft_fit(params, corpus, cfg.sft.epochs, cfg.sft.lr)


# ============================================================================
# Single run
# ============================================================================


@dataclass
class ExperimentResult:
    label: str
    seed: int
    init_reward: float
    final_reward: float
    baseline_srcc: Optional[float]
    final_srcc: Optional[float]
    final_plcc: Optional[float]
    retained_fraction: float = 1.0

    @property
    def srcc_gain(self) -> float:
        # undefined correlations count as zero
        return (self.final_srcc or 0.0) - (self.baseline_srcc or 0.0)

    def to_row(self) -> Dict[str, Any]:
        return asdict(self)


def run_toy_experiment(
    run_cfg: RunConfig,
    seed: int,
    *,
    label: str = "run",
    reward_kind: Optional[str] = None,
    sigma: Optional[float] = None,
    schedule: Optional[Schedule] = None,
    gate: Optional[str] = None,
    tau_std: Optional[float] = None,
    sft_first: bool = False,
) -> ExperimentResult:
    """Train one seeded toy policy under the given variant and score it."""
    overrides: Dict[str, Any] = {"seed": seed}
    if reward_kind is not None:
        overrides["reward.kind"] = reward_kind
    if sigma is not None:
        overrides["grpo.sigma"] = sigma
        overrides["reward.sigma"] = sigma
    if schedule is not None:
        overrides["schedule.stage1_epochs"] = schedule.stage1_epochs
        overrides["schedule.stage2_epochs"] = schedule.stage2_epochs
    if gate is not None:
        overrides["grpo.entropy_gate.mode"] = gate
    if tau_std is not None:
        overrides["grpo.tau_std"] = tau_std
    cfg = run_cfg.replace_document(**overrides)

    setup = make_toy_setup(cfg, seed)
    policy = initial_policy(cfg, seed)
    yardstick_sigma = run_cfg.grpo.sigma
    init_reward = mean_reward(policy, setup.train_items, cfg.grpo.prefix_len, yardstick_sigma, seed)
    baseline = heldout_report(cfg, policy, setup.eval_items, seed)
    if sft_first:
        policy = sft_warm_start(cfg, policy, setup.train_items, seed)

    log = grpo_engine.run_training(
        setup.train_items,
        cfg.schedule,
        cfg.grpo,
        None,
        policy=policy,
        reward_spec=cfg.reward,
        seed=seed,
        workers=cfg.runtime.effective_workers,
        config_hash=cfg.hash,
    )
    trained = log.policy
    final = heldout_report(cfg, trained, setup.eval_items, seed)
    result = ExperimentResult(
        label=label,
        seed=seed,
        init_reward=init_reward,
        final_reward=mean_reward(trained, setup.train_items, cfg.grpo.prefix_len, yardstick_sigma, seed),
        baseline_srcc=baseline.srcc,
        final_srcc=final.srcc,
        final_plcc=final.plcc,
        retained_fraction=float(np.mean([s.retained_fraction for s in log.steps])) if log.steps else 1.0,
    )
    logger.info(
        f"[{label} seed={seed}] reward {result.init_reward:.3f} -> {result.final_reward:.3f}, "
        f"SRCC {result.baseline_srcc} -> {result.final_srcc}"
    )
    return result


# ============================================================================
# Sweeps
# ============================================================================


@dataclass
class ExperimentReport:
    name: str
    rows: List[ExperimentResult]
    summary: Dict[str, Any]


def reward_ablation(run_cfg: RunConfig, seeds: Sequence[int] = (0, 1, 2, 3, 4)) -> ExperimentReport:
    """Gaussian versus threshold reward on matched seeds.

    The summary lists both final SRCCs per seed; an undefined SRCC is ``None``
    there and counts as 0 for the win tally.
    """
    rows = []
    per_seed = []
    wins = 0
    for seed in seeds:
        gaussian = run_toy_experiment(run_cfg, seed, label="gaussian", reward_kind="gaussian")
        threshold = run_toy_experiment(run_cfg, seed, label="threshold", reward_kind="threshold")
        rows.extend([gaussian, threshold])
        per_seed.append(
            {"seed": seed, "gaussian_srcc": gaussian.final_srcc, "threshold_srcc": threshold.final_srcc}
        )
        if (gaussian.final_srcc or 0.0) >= (threshold.final_srcc or 0.0):
            wins += 1
        logger.info(
            f"reward ablation seed {seed}: gaussian SRCC {_fmt(gaussian.final_srcc)}, "
            f"threshold SRCC {_fmt(threshold.final_srcc)}"
        )
    summary = {
        "seeds": list(seeds),
        "gaussian_at_least_threshold": wins,
        "margin": run_cfg.reward.margin,
        "per_seed": per_seed,
    }
    return ExperimentReport("reward_ablation", rows, summary)


def sigma_sweep(
    run_cfg: RunConfig, sigmas: Sequence[float] = (0.6, 0.8, 1.0), seed: Optional[int] = None
) -> ExperimentReport:
    seed = run_cfg.seed if seed is None else seed
    rows = [run_toy_experiment(run_cfg, seed, label=f"sigma={s:g}", sigma=s) for s in sigmas]
    best = max(rows, key=lambda r: r.final_srcc or 0.0)
    return ExperimentReport("sigma_sweep", rows, {"sigmas": list(sigmas), "best": best.label})


def stage_ablation(run_cfg: RunConfig, seed: Optional[int] = None) -> ExperimentReport:
    """Where filtering and gating are switched on, and which of them matters."""
    seed = run_cfg.seed if seed is None else seed
    s1 = run_cfg.schedule.stage1_epochs
    s2 = run_cfg.schedule.stage2_epochs
    total = s1 + s2
    variants: List[Tuple[str, Dict[str, Any]]] = [
        ("stage1 only", {"schedule": Schedule(total, 0)}),
        ("stage1 -> stage2", {"schedule": Schedule(s1, s2)}),
        ("filter+gate from start", {"schedule": Schedule(0, total)}),
        ("stage2 gate only", {"schedule": Schedule(s1, s2), "tau_std": 0.0}),
        ("stage2 filter only", {"schedule": Schedule(s1, s2), "gate": "off"}),
    ]
    rows = [run_toy_experiment(run_cfg, seed, label=label, **kwargs) for label, kwargs in variants]
    return ExperimentReport("stage_ablation", rows, {"seed": seed})


def cold_start_ablation(run_cfg: RunConfig, seed: Optional[int] = None) -> ExperimentReport:
    seed = run_cfg.seed if seed is None else seed
    rows = [
        run_toy_experiment(run_cfg, seed, label="rl from scratch"),
        run_toy_experiment(run_cfg, seed, label="sft -> rl", sft_first=True),
    ]
    return ExperimentReport("cold_start_ablation", rows, {"seed": seed})


# ============================================================================
# Reports
# ============================================================================


def _fmt(value: Optional[float]) -> str:
    return "undefined" if value is None else f"{value:.4f}"


_COLUMNS = [
    ("variant", lambda r: r.label),
    ("seed", lambda r: str(r.seed)),
    ("reward before", lambda r: _fmt(r.init_reward)),
    ("reward after", lambda r: _fmt(r.final_reward)),
    ("SRCC before", lambda r: _fmt(r.baseline_srcc)),
    ("SRCC after", lambda r: _fmt(r.final_srcc)),
    ("PLCC after", lambda r: _fmt(r.final_plcc)),
    ("retained", lambda r: f"{r.retained_fraction:.2f}"),
]


def experiment_table(report: ExperimentReport) -> Table:
    table = Table(title=report.name.replace("_", " "))
    for name, _ in _COLUMNS:
        table.add_column(name)
    for row in report.rows:
        table.add_row(*(getter(row) for _, getter in _COLUMNS))
    return table


def write_experiment_report(report: ExperimentReport, out_dir: Path, config_hash: str) -> Tuple[Path, Path]:
    """Write ``<name>.md`` and ``<name>.json`` under ``out_dir``."""
    out_dir = Path(out_dir)
    lines = [f"# {report.name.replace('_', ' ').title()}", "", f"- Config hash: {config_hash}"]
    for key, value in report.summary.items():
        lines.append(f"- {key}: {value}")
    lines += ["", "| " + " | ".join(name for name, _ in _COLUMNS) + " |"]
    lines.append("|---|" + "---:|" * (len(_COLUMNS) - 1))
    for row in report.rows:
        lines.append("| " + " | ".join(getter(row) for _, getter in _COLUMNS) + " |")

    md_path = out_dir / f"{report.name}.md"
    md_path.parent.mkdir(parents=True, exist_ok=True)
    with open(md_path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    json_path = write_json(
        out_dir / f"{report.name}.json",
        {
            "name": report.name,
            "config_hash": config_hash,
            "summary": report.summary,
            "rows": [row.to_row() for row in report.rows],
        },
    )
    return md_path, json_path
