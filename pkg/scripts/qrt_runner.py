#!/usr/bin/env python3
"""
QRTune Runner - reward-tuning command line

Usage:
    qrt_runner.py init qrt_config.json             # Write the default config
    qrt_runner.py build-dataset -c qrt_config.json # Rejection-sampled SFT corpus
    qrt_runner.py sft -c qrt_config.json           # Cold-start fit on the corpus
    qrt_runner.py train -c qrt_config.json         # Two-stage GRPO training
    qrt_runner.py eval -c qrt_config.json          # PLCC/SRCC on held-out items
    qrt_runner.py select -c qrt_config.json        # Best-of-N + reflection
    qrt_runner.py ablate -c qrt_config.json --kind reward

Exit codes: 0 success, 1 unexpected error, 2 configuration error,
3 data error, 4 numerical error, 130 interrupted.

Author: QRTune Team
Version: 1.0.0
"""

import argparse
import logging
import math
import sys
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np
from rich.console import Console

ROOT_DIR = Path(__file__).resolve().parent.parent
if str(ROOT_DIR) not in sys.path:
    sys.path.insert(0, str(ROOT_DIR))

try:
    import dataset_pipeline
    import eval_metrics
    import experiments
    import grpo_engine
    import policy_toy
    import tts_harness
    from grpo_engine import Checkpoint, CheckpointStore, Schedule, TrainingAborted
    from qrt_core import (
        ConfigError,
        DataError,
        QrtError,
        print_summary,
        read_jsonl,
        setup_logging,
        write_jsonl,
    )
    from run_config import RunConfig, load_config, write_config
    from version import __version__
except ImportError as e:
    print(f"ERROR: Could not import QRTune modules ({e})")
    print("Make sure all modules are in the scripts/ directory")
    sys.exit(1)

ABLATIONS = ("reward", "sigma", "stage", "cold-start")


def parse_arguments(argv: Optional[List[str]] = None) -> argparse.Namespace:
    """Parse command line arguments.

    Returns:
        Parsed arguments namespace
    """
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="Path to JSON or YAML configuration file")
    common.add_argument("--seed", type=int, help="Override the root seed")
    common.add_argument(
        "--deterministic", action="store_true", help="Force serial execution"
    )
    common.add_argument("--output", help="Override runtime.output_dir")
    common.add_argument(
        "--log-level",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Set logging level (default: runtime.log_level)",
    )

    parser = argparse.ArgumentParser(
        description="QRTune - reward tuning for score-prediction policies",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Start from the default configuration
  %(prog)s init qrt_config.json

  # Cold start, then two-stage RL
  %(prog)s build-dataset -c qrt_config.json
  %(prog)s sft -c qrt_config.json
  %(prog)s train -c qrt_config.json --init-checkpoint qrt_output/checkpoints/sft.npz

  # Stage 2 only, initialised from a stage-1 checkpoint
  %(prog)s train -c qrt_config.json --stage2-only --init-checkpoint run1/checkpoints/epoch_002.npz

  # Evaluation and selection
  %(prog)s eval -c qrt_config.json --checkpoint qrt_output/checkpoints/final.npz
  %(prog)s select -c qrt_config.json --prompts prompts.jsonl

Any config key can be overridden from the environment, e.g. QRT__grpo__beta=0.0
        """,
    )
    parser.add_argument("--version", action="version", version=f"QRTune {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")

    init = sub.add_parser("init", parents=[common], help="Write the full default configuration")
    init.add_argument("path", nargs="?", default="qrt_config.json", help="Destination file")
    init.add_argument("--force", action="store_true", help="Overwrite an existing file")

    sub.add_parser("build-dataset", parents=[common], help="Build the cold-start SFT corpus")

    sft = sub.add_parser("sft", parents=[common], help="Supervised fit on the corpus")
    sft.add_argument("--init-checkpoint", type=Path, help="Start from this checkpoint")

    train = sub.add_parser("train", parents=[common], help="Two-stage GRPO training")
    train_group = train.add_argument_group("training options")
    train_group.add_argument("--init-checkpoint", type=Path, help="SFT or stage-1 checkpoint")
    train_group.add_argument("--resume", type=Path, help="Continue from an epoch checkpoint")
    train_group.add_argument(
        "--stage2-only", action="store_true", help="Skip stage 1 (schedule {0, stage2_epochs})"
    )
    train_group.add_argument(
        "--check-grad", action="store_true", help="Finite-difference check before training"
    )

    evaluate = sub.add_parser("eval", parents=[common], help="PLCC/SRCC evaluation")
    source = evaluate.add_mutually_exclusive_group()
    source.add_argument("--checkpoint", type=Path, help="Policy checkpoint to evaluate")
    source.add_argument("--predictions", type=Path, help="JSONL {item_id, response_text | score}")
    source.add_argument("--oracle", action="store_true", help="Predict the ground truth")
    evaluate.add_argument("--split", choices=["train", "eval"], default="eval")
    evaluate.add_argument("--items", type=Path, help="Item file instead of the generated split")

    select = sub.add_parser("select", parents=[common], help="Best-of-N selection with reflection")
    select.add_argument("--prompts", type=Path, help="JSONL {prompt_id, text}")

    ablate = sub.add_parser("ablate", parents=[common], help="Run an ablation or sweep")
    ablate.add_argument("--kind", choices=ABLATIONS, required=True)
    ablate.add_argument("--seeds", type=int, nargs="+", help="Seeds for the reward ablation")

    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        sys.exit(0)
    return args


def _cli_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {
        "seed": args.seed,
        "runtime.deterministic": True if args.deterministic else None,
        "runtime.output_dir": args.output,
        "runtime.log_level": args.log_level,
    }


# ============================================================================
# Commands
# ============================================================================


def cmd_init(args: argparse.Namespace) -> int:
    path = Path(args.path)
    if path.exists() and not args.force:
        raise ConfigError(f"{path} already exists (use --force to overwrite)")
    cfg = load_config(args.config, cli_overrides=_cli_overrides(args))
    write_config(cfg, path)
    print(f"Configuration written: {path}")
    return 0


def _setup(cfg: RunConfig) -> experiments.ToySetup:
    setup = experiments.make_toy_setup(cfg)
    dataset_pipeline.write_items(cfg.output_dir / "items_train.jsonl", setup.train_items)
    dataset_pipeline.write_items(cfg.output_dir / "items_eval.jsonl", setup.eval_items)
    return setup


def _load_policy(cfg: RunConfig, checkpoint: Optional[Path]) -> policy_toy.PolicyParams:
    if checkpoint is None:
        return experiments.initial_policy(cfg)
    policy = CheckpointStore.load(checkpoint).policy
    if policy.vocab != cfg.vocab or policy.feature_dim != cfg.toy.feature_dim:
        raise ConfigError(f"Checkpoint {checkpoint} does not match the configured vocab/features")
    logging.info(f"Initialised policy from {checkpoint}")
    return policy


def cmd_build_dataset(cfg: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    setup = _setup(cfg)
    build = dataset_pipeline.build_corpus(
        setup.train_items,
        cfg.teacher(),
        cfg.dataset.rejection,
        cfg.reward,
        cfg.seed,
        workers=cfg.runtime.effective_workers,
    )
    corpus_path = cfg.output_dir / cfg.dataset.corpus_path
    manifest = dataset_pipeline.export_corpus(build.records, corpus_path, build.ledger, cfg.hash)
    write_jsonl(corpus_path.with_name(f"{corpus_path.stem}.ledger.jsonl"), (e.to_record() for e in build.ledger))
    return {
        "Corpus": corpus_path,
        "Records": manifest["n_records"],
        **{f"Items {name}": count for name, count in manifest["per_disposition"].items()},
    }


def cmd_sft(cfg: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    setup = _setup(cfg)
    corpus_path = cfg.output_dir / cfg.dataset.corpus_path
    if not corpus_path.exists():
        raise DataError(f"Corpus not found: {corpus_path} (run build-dataset first)")
    records = dataset_pipeline.load_corpus(corpus_path)
    if not records:
        raise DataError(f"Corpus {corpus_path} is empty")
    items = {item.item_id: item for item in setup.train_items}
    corpus = dataset_pipeline.corpus_to_sft(records, items, cfg.vocab)
    policy = _load_policy(cfg, args.init_checkpoint)
    history: List[float] = []
    policy = policy_toy.sft_fit(policy, corpus, cfg.sft.epochs, cfg.sft.lr, history)
    final_nll = policy_toy.sequence_nll(policy, corpus)
    path = CheckpointStore(cfg.output_dir / "checkpoints").save(
        Checkpoint(policy, None, None, epoch=-1, global_step=0, stage="sft", seed=cfg.seed, config_hash=cfg.hash),
        cfg.output_dir / "checkpoints" / "sft.npz",
    )
    return {
        "Checkpoint": path,
        "Records": len(records),
        "NLL before": history[0] if history else final_nll,
        "NLL after": final_nll,
    }


def _gradient_check(cfg: RunConfig, policy, items) -> float:
    batch = list(items[: min(4, len(items))])
    grpo = cfg.grpo.for_stage("stage1")
    groups = grpo_engine.rollout(batch, policy, policy, grpo, [cfg.seed, 4242], cfg.reward)
    by_id = {item.item_id: item for item in batch}
    error = grpo_engine.check_gradient(
        policy, groups, by_id, -math.inf, grpo, n_coords=24, rng=np.random.default_rng(cfg.seed)
    )
    if error < 1e-5:
        logging.info(f"Gradient check passed (relative error {error:.2e})")
    else:
        logging.warning(f"Gradient check relative error {error:.2e} exceeds 1e-5")
    return error


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    setup = _setup(cfg)
    policy = _load_policy(cfg, args.init_checkpoint)
    schedule = cfg.schedule
    if args.stage2_only:
        if args.init_checkpoint is None:
            logging.warning("--stage2-only without --init-checkpoint starts stage 2 from scratch")
        schedule = Schedule(0, cfg.schedule.stage2_epochs)

    resume = None
    if args.resume:
        resume = CheckpointStore.load(args.resume)
        if resume.config_hash and resume.config_hash != cfg.hash:
            logging.warning(f"Resuming from a checkpoint written under config {resume.config_hash}")

    rows: Dict[str, Any] = {}
    if args.check_grad:
        rows["Gradient check rel. error"] = _gradient_check(cfg, policy, setup.train_items)

    store = CheckpointStore(cfg.output_dir / "checkpoints")
    log = grpo_engine.run_training(
        setup.train_items,
        schedule,
        cfg.grpo,
        store,
        policy=policy,
        reward_spec=cfg.reward,
        seed=cfg.seed,
        workers=cfg.runtime.effective_workers,
        resume=resume,
        config_hash=cfg.hash,
    )

    log_path = cfg.output_dir / "training_log.jsonl"
    records = log.records()
    if resume is not None and log_path.exists():
        done = resume.epoch + 1
        records = [r for r in read_jsonl(log_path) if r["epoch"] <= done] + records
    write_jsonl(log_path, records)

    final_path = store.save(
        Checkpoint(
            policy=log.policy,
            reference=None,
            velocity=None,
            epoch=len(schedule.stages()) - 1,
            global_step=log.steps[-1].step + 1 if log.steps else 0,
            stage="final",
            seed=cfg.seed,
            config_hash=cfg.hash,
        ),
        store.directory / "final.npz",
    )
    last = log.epochs[-1] if log.epochs else None
    rows.update(
        {
            "Schedule": f"{schedule.stage1_epochs} + {schedule.stage2_epochs} epochs",
            "Steps": len(log.steps),
            "Final mean reward": last.mean_reward if last else "n/a",
            "Training log": log_path,
            "Final checkpoint": final_path,
        }
    )
    return rows


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    if args.items:
        items = dataset_pipeline.read_items(args.items)
    else:
        setup = _setup(cfg)
        items = setup.eval_items if args.split == "eval" else setup.train_items

    if args.oracle:
        predictor, source = eval_metrics.oracle_predictor(), "oracle"
    elif args.predictions:
        predictor, source = eval_metrics.file_predictor(args.predictions), str(args.predictions)
    else:
        checkpoint = args.checkpoint or cfg.output_dir / "checkpoints" / "final.npz"
        if not Path(checkpoint).exists():
            raise ConfigError(f"Nothing to evaluate: {checkpoint} not found (use --checkpoint/--oracle)")
        policy = _load_policy(cfg, Path(checkpoint))
        predictor = eval_metrics.policy_predictor(policy, cfg.grpo.prefix_len, cfg.eval.mode, cfg.seed)
        source = str(checkpoint)

    report = eval_metrics.evaluate(
        items,
        predictor,
        dataset_id=f"toy-{args.split}" if not args.items else args.items.stem,
        workers=cfg.runtime.effective_workers,
        logistic_plcc=cfg.eval.logistic_plcc,
        score_range=(cfg.vocab.score_min, cfg.vocab.score_max),
        config_hash=cfg.hash,
    )
    path = eval_metrics.write_report(report, cfg.output_dir / "eval_report.json")
    Console().print(eval_metrics.report_table(report))
    return {"Predictor": source, "Items": report.n_items, "Parse failures": report.n_parse_failures, "Report": path}


def _read_prompts(path: Path) -> List[tts_harness.Prompt]:
    try:
        return [tts_harness.Prompt(str(r["prompt_id"]), str(r["text"])) for r in read_jsonl(path)]
    except KeyError as e:
        raise DataError(f"{path}: prompt record missing {e}") from e


def cmd_select(cfg: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    tts = cfg.tts
    prompts = _read_prompts(args.prompts) if args.prompts else tts_harness.make_mock_prompts(tts.n_prompts, cfg.seed)
    if tts.generator_url and tts.scorer_url:
        generator = tts_harness.HttpGeneratorClient(tts.generator_url, tts.timeout)
        scorer = tts_harness.HttpScorerClient(tts.scorer_url, tts.timeout)
    else:
        world = tts_harness.MockWorld(
            seed=cfg.seed, score_range=(cfg.vocab.score_min, cfg.vocab.score_max), **tts.mock
        )
        generator, scorer = tts_harness.MockGenerator(world), tts_harness.MockScorer(world)

    transcript = tts_harness.TranscriptLog()
    results = tts_harness.run_selection(
        prompts, generator, scorer, tts.harness_config(cfg.runtime.effective_workers), transcript, seed=cfg.seed
    )
    path = transcript.write(cfg.output_dir / "transcripts.jsonl", config_hash=cfg.hash)
    return {
        "Prompts": len(results),
        "Mean random pick": float(np.mean([r.random.combined for r in results])),
        f"Mean best-of-{tts.n}": float(np.mean([r.best_of_n.combined for r in results])),
        "Mean after reflection": float(np.mean([r.reflected.combined for r in results])),
        "Transcript": path,
    }


def cmd_ablate(cfg: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    if args.kind == "reward":
        report = experiments.reward_ablation(cfg, args.seeds or (0, 1, 2, 3, 4))
    elif args.kind == "sigma":
        report = experiments.sigma_sweep(cfg)
    elif args.kind == "stage":
        report = experiments.stage_ablation(cfg)
    else:
        report = experiments.cold_start_ablation(cfg)
    md_path, json_path = experiments.write_experiment_report(report, cfg.output_dir / "experiments", cfg.hash)
    Console().print(experiments.experiment_table(report))
    return {"Runs": len(report.rows), "Report": md_path, "Data": json_path}


COMMANDS: Dict[str, Callable[[RunConfig, argparse.Namespace], Dict[str, Any]]] = {
    "build-dataset": cmd_build_dataset,
    "sft": cmd_sft,
    "train": cmd_train,
    "eval": cmd_eval,
    "select": cmd_select,
    "ablate": cmd_ablate,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for the QRTune runner."""
    args = parse_arguments(argv)
    try:
        if args.command == "init":
            return cmd_init(args)

        cfg = load_config(args.config, cli_overrides=_cli_overrides(args))
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        setup_logging(cfg.runtime.log_level, cfg.output_dir / "logs")
        write_config(cfg, cfg.output_dir / "config.json")
        logging.info(f"=== {args.command.upper()} (config {cfg.hash}) ===")

        start_time = time.time()
        rows = COMMANDS[args.command](cfg, args)
        print_summary(f"qrtune {args.command}", rows, time.time() - start_time)
        return 0

    except KeyboardInterrupt:
        logging.warning("\nExecution interrupted by user")
        return 130
    except TrainingAborted as e:
        logging.error(f"Training aborted: {e}")
        if e.checkpoint:
            logging.error(f"Resume with: --resume {e.checkpoint}")
        return e.exit_code
    except QrtError as e:
        logging.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except Exception as e:
        logging.error(f"Fatal error: {e}", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
