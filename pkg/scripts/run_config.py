#!/usr/bin/env python3
"""
Run configuration: defaults, file loading, overrides and validation.

A run is described by one JSON (or YAML) document. Values missing from the
file fall back to ``DEFAULT_CONFIG``; environment variables of the form
``QRT__<section>__<key>=<value>`` override file values; command-line flags
override both. The merged document is checked against ``CONFIG_SCHEMA`` and
then turned into typed sections whose own invariants are checked again.

Author: QRTune Team
Version: 1.0.0
"""

import copy
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

import jsonschema
import yaml

from dataset_pipeline import RejectionPolicy, SimulatedTeacher
from grpo_engine import GrpoConfig, Schedule
from policy_toy import ARCHITECTURES, Vocabulary
from qrt_core import TASK_KINDS, ConfigError, canonical_json, config_hash
from reward_shaping import RewardSpec
from tts_harness import Combiner, TtsConfig

ENV_PREFIX = "QRT__"

DEFAULT_CONFIG: Dict[str, Any] = {
    "seed": 0,
    "reward": {"kind": "gaussian", "sigma": 0.8, "margin": 0.3, "format_penalty": 0.0},
    "grpo": {
        "group_size": 16,
        "eps_low": 0.2,
        "eps_high": 0.2,
        "beta": 0.04,
        "tau_std": 1e-3,
        "entropy_gate": {"mode": "quantile", "rho": 0.2, "tau_h": 0.0},
        "sigma": 0.8,
        "adv_std_normalize": True,
        "learning_rate": 150.0,
        "momentum": 0.0,
        "batch_size": 64,
        "prefix_len": 6,
    },
    "schedule": {"stage1_epochs": 2, "stage2_epochs": 2},
    "policy": {"arch": "tabular", "hidden": [16], "init_scale": 0.0},
    "vocab": {"reason_tokens": 8, "score_min": 1.0, "score_max": 5.0, "score_step": 0.1},
    # synthetic items standing in for images and prompts
    "toy": {"feature_dim": 4, "n_train": 200, "n_eval": 200},
    "dataset": {
        "teacher": {
            "noise": 0.4,
            "task_bias": {"technical": 0.0, "aesthetic": 0.1, "alignment": -0.1},
            "plan_len": 3,
            "failure_rate": 0.0,
        },
        "rejection": {"teacher_samples_per_item": 8, "accept_reward_min": 0.7, "keep_per_item": 2},
        "corpus_path": "corpus.jsonl",
    },
    "sft": {"epochs": 30, "lr": 2.0},
    "eval": {"mode": "greedy", "logistic_plcc": False},
    "tts": {
        "n": 20,
        "combiner": {"kind": "mean", "tasks": ["aesthetic", "technical"], "weights": {}, "task": None},
        "reflection_rounds": 20,
        "retries": 2,
        "backoff_seconds": 0.5,
        "max_consecutive_failures": 3,
        "n_prompts": 8,
        "generator_url": None,
        "scorer_url": None,
        "timeout": 30.0,
        "mock": {"delta": 0.2, "spread": 0.8, "failure_rate": 0.0},
    },
    "runtime": {"workers": 1, "deterministic": False, "output_dir": "qrt_output", "log_level": "INFO"},
}


# ============================================================================
# Schema
# ============================================================================


def _obj(properties: Dict[str, Any]) -> Dict[str, Any]:
    return {"type": "object", "properties": properties, "additionalProperties": False}


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_UNIT = {"type": "number", "minimum": 0, "maximum": 1}
_INT_POS = {"type": "integer", "minimum": 1}
_INT_NONNEG = {"type": "integer", "minimum": 0}
_TASK = {"enum": list(TASK_KINDS)}

CONFIG_SCHEMA: Dict[str, Any] = _obj(
    {
        "seed": _INT_NONNEG,
        "reward": _obj(
            {
                "kind": {"enum": ["gaussian", "threshold"]},
                "sigma": _POS,
                "margin": _POS,
                "format_penalty": {"type": "number", "minimum": -1, "maximum": 0},
            }
        ),
        "grpo": _obj(
            {
                "group_size": _INT_POS,
                "eps_low": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "eps_high": _POS,
                "beta": _NONNEG,
                "tau_std": _NONNEG,
                "entropy_gate": _obj(
                    {
                        "mode": {"enum": ["off", "quantile", "fixed"]},
                        "rho": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                        "tau_h": _NONNEG,
                    }
                ),
                "sigma": _POS,
                "adv_std_normalize": {"type": "boolean"},
                "learning_rate": _POS,
                "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "batch_size": _INT_POS,
                "prefix_len": _INT_NONNEG,
            }
        ),
        "schedule": _obj({"stage1_epochs": _INT_NONNEG, "stage2_epochs": _INT_NONNEG}),
        "policy": _obj(
            {
                "arch": {"enum": sorted(ARCHITECTURES)},
                "hidden": {"type": "array", "items": _INT_POS, "minItems": 1},
                "init_scale": _NONNEG,
            }
        ),
        "vocab": _obj(
            {"reason_tokens": _INT_POS, "score_min": _NUM, "score_max": _NUM, "score_step": _POS}
        ),
        "toy": _obj({"feature_dim": _INT_POS, "n_train": _INT_POS, "n_eval": {"type": "integer", "minimum": 2}}),
        "dataset": _obj(
            {
                "teacher": _obj(
                    {
                        "noise": _NONNEG,
                        "task_bias": {
                            "type": "object",
                            "propertyNames": _TASK,
                            "additionalProperties": _NUM,
                        },
                        "plan_len": _INT_POS,
                        "failure_rate": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                    }
                ),
                "rejection": _obj(
                    {
                        "teacher_samples_per_item": _INT_POS,
                        "accept_reward_min": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                        "keep_per_item": _INT_POS,
                    }
                ),
                "corpus_path": {"type": "string", "minLength": 1},
            }
        ),
        "sft": _obj({"epochs": _INT_NONNEG, "lr": _POS}),
        "eval": _obj({"mode": {"enum": ["greedy", "sample", "expected"]}, "logistic_plcc": {"type": "boolean"}}),
        "tts": _obj(
            {
                "n": _INT_POS,
                "combiner": _obj(
                    {
                        "kind": {"enum": ["mean", "weighted", "single"]},
                        "tasks": {"type": "array", "items": _TASK},
                        "weights": {"type": "object", "propertyNames": _TASK, "additionalProperties": _NONNEG},
                        "task": {"anyOf": [_TASK, {"type": "null"}]},
                    }
                ),
                "reflection_rounds": _INT_NONNEG,
                "retries": _INT_NONNEG,
                "backoff_seconds": _NONNEG,
                "max_consecutive_failures": _INT_POS,
                "n_prompts": _INT_POS,
                "generator_url": {"type": ["string", "null"]},
                "scorer_url": {"type": ["string", "null"]},
                "timeout": _POS,
                "mock": _obj({"delta": _NUM, "spread": _NONNEG, "failure_rate": _UNIT}),
            }
        ),
        "runtime": _obj(
            {
                "workers": _INT_POS,
                "deterministic": {"type": "boolean"},
                "output_dir": {"type": "string", "minLength": 1},
                "log_level": {"enum": ["DEBUG", "INFO", "WARNING", "ERROR"]},
            }
        ),
    }
)


def validate_document(document: Dict[str, Any]) -> None:
    """Raise ConfigError listing every schema violation by field path."""
    validator = jsonschema.Draft7Validator(CONFIG_SCHEMA)
    problems = []
    for error in sorted(validator.iter_errors(document), key=lambda e: list(e.absolute_path)):
        location = ".".join(str(p) for p in error.absolute_path) or "<root>"
        problems.append(f"{location}: {error.message}")
    if problems:
        raise ConfigError("Invalid configuration:\n  " + "\n  ".join(problems))


# ============================================================================
# Typed sections
# ============================================================================


@dataclass(frozen=True)
class PolicySection:
    arch: str = "tabular"
    hidden: Tuple[int, ...] = (16,)
    init_scale: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))


@dataclass(frozen=True)
class ToySection:
    feature_dim: int = 4
    n_train: int = 200
    n_eval: int = 200


@dataclass(frozen=True)
class DatasetSection:
    teacher: Dict[str, Any] = field(default_factory=dict)
    rejection: RejectionPolicy = field(default_factory=RejectionPolicy)
    corpus_path: str = "corpus.jsonl"


@dataclass(frozen=True)
class SftSection:
    epochs: int = 30
    lr: float = 2.0


@dataclass(frozen=True)
class EvalSection:
    mode: str = "greedy"
    logistic_plcc: bool = False


@dataclass(frozen=True)
class TtsSection:
    n: int = 20
    combiner: Combiner = field(default_factory=Combiner)
    reflection_rounds: int = 20
    retries: int = 2
    backoff_seconds: float = 0.5
    max_consecutive_failures: int = 3
    n_prompts: int = 8
    generator_url: Optional[str] = None
    scorer_url: Optional[str] = None
    timeout: float = 30.0
    mock: Dict[str, float] = field(default_factory=dict)

    def harness_config(self, workers: int = 1) -> TtsConfig:
        return TtsConfig(
            n=self.n,
            combiner=self.combiner,
            reflection_rounds=self.reflection_rounds,
            retries=self.retries,
            backoff_seconds=self.backoff_seconds,
            max_consecutive_failures=self.max_consecutive_failures,
            workers=workers,
        )


@dataclass(frozen=True)
class RuntimeSection:
    workers: int = 1
    deterministic: bool = False
    output_dir: str = "qrt_output"
    log_level: str = "INFO"

    @property
    def effective_workers(self) -> int:
        return 1 if self.deterministic else self.workers


@dataclass(frozen=True)
class RunConfig:
    seed: int
    reward: RewardSpec
    grpo: GrpoConfig
    schedule: Schedule
    policy: PolicySection
    vocab: Vocabulary
    toy: ToySection
    dataset: DatasetSection
    sft: SftSection
    eval: EvalSection
    tts: TtsSection
    runtime: RuntimeSection

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> "RunConfig":
        """Validate a full document and build the typed configuration."""
        validate_document(document)
        try:
            dataset = document["dataset"]
            tts = dict(document["tts"])
            tts["combiner"] = Combiner.from_dict(tts["combiner"])
            vocab = Vocabulary.from_dict(document["vocab"])
            config = cls(
                seed=document["seed"],
                reward=RewardSpec.from_dict(document["reward"]),
                grpo=GrpoConfig.from_dict(document["grpo"]),
                schedule=Schedule(**document["schedule"]),
                policy=PolicySection(**document["policy"]),
                vocab=vocab,
                toy=ToySection(**document["toy"]),
                dataset=DatasetSection(
                    teacher=dict(dataset["teacher"]),
                    rejection=RejectionPolicy(**dataset["rejection"]),
                    corpus_path=dataset["corpus_path"],
                ),
                sft=SftSection(**document["sft"]),
                eval=EvalSection(**document["eval"]),
                tts=TtsSection(**tts),
                runtime=RuntimeSection(**document["runtime"]),
            )
        except KeyError as e:
            raise ConfigError(f"Missing configuration key: {e}") from e
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(str(e)) from e
        # teacher settings are checked by constructing one
        config.teacher()
        return config

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "reward": self.reward.to_dict(),
            "grpo": self.grpo.to_dict(),
            "schedule": asdict(self.schedule),
            "policy": {**asdict(self.policy), "hidden": list(self.policy.hidden)},
            "vocab": self.vocab.to_dict(),
            "toy": asdict(self.toy),
            "dataset": {
                "teacher": copy.deepcopy(self.dataset.teacher),
                "rejection": asdict(self.dataset.rejection),
                "corpus_path": self.dataset.corpus_path,
            },
            "sft": asdict(self.sft),
            "eval": asdict(self.eval),
            "tts": {
                **{k: v for k, v in asdict(self.tts).items() if k != "combiner"},
                "combiner": self.tts.combiner.to_dict(),
                "mock": dict(self.tts.mock),
            },
            "runtime": asdict(self.runtime),
        }

    @property
    def hash(self) -> str:
        """Digest of everything that affects results; the runtime section is left out."""
        document = self.to_dict()
        document.pop("runtime")
        return config_hash(document)

    @property
    def output_dir(self) -> Path:
        return Path(self.runtime.output_dir)

    def teacher(self) -> SimulatedTeacher:
        return SimulatedTeacher(vocab=self.vocab, reason_len=self.grpo.prefix_len, **self.dataset.teacher)

    def replace_document(self, **overrides: Any) -> "RunConfig":
        """Copy with dotted-path overrides, e.g. ``{"grpo.sigma": 1.0}``."""
        document = self.to_dict()
        for dotted, value in overrides.items():
            _set_path(document, dotted.split("."), value)
        return RunConfig.from_dict(document)


# ============================================================================
# Loading
# ============================================================================


def default_document() -> Dict[str, Any]:
    return copy.deepcopy(DEFAULT_CONFIG)


def deep_merge(base: Dict[str, Any], override: Mapping[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            # free-form maps are replaced, sections are merged
            if key in ("task_bias", "weights"):
                merged[key] = dict(value)
            else:
                merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _set_path(document: Dict[str, Any], path: List[str], value: Any) -> None:
    node = document
    for part in path[:-1]:
        child = node.get(part)
        if not isinstance(child, dict):
            child = {}
            node[part] = child
        node = child
    node[path[-1]] = value


def _resolve_path(config_path: str) -> Path:
    config_file = Path(os.path.expanduser(config_path))
    if not config_file.is_absolute() and not config_file.exists():
        scripts_dir = Path(__file__).resolve().parent
        for candidate in (Path.cwd() / config_file, scripts_dir / config_file, scripts_dir.parent / config_file):
            if candidate.exists():
                return candidate
    return config_file


def read_config_file(config_path: str) -> Dict[str, Any]:
    """Parse a JSON or YAML configuration file into a plain dict."""
    config_file = _resolve_path(config_path)
    if not config_file.exists():
        raise ConfigError(f"Config file not found: {config_path}")
    try:
        with open(config_file, "r", encoding="utf-8") as f:
            if config_file.suffix.lower() in (".yaml", ".yml"):
                document = yaml.safe_load(f) or {}
            else:
                document = json.load(f)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"Could not parse {config_file}: {e}") from e
    except OSError as e:
        raise ConfigError(f"Could not read {config_file}: {e}") from e
    if not isinstance(document, dict):
        raise ConfigError(f"{config_file}: top level must be a mapping")
    logging.info(f"Loaded configuration from: {config_file}")
    return document


def apply_env_overrides(
    document: Dict[str, Any], environ: Optional[Mapping[str, str]] = None
) -> Dict[str, Any]:
    """Apply ``QRT__section__key=value`` overrides; values are JSON or plain text."""
    environ = os.environ if environ is None else environ
    document = copy.deepcopy(document)
    for name in sorted(environ):
        if not name.startswith(ENV_PREFIX):
            continue
        path = [part for part in name[len(ENV_PREFIX):].split("__") if part]
        if not path:
            continue
        raw = environ[name]
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _set_path(document, path, value)
        logging.debug(f"Config override from environment: {'.'.join(path)}={value!r}")
    return document


def load_config(
    config_path: Optional[str] = None,
    environ: Optional[Mapping[str, str]] = None,
    cli_overrides: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """Defaults, then file, then environment, then command-line flags."""
    document = default_document()
    if config_path:
        document = deep_merge(document, read_config_file(config_path))
    document = apply_env_overrides(document, environ)
    for dotted, value in (cli_overrides or {}).items():
        if value is not None:
            _set_path(document, dotted.split("."), value)
    return RunConfig.from_dict(document)


def write_config(config: RunConfig, path: Path) -> Path:
    """Write the full configuration document (YAML for .yaml/.yml paths)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = config.to_dict()
    with open(path, "w", encoding="utf-8") as f:
        if path.suffix.lower() in (".yaml", ".yml"):
            yaml.safe_dump(document, f, sort_keys=True)
        else:
            f.write(json.dumps(document, indent=2, sort_keys=True) + "\n")
    return path


def same_config(a: RunConfig, b: RunConfig) -> bool:
    return canonical_json(a.to_dict()) == canonical_json(b.to_dict())
