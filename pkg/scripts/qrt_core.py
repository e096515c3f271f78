#!/usr/bin/env python3
"""
QRTune Core - Shared utilities for reward-tuning runs

Contains logging setup, the error hierarchy, the item/trajectory types shared
by the reward, policy and optimisation modules, and small JSON/JSONL helpers
used by every command.

Author: QRTune Team
Version: 1.0.0
"""

import hashlib
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import colorlog
import numpy as np

TASK_KINDS = ("technical", "aesthetic", "alignment")

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
CONSOLE_FORMAT = "%(log_color)s%(levelname)-8s%(reset)s %(name)s: %(message)s"


# ============================================================================
# Errors
# ============================================================================


class QrtError(Exception):
    """Base class for every failure the CLI knows how to report."""

    exit_code = 1


class ConfigError(QrtError, ValueError):
    """Invalid configuration value or missing configuration input."""

    exit_code = 2


class ContractError(QrtError, ValueError):
    """An operation's precondition was violated by its caller."""

    exit_code = 3


class DataError(QrtError):
    """Unreadable, unwritable or malformed data files."""

    exit_code = 3


class DomainError(QrtError, ValueError):
    """Non-finite score passed to a reward function."""

    exit_code = 3


class NumericalError(QrtError, ArithmeticError):
    """Non-finite intermediate quantity during optimisation."""

    exit_code = 4


# ============================================================================
# Logging
# ============================================================================


def setup_logging(log_level: str = "INFO", log_dir: Optional[Path] = None) -> Path:
    """Setup console and file logging.

    The console handler is colourised with colorlog; the file handler is the
    run's sidecar log and the only place wall-clock timestamps are written.

    Args:
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR)
        log_dir: Optional custom log directory (default: ./logs)

    Returns:
        Path to the created log file
    """
    if log_dir:
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
    else:
        log_dir = Path("logs")
        log_dir.mkdir(exist_ok=True)

    log_file = log_dir / f"qrt_{datetime.now().strftime('%Y%m%d_%H%M%S')}.log"

    console = colorlog.StreamHandler(sys.stdout)
    console.setFormatter(colorlog.ColoredFormatter(CONSOLE_FORMAT))
    file_handler = logging.FileHandler(log_file)
    file_handler.setFormatter(logging.Formatter(LOG_FORMAT))

    logging.basicConfig(
        level=getattr(logging, log_level.upper()),
        handlers=[console, file_handler],
        force=True,
    )

    logging.info(f"Logging to file: {log_file}")
    return log_file


# ============================================================================
# Shared domain types
# ============================================================================


@dataclass(frozen=True)
class ScoreItem:
    """One evaluable unit with its ground-truth score on the native scale."""

    item_id: str
    task_kind: str
    truth_score: float
    content: Any = None

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise ContractError(f"Unknown task kind: {self.task_kind}")
        if not math.isfinite(float(self.truth_score)):
            raise ContractError(f"Item {self.item_id} has non-finite truth score")


@dataclass
class Trajectory:
    """One sampled response and its per-token policy statistics."""

    item_id: str
    tokens: np.ndarray
    logp_old: np.ndarray
    entropy: np.ndarray
    parsed_score: Optional[float] = None
    logp_new: Optional[np.ndarray] = None
    logp_ref: Optional[np.ndarray] = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.logp_old = np.asarray(self.logp_old, dtype=np.float64)
        self.entropy = np.asarray(self.entropy, dtype=np.float64)
        if self.logp_new is None:
            self.logp_new = self.logp_old.copy()
        else:
            self.logp_new = np.asarray(self.logp_new, dtype=np.float64)
        if self.logp_ref is not None:
            self.logp_ref = np.asarray(self.logp_ref, dtype=np.float64)
        self.validate()

    def __len__(self) -> int:
        return int(self.tokens.shape[0])

    def validate(self) -> None:
        length = self.tokens.shape[0]
        if length < 1:
            raise ContractError(f"Trajectory for {self.item_id} has no tokens")
        arrays = {"logp_old": self.logp_old, "logp_new": self.logp_new, "entropy": self.entropy}
        if self.logp_ref is not None:
            arrays["logp_ref"] = self.logp_ref
        for name, values in arrays.items():
            if values.shape != (length,):
                raise ContractError(
                    f"Trajectory for {self.item_id}: {name} has shape {values.shape}, "
                    f"expected ({length},)"
                )
        if np.any(self.entropy < 0):
            raise ContractError(f"Trajectory for {self.item_id} has negative entropy")


# ============================================================================
# Files
# ============================================================================


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: Dict[str, Any]) -> str:
    """Short stable digest of a configuration document."""
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()[:16]


def write_json(path: Path, payload: Any) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise DataError(f"Could not write {path}: {e}") from e
    return path


def read_json(path: Path) -> Any:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise DataError(f"File not found: {path}") from e
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"Could not read {path}: {e}") from e


def write_jsonl(path: Path, records: Iterable[Dict[str, Any]]) -> int:
    """Write one JSON object per line with sorted keys; returns the record count."""
    path = Path(path)
    count = 0
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for record in records:
                f.write(json.dumps(record, sort_keys=True) + "\n")
                count += 1
    except OSError as e:
        raise DataError(f"Could not write {path}: {e}") from e
    return count


def read_jsonl(path: Path) -> List[Dict[str, Any]]:
    path = Path(path)
    records = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise DataError(f"{path}:{lineno}: invalid JSON record ({e})") from e
    except FileNotFoundError as e:
        raise DataError(f"File not found: {path}") from e
    except OSError as e:
        raise DataError(f"Could not read {path}: {e}") from e
    return records


def print_summary(title: str, rows: Dict[str, Any], total_time: float) -> None:
    """Print a command summary block.

    Args:
        title: Heading line
        rows: Label/value pairs in display order
        total_time: Total execution time in seconds
    """
    print("\n" + "=" * 60)
    print(title.upper())
    print("=" * 60)
    for label, value in rows.items():
        if isinstance(value, float):
            value = f"{value:.4f}"
        print(f"{label}: {value}")
    print(f"\nTotal time: {total_time:.2f} seconds ({total_time / 60:.1f} minutes)")
    print("=" * 60)
