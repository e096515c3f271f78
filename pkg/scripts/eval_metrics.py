#!/usr/bin/env python3
"""
Score-fidelity evaluation: PLCC, SRCC, response parsing and reports.

Correlations return ``None`` when they are undefined (fewer than two points
or a constant vector) instead of propagating NaN.

Author: QRTune Team
Version: 1.0.0
"""

import concurrent.futures
import logging
import math
import re
import warnings
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from rich.table import Table
from scipy.optimize import OptimizeWarning, curve_fit
from scipy.stats import rankdata

import policy_toy
from policy_toy import PolicyParams
from qrt_core import TASK_KINDS, ContractError, DataError, ScoreItem, read_jsonl, write_json

logger = logging.getLogger(__name__)

Prediction = Union[str, float, int, None]
Predictor = Callable[[ScoreItem], Prediction]

_SCORE_TAG = re.compile(r"SCORE\s*:\s*([-+]?\d+(?:\.\d+)?)", re.IGNORECASE)
_BOXED = re.compile(r"\\boxed\{\s*([-+]?\d+(?:\.\d+)?)\s*\}")
_NUMERAL = re.compile(r"(?<![\w.\-])(\d+(?:\.\d+)?)(?![\w]|\.\d)")

DEFAULT_SCORE_RANGE = (1.0, 5.0)


# ============================================================================
# Correlations
# ============================================================================


def _pair(pred: Sequence[float], truth: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(pred, dtype=np.float64).reshape(-1)
    b = np.asarray(truth, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise ContractError(f"Length mismatch: {a.size} predictions vs {b.size} truths")
    if a.size < 2:
        raise ContractError(f"Correlation needs at least 2 points, got {a.size}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ContractError("Correlation inputs must be finite")
    return a, b


def _pearson(a: np.ndarray, b: np.ndarray) -> Optional[float]:
    # exact test on the raw values; centring a constant can leave rounding residue
    if np.all(a == a[0]) or np.all(b == b[0]):
        return None
    a = a - a.mean()
    b = b - b.mean()
    denom = math.sqrt(float(np.dot(a, a)) * float(np.dot(b, b)))
    if not math.isfinite(denom) or denom <= 0.0:
        return None
    return max(-1.0, min(1.0, float(np.dot(a, b)) / denom))


def plcc(pred: Sequence[float], truth: Sequence[float]) -> Optional[float]:
    """Pearson linear correlation; ``None`` if either vector is constant."""
    return _pearson(*_pair(pred, truth))


def rank_average(values: Sequence[float]) -> np.ndarray:
    """1-based fractional ranks; tied values share their mean rank."""
    return rankdata(np.asarray(values, dtype=np.float64), method="average")


def srcc(pred: Sequence[float], truth: Sequence[float]) -> Optional[float]:
    """Spearman rank correlation; ``None`` if either vector is all ties."""
    a, b = _pair(pred, truth)
    return _pearson(rank_average(a), rank_average(b))


def _logistic4(x, b1, b2, b3, b4):
    return (b1 - b2) / (1.0 + np.exp(-(x - b3) / abs(b4))) + b2


def logistic_remap(pred: Sequence[float], truth: Sequence[float]) -> np.ndarray:
    """Fit the 4-parameter logistic from predictions to truths and apply it.

    Returns the predictions unchanged when the fit does not converge.
    """
    a, b = _pair(pred, truth)
    p0 = [float(b.max()), float(b.min()), float(a.mean()), float(a.std()) or 1.0]
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", OptimizeWarning)
            popt, _ = curve_fit(_logistic4, a, b, p0=p0, maxfev=10000)
    except (RuntimeError, ValueError, OptimizeWarning) as e:
        logger.debug(f"Logistic fit failed, using raw predictions: {e}")
        return a
    fitted = _logistic4(a, *popt)
    return fitted if np.all(np.isfinite(fitted)) else a


# ============================================================================
# Response parsing
# ============================================================================


def parse_score(
    response_text: Any, score_range: Tuple[float, float] = DEFAULT_SCORE_RANGE
) -> Optional[float]:
    """Final numeric score in a free-text response, or ``None``.

    Priority: the last ``SCORE:`` tag, then the last ``\\boxed{}`` answer,
    then the last standalone numeral inside ``score_range``. Tagged and boxed
    values are taken as written; the range only applies to bare numerals.
    """
    if not isinstance(response_text, str):
        return None
    for pattern in (_SCORE_TAG, _BOXED):
        matches = pattern.findall(response_text)
        if matches:
            return float(matches[-1])
    low, high = score_range
    in_range = [float(m) for m in _NUMERAL.findall(response_text) if low <= float(m) <= high]
    return in_range[-1] if in_range else None


def _to_score(prediction: Prediction, score_range: Tuple[float, float]) -> Optional[float]:
    if isinstance(prediction, bool) or prediction is None:
        return None
    if isinstance(prediction, (int, float, np.floating, np.integer)):
        value = float(prediction)
        return value if math.isfinite(value) else None
    return parse_score(prediction, score_range)


# ============================================================================
# Evaluation
# ============================================================================


@dataclass
class TaskBreakdown:
    n_items: int = 0
    n_parse_failures: int = 0
    plcc: Optional[float] = None
    srcc: Optional[float] = None


@dataclass
class EvalReport:
    dataset_id: str
    n_items: int
    n_parse_failures: int
    plcc: Optional[float]
    srcc: Optional[float]
    plcc_logistic: Optional[float] = None
    per_task: Dict[str, TaskBreakdown] = field(default_factory=dict)
    config_hash: str = ""

    @property
    def plcc_defined(self) -> bool:
        return self.plcc is not None

    @property
    def srcc_defined(self) -> bool:
        return self.srcc is not None

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["plcc_defined"] = self.plcc_defined
        data["srcc_defined"] = self.srcc_defined
        return data


def _correlations(pred: List[float], truth: List[float]) -> Tuple[Optional[float], Optional[float]]:
    if len(pred) < 2:
        return None, None
    return plcc(pred, truth), srcc(pred, truth)


def _predict(predictor: Predictor, item: ScoreItem, score_range) -> Optional[float]:
    try:
        return _to_score(predictor(item), score_range)
    except Exception as e:
        logger.warning(f"Predictor failed on {item.item_id}: {e}")
        return None


def evaluate(
    dataset: Sequence[ScoreItem],
    predictor: Predictor,
    *,
    dataset_id: str = "eval",
    workers: int = 1,
    logistic_plcc: bool = False,
    score_range: Tuple[float, float] = DEFAULT_SCORE_RANGE,
    config_hash: str = "",
) -> EvalReport:
    """Run the predictor on every item and correlate parsed scores with truth.

    Unparseable responses and predictor exceptions count as parse failures
    and are left out of the correlations.
    """
    scores: List[Optional[float]] = [None] * len(dataset)
    if workers <= 1:
        for index, item in enumerate(dataset):
            scores[index] = _predict(predictor, item, score_range)
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
            future_to_index = {
                executor.submit(_predict, predictor, item, score_range): index
                for index, item in enumerate(dataset)
            }
            for future in concurrent.futures.as_completed(future_to_index):
                scores[future_to_index[future]] = future.result()

    pred = [s for s in scores if s is not None]
    truth = [item.truth_score for item, s in zip(dataset, scores) if s is not None]
    overall_plcc, overall_srcc = _correlations(pred, truth)

    per_task = {}
    for task in TASK_KINDS:
        pairs = [(s, item.truth_score) for item, s in zip(dataset, scores) if item.task_kind == task]
        if not pairs:
            continue
        parsed = [(s, t) for s, t in pairs if s is not None]
        task_plcc, task_srcc = _correlations([p for p, _ in parsed], [t for _, t in parsed])
        per_task[task] = TaskBreakdown(
            n_items=len(pairs),
            n_parse_failures=len(pairs) - len(parsed),
            plcc=task_plcc,
            srcc=task_srcc,
        )

    plcc_log = None
    if logistic_plcc and overall_plcc is not None:
        plcc_log = plcc(logistic_remap(pred, truth), truth)

    report = EvalReport(
        dataset_id=dataset_id,
        n_items=len(dataset),
        n_parse_failures=len(dataset) - len(pred),
        plcc=overall_plcc,
        srcc=overall_srcc,
        plcc_logistic=plcc_log,
        per_task=per_task,
        config_hash=config_hash,
    )
    if report.n_parse_failures:
        logger.warning(f"{report.n_parse_failures} of {report.n_items} responses could not be parsed")
    return report


def write_report(report: EvalReport, path: Path, config_hash: Optional[str] = None) -> Path:
    data = report.to_dict()
    if config_hash is not None:
        data["config_hash"] = config_hash
    return write_json(path, data)


def report_table(report: EvalReport) -> Table:
    def fmt(value):
        return "undefined" if value is None else f"{value:.4f}"

    table = Table(title=f"Evaluation: {report.dataset_id}")
    for column in ("split", "items", "parse failures", "PLCC", "SRCC"):
        table.add_column(column)
    table.add_row(
        "all", str(report.n_items), str(report.n_parse_failures), fmt(report.plcc), fmt(report.srcc)
    )
    for task, row in report.per_task.items():
        table.add_row(task, str(row.n_items), str(row.n_parse_failures), fmt(row.plcc), fmt(row.srcc))
    return table


# ============================================================================
# Predictors
# ============================================================================


def oracle_predictor() -> Predictor:
    return lambda item: item.truth_score


def constant_predictor(value: float) -> Predictor:
    return lambda item: value


def policy_predictor(
    params: PolicyParams, prefix_len: int, mode: str = "greedy", seed: int = 0
) -> Predictor:
    """Predictor backed by a toy policy.

    ``greedy`` and ``sample`` return rendered response text so the parsing
    path is exercised; ``expected`` returns the score head's mean after the
    greedy reasoning prefix.
    """
    if mode not in ("greedy", "sample", "expected"):
        raise ContractError(f"Unknown predictor mode: {mode!r}")

    def predict(item: ScoreItem) -> Prediction:
        if mode == "sample":
            rng = np.random.default_rng([seed, zlib.crc32(item.item_id.encode("utf-8"))])
            tokens = policy_toy.sample(params, item, prefix_len, rng).tokens
            return params.vocab.render(tokens)
        tokens = policy_toy.greedy_decode(params, item, prefix_len)
        if mode == "expected":
            return policy_toy.expected_score(params, item, tokens[:-1])
        return params.vocab.render(tokens)

    return predict


def file_predictor(path: Path) -> Predictor:
    """Predictions from JSONL lines ``{item_id, response_text | score}``."""
    table: Dict[str, Prediction] = {}
    for record in read_jsonl(path):
        if "item_id" not in record:
            raise DataError(f"{path}: prediction record without item_id: {record!r}")
        table[str(record["item_id"])] = record.get("response_text", record.get("score"))

    def predict(item: ScoreItem) -> Prediction:
        if item.item_id not in table:
            raise ContractError(f"No prediction for item {item.item_id}")
        return table[item.item_id]

    return predict
