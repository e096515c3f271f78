import json
import math
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT_DIR = Path(__file__).resolve().parents[1]
SCRIPTS_DIR = ROOT_DIR / "scripts"
if str(SCRIPTS_DIR) not in sys.path:
    sys.path.insert(0, str(SCRIPTS_DIR))

import eval_metrics as em
import policy_toy
from qrt_core import ContractError, ScoreItem, write_jsonl


def _oracle_pearson(a, b):
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    if va == 0 or vb == 0:
        return None
    return cov / math.sqrt(va * vb)


def _oracle_ranks(values):
    ranks = []
    for v in values:
        below = sum(1 for w in values if w < v)
        equal = sum(1 for w in values if w == v)
        ranks.append(below + (equal + 1) / 2)
    return ranks


def _items(truths):
    kinds = ("technical", "aesthetic", "alignment")
    return [ScoreItem(f"i{k}", kinds[k % 3], t) for k, t in enumerate(truths)]


# ----------------------------------------------------------------------------
# Correlations
# ----------------------------------------------------------------------------


def test_plcc_examples():
    truth = [1.0, 2.0, 3.5, 4.0]
    assert em.plcc(truth, truth) == pytest.approx(1.0, abs=1e-15)
    assert em.plcc([-t for t in truth], truth) == pytest.approx(-1.0, abs=1e-15)
    assert em.plcc([1, 2, 3, 5], [1, 2, 3, 4]) == pytest.approx(
        _oracle_pearson([1, 2, 3, 5], [1, 2, 3, 4]), abs=1e-12
    )


def test_srcc_examples():
    truth = [1.0, 2.0, 3.0, 4.0, 5.0]
    assert em.srcc([math.exp(t) for t in truth], truth) == pytest.approx(1.0, abs=1e-15)
    assert em.srcc(truth[::-1], truth) == pytest.approx(-1.0, abs=1e-15)
    assert em.srcc([1, 1, 2], [1, 2, 3]) == pytest.approx(
        _oracle_pearson([1.5, 1.5, 3], [1, 2, 3]), abs=1e-12
    )
    np.testing.assert_array_equal(em.rank_average([1, 1, 2]), [1.5, 1.5, 3.0])


def test_degenerate_inputs_are_undefined_not_nan():
    assert em.plcc([2.0, 2.0, 2.0], [1.0, 2.0, 3.0]) is None
    assert em.srcc([1.0, 2.0, 3.0], [4.0, 4.0, 4.0]) is None


def test_constant_off_grid_inputs_are_undefined():
    # centring 0.1 or 3.7 leaves float residue; the result must still be None
    assert em.plcc([0.1, 0.1, 0.1], [1.0, 2.0, 3.0]) is None
    assert em.plcc([1.0, 2.0, 3.0], [3.7, 3.7, 3.7]) is None
    assert em.srcc([0.1] * 7, list(range(7))) is None
    report = em.evaluate(_items([1.0, 2.0, 3.0, 4.0]), em.constant_predictor(3.7))
    assert report.plcc is None and report.srcc is None


@pytest.mark.parametrize(
    "pred,truth", [([1.0, 2.0], [1.0]), ([1.0], [1.0]), ([1.0, float("nan")], [1.0, 2.0])]
)
def test_bad_correlation_inputs_raise(pred, truth):
    with pytest.raises(ContractError):
        em.plcc(pred, truth)
    with pytest.raises(ContractError):
        em.srcc(pred, truth)


def test_correlations_match_brute_force_oracle_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(2, 60))
        a = list(np.round(rng.normal(size=n), 1))
        b = list(np.round(rng.normal(size=n) + 0.5 * np.array(a), 1))
        expected_p = _oracle_pearson(a, b)
        expected_s = _oracle_pearson(_oracle_ranks(a), _oracle_ranks(b))
        got_p, got_s = em.plcc(a, b), em.srcc(a, b)
        if expected_p is None:
            assert got_p is None
        else:
            assert got_p == pytest.approx(expected_p, abs=1e-10)
        if expected_s is None:
            assert got_s is None
        else:
            assert got_s == pytest.approx(expected_s, abs=1e-10)


def test_correlation_properties():
    rng = np.random.default_rng(1)
    for _ in range(300):
        a = rng.normal(size=20)
        b = rng.normal(size=20) + a
        p, s = em.plcc(a, b), em.srcc(a, b)
        assert -1.0 <= p <= 1.0 and -1.0 <= s <= 1.0
        assert em.plcc(b, a) == pytest.approx(p, abs=1e-14)
        assert em.srcc(b, a) == pytest.approx(s, abs=1e-14)
        assert em.plcc(3.0 * a + 2.0, b) == pytest.approx(p, abs=1e-12)
        assert em.plcc(-2.0 * a, b) == pytest.approx(-p, abs=1e-12)
        assert em.srcc(np.exp(a), b) == s


def test_logistic_remap_improves_saturated_predictions():
    x = np.linspace(1.0, 5.0, 40)
    truth = 1.0 + 4.0 / (1.0 + np.exp(-3.0 * (x - 3.0)))
    raw = em.plcc(x, truth)
    remapped = em.plcc(em.logistic_remap(x, truth), truth)
    assert remapped > raw
    assert remapped > 0.999


# ----------------------------------------------------------------------------
# Parsing
# ----------------------------------------------------------------------------


@pytest.mark.parametrize(
    "text,expected",
    [
        ("...analysis... SCORE: 3.7", 3.7),
        ("no numbers here", None),
        ("first 2 then final rating 4.5", 4.5),
        ("score: 2 and later SCORE: 4", 4.0),
        ("the answer is \\boxed{3.2}.", 3.2),
        ("SCORE: 1.5 though \\boxed{4.0}", 1.5),
        ("rated 4 out of 10", 4.0),
        ("values 7 and 12 only", None),
        ("version 2.0.1 of the model", None),
        ("r3 r0 r7 SCORE: 3.4", 3.4),
        ("rated -3 today", None),
        ("-3 at first, then 2", 2.0),
        ("", None),
    ],
)
def test_parse_score_rules(text, expected):
    assert em.parse_score(text) == expected


def test_parse_score_ignores_non_strings_and_honours_range():
    assert em.parse_score(None) is None
    assert em.parse_score(3.0) is None
    assert em.parse_score("final 7", score_range=(0.0, 10.0)) == 7.0


# ----------------------------------------------------------------------------
# Evaluation
# ----------------------------------------------------------------------------


def test_evaluate_oracle_is_perfect():
    items = _items([1.0, 2.5, 3.0, 4.5, 2.0, 5.0])
    report = em.evaluate(items, em.oracle_predictor(), config_hash="h")
    assert report.plcc == pytest.approx(1.0)
    assert report.srcc == pytest.approx(1.0)
    assert report.n_parse_failures == 0
    assert set(report.per_task) == {"technical", "aesthetic", "alignment"}
    assert report.per_task["technical"].n_items == 2


def test_evaluate_constant_predictor_is_undefined():
    report = em.evaluate(_items([1.0, 2.0, 3.0]), em.constant_predictor(3.0))
    assert report.plcc is None and report.srcc is None
    assert not report.plcc_defined and not report.srcc_defined


def test_evaluate_counts_failures_and_excludes_them():
    items = _items([1.0, 2.0, 3.0, 4.0, 5.0])

    def flaky(item):
        if item.item_id == "i1":
            raise RuntimeError("backend down")
        if item.item_id == "i3":
            return "I cannot rate this"
        return f"SCORE: {item.truth_score * 2 + 1}"

    report = em.evaluate(items, flaky)
    assert report.n_parse_failures == 2
    assert report.plcc == pytest.approx(1.0)
    assert report.per_task["aesthetic"].n_parse_failures == 1


def test_evaluate_matches_recomputation_and_ignores_workers():
    rng = np.random.default_rng(2)
    truths = list(np.round(rng.uniform(1, 5, 50), 1))
    noise = {f"i{k}": float(rng.normal(0, 0.5)) for k in range(50)}
    items = _items(truths)

    def noisy(item):
        return item.truth_score + noise[item.item_id]

    serial = em.evaluate(items, noisy)
    threaded = em.evaluate(items, noisy, workers=4)
    pred = [t + noise[f"i{k}"] for k, t in enumerate(truths)]
    assert serial.plcc == em.plcc(pred, truths)
    assert serial.srcc == em.srcc(pred, truths)
    assert serial.to_dict() == threaded.to_dict()


def test_evaluate_optional_logistic_plcc():
    items = _items(list(np.linspace(1.0, 5.0, 12)))
    without = em.evaluate(items, em.oracle_predictor())
    with_fit = em.evaluate(items, em.oracle_predictor(), logistic_plcc=True)
    assert without.plcc_logistic is None
    assert with_fit.plcc_logistic == pytest.approx(1.0, abs=1e-3)


def test_write_report_includes_flags_and_hash(tmp_path):
    report = em.evaluate(_items([1.0, 2.0, 3.0]), em.constant_predictor(2.0))
    path = em.write_report(report, tmp_path / "report.json", config_hash="abc123")
    data = json.loads(path.read_text())
    assert data["config_hash"] == "abc123"
    assert data["plcc_defined"] is False
    assert data["plcc"] is None
    assert em.report_table(report).row_count == 1 + len(report.per_task)


def test_file_predictor_reads_text_and_scores(tmp_path):
    path = tmp_path / "predictions.jsonl"
    write_jsonl(
        path,
        [
            {"item_id": "i0", "response_text": "SCORE: 1.2"},
            {"item_id": "i1", "score": 2.4},
            {"item_id": "i2", "response_text": "?"},
        ],
    )
    report = em.evaluate(_items([1.0, 2.0, 3.0, 4.0]), em.file_predictor(path))
    assert report.n_parse_failures == 2
    assert report.plcc == pytest.approx(1.0)


def test_policy_predictor_modes_produce_parseable_scores():
    vocab = policy_toy.Vocabulary()
    world = policy_toy.make_toy_world(4, vocab, 0)
    items = policy_toy.make_toy_items(world, 6, 1)
    params = policy_toy.init_params("tabular", vocab, 4, rng=np.random.default_rng(0), init_scale=0.5)
    for mode in ("greedy", "sample", "expected"):
        predictor = em.policy_predictor(params, 3, mode=mode, seed=4)
        first = [predictor(item) for item in items]
        assert first == [predictor(item) for item in items]
        report = em.evaluate(items, predictor)
        assert report.n_parse_failures == 0
    with pytest.raises(ContractError):
        em.policy_predictor(params, 3, mode="beam")
