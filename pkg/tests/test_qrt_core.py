import logging
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT_DIR = Path(__file__).resolve().parents[1]
SCRIPTS_DIR = ROOT_DIR / "scripts"
if str(SCRIPTS_DIR) not in sys.path:
    sys.path.insert(0, str(SCRIPTS_DIR))

import qrt_core
from qrt_core import (
    ConfigError,
    ContractError,
    DataError,
    DomainError,
    NumericalError,
    QrtError,
    ScoreItem,
    Trajectory,
)


def test_exit_codes_follow_error_family():
    assert QrtError.exit_code == 1
    assert ConfigError.exit_code == 2
    assert ContractError.exit_code == DataError.exit_code == DomainError.exit_code == 3
    assert NumericalError.exit_code == 4
    assert issubclass(ConfigError, ValueError)
    assert issubclass(NumericalError, ArithmeticError)


def test_setup_logging_creates_sidecar_log(tmp_path):
    log_file = qrt_core.setup_logging("DEBUG", tmp_path / "logs")
    logging.getLogger("qrt.test").debug("hello from the test")
    for handler in logging.getLogger().handlers:
        handler.flush()
    assert log_file.parent == tmp_path / "logs"
    assert log_file.name.startswith("qrt_") and log_file.suffix == ".log"
    assert "hello from the test" in log_file.read_text()


def test_score_item_validation():
    assert ScoreItem("a", "aesthetic", 4.0).truth_score == 4.0
    with pytest.raises(ContractError):
        ScoreItem("a", "colour", 4.0)
    with pytest.raises(ContractError):
        ScoreItem("a", "technical", float("nan"))


def test_trajectory_defaults_and_shape_checks():
    traj = Trajectory("a", [0, 9], [-1.0, -2.0], [0.3, 0.4], parsed_score=2.0)
    np.testing.assert_array_equal(traj.logp_new, traj.logp_old)
    assert traj.logp_new is not traj.logp_old
    assert len(traj) == 2
    with pytest.raises(ContractError, match="logp_old"):
        Trajectory("a", [0, 9], [-1.0], [0.3, 0.4])
    with pytest.raises(ContractError, match="negative entropy"):
        Trajectory("a", [0], [-1.0], [-0.1])
    with pytest.raises(ContractError, match="no tokens"):
        Trajectory("a", [], [], [])


def test_config_hash_ignores_key_order():
    a = qrt_core.config_hash({"x": 1, "y": {"b": 2, "a": 3}})
    b = qrt_core.config_hash({"y": {"a": 3, "b": 2}, "x": 1})
    assert a == b and len(a) == 16


def test_jsonl_round_trip_and_errors(tmp_path):
    path = tmp_path / "nested" / "records.jsonl"
    assert qrt_core.write_jsonl(path, ({"i": i, "v": i / 3} for i in range(4))) == 4
    assert qrt_core.read_jsonl(path) == [{"i": i, "v": i / 3} for i in range(4)]
    path.write_text('{"ok": 1}\nnot json\n')
    with pytest.raises(DataError, match=":2:"):
        qrt_core.read_jsonl(path)
    with pytest.raises(DataError, match="not found"):
        qrt_core.read_jsonl(tmp_path / "absent.jsonl")


def test_json_helpers(tmp_path):
    path = qrt_core.write_json(tmp_path / "out" / "data.json", {"b": 1, "a": [1, 2]})
    assert qrt_core.read_json(path) == {"a": [1, 2], "b": 1}
    assert path.read_text().index('"a"') < path.read_text().index('"b"')
    with pytest.raises(DataError):
        qrt_core.read_json(tmp_path / "missing.json")


def test_print_summary_formats_floats(capsys):
    qrt_core.print_summary("demo", {"Reward": 0.123456, "Items": 3}, 1.5)
    out = capsys.readouterr().out
    assert "DEMO" in out
    assert "Reward: 0.1235" in out
    assert "Items: 3" in out
