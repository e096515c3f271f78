import json
import sys
from pathlib import Path

import pytest
import yaml

ROOT_DIR = Path(__file__).resolve().parents[1]
SCRIPTS_DIR = ROOT_DIR / "scripts"
if str(SCRIPTS_DIR) not in sys.path:
    sys.path.insert(0, str(SCRIPTS_DIR))

import run_config
from qrt_core import ConfigError
from run_config import RunConfig


def test_defaults_carry_published_hyperparameters():
    cfg = RunConfig.from_dict(run_config.default_document())
    assert cfg.grpo.group_size == 16
    assert cfg.grpo.beta == 0.04
    assert (cfg.grpo.eps_low, cfg.grpo.eps_high) == (0.2, 0.2)
    assert cfg.grpo.sigma == 0.8 and cfg.reward.sigma == 0.8
    assert cfg.grpo.batch_size == 64
    assert (cfg.schedule.stage1_epochs, cfg.schedule.stage2_epochs) == (2, 2)
    assert cfg.grpo.entropy_gate.rho == 0.2
    assert cfg.tts.n == 20 and cfg.tts.reflection_rounds == 20
    assert cfg.dataset.rejection.teacher_samples_per_item == 8
    assert cfg.vocab.n_scores == 41


def test_dict_round_trip_is_lossless():
    cfg = RunConfig.from_dict(run_config.default_document())
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.to_dict() == run_config.default_document()


@pytest.mark.parametrize("suffix", [".json", ".yaml"])
def test_file_round_trip(tmp_path, suffix):
    cfg = run_config.load_config(environ={}, cli_overrides={"seed": 42, "grpo.beta": 0.0})
    path = run_config.write_config(cfg, tmp_path / f"config{suffix}")
    loaded = run_config.load_config(str(path), environ={})
    assert loaded == cfg
    assert run_config.same_config(loaded, cfg)
    if suffix == ".yaml":
        assert yaml.safe_load(path.read_text())["seed"] == 42
    else:
        assert json.loads(path.read_text())["grpo"]["beta"] == 0.0


def test_partial_file_is_merged_over_defaults(tmp_path):
    path = tmp_path / "partial.yaml"
    path.write_text("grpo:\n  group_size: 4\ndataset:\n  teacher:\n    task_bias: {technical: 0.5}\n")
    cfg = run_config.load_config(str(path), environ={})
    assert cfg.grpo.group_size == 4
    assert cfg.grpo.beta == 0.04
    assert cfg.dataset.teacher["task_bias"] == {"technical": 0.5}


def test_environment_overrides_parse_json_then_text():
    environ = {
        "QRT__grpo__beta": "0.0",
        "QRT__reward__kind": "threshold",
        "QRT__grpo__entropy_gate__mode": "off",
        "QRT__tts__combiner__tasks": '["technical"]',
        "UNRELATED": "1",
    }
    cfg = run_config.load_config(environ=environ)
    assert cfg.grpo.beta == 0.0
    assert cfg.reward.kind == "threshold"
    assert cfg.grpo.entropy_gate.mode == "off"
    assert cfg.tts.combiner.tasks == ("technical",)


def test_cli_overrides_win_over_environment():
    cfg = run_config.load_config(environ={"QRT__seed": "3"}, cli_overrides={"seed": 9, "runtime.workers": None})
    assert cfg.seed == 9
    assert cfg.runtime.workers == 1


@pytest.mark.parametrize(
    "dotted,value,field",
    [
        ("grpo.eps_low", -1.0, "grpo.eps_low"),
        ("grpo.group_size", 0, "grpo.group_size"),
        ("reward.kind", "binary", "reward.kind"),
        ("grpo.entropy_gate.mode", "soft", "grpo.entropy_gate.mode"),
        ("tts.combiner.weights", {"aesthetic": -1}, "tts.combiner.weights.aesthetic"),
        ("runtime.log_level", "LOUD", "runtime.log_level"),
        ("grpo.unknown_knob", 1, "grpo"),
    ],
)
def test_schema_errors_name_the_field(dotted, value, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        run_config.load_config(environ={}, cli_overrides={dotted: value})


def test_cross_field_errors_are_config_errors():
    with pytest.raises(ConfigError, match="keep_per_item"):
        run_config.load_config(
            environ={},
            cli_overrides={"dataset.rejection.teacher_samples_per_item": 2, "dataset.rejection.keep_per_item": 3},
        )
    with pytest.raises(ConfigError):
        run_config.load_config(environ={}, cli_overrides={"tts.combiner.kind": "single"})


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        run_config.load_config(str(tmp_path / "missing.yaml"), environ={})
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ConfigError, match="Could not parse"):
        run_config.load_config(str(broken), environ={})
    listed = tmp_path / "list.yaml"
    listed.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        run_config.load_config(str(listed), environ={})


def test_hash_is_stable_and_sensitive():
    a = run_config.load_config(environ={})
    b = run_config.load_config(environ={})
    c = run_config.load_config(environ={}, cli_overrides={"seed": 1})
    assert a.hash == b.hash
    assert len(a.hash) == 16 and int(a.hash, 16) >= 0
    assert a.hash != c.hash
    moved = run_config.load_config(environ={}, cli_overrides={"runtime.output_dir": "elsewhere", "runtime.workers": 4})
    assert moved.hash == a.hash


def test_replace_document_and_workers(tiny_config):
    swept = tiny_config.replace_document(**{"grpo.sigma": 1.2, "runtime.deterministic": True})
    assert swept.grpo.sigma == 1.2
    assert swept.runtime.effective_workers == 1
    assert tiny_config.grpo.sigma == 0.8
    harness = swept.tts.harness_config(workers=3)
    assert harness.n == 3 and harness.workers == 3
    assert swept.teacher().reason_len == swept.grpo.prefix_len
