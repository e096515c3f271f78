import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent
for path in (ROOT, ROOT / "scripts"):
    if str(path) not in sys.path:
        sys.path.insert(0, str(path))

import run_config


def tiny_document(**sections):
    """Default config shrunk so a full command finishes in about a second."""
    document = run_config.deep_merge(
        run_config.default_document(),
        {
            "grpo": {"group_size": 4, "batch_size": 4, "prefix_len": 2, "learning_rate": 5.0},
            "schedule": {"stage1_epochs": 1, "stage2_epochs": 1},
            "vocab": {"reason_tokens": 3, "score_min": 1.0, "score_max": 5.0, "score_step": 0.5},
            "toy": {"feature_dim": 3, "n_train": 12, "n_eval": 12},
            "dataset": {"rejection": {"teacher_samples_per_item": 4, "keep_per_item": 2}},
            "sft": {"epochs": 3, "lr": 1.0},
            "tts": {"n": 3, "reflection_rounds": 2, "n_prompts": 2, "backoff_seconds": 0.0},
        },
    )
    return run_config.deep_merge(document, sections)


@pytest.fixture
def tiny_config():
    return run_config.RunConfig.from_dict(tiny_document())
