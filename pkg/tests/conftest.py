from __future__ import annotations

import sys
from pathlib import Path

import pytest

REPO_ROOT = Path(__file__).resolve().parents[1]
if str(REPO_ROOT) not in sys.path:
    sys.path.insert(0, str(REPO_ROOT))

from database import dispose_engines, init_db  # noqa: E402
from episodes import synth_dataset_generate  # noqa: E402
from schemas import (  # noqa: E402
    DatasetSource,
    ModelConfig,
    RunConfig,
    Schedule,
    SplitConfig,
)
from tensor_core import precision  # noqa: E402


@pytest.fixture
def float64():
    """Engine precision switched to 64-bit for the duration of a test."""
    with precision("float64"):
        yield


@pytest.fixture
def tiny_config() -> ModelConfig:
    """5-way 2-shot model on 8x8 images (8 -> 4 -> 2 -> 1), depths 2."""
    return ModelConfig(
        image_size=8,
        feature_blocks=3,
        conv_filters=4,
        feature_dim=16,
        embed_dim=8,
        relational_depth=2,
        conditioning_depth=2,
        ways=5,
        shots=2,
    )


@pytest.fixture
def tiny_dataset():
    """15 synthetic classes x 6 images at 8x8."""
    return synth_dataset_generate(num_classes=15, images_per_class=6, image_size=8, seed=0)


@pytest.fixture
def tiny_run_config(tiny_config, tmp_path) -> RunConfig:
    """Two short epochs over a 5/5/5 synthetic split."""
    return RunConfig(
        name="tiny",
        dataset=DatasetSource(kind="synthetic", num_classes=15, images_per_class=6, seed=0),
        splits=SplitConfig(counts=(5, 5, 5), seed=0),
        model=tiny_config,
        schedule=Schedule(epochs=2, episodes_per_epoch=4, batch_size=2, val_episodes=4, eval_batch_size=4),
        output_dir=tmp_path / "run",
        seed=3,
        eval_seed=11,
    )


@pytest.fixture
def ledger_url(tmp_path):
    """Fresh SQLite ledger in the test's temp directory."""
    url = f"sqlite:///{tmp_path / 'ledger.db'}"
    init_db(url)
    yield url
    dispose_engines()
