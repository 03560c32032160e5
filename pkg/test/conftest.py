import os

import pytest

from config import load_config

os.environ.setdefault("BDATP_PROGRESS", "0")

# 9x9 maps, 32x32 depth, a few channels: a full train/eval cycle in seconds
TINY_OVERRIDES = [
    "world.width=9", "world.height=9", "world.room_count=2",
    "world.depth_height=32", "world.depth_width=32", "world.max_steps=12",
    "encoder.channels=3,4,3", "encoder.feature_dim=6",
    "ppo.state_dim=5", "ppo.aux_hidden=6", "ppo.rollout_length=4", "ppo.num_envs=2",
    "ppo.minibatches=1", "ppo.ppo_epochs=1",
    "split.train_maps=11,12,13", "split.test_maps=21,22",
    "split.heard_categories=0,1", "split.unheard_categories=2", "split.episodes_per_eval=4",
    "train.n_categories=3", "train.budget_steps=24", "train.checkpoint_every=1",
]


@pytest.fixture
def tiny_overrides():
    return list(TINY_OVERRIDES)


@pytest.fixture
def tiny_config(tmp_path):
    """Validated config small enough for end-to-end runs (3 updates of 4x2 steps)."""
    return load_config(overrides=TINY_OVERRIDES, out=str(tmp_path / "run"))
