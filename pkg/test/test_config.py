import pytest

from config import CODE_VERSION, RunConfig, load_config, parse_overrides, write_resolved
from errors import ConfigError


# --- TEST DEFAULTS ---

def test_defaults_validate():
    cfg = RunConfig().validate()
    assert cfg.ppo.aux_weight == 0.1
    assert cfg.encoder.bda is True
    assert len(cfg.split.train_maps) == 12 and len(cfg.split.test_maps) == 6
    assert cfg.split.heard_categories == (0, 1, 2, 3)
    assert cfg.split.unheard_categories == (4, 5)


def test_out_dir_follows_environment(monkeypatch):
    monkeypatch.setenv("BDATP_OUT", "/tmp/bdatp-somewhere")
    assert RunConfig().out_dir == "/tmp/bdatp-somewhere"


# --- TEST PARSING ---

def test_overrides_are_typed():
    cfg = load_config(overrides=["ppo.aux_weight=0.01", "encoder.bda=false", "split.test_maps=7,8",
                                 "train.precision=float64", "ppo.num_envs=4"])
    assert cfg.ppo.aux_weight == 0.01
    assert cfg.encoder.bda is False
    assert cfg.split.test_maps == (7, 8)
    assert cfg.train.precision == "float64"
    assert cfg.ppo.num_envs == 4


def test_unknown_key_is_rejected():
    with pytest.raises(ConfigError, match="unknown config key 'ppo.learning_rate'"):
        load_config(overrides=["ppo.learning_rate=1"])
    with pytest.raises(ConfigError, match="unknown config key"):
        load_config(overrides=["optimizer.lr=1"])


def test_bad_value_is_rejected():
    with pytest.raises(ConfigError, match="ppo.num_envs"):
        load_config(overrides=["ppo.num_envs=many"])
    with pytest.raises(ConfigError):
        load_config(overrides=["encoder.bda=maybe"])


def test_override_needs_equals():
    with pytest.raises(ConfigError, match="key=value"):
        parse_overrides(["ppo.aux_weight"])


def test_file_then_set_then_seed(tmp_path):
    path = tmp_path / "run.env"
    path.write_text("# experiment\ntrain.seed=3\nppo.aux_weight=0.5\nppo.gamma=0.9\n")
    cfg = load_config(path, ["ppo.aux_weight=0.01"], seed=11, out=str(tmp_path / "out"))
    assert cfg.ppo.gamma == 0.9
    assert cfg.ppo.aux_weight == 0.01
    assert cfg.train.seed == 11
    assert cfg.out_dir == str(tmp_path / "out")


def test_missing_config_file():
    with pytest.raises(ConfigError, match="not found"):
        load_config("does/not/exist.env")


# --- TEST VALIDATION ---

@pytest.mark.parametrize("override, fragment", [
    ("split.test_maps=1000,2000", "overlap"),
    ("split.unheard_categories=3,4", "overlap"),
    ("split.unheard_categories=9", "category ids"),
    ("ppo.aux_weight=-1", "aux_weight"),
    ("ppo.num_actions=82", "num_actions"),
    ("ppo.num_actions=1", "num_actions"),
    ("ppo.minibatches=16", "minibatches"),
    ("train.precision=float16", "precision"),
    ("acoustic.ild_strength=1.5", "ild_strength"),
])
def test_invalid_configs(override, fragment):
    with pytest.raises(ConfigError, match=fragment):
        load_config(overrides=[override])


# --- TEST RESOLVED CONFIG ---

def test_resolved_config_loads_back(tmp_path, tiny_config):
    path = write_resolved(tiny_config, tmp_path / "out")
    text = path.read_text()
    assert text.startswith(f"# {CODE_VERSION}\n")
    assert "ppo.rollout_length=4" in text
    assert load_config(path) == tiny_config


def test_unwritable_out_dir(tmp_path, tiny_config):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ConfigError, match="not writable"):
        write_resolved(tiny_config, blocker / "sub")


def test_architecture_keys_ignore_training_knobs(tiny_config):
    arch = tiny_config.architecture()
    assert "encoder.bda" in arch and "ppo.state_dim" in arch and "world.depth_height" in arch
    assert "ppo.aux_weight" not in arch and "train.seed" not in arch


def test_architecture_records_resolved_paddings():
    arch = RunConfig().validate().architecture()
    assert arch["encoder.visual_padding_resolved"] == "0"
    assert arch["encoder.audio_padding_resolved"] == "10"
    assert arch["encoder.visual_padding"] == arch["encoder.audio_padding"] == "-1"


def test_large_action_maps_validate_but_do_not_roll_out():
    cfg = load_config(overrides=["ppo.num_actions=81"])
    assert cfg.ppo.num_actions == 81
    assert cfg.architecture()["ppo.num_actions"] == "81"
    with pytest.raises(ConfigError, match="rollouts need ppo.num_actions=4"):
        cfg.require_gridworld_actions()
    assert load_config().require_gridworld_actions().ppo.num_actions == 4
