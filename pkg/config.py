"""
Run configuration.

Everything a run needs lives in one RunConfig tree. On disk it is a flat
key=value file (read with python-dotenv), keys are `section.field`:

    world.width=15
    ppo.aux_weight=0.1
    split.heard_categories=0,1,2,3

Resolution order: defaults, then the config file, then `--set` overrides,
then the `--seed` / `--out` flags.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple, Union

from dotenv import dotenv_values, load_dotenv

from acoustics import AcousticConfig
from encoders import EncoderConfig, resolve_plan
from errors import ConfigError
from numerics import PRECISIONS
from policy import PPOConfig
from world import NUM_ACTIONS, WorldConfig

load_dotenv()

CODE_VERSION = "bdatp-lab 0.1.0"
SECTIONS = ("world", "acoustic", "encoder", "ppo", "split", "train")


def default_out_dir() -> str:
    return os.getenv("BDATP_OUT", "runs")


@dataclass(frozen=True)
class SplitSpec:
    train_maps: Tuple[int, ...] = tuple(range(1000, 1012))
    test_maps: Tuple[int, ...] = tuple(range(2000, 2006))
    heard_categories: Tuple[int, ...] = (0, 1, 2, 3)
    unheard_categories: Tuple[int, ...] = (4, 5)
    episodes_per_eval: int = 200

    def validate(self, n_categories: Optional[int] = None) -> None:
        if not self.train_maps or not self.test_maps:
            raise ConfigError("split needs at least one train map and one test map")
        if not self.heard_categories or not self.unheard_categories:
            raise ConfigError("split needs heard and unheard categories")
        if set(self.train_maps) & set(self.test_maps):
            raise ConfigError(f"train and test maps overlap: {sorted(set(self.train_maps) & set(self.test_maps))}")
        overlap = set(self.heard_categories) & set(self.unheard_categories)
        if overlap:
            raise ConfigError(f"heard and unheard categories overlap: {sorted(overlap)}")
        if n_categories is not None:
            ids = set(self.heard_categories) | set(self.unheard_categories)
            if min(ids) < 0 or max(ids) >= n_categories:
                raise ConfigError(f"category ids must lie in [0, {n_categories})")
        if self.episodes_per_eval < 1:
            raise ConfigError("episodes_per_eval must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 1
    precision: str = "float32"
    budget_steps: int = 500_000
    checkpoint_every: int = 25
    n_categories: int = 6
    category_seed: int = 7
    eval_seed: int = 9001
    parallel: bool = False

    def validate(self) -> None:
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}, got '{self.precision}'")
        if self.budget_steps < 1 or self.checkpoint_every < 1:
            raise ConfigError("budget_steps and checkpoint_every must be positive")
        if self.n_categories < 2:
            raise ConfigError("n_categories must be >= 2")


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    acoustic: AcousticConfig = field(default_factory=AcousticConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str = field(default_factory=default_out_dir)

    def validate(self) -> "RunConfig":
        try:
            self.acoustic.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.encoder.validate()
        self.ppo.validate()
        self.train.validate()
        self.split.validate(self.train.n_categories)
        if self.world.max_steps < 1 or self.world.max_range <= 0:
            raise ConfigError("world.max_steps and world.max_range must be positive")
        if self.ppo.minibatches > self.ppo.num_envs:
            raise ConfigError("ppo.minibatches cannot exceed ppo.num_envs (minibatches are groups of lanes)")
        return self

    def require_gridworld_actions(self) -> "RunConfig":
        """Rollouts step NavigationEnv, which only knows the four gridworld actions."""
        if self.ppo.num_actions != NUM_ACTIONS:
            raise ConfigError(f"rollouts need ppo.num_actions={NUM_ACTIONS} (the gridworld actions), "
                              f"got {self.ppo.num_actions}; larger action maps have no waypoint planner")
        return self

    def to_flat(self) -> Dict[str, str]:
        flat: Dict[str, str] = {}
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                flat[f"{section}.{f.name}"] = _format(getattr(obj, f.name))
        flat["out_dir"] = self.out_dir
        return flat

    @classmethod
    def from_flat(cls, flat: Dict[str, str], base: Optional["RunConfig"] = None) -> "RunConfig":
        cfg = base or cls()
        grouped: Dict[str, Dict[str, object]] = {}
        out_dir = cfg.out_dir
        for key, raw in flat.items():
            if key == "out_dir":
                out_dir = raw
                continue
            section, _, name = key.partition(".")
            if section not in SECTIONS or not name:
                raise ConfigError(f"unknown config key '{key}'")
            obj = getattr(cfg, section)
            known = {f.name for f in fields(obj)}
            if name not in known:
                raise ConfigError(f"unknown config key '{key}'")
            grouped.setdefault(section, {})[name] = _parse(key, raw, getattr(obj, name))
        updates = {s: replace(getattr(cfg, s), **values) for s, values in grouped.items()}
        return replace(cfg, out_dir=out_dir, **updates)

    def architecture(self) -> Dict[str, str]:
        """The keys that decide parameter shapes, plus the layer-1 paddings they resolve to."""
        keep = ("encoder.", "ppo.state_dim", "ppo.num_actions", "ppo.aux_hidden", "ppo.atp_enabled",
                "world.depth_", "acoustic.freq_bins", "acoustic.time_frames")
        arch = {k: v for k, v in self.to_flat().items() if k.startswith(keep)}
        depth_hw = (self.world.depth_height, self.world.depth_width)
        audio_hw = (self.acoustic.freq_bins, self.acoustic.time_frames)
        visual = resolve_plan(depth_hw, self.encoder, 1, self.encoder.visual_padding)
        audio = resolve_plan(audio_hw, self.encoder, 1 if self.encoder.bda else 2, self.encoder.audio_padding)
        arch["encoder.visual_padding_resolved"] = str(visual.first_padding)
        arch["encoder.audio_padding_resolved"] = str(audio.first_padding)
        return arch


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(key: str, raw: Optional[str], current):
    if raw is None:
        raise ConfigError(f"config key '{key}' has no value")
    text = raw.strip()
    try:
        if isinstance(current, bool):
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, tuple):
            return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"cannot parse {key}={raw!r} as {type(current).__name__}") from exc
    return text


def parse_overrides(items: Iterable[str]) -> Dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got '{item}'")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path: Optional[Union[str, Path]] = None, overrides: Iterable[str] = (),
                seed: Optional[int] = None, out: Optional[str] = None) -> RunConfig:
    flat: Dict[str, str] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        flat.update({k: v for k, v in dotenv_values(path).items()})
    flat.update(parse_overrides(overrides))
    if seed is not None:
        flat["train.seed"] = str(seed)
    if out:
        flat["out_dir"] = out
    return RunConfig.from_flat(flat).validate()


def write_resolved(cfg: RunConfig, out_dir: Union[str, Path], name: str = "resolved_config.env") -> Path:
    """Echo the resolved config next to the outputs; the file loads back with load_config."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / name
        lines = [f"# {CODE_VERSION}"] + [f"{k}={v}" for k, v in sorted(cfg.to_flat().items())]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"output directory {out_dir} is not writable: {exc}") from exc
    return path
