"""
Service layer: this is where the actual lab work lives.
The CLI and bench should not be doing heavy lifting; they parse arguments and
forward to one of the services below.
"""

from __future__ import annotations

import csv
import logging
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

import numerics as nx
from acoustics import SoundCategory, arrival_bearing, bearing_bucket, categories_by_id, make_category_set, \
    save_category_manifest
from config import CODE_VERSION, RunConfig
from encoders import (BdaAudioEncoder, ChannelFeatureMaps, ConcatAudioEncoder, EncoderConfig, Projection,
                      VisualEncoder, bda_fuse, channel_means)
from errors import CheckpointError, ConfigError, EpisodeError, ShapeError, TrainingDivergedError
from infrastructure.checkpoint_store import CheckpointStore
from infrastructure.run_log import RunLog
from metrics import (EpisodeRecord, MetricSummary, atp_agreement, predicted_transition_matrix, summarize,
                     top_transitions, transition_matrix)
from numerics import Adam, Parameter, Tape, Var, check_parameters, resolve_dtype
from policy import ActorCritic, AuxNet, PPOConfig, RolloutBuffer, atp_loss, compute_gae, ppo_loss, ppo_update
from world import (NUM_ACTIONS, Action, AgentPose, EpisodeSpec, GridMap, Heading, NavigationEnv, generate_map,
                   map_from_text, map_to_text, render_ascii, replay, sample_episode)

logger = logging.getLogger(__name__)

SETTINGS = ("heard", "unheard")


def progress_enabled() -> bool:
    return os.getenv("BDATP_PROGRESS", "1").strip().lower() not in ("0", "false", "no", "off")


# --- Shared builders ---

def build_categories(cfg: RunConfig) -> List[SoundCategory]:
    rng = np.random.default_rng(cfg.train.category_seed)
    return make_category_set(cfg.train.n_categories, cfg.acoustic.freq_bins, cfg.acoustic.time_frames, rng,
                             seed=cfg.train.category_seed)


def build_maps(seeds: Sequence[int], cfg: RunConfig) -> List[GridMap]:
    w = cfg.world
    return [generate_map(s, w.width, w.height, w.room_count, map_id=f"map-{s}") for s in seeds]


def build_model(cfg: RunConfig, seed: Optional[int] = None) -> ActorCritic:
    return ActorCritic(cfg.encoder, cfg.ppo, (cfg.world.depth_height, cfg.world.depth_width),
                       (cfg.acoustic.freq_bins, cfg.acoustic.time_frames),
                       cfg.train.seed if seed is None else seed, cfg.train.precision)


def _param_tensors(tensors: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")}


def load_model(cfg: RunConfig, checkpoint: Union[str, Path]) -> ActorCritic:
    """Model for cfg with weights from a checkpoint; shape differences are reported in full."""
    tensors, _ = CheckpointStore().load(checkpoint)
    model = build_model(cfg)
    params = _param_tensors(tensors)
    unexpected = sorted(set(params) - set(model.parameters()))
    if unexpected:
        raise ShapeError("checkpoint does not match the configured architecture; unexpected="
                         + ",".join(unexpected))
    model.load_state_dict(params)
    return model


# --- Training ---

@dataclass
class TrainingSummary:
    updates: int
    env_steps: int
    episodes: int
    checkpoint: Optional[Path]
    metrics_log: Path


class TrainingService:
    """
    One training run: B environment lanes, the actor-critic, Adam, the metrics
    log and periodic checkpoints.

    Every random stream (episode sampling, action sampling, minibatch order
    and each lane's audio noise) is spawned from train.seed, so a serial run
    is bit-reproducible and resumes exactly from any checkpoint.
    """

    def __init__(self, cfg: RunConfig, out_dir: Optional[Union[str, Path]] = None,
                 progress: Optional[bool] = None):
        self.cfg = cfg.require_gridworld_actions()
        self.out_dir = Path(out_dir if out_dir is not None else cfg.out_dir)
        self.progress = progress_enabled() if progress is None else progress
        self.dtype = resolve_dtype(cfg.train.precision)
        self.categories = build_categories(cfg)
        self.train_maps = build_maps(cfg.split.train_maps, cfg)
        self.maps_by_id = {m.id: m for m in self.train_maps}
        self.model = build_model(cfg)
        self.optimizer = Adam(self.model.parameters(), lr=cfg.ppo.lr, eps=cfg.ppo.adam_eps,
                              max_grad_norm=cfg.ppo.max_grad_norm)

        lanes = cfg.ppo.num_envs
        episode_seq, action_seq, update_seq, *lane_seqs = np.random.SeedSequence(cfg.train.seed).spawn(3 + lanes)
        self.episode_rng = np.random.default_rng(episode_seq)
        self.action_rng = np.random.default_rng(action_seq)
        self.update_rng = np.random.default_rng(update_seq)
        by_id = categories_by_id(self.categories)
        self.envs = [NavigationEnv(cfg.world, cfg.acoustic, by_id, np.random.default_rng(s), self.dtype)
                     for s in lane_seqs]

        depth_shape = (1, cfg.world.depth_height, cfg.world.depth_width)
        audio_shape = (2, cfg.acoustic.freq_bins, cfg.acoustic.time_frames)
        self.buffer = RolloutBuffer(cfg.ppo.rollout_length, lanes, depth_shape, audio_shape, cfg.ppo.state_dim,
                                    self.dtype)
        self.depth = np.zeros((lanes,) + depth_shape, dtype=self.dtype)
        self.audio = np.zeros((lanes,) + audio_shape, dtype=self.dtype)
        self.hidden = self.model.initial_hidden(lanes)
        self.first = np.ones(lanes, dtype=bool)

        self.metrics_log = RunLog(self.out_dir / "metrics.jsonl")
        self.episode_log = RunLog(self.out_dir / "train_episodes.jsonl")
        self.store = CheckpointStore(self.out_dir / "checkpoints")
        self.update = 0
        self.env_steps = 0
        self.episode_counter = 0
        self.last_checkpoint: Optional[Path] = None
        self._started = False

    @property
    def total_updates(self) -> int:
        per_update = self.cfg.ppo.rollout_length * self.cfg.ppo.num_envs
        return max(1, self.cfg.train.budget_steps // per_update)

    # lanes
    def start(self) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        save_category_manifest(self.categories, self.out_dir / "categories.manifest")
        for lane in range(len(self.envs)):
            self._start_episode(lane)
        self._started = True

    def _start_episode(self, lane: int) -> None:
        in_use = {env.spec.map.id for i, env in enumerate(self.envs) if i != lane and env.spec is not None}
        candidates = [m for m in self.train_maps if m.id not in in_use] or self.train_maps
        grid = candidates[int(self.episode_rng.integers(len(candidates)))]
        spec = sample_episode(self.episode_rng, grid, self.cfg.split.heard_categories, self.cfg.world.max_steps,
                              f"train-{self.episode_counter:07d}")
        self.episode_counter += 1
        obs = self.envs[lane].reset(spec)
        self.depth[lane] = obs.depth
        self.audio[lane] = obs.audio
        self.episode_log.append({
            "kind": "episode", "episode_id": spec.episode_id, "lane": lane, "update": self.update,
            "map_id": grid.id, "map_seed": grid.seed, "category_id": spec.category_id,
            "start": [spec.start.x, spec.start.y, int(spec.start.heading)], "source": list(spec.source),
        })

    def _step_lanes(self, actions: np.ndarray, pool: Optional[ThreadPoolExecutor]):
        if pool is None:
            return [env.step(int(a)) for env, a in zip(self.envs, actions)]
        return list(pool.map(lambda pair: pair[0].step(int(pair[1])), zip(self.envs, actions)))

    def collect(self) -> List[EpisodeRecord]:
        """Fill the rollout buffer with T steps from every lane; returns the episodes that finished."""
        if not self._started:
            self.start()
        buf = self.buffer
        buf.reset(self.hidden)
        finished: List[EpisodeRecord] = []
        pool = ThreadPoolExecutor(max_workers=len(self.envs)) if self.cfg.train.parallel else None
        try:
            for _ in range(buf.steps):
                first = self.first.copy()
                act = self.model.act(self.depth, self.audio, self.hidden, first, self.action_rng)
                results = self._step_lanes(act.actions, pool)
                rewards = np.array([r.reward for r in results])
                dones = np.array([r.done for r in results], dtype=bool)
                buf.insert(self.depth, self.audio, first, act.actions, act.log_probs, act.values, act.hidden,
                           rewards, dones)
                for lane, result in enumerate(results):
                    if result.done:
                        finished.append(self.envs[lane].episode_record())
                        self._start_episode(lane)
                    else:
                        self.depth[lane] = result.observation.depth
                        self.audio[lane] = result.observation.audio
                self.hidden = act.hidden
                self.first = dones
                self.env_steps += len(self.envs)
        finally:
            if pool is not None:
                pool.shutdown()
        bootstrap = self.model.act(self.depth, self.audio, self.hidden, self.first, greedy=True)
        buf.bootstrap_value[...] = bootstrap.values
        return finished

    # loop
    def run(self, max_updates: Optional[int] = None) -> TrainingSummary:
        target = self.total_updates
        if max_updates is not None:
            target = min(target, self.update + max_updates)
        every = self.cfg.train.checkpoint_every
        episodes = 0
        with tqdm(total=target, initial=self.update, desc="updates", disable=not self.progress) as bar:
            while self.update < target:
                finished = self.collect()
                try:
                    stats = ppo_update(self.model, self.optimizer, self.buffer, self.cfg.ppo, self.update_rng)
                except TrainingDivergedError as exc:
                    exc.diagnostics.update({"update": self.update, "env_steps": self.env_steps})
                    logger.error("training diverged at update %d: %s", self.update, exc.diagnostics)
                    raise
                self.update += 1
                episodes += len(finished)
                self.metrics_log.append(self._log_line(stats.to_dict(), finished))
                if self.update % every == 0 or self.update == target:
                    self.save_checkpoint()
                bar.update(1)
        logger.info("trained %d updates (%d env steps)", self.update, self.env_steps)
        return TrainingSummary(self.update, self.env_steps, episodes, self.last_checkpoint, self.metrics_log.path)

    def _log_line(self, stats: Dict, finished: Sequence[EpisodeRecord]) -> Dict:
        returns = [r.episode_return for r in finished]
        line = {"update": self.update, "env_steps": self.env_steps, "episodes": len(finished),
                "successes": sum(1 for r in finished if r.success),
                "mean_return": float(np.mean(returns)) if returns else None}
        line.update(stats)
        return line

    # checkpoints
    def _meta(self) -> Dict:
        flat = {k: v for k, v in self.cfg.to_flat().items() if k != "out_dir"}
        return {
            "code_version": CODE_VERSION,
            "config": flat,
            "architecture": self.cfg.architecture(),
            "update": self.update,
            "env_steps": self.env_steps,
            "episode_counter": self.episode_counter,
            "adam_t": self.optimizer.t,
            "rng": {"episode": self.episode_rng.bit_generator.state,
                    "action": self.action_rng.bit_generator.state,
                    "update": self.update_rng.bit_generator.state},
            "lanes": [env.state_dict() for env in self.envs],
        }

    def save_checkpoint(self) -> Path:
        tensors = {f"param.{n}": p.value for n, p in self.model.parameters().items()}
        tensors.update({f"optim.{k}": v for k, v in self.optimizer.state_dict().items()})
        tensors.update({"lanes.hidden": self.hidden, "lanes.first": self.first,
                        "lanes.depth": self.depth, "lanes.audio": self.audio})
        self.last_checkpoint = self.store.save(self.store.path_for(self.update), tensors, self._meta())
        logger.debug("checkpoint %s", self.last_checkpoint)
        return self.last_checkpoint

    def resume(self, path: Union[str, Path]) -> None:
        tensors, meta = CheckpointStore().load(path)
        saved = meta.get("architecture", {})
        mine = self.cfg.architecture()
        diff = [f"{k}: {saved.get(k)} != {v}" for k, v in mine.items() if saved.get(k) != v]
        if diff:
            raise CheckpointError("checkpoint architecture differs: " + "; ".join(diff))
        self.model.load_state_dict(_param_tensors(tensors))
        self.optimizer.load_state_dict({k[len("optim."):]: v for k, v in tensors.items() if k.startswith("optim.")},
                                       meta["adam_t"])
        self.episode_rng.bit_generator.state = meta["rng"]["episode"]
        self.action_rng.bit_generator.state = meta["rng"]["action"]
        self.update_rng.bit_generator.state = meta["rng"]["update"]
        if len(meta["lanes"]) != len(self.envs):
            raise CheckpointError(f"checkpoint has {len(meta['lanes'])} lanes, config has {len(self.envs)}")
        for env, state in zip(self.envs, meta["lanes"]):
            env.load_state_dict(state, self.maps_by_id)
        self.hidden = tensors["lanes.hidden"].astype(self.dtype)
        self.first = tensors["lanes.first"].astype(bool)
        self.depth = tensors["lanes.depth"].astype(self.dtype)
        self.audio = tensors["lanes.audio"].astype(self.dtype)
        self.update = int(meta["update"])
        self.env_steps = int(meta["env_steps"])
        self.episode_counter = int(meta["episode_counter"])
        self.last_checkpoint = Path(path)
        self._started = True
        logger.info("resumed from %s at update %d", path, self.update)


# --- Evaluation ---

@dataclass
class EpisodeRun:
    spec: EpisodeSpec
    record: EpisodeRecord
    steps: List[Dict]
    predictions: List[int]


@dataclass
class EvalResult:
    setting: str
    policy: str
    records: List[EpisodeRecord]
    summary: MetricSummary
    atp_accuracy: Optional[float] = None

    def to_dict(self) -> Dict:
        return {"setting": self.setting, "policy": self.policy, "atp_accuracy": self.atp_accuracy,
                **self.summary.to_dict()}


Observer = Callable[[NavigationEnv, object], None]


class EvaluationService:
    """
    Greedy (argmax) evaluation on the held-out test maps; no parameter ever
    changes here. Episodes and their audio noise depend only on eval_seed and
    the episode id, so evaluating twice gives identical records.
    """

    def __init__(self, cfg: RunConfig, model: Optional[ActorCritic] = None,
                 out_dir: Optional[Union[str, Path]] = None, progress: Optional[bool] = None):
        self.cfg = cfg.require_gridworld_actions()
        self.model = model
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.progress = progress_enabled() if progress is None else progress
        self.dtype = model.dtype if model is not None else resolve_dtype(cfg.train.precision)
        self.categories = categories_by_id(build_categories(cfg))
        self.test_maps = build_maps(cfg.split.test_maps, cfg)

    def episodes(self, setting: str) -> List[EpisodeSpec]:
        if setting not in SETTINGS:
            raise ConfigError(f"unknown evaluation setting '{setting}', expected one of {SETTINGS}")
        split = self.cfg.split
        cats = split.heard_categories if setting == "heard" else split.unheard_categories
        rng = np.random.default_rng([self.cfg.train.eval_seed, SETTINGS.index(setting)])
        specs = []
        for i in range(split.episodes_per_eval):
            grid = self.test_maps[i % len(self.test_maps)]
            category = cats[(i // len(self.test_maps)) % len(cats)]
            specs.append(sample_episode(rng, grid, [category], self.cfg.world.max_steps, f"{setting}-{i:04d}"))
        return specs

    def _episode_rng(self, spec: EpisodeSpec, stream: int) -> np.random.Generator:
        return np.random.default_rng([self.cfg.train.eval_seed, zlib.crc32(spec.episode_id.encode()), stream])

    def run_episode(self, spec: EpisodeSpec, policy: str = "greedy", observer: Optional[Observer] = None) -> EpisodeRun:
        if policy == "greedy" and self.model is None:
            raise ConfigError("greedy evaluation needs a trained model")
        env = NavigationEnv(self.cfg.world, self.cfg.acoustic, self.categories, self._episode_rng(spec, 0),
                            self.dtype)
        random_actions = self._episode_rng(spec, 1)
        obs = env.reset(spec)
        hidden = self.model.initial_hidden(1) if self.model is not None else None
        first = np.ones(1, dtype=bool)
        steps: List[Dict] = []
        predictions: List[int] = []
        while not env.done:
            if observer is not None:
                observer(env, obs)
            predicted = None
            if policy == "random":
                action = int(random_actions.integers(NUM_ACTIONS))
            else:
                act = self.model.act(obs.depth[None], obs.audio[None], hidden, first, greedy=True)
                action = int(act.actions[0])
                hidden = act.hidden
                first = np.zeros(1, dtype=bool)
                if self.model.aux is not None:
                    predicted = int(self.model.predict_next(act.hidden, np.array([action]))[0])
                    predictions.append(predicted)
            result = env.step(action)
            steps.append({"kind": "step", "episode_id": spec.episode_id, "step": env.steps,
                          "x": env.pose.x, "y": env.pose.y, "heading": int(env.pose.heading),
                          "action": action, "reward": result.reward, "done": result.done, "predicted": predicted})
            obs = result.observation
        return EpisodeRun(spec, env.episode_record(), steps, predictions)

    def evaluate(self, setting: str, policy: str = "greedy", observer: Optional[Observer] = None) -> EvalResult:
        label = setting if policy == "greedy" else f"{policy}_{setting}"
        traj_log = records_log = None
        if self.out_dir is not None:
            traj_log = RunLog(self.out_dir / f"trajectories_{label}.jsonl")
            records_log = RunLog(self.out_dir / f"records_{label}.jsonl")
            for log in (traj_log, records_log):
                if log.exists():
                    log.path.unlink()

        records: List[EpisodeRecord] = []
        predicted: List[int] = []
        actual: List[int] = []
        for spec in tqdm(self.episodes(setting), desc=f"eval {label}", disable=not self.progress):
            run = self.run_episode(spec, policy, observer)
            records.append(run.record)
            if run.predictions:
                predicted.extend(run.predictions[:-1])
                actual.extend(run.record.actions[1:])
            if traj_log is not None:
                traj_log.append(self._header(spec, setting))
                traj_log.extend(run.steps)
                records_log.append(run.record.to_dict())
        accuracy = atp_agreement(predicted, actual) if predicted else None
        result = EvalResult(setting, policy, records, summarize(records), accuracy)
        logger.info("%s: SR %.3f SPL %.3f SNA %.3f over %d episodes", label, result.summary.sr,
                    result.summary.spl, result.summary.sna, len(records))
        return result

    @staticmethod
    def _header(spec: EpisodeSpec, setting: str) -> Dict:
        return {"kind": "episode", "episode_id": spec.episode_id, "setting": setting, "map_id": spec.map.id,
                "map_seed": spec.map.seed, "map": map_to_text(spec.map), "category_id": spec.category_id,
                "start": [spec.start.x, spec.start.y, int(spec.start.heading)], "source": list(spec.source)}


def format_eval_report(results: Sequence[EvalResult]) -> str:
    lines = [f"{'setting':<10} {'policy':<8} {'SR':>7} {'SPL':>7} {'SNA':>7} {'episodes':>9} {'ATP acc':>8}"]
    for r in results:
        acc = "-" if r.atp_accuracy is None else f"{r.atp_accuracy:.3f}"
        lines.append(f"{r.setting:<10} {r.policy:<8} {r.summary.sr:>7.3f} {r.summary.spl:>7.3f} "
                     f"{r.summary.sna:>7.3f} {r.summary.episodes:>9d} {acc:>8}")
    return "\n".join(lines) + "\n"


# --- Exports ---

@dataclass
class TrajectoryLog:
    episode_id: str
    map: GridMap
    start: AgentPose
    source: Tuple[int, int]
    category_id: int
    actions: List[int] = field(default_factory=list)
    poses: List[AgentPose] = field(default_factory=list)
    predicted: List[Optional[int]] = field(default_factory=list)


def read_trajectories(path: Union[str, Path]) -> List[TrajectoryLog]:
    log = RunLog(path)
    if not log.exists():
        raise EpisodeError(f"trajectory log not found: {path}")
    episodes: Dict[str, TrajectoryLog] = {}
    for rec in log:
        if rec.get("kind") == "episode":
            sx, sy, sh = rec["start"]
            start = AgentPose(sx, sy, Heading(sh))
            episodes[rec["episode_id"]] = TrajectoryLog(rec["episode_id"], map_from_text(rec["map"]), start,
                                                        tuple(rec["source"]), rec["category_id"], poses=[start])
        elif rec.get("kind") == "step":
            traj = episodes[rec["episode_id"]]
            traj.actions.append(int(rec["action"]))
            traj.poses.append(AgentPose(rec["x"], rec["y"], Heading(rec["heading"])))
            traj.predicted.append(rec.get("predicted"))
    return list(episodes.values())


def _action_labels(n: int) -> List[str]:
    return [a.name.lower() for a in Action] if n == NUM_ACTIONS else [str(i) for i in range(n)]


class ExportService:
    """Plot-ready delimited text files; no plotting happens here."""

    @staticmethod
    def trajectories(log_path: Union[str, Path], out_path: Union[str, Path],
                     compare_path: Optional[Union[str, Path]] = None) -> List[Path]:
        """Per-step poses as CSV plus ASCII overlays; every episode is checked against a replay first."""
        out_path = Path(out_path)
        logs = {"a": read_trajectories(log_path)}
        if compare_path is not None:
            logs["b"] = read_trajectories(compare_path)
        for trajs in logs.values():
            for traj in trajs:
                if replay(traj.map, traj.start, traj.actions) != traj.poses:
                    raise EpisodeError(f"episode {traj.episode_id}: logged poses disagree with a replay")

        out_path.parent.mkdir(parents=True, exist_ok=True)
        with out_path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["policy", "episode_id", "step", "x", "y", "heading", "action"])
            for policy, trajs in logs.items():
                for traj in trajs:
                    for i, pose in enumerate(traj.poses):
                        action = traj.actions[i - 1] if i else -1
                        writer.writerow([policy, traj.episode_id, i, pose.x, pose.y, int(pose.heading), action])

        art_path = out_path.with_suffix(".txt")
        blocks = []
        if compare_path is None:
            for traj in logs["a"]:
                blocks.append(f"## {traj.episode_id} category={traj.category_id}\n"
                              + render_ascii(traj.map, traj.poses, traj.source))
        else:
            other = {t.episode_id: t for t in logs["b"]}
            for traj in logs["a"]:
                if traj.episode_id not in other:
                    continue
                left = render_ascii(traj.map, traj.poses, traj.source).splitlines()
                right_traj = other[traj.episode_id]
                right = render_ascii(right_traj.map, right_traj.poses, right_traj.source).splitlines()
                rows = [f"{l}    {r}" for l, r in zip(left, right)]
                blocks.append(f"## {traj.episode_id} (a: {Path(log_path).name}, b: {Path(compare_path).name})\n"
                              + "\n".join(rows) + "\n")
        art_path.write_text("\n".join(blocks), encoding="utf-8")
        return [out_path, art_path]

    @staticmethod
    def _write_matrix(path: Path, values: np.ndarray, labels: Sequence[str]) -> None:
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["from"] + list(labels))
            for label, row in zip(labels, values):
                writer.writerow([label] + [repr(float(v)) for v in row])

    @staticmethod
    def transition_matrix(log_path: Union[str, Path], out_path: Union[str, Path], n: int = NUM_ACTIONS,
                          top_k: int = 10) -> List[Path]:
        """Row-normalised executed transitions, raw counts, the top-k list and (if logged) ATP predictions."""
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        trajs = read_trajectories(log_path)
        labels = _action_labels(n)
        matrix = transition_matrix([t.actions for t in trajs], n)
        ExportService._write_matrix(out_path, matrix.probabilities(), labels)
        counts_path = out_path.with_name(out_path.stem + ".counts.csv")
        ExportService._write_matrix(counts_path, matrix.counts, labels)
        written = [out_path, counts_path]

        top_path = out_path.with_name(out_path.stem + ".top.csv")
        with top_path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["rank", "from", "to", "probability"])
            for rank, (a, b, p) in enumerate(top_transitions(matrix, top_k), start=1):
                writer.writerow([rank, labels[a], labels[b], repr(p)])
        written.append(top_path)

        pairs = [(t.actions, t.predicted) for t in trajs if t.predicted and None not in t.predicted]
        if pairs:
            predicted = predicted_transition_matrix(pairs, n)
            pred_path = out_path.with_name(out_path.stem + ".predicted.csv")
            ExportService._write_matrix(pred_path, predicted.probabilities(), labels)
            written.append(pred_path)
        return written

    @staticmethod
    def bda_scatter(cfg: RunConfig, model: ActorCritic, out_path: Union[str, Path], setting: str = "unheard",
                    episodes: Optional[int] = None) -> Path:
        """(mean f_al, mean f_ar) per evaluation step, tagged with the source-bearing bucket."""
        if not isinstance(model.audio, BdaAudioEncoder):
            raise ConfigError("bda-scatter needs a model trained with encoder.bda=true")
        if episodes is not None:
            cfg = replace(cfg, split=replace(cfg.split, episodes_per_eval=episodes))
        rows: List[Tuple] = []

        def observe(env: NavigationEnv, obs) -> None:
            maps = model.audio.encode_channels(Tape(enabled=False), obs.audio[None].astype(model.dtype))
            left, right = channel_means(maps)[0]
            sine, _ = arrival_bearing(env.spec.map, env.pose, env.spec.source, env.field)
            rows.append((bearing_bucket(sine), float(left), float(right), env.spec.episode_id, env.steps))

        EvaluationService(cfg, model, progress=False).evaluate(setting, observer=observe)
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with out_path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bucket", "mean_left", "mean_right", "episode_id", "step"])
            for bucket, left, right, episode_id, step in rows:
                writer.writerow([bucket, repr(left), repr(right), episode_id, step])
        return out_path


# --- Gradient checks ---

TINY_ENCODER = EncoderConfig(channels=(3, 4, 3), feature_dim=6)
TINY_PPO = PPOConfig(state_dim=5, aux_hidden=6, rollout_length=3, num_envs=2, minibatches=1, ppo_epochs=1)
TINY_DEPTH = (32, 32)
TINY_AUDIO = (32, 16)


@dataclass
class GradcheckReport:
    errors: Dict[str, float]
    instances: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    @property
    def failures(self) -> List[str]:
        return [name for name, e in self.errors.items() if e > self.tolerance]

    def to_text(self) -> str:
        lines = [f"{'component':<24} {'max rel err':>12}  status"]
        for name, err in self.errors.items():
            lines.append(f"{name:<24} {err:>12.3e}  {'ok' if err <= self.tolerance else 'FAIL'}")
        lines.append(f"{self.instances} instances per component, tolerance {self.tolerance:g}")
        return "\n".join(lines) + "\n"


def _inputs(rng: np.random.Generator, **shapes) -> Dict[str, Parameter]:
    return {name: Parameter(name, rng.standard_normal(shape)) for name, shape in shapes.items()}


def _project(out: Var, weights: np.ndarray) -> Var:
    return nx.sum_(nx.mul(out, weights))


class GradcheckService:
    """
    64-bit central-difference checks for every differentiable block: layer
    primitives, the encoders, the BDA block, the policy, the ATP loss and the
    composite PPO + ATP objective. Each component runs on several random
    instances; module checks sample `max_entries` positions per tensor.
    """

    def __init__(self, instances: int = 5, eps: float = 1e-5, tolerance: float = 1e-4, seed: int = 0,
                 max_entries: int = 6, num_actions: int = NUM_ACTIONS):
        self.instances = instances
        self.ppo = replace(TINY_PPO, num_actions=num_actions)
        self.ppo.validate()
        self.eps = eps
        self.tolerance = tolerance
        self.seed = seed
        self.max_entries = max_entries
        self.components: Dict[str, Callable[[np.random.Generator], float]] = {
            "conv2d": self.check_conv2d,
            "linear": self.check_linear,
            "gru_cell": self.check_gru,
            "elementwise": self.check_elementwise,
            "cross_entropy": self.check_cross_entropy,
            "bda_block": self.check_bda,
            "projection": self.check_projection,
            "visual_encoder": self.check_visual_encoder,
            "bda_audio_encoder": self.check_bda_audio_encoder,
            "concat_audio_encoder": self.check_concat_audio_encoder,
            "policy_forward": self.check_policy,
            "atp_loss": self.check_atp_loss,
            "total_loss": self.check_total_loss,
        }

    def run(self, components: Optional[Sequence[str]] = None, progress: Optional[bool] = None) -> GradcheckReport:
        names = list(components) if components else list(self.components)
        unknown = [n for n in names if n not in self.components]
        if unknown:
            raise ConfigError(f"unknown gradcheck components: {unknown}")
        show = progress_enabled() if progress is None else progress
        errors: Dict[str, float] = {}
        for name in tqdm(names, desc="gradcheck", disable=not show):
            rng = np.random.default_rng([self.seed, zlib.crc32(name.encode())])
            errors[name] = max(self.components[name](rng) for _ in range(self.instances))
            logger.debug("gradcheck %s: %.3e", name, errors[name])
        return GradcheckReport(errors, self.instances, self.tolerance)

    def _check(self, loss_fn: Callable[[Tape], Var], params: Dict[str, Parameter], rng: np.random.Generator,
               sample: bool = False) -> float:
        report = check_parameters(loss_fn, params, self.eps, self.max_entries if sample else None, rng)
        return max(report.values())

    # primitives
    def check_conv2d(self, rng) -> float:
        stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        p = _inputs(rng, x=(2, 2, 9, 9), w=(3, 2, 3, 3), b=(3,))
        size = nx.conv_output_size(9, 3, stride, padding)
        weights = rng.standard_normal((2, 3, size, size))
        return self._check(lambda t: _project(nx.conv2d(t.use(p["x"]), t.use(p["w"]), t.use(p["b"]), stride,
                                                         padding), weights), p, rng)

    def check_linear(self, rng) -> float:
        p = _inputs(rng, x=(4, 5), w=(3, 5), b=(3,))
        weights = rng.standard_normal((4, 3))
        return self._check(lambda t: _project(nx.linear(t.use(p["x"]), t.use(p["w"]), t.use(p["b"])), weights),
                           p, rng)

    def check_gru(self, rng) -> float:
        p = _inputs(rng, x=(3, 4), h=(3, 5), w_ih=(15, 4), w_hh=(15, 5), b_ih=(15,), b_hh=(15,))
        weights = rng.standard_normal((3, 5))
        return self._check(lambda t: _project(nx.gru_cell(*(t.use(p[k]) for k in
                                                             ("x", "h", "w_ih", "w_hh", "b_ih", "b_hh"))),
                                              weights), p, rng)

    def check_elementwise(self, rng) -> float:
        p = _inputs(rng, x=(4, 6), y=(4, 6))
        r = [rng.standard_normal((4, 6)) for _ in range(5)]

        def loss(t: Tape) -> Var:
            x, y = t.use(p["x"]), t.use(p["y"])
            terms = [_project(nx.sigmoid(x), r[0]), _project(nx.tanh(y), r[1]),
                     _project(nx.log_softmax(x), r[2]), _project(nx.mul(x, y), r[3]),
                     _project(nx.exp(nx.scale(nx.sub(y, x), 0.3)), r[4]), nx.mean(nx.square(y))]
            total = terms[0]
            for term in terms[1:]:
                total = nx.add(total, term)
            return total
        return self._check(loss, p, rng)

    def check_cross_entropy(self, rng) -> float:
        p = _inputs(rng, logits=(6, 4))
        targets = rng.integers(0, 4, size=6)
        return self._check(lambda t: nx.softmax_cross_entropy(t.use(p["logits"]), targets), p, rng)

    def check_bda(self, rng) -> float:
        p = _inputs(rng, f_al=(2, 3, 4, 2), f_ar=(2, 3, 4, 2), gate_w=(3, 6, 1, 1), gate_b=(3,))
        weights = rng.standard_normal((2, 3, 4, 2))

        def loss(t: Tape) -> Var:
            maps = ChannelFeatureMaps(t.use(p["f_al"]), t.use(p["f_ar"]))
            fused, _ = bda_fuse(maps, t.use(p["gate_w"]), t.use(p["gate_b"]))
            return _project(fused, weights)
        return self._check(loss, p, rng)

    # modules
    def check_projection(self, rng) -> float:
        proj = Projection("proj", 12, 5, int(rng.integers(1 << 30)), "float64")
        x = Parameter("x", rng.standard_normal((2, 3, 2, 2)))
        weights = rng.standard_normal((2, 5))
        params = {**proj.parameters(), "x": x}
        return self._check(lambda t: _project(proj.forward(t, t.use(x)), weights), params, rng, sample=True)

    def _module_check(self, module, inputs: np.ndarray, rng) -> float:
        out = module.forward(Tape(enabled=False), inputs)
        weights = rng.standard_normal(out.shape)
        return self._check(lambda t: _project(module.forward(t, inputs), weights), module.parameters(), rng,
                           sample=True)

    def check_visual_encoder(self, rng) -> float:
        enc = VisualEncoder(TINY_ENCODER, TINY_DEPTH, int(rng.integers(1 << 30)), "float64")
        return self._module_check(enc, rng.uniform(0, 1, (2, 1) + TINY_DEPTH), rng)

    def check_bda_audio_encoder(self, rng) -> float:
        cfg = replace(TINY_ENCODER, gate_init=0.5)
        enc = BdaAudioEncoder(cfg, TINY_AUDIO, int(rng.integers(1 << 30)), "float64")
        return self._module_check(enc, rng.uniform(0, 1, (2, 2) + TINY_AUDIO), rng)

    def check_concat_audio_encoder(self, rng) -> float:
        enc = ConcatAudioEncoder(replace(TINY_ENCODER, bda=False), TINY_AUDIO, int(rng.integers(1 << 30)), "float64")
        return self._module_check(enc, rng.uniform(0, 1, (2, 2) + TINY_AUDIO), rng)

    def _tiny_policy(self, rng, aux_weight: float = 0.1) -> ActorCritic:
        ppo = replace(self.ppo, aux_weight=aux_weight)
        return ActorCritic(TINY_ENCODER, ppo, TINY_DEPTH, TINY_AUDIO, int(rng.integers(1 << 30)), "float64")

    def check_policy(self, rng) -> float:
        model = self._tiny_policy(rng)
        depth = [rng.uniform(0, 1, (2, 1) + TINY_DEPTH) for _ in range(2)]
        audio = [rng.uniform(0, 1, (2, 2) + TINY_AUDIO) for _ in range(2)]
        h0 = rng.standard_normal((2, 5)) * 0.5
        firsts = [np.array([False, False]), np.array([False, True])]
        w_logits = [rng.standard_normal((2, self.ppo.num_actions)) for _ in range(2)]
        w_value = [rng.standard_normal(2) for _ in range(2)]

        def loss(t: Tape) -> Var:
            hidden, total = h0, None
            for k in range(2):
                out = model.forward(t, depth[k], audio[k], hidden, firsts[k])
                hidden = out.state
                term = nx.add(_project(out.logits, w_logits[k]), _project(out.value, w_value[k]))
                total = term if total is None else nx.add(total, term)
            return total
        return self._check(loss, model.parameters(), rng, sample=True)

    def check_atp_loss(self, rng) -> float:
        n = self.ppo.num_actions
        aux = AuxNet(5, n, 6, int(rng.integers(1 << 30)), "float64")
        states = Parameter("states", rng.standard_normal((4, 2, 5)))
        actions = rng.integers(0, n, size=(4, 2))
        dones = rng.random((4, 2)) < 0.3
        params = {**aux.parameters(), "states": states}
        return self._check(lambda t: atp_loss(t, aux, t.use(states), actions, dones).loss, params, rng)

    def _random_buffer(self, model: ActorCritic, rng) -> RolloutBuffer:
        steps, lanes = self.ppo.rollout_length, self.ppo.num_envs
        buf = RolloutBuffer(steps, lanes, (1,) + TINY_DEPTH, (2,) + TINY_AUDIO, self.ppo.state_dim, np.float64)
        buf.reset(rng.standard_normal((lanes, self.ppo.state_dim)) * 0.5)
        hidden = buf.h0.copy()
        first = np.zeros(lanes, dtype=bool)
        for _ in range(steps):
            depth = rng.uniform(0, 1, (lanes, 1) + TINY_DEPTH)
            audio = rng.uniform(0, 1, (lanes, 2) + TINY_AUDIO)
            act = model.act(depth, audio, hidden, first, rng)
            dones = rng.random(lanes) < 0.25
            noisy_logp = act.log_probs + rng.normal(0, 0.3, lanes)
            buf.insert(depth, audio, first, act.actions, noisy_logp, act.values, act.hidden,
                       rng.normal(0, 1, lanes), dones)
            hidden, first = act.hidden, dones
        buf.bootstrap_value[...] = rng.normal(0, 1, lanes)
        return buf

    def check_total_loss(self, rng) -> float:
        model = self._tiny_policy(rng)
        buf = self._random_buffer(model, rng)
        adv, ret = compute_gae(buf, self.ppo.gamma, self.ppo.gae_lambda)
        lanes = np.arange(buf.lanes)
        cfg = replace(self.ppo, aux_weight=0.1)
        return self._check(lambda t: ppo_loss(t, model, buf, lanes, adv, ret, cfg)[0], model.parameters(), rng,
                           sample=True)
