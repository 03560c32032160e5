"""
Recurrent actor-critic trained with PPO, plus the action transition
prediction (ATP) auxiliary head.

    s_t          = GRU(relu(W [f_v; f_a] + b), h_{t-1})
    logits, v    = heads(s_t)
    a_hat_{t+1}  = AuxNet([s_t; one_hot(a_t)])
    L_aux        = mean CE(a_hat_{t+1}, a_{t+1}) over in-episode pairs
    L_total      = L_PPO + aux_weight * L_aux

ATP pairs never cross an episode boundary: a pair (t, b) is dropped when the
episode of lane b ended at step t.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import numerics as nx
from encoders import EncoderConfig, VisualEncoder, build_audio_encoder
from errors import ConfigError, ShapeError, TrainingDivergedError
from numerics import Adam, Module, Tape, Var

logger = logging.getLogger(__name__)

# up to a 9x9 waypoint map
MAX_ACTIONS = 81


@dataclass(frozen=True)
class PPOConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    ppo_epochs: int = 4
    minibatches: int = 4
    lr: float = 2.5e-4
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    aux_weight: float = 0.1
    rollout_length: int = 128
    num_envs: int = 8
    num_actions: int = 4
    state_dim: int = 512
    aux_hidden: int = 256
    max_grad_norm: float = 0.5
    adam_eps: float = 1e-5
    atp_enabled: bool = True

    def validate(self) -> None:
        if self.aux_weight < 0:
            raise ConfigError(f"aux_weight must be >= 0, got {self.aux_weight}")
        if not 2 <= self.num_actions <= MAX_ACTIONS:
            raise ConfigError(f"num_actions must be in [2, {MAX_ACTIONS}], got {self.num_actions}")
        if not 0 < self.clip < 1:
            raise ConfigError(f"clip must be in (0, 1), got {self.clip}")
        if self.rollout_length < 2:
            raise ConfigError("rollout_length must be >= 2 for transition pairs")
        if self.num_envs < 1 or self.minibatches < 1 or self.ppo_epochs < 1:
            raise ConfigError("num_envs, minibatches and ppo_epochs must be positive")
        if self.aux_weight > 0 and not self.atp_enabled:
            raise ConfigError("aux_weight > 0 needs atp_enabled")


# --- ATP ---

class AuxNet(Module):
    """Two fully-connected layers: (S + N) -> hidden -> N."""

    def __init__(self, state_dim: int, num_actions: int, hidden: int = 256, seed: int = 0,
                 precision: str = "float32"):
        super().__init__("aux", seed, precision)
        self.state_dim = state_dim
        self.num_actions = num_actions
        self.w1 = self.param("fc1.weight", (hidden, state_dim + num_actions))
        self.b1 = self.param("fc1.bias", (hidden,), init="zeros")
        self.w2 = self.param("fc2.weight", (num_actions, hidden))
        self.b2 = self.param("fc2.bias", (num_actions,), init="zeros")


def atp_predict(tape: Tape, aux: AuxNet, s_t, actions: np.ndarray) -> Var:
    actions = np.asarray(actions, dtype=np.int64)
    s_t = nx._wrap(s_t)
    if s_t.value.ndim != 2 or s_t.shape[1] != aux.state_dim:
        raise ShapeError(f"atp_predict: state must be (M,{aux.state_dim}), got {s_t.shape}")
    if actions.shape != (s_t.shape[0],):
        raise ShapeError(f"atp_predict: actions shape {actions.shape} != ({s_t.shape[0]},)")
    if actions.size and (actions.min() < 0 or actions.max() >= aux.num_actions):
        raise ShapeError(f"atp_predict: action out of range [0, {aux.num_actions})")
    x = nx.concat([s_t, nx.one_hot(actions, aux.num_actions, s_t.dtype)], axis=1)
    hidden = nx.relu(nx.linear(x, tape.use(aux.w1), tape.use(aux.b1)))
    return nx.linear(hidden, tape.use(aux.w2), tape.use(aux.b2))


def atp_pair_index(dones: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(t, b) of every transition pair that stays inside one episode."""
    steps, lanes = dones.shape
    t, b = np.meshgrid(np.arange(steps - 1), np.arange(lanes), indexing="ij")
    keep = ~dones[:-1].astype(bool)
    return t[keep], b[keep]


@dataclass
class AtpResult:
    loss: Var
    pairs: int
    correct: int

    @property
    def accuracy(self) -> Optional[float]:
        return self.correct / self.pairs if self.pairs else None


def atp_loss(tape: Tape, aux: AuxNet, states, actions: np.ndarray, dones: np.ndarray) -> AtpResult:
    """
    Mean cross-entropy of predicting a_{t+1} from (s_t, a_t).
    `states` is (T, B, S); zero when every pair crosses a boundary.
    """
    states = nx._wrap(states)
    actions = np.asarray(actions, dtype=np.int64)
    dones = np.asarray(dones, dtype=bool)
    steps, lanes = actions.shape
    if steps < 2:
        raise ShapeError("atp_loss needs at least two time steps")
    if states.shape[:2] != (steps, lanes) or dones.shape != (steps, lanes):
        raise ShapeError(f"atp_loss: states {states.shape}, actions {actions.shape}, dones {dones.shape} disagree")
    t, b = atp_pair_index(dones)
    if t.size == 0:
        return AtpResult(Var(np.asarray(0.0, dtype=states.dtype)), 0, 0)
    flat = nx.reshape(states, (steps * lanes, states.shape[2]))
    s_t = nx.take_rows(flat, t * lanes + b)
    logits = atp_predict(tape, aux, s_t, actions[t, b])
    targets = actions[t + 1, b]
    correct = int((logits.value.argmax(axis=1) == targets).sum())
    return AtpResult(nx.softmax_cross_entropy(logits, targets), int(t.size), correct)


# --- Actor-critic ---

@dataclass
class PolicyOutput:
    logits: Var
    value: Var
    state: Var

    @property
    def hidden(self) -> Var:
        return self.state


@dataclass
class ActResult:
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    hidden: np.ndarray


class ActorCritic(Module):
    def __init__(self, enc_cfg: EncoderConfig, ppo_cfg: PPOConfig, depth_hw: Tuple[int, int],
                 audio_hw: Tuple[int, int], seed: int = 0, precision: str = "float32"):
        super().__init__("", seed, precision)
        enc_cfg.validate()
        self.enc_cfg = enc_cfg
        self.ppo_cfg = ppo_cfg
        self.state_dim = ppo_cfg.state_dim
        self.num_actions = ppo_cfg.num_actions
        s, n = ppo_cfg.state_dim, ppo_cfg.num_actions
        self.visual = self.child(VisualEncoder(enc_cfg, depth_hw, seed, precision))
        self.audio = self.child(build_audio_encoder(enc_cfg, audio_hw, seed, precision))
        self.fuse_w = self.param("fuse.weight", (s, 2 * enc_cfg.feature_dim))
        self.fuse_b = self.param("fuse.bias", (s,), init="zeros")
        self.w_ih = self.param("gru.w_ih", (3 * s, s))
        self.w_hh = self.param("gru.w_hh", (3 * s, s))
        self.b_ih = self.param("gru.b_ih", (3 * s,), init="zeros")
        self.b_hh = self.param("gru.b_hh", (3 * s,), init="zeros")
        self.actor_w = self.param("actor.weight", (n, s), init="uniform", bound=0.01)
        self.actor_b = self.param("actor.bias", (n,), init="zeros")
        self.critic_w = self.param("critic.weight", (1, s))
        self.critic_b = self.param("critic.bias", (1,), init="zeros")
        self.aux: Optional[AuxNet] = None
        if ppo_cfg.atp_enabled:
            self.aux = self.child(AuxNet(s, n, ppo_cfg.aux_hidden, seed, precision))

    def initial_hidden(self, batch: int) -> np.ndarray:
        return np.zeros((batch, self.state_dim), dtype=self.dtype)

    def forward(self, tape: Tape, depth, audio, h_prev, first) -> PolicyOutput:
        h_prev = nx._wrap(h_prev)
        first = np.asarray(first, dtype=bool)
        batch = h_prev.shape[0]
        if h_prev.shape != (batch, self.state_dim) or first.shape != (batch,):
            raise ShapeError(f"policy_forward: hidden {h_prev.shape} / first {first.shape} "
                             f"inconsistent with state_dim {self.state_dim}")
        depth = np.asarray(depth, dtype=self.dtype)
        audio = np.asarray(audio, dtype=self.dtype)
        f_v = self.visual.forward(tape, depth)
        f_a = self.audio.forward(tape, audio)
        fused = nx.relu(nx.linear(nx.concat([f_v, f_a], axis=1), tape.use(self.fuse_w), tape.use(self.fuse_b)))
        keep = np.broadcast_to((~first).astype(self.dtype)[:, None], h_prev.shape).copy()
        h = nx.mul(h_prev, keep)
        s_t = nx.gru_cell(fused, h, tape.use(self.w_ih), tape.use(self.w_hh),
                          tape.use(self.b_ih), tape.use(self.b_hh))
        logits = nx.linear(s_t, tape.use(self.actor_w), tape.use(self.actor_b))
        value = nx.reshape(nx.linear(s_t, tape.use(self.critic_w), tape.use(self.critic_b)), (batch,))
        return PolicyOutput(logits, value, s_t)

    def act(self, depth, audio, hidden, first, rng: Optional[np.random.Generator] = None,
            greedy: bool = False) -> ActResult:
        out = self.forward(Tape(enabled=False), depth, audio, hidden, first)
        logp = nx.log_softmax(out.logits).value.astype(np.float64)
        if greedy:
            actions = logp.argmax(axis=1)
        else:
            cdf = np.cumsum(np.exp(logp), axis=1)
            u = rng.random(logp.shape[0])[:, None] * cdf[:, -1:]
            actions = np.minimum((u > cdf).sum(axis=1), logp.shape[1] - 1)
        rows = np.arange(logp.shape[0])
        return ActResult(actions.astype(np.int64), logp[rows, actions], out.value.value.astype(np.float64),
                         out.state.value)

    def predict_next(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Argmax ATP predictions for (s_t, a_t); requires the aux head."""
        if self.aux is None:
            raise ConfigError("this policy was built without the ATP head")
        return atp_predict(Tape(enabled=False), self.aux, states, actions).value.argmax(axis=1)


def policy_forward(tape: Tape, model: ActorCritic, depth, audio, h_prev, first) -> PolicyOutput:
    return model.forward(tape, depth, audio, h_prev, first)


# --- Rollouts ---

class RolloutBuffer:
    """T x B trajectory storage; lanes never write into each other."""

    def __init__(self, steps: int, lanes: int, depth_shape: Tuple[int, ...], audio_shape: Tuple[int, ...],
                 state_dim: int, dtype=np.float32):
        self.steps, self.lanes = steps, lanes
        self.depth = np.zeros((steps, lanes) + tuple(depth_shape), dtype=dtype)
        self.audio = np.zeros((steps, lanes) + tuple(audio_shape), dtype=dtype)
        self.first = np.zeros((steps, lanes), dtype=bool)
        self.actions = np.zeros((steps, lanes), dtype=np.int64)
        self.log_probs = np.zeros((steps, lanes), dtype=np.float64)
        self.values = np.zeros((steps, lanes), dtype=np.float64)
        self.rewards = np.zeros((steps, lanes), dtype=np.float64)
        self.dones = np.zeros((steps, lanes), dtype=bool)
        self.states = np.zeros((steps, lanes, state_dim), dtype=dtype)
        self.h0 = np.zeros((lanes, state_dim), dtype=dtype)
        self.bootstrap_value = np.zeros(lanes, dtype=np.float64)
        self.cursor = 0

    @property
    def full(self) -> bool:
        return self.cursor == self.steps

    def reset(self, h0: np.ndarray) -> None:
        self.h0[...] = h0
        self.cursor = 0

    def insert(self, depth, audio, first, actions, log_probs, values, states, rewards, dones) -> None:
        t = self.cursor
        if t >= self.steps:
            raise ShapeError("rollout buffer is full")
        self.depth[t] = depth
        self.audio[t] = audio
        self.first[t] = first
        self.actions[t] = actions
        self.log_probs[t] = log_probs
        self.values[t] = values
        self.states[t] = states
        self.rewards[t] = rewards
        self.dones[t] = dones
        self.cursor += 1

    def atp_pair_count(self) -> int:
        return int((self.steps - 1) * self.lanes - self.dones[:-1].sum())


def compute_gae(buffer: RolloutBuffer, gamma: float, gae_lambda: float,
                normalize: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation with done-masking; returns (advantages, returns)."""
    rewards, values, dones = buffer.rewards, buffer.values, buffer.dones
    advantages = np.zeros_like(rewards)
    running = np.zeros(buffer.lanes)
    for t in reversed(range(buffer.steps)):
        next_value = buffer.bootstrap_value if t == buffer.steps - 1 else values[t + 1]
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        running = delta + gamma * gae_lambda * nonterminal * running
        advantages[t] = running
    returns = advantages + values
    if normalize and advantages.size > 1:
        advantages = (advantages - advantages.mean()) / (advantages.std() + 1e-8)
    return advantages, returns


# --- PPO ---

@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    entropy: float
    ppo_loss: float
    aux_loss: Optional[float]
    total_loss: float
    atp_accuracy: Optional[float]
    # pairs scored over every epoch and minibatch, the accuracy denominator
    atp_pairs: int
    approx_kl: float
    clip_fraction: float
    grad_norm: float

    def to_dict(self) -> Dict:
        return asdict(self)


def ppo_loss(tape: Tape, model: ActorCritic, buffer: RolloutBuffer, lanes: np.ndarray, advantages: np.ndarray,
             returns: np.ndarray, cfg: PPOConfig) -> Tuple[Var, Dict[str, float]]:
    """L_total for one minibatch of lanes, re-running the recurrent policy over the stored sequences."""
    lanes = np.asarray(lanes, dtype=np.int64)
    dtype = model.dtype
    hidden = buffer.h0[lanes]
    logits_seq, value_seq, state_seq = [], [], []
    for t in range(buffer.steps):
        out = model.forward(tape, buffer.depth[t, lanes], buffer.audio[t, lanes], hidden, buffer.first[t, lanes])
        hidden = out.state
        logits_seq.append(out.logits)
        value_seq.append(out.value)
        state_seq.append(out.state)

    rows = buffer.steps * len(lanes)
    logits = nx.reshape(nx.stack(logits_seq), (rows, model.num_actions))
    values = nx.reshape(nx.stack(value_seq), (rows,))
    actions = buffer.actions[:, lanes].reshape(-1)
    old_logp = buffer.log_probs[:, lanes].reshape(-1).astype(dtype)
    adv = advantages[:, lanes].reshape(-1).astype(dtype)
    ret = returns[:, lanes].reshape(-1).astype(dtype)

    logp_all = nx.log_softmax(logits)
    logp = nx.take(logp_all, actions)
    ratio = nx.exp(nx.sub(logp, old_logp))
    surrogate = nx.minimum(nx.mul(ratio, adv), nx.mul(nx.clip(ratio, 1 - cfg.clip, 1 + cfg.clip), adv))
    policy_loss = nx.scale(nx.mean(surrogate), -1.0)
    value_loss = nx.mean(nx.square(nx.sub(values, ret)))
    entropy = nx.scale(nx.mean(nx.sum_(nx.mul(nx.exp(logp_all), logp_all), axis=1)), -1.0)
    l_ppo = nx.add(nx.add(policy_loss, nx.scale(value_loss, cfg.value_coef)), nx.scale(entropy, -cfg.entropy_coef))

    states = nx.stack(state_seq)
    step_actions = buffer.actions[:, lanes]
    step_dones = buffer.dones[:, lanes]
    atp: Optional[AtpResult] = None
    total = l_ppo
    if model.aux is not None and cfg.aux_weight > 0:
        atp = atp_loss(tape, model.aux, states, step_actions, step_dones)
        total = nx.add(l_ppo, nx.scale(atp.loss, cfg.aux_weight))
    elif model.aux is not None:
        atp = atp_loss(Tape(enabled=False), model.aux, states.value, step_actions, step_dones)

    ratio_v = ratio.value.astype(np.float64)
    parts = {
        "policy_loss": float(policy_loss.value),
        "value_loss": float(value_loss.value),
        "entropy": float(entropy.value),
        "ppo_loss": float(l_ppo.value),
        "aux_loss": float(atp.loss.value) if atp is not None else None,
        "total_loss": float(total.value),
        "atp_pairs": atp.pairs if atp is not None else 0,
        "atp_correct": atp.correct if atp is not None else 0,
        "approx_kl": float(np.mean(old_logp.astype(np.float64) - logp.value)),
        "clip_fraction": float(np.mean(np.abs(ratio_v - 1.0) > cfg.clip)),
    }
    return total, parts


def _finite(parts: Dict[str, Optional[float]]) -> bool:
    return all(v is None or math.isfinite(v) for v in parts.values())


def ppo_update(model: ActorCritic, optimizer: Adam, buffer: RolloutBuffer, cfg: PPOConfig,
               rng: np.random.Generator) -> UpdateStats:
    if not buffer.full:
        raise ShapeError(f"ppo_update needs a full buffer ({buffer.cursor}/{buffer.steps} steps)")
    advantages, returns = compute_gae(buffer, cfg.gamma, cfg.gae_lambda)
    sums: Dict[str, float] = {}
    aux_losses: List[float] = []
    norms: List[float] = []
    pairs = correct = count = 0
    for epoch in range(cfg.ppo_epochs):
        order = rng.permutation(buffer.lanes)
        for lanes in np.array_split(order, min(cfg.minibatches, buffer.lanes)):
            tape = Tape()
            total, parts = ppo_loss(tape, model, buffer, lanes, advantages, returns, cfg)
            if not _finite(parts):
                model.zero_grad()
                raise TrainingDivergedError(f"non-finite loss in epoch {epoch}", diagnostics=parts)
            tape.backward(total)
            norms.append(optimizer.step())
            for key in ("policy_loss", "value_loss", "entropy", "ppo_loss", "total_loss", "approx_kl",
                        "clip_fraction"):
                sums[key] = sums.get(key, 0.0) + parts[key]
            if parts["aux_loss"] is not None:
                aux_losses.append(parts["aux_loss"])
            pairs += parts["atp_pairs"]
            correct += parts["atp_correct"]
            count += 1
    means = {k: v / count for k, v in sums.items()}
    return UpdateStats(
        policy_loss=means["policy_loss"],
        value_loss=means["value_loss"],
        entropy=means["entropy"],
        ppo_loss=means["ppo_loss"],
        aux_loss=float(np.mean(aux_losses)) if aux_losses else None,
        total_loss=means["total_loss"],
        atp_accuracy=correct / pairs if pairs else None,
        atp_pairs=pairs,
        approx_kl=means["approx_kl"],
        clip_fraction=means["clip_fraction"],
        grad_norm=float(np.mean(norms)),
    )
