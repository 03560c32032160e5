import math
from dataclasses import replace

import numpy as np
import pytest

import numerics as nx
from encoders import EncoderConfig
from errors import ConfigError, ShapeError, TrainingDivergedError
from numerics import Adam, Tape
from policy import (ActorCritic, AuxNet, PPOConfig, RolloutBuffer, atp_loss, atp_pair_index, atp_predict,
                    compute_gae, policy_forward, ppo_loss, ppo_update)

ENC = EncoderConfig(channels=(3, 4, 3), feature_dim=6)
PPO = PPOConfig(state_dim=5, aux_hidden=6, rollout_length=4, num_envs=3, minibatches=2, ppo_epochs=2)
DEPTH, AUDIO = (32, 32), (32, 16)


# --- FIXTURES ---

@pytest.fixture
def model():
    return ActorCritic(ENC, PPO, DEPTH, AUDIO, seed=1, precision="float64")


def observations(rng, batch):
    return rng.uniform(0, 1, (batch, 1) + DEPTH), rng.uniform(0, 1, (batch, 2) + AUDIO)


def filled_buffer(model, rng, cfg=PPO, done_rate=0.2):
    buf = RolloutBuffer(cfg.rollout_length, cfg.num_envs, (1,) + DEPTH, (2,) + AUDIO, cfg.state_dim, np.float64)
    hidden = model.initial_hidden(cfg.num_envs)
    buf.reset(hidden)
    first = np.ones(cfg.num_envs, dtype=bool)
    for _ in range(cfg.rollout_length):
        depth, audio = observations(rng, cfg.num_envs)
        act = model.act(depth, audio, hidden, first, rng)
        dones = rng.random(cfg.num_envs) < done_rate
        buf.insert(depth, audio, first, act.actions, act.log_probs, act.values, act.hidden,
                   rng.normal(0, 1, cfg.num_envs), dones)
        hidden, first = act.hidden, dones
    buf.bootstrap_value[...] = rng.normal(0, 1, cfg.num_envs)
    return buf


# --- TEST ACTOR-CRITIC ---

def test_policy_output_shapes(model):
    rng = np.random.default_rng(0)
    depth, audio = observations(rng, 2)
    out = policy_forward(Tape(enabled=False), model, depth, audio, model.initial_hidden(2), np.ones(2, dtype=bool))
    assert out.logits.shape == (2, 4)
    assert out.value.shape == (2,)
    assert out.hidden.shape == (2, 5)


def test_first_step_resets_hidden(model):
    """A lane flagged first behaves as if its hidden state were zero."""
    rng = np.random.default_rng(1)
    depth, audio = observations(rng, 2)
    junk = rng.standard_normal((2, 5))
    a = model.forward(Tape(enabled=False), depth, audio, junk, np.array([True, False]))
    b = model.forward(Tape(enabled=False), depth, audio, np.zeros((2, 5)), np.array([True, True]))
    np.testing.assert_allclose(a.logits.value[0], b.logits.value[0], rtol=0, atol=1e-12)
    assert not np.array_equal(a.logits.value[1], b.logits.value[1])


def test_forward_rejects_bad_hidden(model):
    depth, audio = observations(np.random.default_rng(0), 2)
    with pytest.raises(ShapeError):
        model.forward(Tape(enabled=False), depth, audio, np.zeros((2, 7)), np.ones(2, dtype=bool))


def test_actor_head_starts_near_uniform(model):
    assert np.abs(model.actor_w.value).max() <= 0.01


def test_act_greedy_is_argmax_and_sampling_is_seeded(model):
    rng = np.random.default_rng(2)
    depth, audio = observations(rng, 3)
    h, first = model.initial_hidden(3), np.ones(3, dtype=bool)
    greedy = model.act(depth, audio, h, first, greedy=True)
    logits = model.forward(Tape(enabled=False), depth, audio, h, first).logits.value
    np.testing.assert_array_equal(greedy.actions, logits.argmax(axis=1))
    s1 = model.act(depth, audio, h, first, np.random.default_rng(9))
    s2 = model.act(depth, audio, h, first, np.random.default_rng(9))
    np.testing.assert_array_equal(s1.actions, s2.actions)
    assert np.all(s1.log_probs <= 0)


def test_waypoint_sized_action_map():
    """N=81 builds, predicts and trains with no rollout environment involved."""
    cfg = replace(PPO, num_actions=81)
    model = ActorCritic(ENC, cfg, DEPTH, AUDIO, seed=1, precision="float64")
    rng = np.random.default_rng(3)
    depth, audio = observations(rng, 2)
    out = policy_forward(Tape(enabled=False), model, depth, audio, model.initial_hidden(2), np.ones(2, dtype=bool))
    assert out.logits.shape == (2, 81)
    assert model.aux.num_actions == 81
    buf = filled_buffer(model, rng, cfg)
    assert buf.actions.max() < 81
    stats = ppo_update(model, Adam(model.parameters()), buf, cfg, np.random.default_rng(0))
    assert math.isfinite(stats.total_loss)
    assert stats.atp_pairs == cfg.ppo_epochs * buf.atp_pair_count()


def test_no_atp_head_without_atp():
    m = ActorCritic(ENC, replace(PPO, aux_weight=0.0, atp_enabled=False), DEPTH, AUDIO)
    assert m.aux is None
    assert not any(name.startswith("aux.") for name in m.parameters())
    with pytest.raises(ConfigError):
        m.predict_next(np.zeros((1, 5), dtype=np.float32), np.array([0]))


# --- TEST ATP ---

def test_atp_input_width_is_state_plus_actions():
    aux = AuxNet(512, 4, 256)
    assert aux.w1.shape == (256, 516)
    assert aux.w2.shape == (4, 256)


def test_atp_predict_rejects_out_of_range_action():
    aux = AuxNet(5, 4, 6)
    with pytest.raises(ShapeError, match="range"):
        atp_predict(Tape(enabled=False), aux, np.zeros((2, 5), dtype=np.float32), np.array([0, 4]))


def test_zero_aux_weights_give_log_n():
    aux = AuxNet(5, 4, 6, precision="float64")
    for p in aux.parameters().values():
        p.value[...] = 0
    rng = np.random.default_rng(0)
    result = atp_loss(Tape(), aux, rng.standard_normal((4, 2, 5)), rng.integers(0, 4, (4, 2)),
                      np.zeros((4, 2), dtype=bool))
    assert float(result.loss.value) == pytest.approx(math.log(4), abs=1e-12)
    assert result.pairs == 6


def test_saturated_prediction_gives_near_zero_loss():
    """A logit of +1e4 on every true next action drives the loss below 1e-6."""
    steps, lanes, n = 5, 2, 4
    rng = np.random.default_rng(3)
    actions = rng.integers(0, n, (steps, lanes))
    states = np.zeros((steps, lanes, n))
    states[np.arange(steps - 1)[:, None], np.arange(lanes)[None, :], actions[1:]] = 1.0
    aux = AuxNet(n, n, n, precision="float64")
    aux.w1.value[...] = np.hstack([np.eye(n), np.zeros((n, n))])
    aux.b1.value[...] = 0
    aux.w2.value[...] = 1e4 * np.eye(n)
    aux.b2.value[...] = 0
    result = atp_loss(Tape(), aux, states, actions, np.zeros((steps, lanes), dtype=bool))
    assert float(result.loss.value) <= 1e-6
    assert result.accuracy == 1.0


def test_pairs_skip_episode_ends():
    dones = np.array([[False, True], [True, False], [False, False]])
    t, b = atp_pair_index(dones)
    assert sorted(zip(t.tolist(), b.tolist())) == [(0, 0), (1, 1)]


def test_all_boundaries_give_zero_loss():
    aux = AuxNet(5, 4, 6)
    result = atp_loss(Tape(), aux, np.ones((3, 2, 5), dtype=np.float32), np.zeros((3, 2), dtype=np.int64),
                      np.ones((3, 2), dtype=bool))
    assert result.pairs == 0
    assert float(result.loss.value) == 0.0
    assert result.accuracy is None


def test_atp_loss_needs_two_steps():
    with pytest.raises(ShapeError):
        atp_loss(Tape(), AuxNet(5, 4, 6), np.ones((1, 2, 5)), np.zeros((1, 2), dtype=np.int64),
                 np.zeros((1, 2), dtype=bool))


def _enumerated_atp_loss(aux, states, actions, dones):
    """Direct per-pair enumeration with a math.fsum accumulator."""
    w1, b1, w2, b2 = (p.value.astype(np.float64) for p in (aux.w1, aux.b1, aux.w2, aux.b2))
    n = aux.num_actions
    terms = []
    steps, lanes = actions.shape
    for t in range(steps - 1):
        for b in range(lanes):
            if dones[t, b]:
                continue
            x = np.concatenate([states[t, b], np.eye(n)[actions[t, b]]])
            logits = w2 @ np.maximum(w1 @ x + b1, 0) + b2
            top = logits.max()
            log_z = top + math.log(math.fsum(math.exp(v - top) for v in logits))
            terms.append(log_z - logits[actions[t + 1, b]])
    return math.fsum(terms) / len(terms) if terms else 0.0, len(terms)


def test_atp_loss_matches_enumeration():
    rng = np.random.default_rng(4)
    for i in range(100):
        steps, lanes = int(rng.integers(2, 9)), int(rng.integers(1, 5))
        n = 4 if i % 2 else 81
        aux = AuxNet(6, n, 8, seed=i, precision="float64")
        states = rng.standard_normal((steps, lanes, 6))
        actions = rng.integers(0, n, (steps, lanes))
        dones = rng.random((steps, lanes)) < 0.3
        result = atp_loss(Tape(), aux, states, actions, dones)
        expected, pairs = _enumerated_atp_loss(aux, states, actions, dones)
        assert result.pairs == pairs == (steps - 1) * lanes - int(dones[:-1].sum())
        assert abs(float(result.loss.value) - expected) <= 1e-10


def test_atp_accuracy_is_lane_permutation_invariant():
    rng = np.random.default_rng(5)
    aux = AuxNet(5, 4, 6, precision="float64")
    states = rng.standard_normal((6, 4, 5))
    actions = rng.integers(0, 4, (6, 4))
    dones = rng.random((6, 4)) < 0.2
    perm = np.array([2, 0, 3, 1])
    a = atp_loss(Tape(), aux, states, actions, dones)
    b = atp_loss(Tape(), aux, states[:, perm], actions[:, perm], dones[:, perm])
    assert (a.pairs, a.correct) == (b.pairs, b.correct)
    assert float(a.loss.value) == pytest.approx(float(b.loss.value), abs=1e-12)


# --- TEST GAE ---

def _buffer(rewards, values, dones, bootstrap):
    steps, lanes = rewards.shape
    buf = RolloutBuffer(steps, lanes, (1, 1, 1), (2, 1, 1), 1, np.float64)
    buf.rewards[...] = rewards
    buf.values[...] = values
    buf.dones[...] = dones
    buf.bootstrap_value[...] = bootstrap
    return buf


def test_gae_with_zero_gamma_is_one_step_advantage():
    rng = np.random.default_rng(6)
    r, v = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    adv, ret = compute_gae(_buffer(r, v, np.zeros((5, 2), bool), np.zeros(2)), 0.0, 0.95, normalize=False)
    np.testing.assert_allclose(adv, r - v, atol=1e-15)
    np.testing.assert_allclose(ret, r, atol=1e-15)


def test_gae_of_zero_rewards_and_values_is_zero():
    z = np.zeros((4, 3))
    adv, _ = compute_gae(_buffer(z, z, np.zeros((4, 3), bool), np.zeros(3)), 0.99, 0.95)
    assert not adv.any()


def test_gae_matches_recursive_oracle():
    rng = np.random.default_rng(7)
    gamma, lam = 0.99, 0.95
    r, v = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
    d = rng.random((8, 3)) < 0.2
    boot = rng.normal(size=3)
    adv, ret = compute_gae(_buffer(r, v, d, boot), gamma, lam, normalize=False)
    for b in range(3):
        for t in range(8):
            total, discount = 0.0, 1.0
            for k in range(t, 8):
                nxt = boot[b] if k == 7 else v[k + 1, b]
                delta = r[k, b] + gamma * nxt * (1 - d[k, b]) - v[k, b]
                total += discount * delta
                if d[k, b]:
                    break
                discount *= gamma * lam
            assert abs(adv[t, b] - total) <= 1e-10
    np.testing.assert_allclose(ret, adv + v)


def test_gae_normalization():
    rng = np.random.default_rng(8)
    adv, _ = compute_gae(_buffer(rng.normal(size=(6, 4)), rng.normal(size=(6, 4)), np.zeros((6, 4), bool),
                                 np.zeros(4)), 0.99, 0.95)
    assert adv.mean() == pytest.approx(0.0, abs=1e-12)
    assert adv.std() == pytest.approx(1.0, abs=1e-6)


# --- TEST PPO ---

def test_entropy_is_bounded(model):
    buf = filled_buffer(model, np.random.default_rng(9))
    adv, ret = compute_gae(buf, PPO.gamma, PPO.gae_lambda)
    _, parts = ppo_loss(Tape(), model, buf, np.arange(3), adv, ret, PPO)
    assert 0.0 <= parts["entropy"] <= math.log(4) + 1e-12


def test_zero_aux_weight_leaves_ppo_loss_untouched(model):
    """With aux_weight 0 the total is exactly L_PPO, yet ATP stats are still reported."""
    buf = filled_buffer(model, np.random.default_rng(10))
    adv, ret = compute_gae(buf, PPO.gamma, PPO.gae_lambda)
    total, parts = ppo_loss(Tape(), model, buf, np.arange(3), adv, ret, replace(PPO, aux_weight=0.0))
    assert parts["total_loss"] == parts["ppo_loss"]
    assert parts["aux_loss"] is not None
    assert parts["atp_pairs"] == buf.atp_pair_count()


def test_aux_weight_adds_weighted_atp_term(model):
    buf = filled_buffer(model, np.random.default_rng(11))
    adv, ret = compute_gae(buf, PPO.gamma, PPO.gae_lambda)
    _, parts = ppo_loss(Tape(), model, buf, np.arange(3), adv, ret, replace(PPO, aux_weight=0.5))
    assert parts["total_loss"] == pytest.approx(parts["ppo_loss"] + 0.5 * parts["aux_loss"], abs=1e-12)


def test_first_epoch_ratio_is_one(model):
    """Fresh log-probs from the same parameters: nothing is clipped and KL is ~0."""
    buf = filled_buffer(model, np.random.default_rng(12))
    adv, ret = compute_gae(buf, PPO.gamma, PPO.gae_lambda)
    _, parts = ppo_loss(Tape(), model, buf, np.arange(3), adv, ret, PPO)
    assert parts["clip_fraction"] == 0.0
    assert abs(parts["approx_kl"]) <= 1e-10


def test_ppo_update_changes_parameters(model):
    buf = filled_buffer(model, np.random.default_rng(13))
    before = model.state_dict()
    opt = Adam(model.parameters(), lr=PPO.lr, eps=PPO.adam_eps, max_grad_norm=PPO.max_grad_norm)
    stats = ppo_update(model, opt, buf, PPO, np.random.default_rng(0))
    assert opt.t == PPO.ppo_epochs * PPO.minibatches
    assert math.isfinite(stats.total_loss)
    assert stats.atp_pairs == PPO.ppo_epochs * buf.atp_pair_count()
    assert any(not np.array_equal(before[k], v) for k, v in model.state_dict().items())
    assert all(not p.grad.any() for p in model.parameters().values())


def test_atp_pairs_count_what_the_accuracy_was_scored_on(model):
    """Minibatches split the lanes, so each epoch scores every in-episode pair once."""
    buf = filled_buffer(model, np.random.default_rng(21), done_rate=0.3)
    opt = Adam(model.parameters(), lr=PPO.lr)
    cfg = replace(PPO, ppo_epochs=3)
    stats = ppo_update(model, opt, buf, cfg, np.random.default_rng(4))
    assert stats.atp_pairs == 3 * buf.atp_pair_count()
    assert stats.atp_accuracy is not None
    correct = stats.atp_accuracy * stats.atp_pairs
    assert correct == pytest.approx(round(correct))


def test_atp_pairs_are_zero_without_an_atp_head():
    model = ActorCritic(ENC, replace(PPO, aux_weight=0.0, atp_enabled=False), DEPTH, AUDIO, seed=1,
                        precision="float64")
    buf = filled_buffer(model, np.random.default_rng(22))
    stats = ppo_update(model, Adam(model.parameters()), buf, replace(PPO, aux_weight=0.0, atp_enabled=False),
                       np.random.default_rng(0))
    assert stats.atp_pairs == 0 and stats.atp_accuracy is None


def test_ppo_update_needs_full_buffer(model):
    buf = RolloutBuffer(4, 3, (1,) + DEPTH, (2,) + AUDIO, 5, np.float64)
    with pytest.raises(ShapeError, match="full"):
        ppo_update(model, Adam(model.parameters()), buf, PPO, np.random.default_rng(0))


def test_non_finite_loss_raises_diverged(model):
    buf = filled_buffer(model, np.random.default_rng(14))
    buf.rewards[0, 0] = np.nan
    with pytest.raises(TrainingDivergedError) as exc:
        ppo_update(model, Adam(model.parameters()), buf, PPO, np.random.default_rng(0))
    assert exc.value.code == "diverged"
    assert "total_loss" in exc.value.diagnostics


def test_buffer_pair_count_and_overflow():
    buf = RolloutBuffer(3, 2, (1, 1, 1), (2, 1, 1), 1)
    buf.dones[0, 1] = True
    assert buf.atp_pair_count() == 3
    for _ in range(3):
        buf.insert(0, 0, False, 0, 0, 0, 0, 0, False)
    assert buf.full
    with pytest.raises(ShapeError):
        buf.insert(0, 0, False, 0, 0, 0, 0, 0, False)


def test_ppo_config_validation():
    with pytest.raises(ConfigError, match="num_actions"):
        PPOConfig(num_actions=82).validate()
    PPOConfig(num_actions=81).validate()
    with pytest.raises(ConfigError):
        PPOConfig(aux_weight=-0.1).validate()
    with pytest.raises(ConfigError):
        PPOConfig(clip=1.5).validate()
    with pytest.raises(ConfigError, match="atp_enabled"):
        PPOConfig(aux_weight=0.1, atp_enabled=False).validate()


def test_cross_entropy_gradient_flows_into_states():
    """The ATP loss is differentiable with respect to the recurrent states."""
    aux = AuxNet(5, 4, 6, precision="float64")
    states = nx.Parameter("states", np.random.default_rng(0).standard_normal((3, 2, 5)))
    tape = Tape()
    tape.backward(atp_loss(tape, aux, tape.use(states), np.zeros((3, 2), dtype=np.int64),
                           np.zeros((3, 2), dtype=bool)).loss)
    assert states.grad[:2].any()
    assert not states.grad[2].any()
