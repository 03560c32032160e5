import csv
import json
from dataclasses import replace

import numpy as np
import pytest

import services
from errors import CheckpointError, ConfigError, EpisodeError, ShapeError
from infrastructure.checkpoint_store import CheckpointStore
from infrastructure.run_log import RunLog
from services import (EvaluationService, ExportService, GradcheckService, TrainingService, build_model,
                      format_eval_report, load_model, read_trajectories)


# --- HELPERS ---

def with_ppo(cfg, **changes):
    return replace(cfg, ppo=replace(cfg.ppo, **changes))


def train(cfg, out_dir, updates=None):
    service = TrainingService(cfg, out_dir, progress=False)
    summary = service.run(updates)
    return service, summary


def metrics_lines(out_dir):
    return RunLog(out_dir / "metrics.jsonl").read()


# --- FIXTURES ---

@pytest.fixture
def trained(tiny_config, tmp_path):
    """A finished 3-update tiny run."""
    service, summary = train(tiny_config, tmp_path / "trained")
    return service, summary, tmp_path / "trained"


@pytest.fixture
def evaluated(trained, tiny_config, tmp_path):
    service, _, _ = trained
    out = tmp_path / "eval"
    evaluator = EvaluationService(tiny_config, service.model, out, progress=False)
    return evaluator, evaluator.evaluate("unheard"), out


# --- TEST TRAINING ---

def test_training_runs_to_budget(trained):
    service, summary, out = trained
    assert summary.updates == service.total_updates == 3
    assert summary.env_steps == 3 * 4 * 2
    assert (out / "categories.manifest").is_file()
    lines = metrics_lines(out)
    assert [l["update"] for l in lines] == [1, 2, 3]
    for key in ("policy_loss", "value_loss", "entropy", "aux_loss", "total_loss", "atp_accuracy", "grad_norm",
                "episodes", "successes", "mean_return"):
        assert key in lines[0]
    assert [p.name for p in service.store.list()] == [f"ckpt-00000{i}.manifest" for i in (1, 2, 3)]
    assert summary.checkpoint == service.store.latest()


def test_training_only_uses_train_maps_and_heard_categories(trained, tiny_config):
    _, _, out = trained
    episodes = [r for r in RunLog(out / "train_episodes.jsonl") if r["kind"] == "episode"]
    assert episodes
    assert {r["map_seed"] for r in episodes} <= set(tiny_config.split.train_maps)
    assert {r["category_id"] for r in episodes} <= set(tiny_config.split.heard_categories)


def test_lanes_start_on_distinct_maps(tiny_config, tmp_path):
    service = TrainingService(tiny_config, tmp_path, progress=False)
    service.start()
    assert len({env.spec.map.id for env in service.envs}) == len(service.envs)


def test_max_updates_stops_early(tiny_config, tmp_path):
    _, summary = train(tiny_config, tmp_path, updates=1)
    assert summary.updates == 1
    assert len(metrics_lines(tmp_path)) == 1


def _assert_byte_identical(cfg, tmp_path, updates):
    cfg = replace(cfg, train=replace(cfg.train, budget_steps=updates * 8, checkpoint_every=updates))
    train(cfg, tmp_path / "a")
    train(cfg, tmp_path / "b")
    a, b = tmp_path / "a", tmp_path / "b"
    assert len(metrics_lines(a)) == updates
    assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()
    for name in (f"ckpt-{updates:06d}.manifest", f"ckpt-{updates:06d}.bin"):
        assert (a / "checkpoints" / name).read_bytes() == (b / "checkpoints" / name).read_bytes()


def test_identical_runs_are_byte_identical(tiny_config, tmp_path):
    _assert_byte_identical(tiny_config, tmp_path, 3)


@pytest.mark.slow
def test_identical_runs_are_byte_identical_for_100_updates(tiny_config, tmp_path):
    _assert_byte_identical(tiny_config, tmp_path, 100)


def test_threaded_lanes_match_serial(tiny_config, tmp_path):
    train(tiny_config, tmp_path / "serial")
    train(replace(tiny_config, train=replace(tiny_config.train, parallel=True)), tmp_path / "threads")
    assert metrics_lines(tmp_path / "serial") == metrics_lines(tmp_path / "threads")


def test_resume_continues_bit_exactly(tiny_config, tmp_path):
    full, _ = train(tiny_config, tmp_path / "full")
    _, first = train(tiny_config, tmp_path / "part", updates=1)

    resumed = TrainingService(tiny_config, tmp_path / "resumed", progress=False)
    resumed.resume(first.checkpoint)
    assert resumed.update == 1
    resumed.run()

    for name, p in full.model.parameters().items():
        np.testing.assert_array_equal(p.value, resumed.model.parameters()[name].value)
    assert metrics_lines(tmp_path / "full")[1:] == metrics_lines(tmp_path / "resumed")
    assert resumed.optimizer.t == full.optimizer.t


def test_resume_rejects_other_architecture(trained, tiny_config, tmp_path):
    _, summary, _ = trained
    other = replace(tiny_config, encoder=replace(tiny_config.encoder, bda=False))
    with pytest.raises(CheckpointError, match="encoder.bda"):
        TrainingService(other, tmp_path / "other", progress=False).resume(summary.checkpoint)


def test_checkpoint_manifest_records_resolved_paddings(trained, tiny_config):
    _, summary, _ = trained
    _, meta = CheckpointStore().load(summary.checkpoint)
    assert meta["architecture"] == tiny_config.architecture()
    assert meta["architecture"]["encoder.visual_padding_resolved"] == "2"
    assert meta["architecture"]["encoder.audio_padding_resolved"] == "10"
    text = summary.checkpoint.read_text()
    assert '"encoder.audio_padding_resolved": "10"' in text


def test_resume_rejects_other_padding(trained, tiny_config, tmp_path):
    _, summary, _ = trained
    other = replace(tiny_config, encoder=replace(tiny_config.encoder, visual_padding=3))
    with pytest.raises(CheckpointError, match="visual_padding_resolved: 2 != 3"):
        TrainingService(other, tmp_path / "other", progress=False).resume(summary.checkpoint)


def test_rollouts_reject_waypoint_action_maps(tiny_config):
    cfg = with_ppo(tiny_config, num_actions=81)
    with pytest.raises(ConfigError, match="rollouts"):
        TrainingService(cfg, progress=False)
    with pytest.raises(ConfigError, match="rollouts"):
        EvaluationService(cfg, progress=False)


def _assert_zero_weight_matches_disabled(cfg, tmp_path, updates):
    cfg = replace(cfg, train=replace(cfg.train, budget_steps=updates * 8, checkpoint_every=updates))
    zero, _ = train(with_ppo(cfg, aux_weight=0.0), tmp_path / "zero")
    off, _ = train(with_ppo(cfg, aux_weight=0.0, atp_enabled=False), tmp_path / "off")
    for name, p in off.model.parameters().items():
        np.testing.assert_array_equal(p.value, zero.model.parameters()[name].value)
    for a, b in zip(metrics_lines(tmp_path / "zero"), metrics_lines(tmp_path / "off")):
        for key in ("policy_loss", "value_loss", "entropy", "total_loss", "grad_norm", "mean_return"):
            assert a[key] == b[key]
        assert b["aux_loss"] is None


def test_zero_aux_weight_equals_disabled_atp(tiny_config, tmp_path):
    _assert_zero_weight_matches_disabled(tiny_config, tmp_path, 3)


@pytest.mark.slow
def test_zero_aux_weight_equals_disabled_atp_for_50_updates(tiny_config, tmp_path):
    _assert_zero_weight_matches_disabled(tiny_config, tmp_path, 50)


def test_load_model_from_checkpoint(trained, tiny_config):
    service, summary, _ = trained
    model = load_model(tiny_config, summary.checkpoint)
    for name, p in service.model.parameters().items():
        np.testing.assert_array_equal(p.value, model.parameters()[name].value)


def test_load_model_reports_shape_mismatch(trained, tiny_config):
    _, summary, _ = trained
    wider = with_ppo(tiny_config, state_dim=7)
    with pytest.raises(ShapeError, match="parameter mismatch"):
        load_model(wider, summary.checkpoint)


# --- TEST EVALUATION ---

def test_evaluation_writes_logs(evaluated, tiny_config):
    _, result, out = evaluated
    assert len(result.records) == tiny_config.split.episodes_per_eval
    assert {r.category_id for r in result.records} <= set(tiny_config.split.unheard_categories)
    assert {r.map_id for r in result.records} <= {f"map-{s}" for s in tiny_config.split.test_maps}
    assert RunLog(out / "records_unheard.jsonl").count() == len(result.records)
    kinds = [r["kind"] for r in RunLog(out / "trajectories_unheard.jsonl")]
    assert kinds.count("episode") == len(result.records)
    assert result.atp_accuracy is None or 0.0 <= result.atp_accuracy <= 1.0


def test_evaluation_is_deterministic(evaluated, trained, tiny_config):
    evaluator, first, out = evaluated
    before = (out / "trajectories_unheard.jsonl").read_bytes()
    again = evaluator.evaluate("unheard")
    assert [r.to_dict() for r in again.records] == [r.to_dict() for r in first.records]
    assert (out / "trajectories_unheard.jsonl").read_bytes() == before


def test_evaluation_does_not_touch_weights(trained, tiny_config):
    service, _, _ = trained
    before = service.model.state_dict()
    EvaluationService(tiny_config, service.model, progress=False).evaluate("heard")
    for name, arr in service.model.state_dict().items():
        np.testing.assert_array_equal(arr, before[name])


def test_random_agent_needs_no_model(tiny_config, tmp_path):
    result = EvaluationService(tiny_config, None, tmp_path, progress=False).evaluate("heard", policy="random")
    assert result.policy == "random"
    assert (tmp_path / "trajectories_random_heard.jsonl").is_file()
    assert "random" in format_eval_report([result])


def test_greedy_needs_a_model(tiny_config):
    with pytest.raises(ConfigError, match="model"):
        EvaluationService(tiny_config, None, progress=False).evaluate("heard")


def test_unknown_setting(tiny_config):
    with pytest.raises(ConfigError, match="setting"):
        EvaluationService(tiny_config, None, progress=False).episodes("kitchen")


def test_heard_and_unheard_share_maps(tiny_config):
    evaluator = EvaluationService(tiny_config, None, progress=False)
    heard, unheard = evaluator.episodes("heard"), evaluator.episodes("unheard")
    assert [s.map.id for s in heard] == [s.map.id for s in unheard]


# --- TEST EXPORTS ---

def test_export_trajectories_replays_and_writes_csv(evaluated, tmp_path):
    _, result, out = evaluated
    csv_path, art_path = ExportService.trajectories(out / "trajectories_unheard.jsonl", tmp_path / "x" / "traj.csv")
    with csv_path.open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == sum(r.action_count + 1 for r in result.records)
    assert rows[0]["action"] == "-1"
    assert "## unheard-0000" in art_path.read_text()


def test_export_side_by_side_comparison(evaluated, tiny_config, tmp_path):
    _, _, out = evaluated
    EvaluationService(tiny_config, None, out, progress=False).evaluate("unheard", policy="random")
    csv_path, art_path = ExportService.trajectories(out / "trajectories_unheard.jsonl", tmp_path / "cmp.csv",
                                                    out / "trajectories_random_unheard.jsonl")
    with csv_path.open() as fh:
        policies = {row["policy"] for row in csv.DictReader(fh)}
    assert policies == {"a", "b"}
    assert "b: trajectories_random_unheard.jsonl" in art_path.read_text()


def test_export_rejects_tampered_log(evaluated, tmp_path):
    _, _, out = evaluated
    lines = (out / "trajectories_unheard.jsonl").read_text().splitlines()
    records = [json.loads(l) for l in lines]
    step = next(r for r in records if r["kind"] == "step")
    step["heading"] = (step["heading"] + 2) % 4
    bad = tmp_path / "bad.jsonl"
    bad.write_text("\n".join(json.dumps(r) for r in records) + "\n")
    with pytest.raises(EpisodeError, match="replay"):
        ExportService.trajectories(bad, tmp_path / "bad.csv")


def test_export_missing_log(tmp_path):
    with pytest.raises(EpisodeError, match="not found"):
        read_trajectories(tmp_path / "nope.jsonl")


def test_export_transition_matrix(evaluated, tmp_path):
    _, result, out = evaluated
    written = ExportService.transition_matrix(out / "trajectories_unheard.jsonl", tmp_path / "tm.csv")
    assert written[0].name == "tm.csv"
    assert {p.name for p in written} >= {"tm.csv", "tm.counts.csv", "tm.top.csv"}
    with written[0].open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["from", "forward", "left", "right", "stop"]
    for row in rows[1:]:
        total = sum(float(v) for v in row[1:])
        assert total == pytest.approx(1.0) or total == 0.0
    with written[1].open() as fh:
        counts = sum(int(v) for row in list(csv.reader(fh))[1:] for v in row[1:])
    assert counts == sum(max(r.action_count - 1, 0) for r in result.records)


def test_bda_scatter_center_bucket_lies_on_diagonal(trained, tiny_config, tmp_path):
    service, _, _ = trained
    quiet = replace(tiny_config, acoustic=replace(tiny_config.acoustic, noise_std=0.0))
    path = ExportService.bda_scatter(quiet, service.model, tmp_path / "scatter.csv", "unheard", episodes=2)
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    assert rows
    assert {r["bucket"] for r in rows} <= {"left", "center", "right"}
    for r in rows:
        if r["bucket"] == "center":
            assert float(r["mean_left"]) == float(r["mean_right"])


def test_bda_scatter_needs_bda_model(tiny_config, tmp_path):
    concat_cfg = replace(tiny_config, encoder=replace(tiny_config.encoder, bda=False))
    with pytest.raises(ConfigError, match="bda"):
        ExportService.bda_scatter(concat_cfg, build_model(concat_cfg), tmp_path / "s.csv")


# --- TEST GRADCHECK ---

def test_gradcheck_primitives_pass():
    report = GradcheckService(instances=2).run(["conv2d", "linear", "gru_cell", "elementwise", "cross_entropy",
                                                 "bda_block", "atp_loss"], progress=False)
    assert report.passed, report.to_text()
    assert "ok" in report.to_text()


def test_gradcheck_flags_failures():
    report = services.GradcheckReport({"conv2d": 1e-7, "bda_block": 3e-3}, 5, 1e-4)
    assert not report.passed
    assert report.failures == ["bda_block"]
    assert "FAIL" in report.to_text()


def test_gradcheck_unknown_component():
    with pytest.raises(ConfigError, match="unknown"):
        GradcheckService().run(["softplus"], progress=False)


def test_gradcheck_waypoint_action_map():
    report = GradcheckService(instances=1, num_actions=81).run(["policy_forward", "atp_loss", "total_loss"],
                                                               progress=False)
    assert report.passed, report.to_text()


@pytest.mark.slow
def test_gradcheck_full_stack():
    """Every component, five instances each, under 1e-4."""
    report = GradcheckService(instances=5).run(progress=False)
    assert report.passed, report.to_text()
