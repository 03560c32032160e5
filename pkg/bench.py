"""
Experiment orchestration: Heard/Unheard splits, the four-arm ablation, the
aux-weight sweep and aggregation over seeds.

Each seed trains and evaluates in its own directory and appends one line to
its own result file; tables are assembled from those files only.

    <out>/<arm>/manifest.env           run-defining key=value file
    <out>/<arm>/categories.manifest    sound categories used
    <out>/<arm>/seed-<s>/result.jsonl  append-only, one line per finished run
    <out>/<arm>/report.txt|json        aggregated table
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from dotenv import dotenv_values

from acoustics import save_category_manifest
from config import CODE_VERSION, RunConfig, SplitSpec
from errors import ConfigError, TrainingDivergedError
from infrastructure.run_log import RunLog
from metrics import MetricSummary, mean_std
from services import EvaluationService, TrainingService, build_categories
from world import NUM_ACTIONS

logger = logging.getLogger(__name__)

DEFAULT_AUX_WEIGHT = 0.1
LAMBDA_SWEEP = (0.0, 0.001, 0.01, 0.1)
METRICS = ("sr", "spl", "sna")

__all__ = ["AcceptanceReport", "AblationArm", "ARM_ORDER", "LAMBDA_SWEEP", "ResultRow", "ResultTable", "SeedResult",
           "SplitSpec", "apply_arm", "audit_training_log", "check_ablation", "check_sweep", "run_ablation",
           "run_experiment", "run_lambda_sweep"]


class AblationArm(str, Enum):
    FULL = "full"
    NO_BDA = "no_bda"
    NO_ATP = "no_atp"
    NONE = "none"

    @property
    def bda(self) -> bool:
        return self in (AblationArm.FULL, AblationArm.NO_ATP)

    @property
    def atp(self) -> bool:
        return self in (AblationArm.FULL, AblationArm.NO_BDA)


# Table order: baseline first, full model last
ARM_ORDER = (AblationArm.NONE, AblationArm.NO_ATP, AblationArm.NO_BDA, AblationArm.FULL)


def apply_arm(cfg: RunConfig, arm: Union[str, AblationArm], aux_weight: float = DEFAULT_AUX_WEIGHT) -> RunConfig:
    """Flip exactly two switches: encoder.bda and ppo.aux_weight."""
    try:
        arm = AblationArm(arm)
    except ValueError as exc:
        raise ConfigError(f"unknown ablation arm '{arm}', expected one of {[a.value for a in AblationArm]}") from exc
    return replace(cfg, encoder=replace(cfg.encoder, bda=arm.bda),
                   ppo=replace(cfg.ppo, aux_weight=aux_weight if arm.atp else 0.0))


# --- Per-seed results ---

@dataclass
class SeedResult:
    label: str
    seed: int
    updates: int
    heard: Optional[MetricSummary] = None
    unheard: Optional[MetricSummary] = None
    atp_accuracy: Optional[float] = None
    diverged: Optional[Dict] = None

    def to_dict(self) -> Dict:
        payload = asdict(self)
        payload["heard"] = self.heard.to_dict() if self.heard else None
        payload["unheard"] = self.unheard.to_dict() if self.unheard else None
        return payload

    @classmethod
    def from_dict(cls, payload: Dict) -> "SeedResult":
        payload = dict(payload)
        for key in ("heard", "unheard"):
            if payload.get(key) is not None:
                payload[key] = MetricSummary(**payload[key])
        return cls(**payload)


def run_seed(cfg: RunConfig, label: str, out_dir: Union[str, Path]) -> SeedResult:
    """Train to budget, evaluate Heard and Unheard, append the result line. Runs in a worker process."""
    out_dir = Path(out_dir)
    trainer = TrainingService(cfg, out_dir, progress=False)
    try:
        summary = trainer.run()
    except TrainingDivergedError as exc:
        logger.warning("%s seed %d diverged; excluded from aggregation", label, cfg.train.seed)
        result = SeedResult(label, cfg.train.seed, trainer.update, diverged=exc.to_dict())
    else:
        evaluator = EvaluationService(cfg, trainer.model, out_dir / "eval", progress=False)
        heard = evaluator.evaluate("heard")
        unheard = evaluator.evaluate("unheard")
        accuracies = [r.atp_accuracy for r in (heard, unheard) if r.atp_accuracy is not None]
        result = SeedResult(label, cfg.train.seed, summary.updates, heard.summary, unheard.summary,
                            sum(accuracies) / len(accuracies) if accuracies else None)
    RunLog(out_dir / "result.jsonl").append(result.to_dict())
    return result


# --- Aggregation ---

@dataclass
class ResultRow:
    label: str
    seeds: List[int]
    heard: Dict[str, Tuple[float, float]]
    unheard: Dict[str, Tuple[float, float]]
    atp_accuracy: Tuple[float, float]
    flagged: List[int] = field(default_factory=list)


def aggregate(label: str, results: Sequence[SeedResult]) -> ResultRow:
    ok = [r for r in results if r.diverged is None]

    def setting(name: str) -> Dict[str, Tuple[float, float]]:
        return {m: mean_std(getattr(getattr(r, name), m) for r in ok) for m in METRICS}

    return ResultRow(
        label=label,
        seeds=[r.seed for r in results],
        heard=setting("heard"),
        unheard=setting("unheard"),
        atp_accuracy=mean_std(r.atp_accuracy for r in ok if r.atp_accuracy is not None),
        flagged=[r.seed for r in results if r.diverged is not None],
    )


def _cell(stat: Tuple[float, float]) -> str:
    mean, std = stat
    if mean != mean:
        return f"{'n/a':>12}"
    return f"{mean * 100:6.1f} ± {std * 100:4.1f}"


@dataclass
class ResultTable:
    title: str
    rows: List[ResultRow]
    provenance: Dict = field(default_factory=dict)

    def to_text(self) -> str:
        head = " ".join(f"{m.upper():>12}" for m in METRICS)
        lines = [self.title,
                 f"{'method':<16} | {'Heard':^38} | {'Unheard':^38} | {'ATP acc':>12} | seeds",
                 f"{'':<16} | {head} | {head} | {'':>12} |"]
        for row in self.rows:
            heard = " ".join(_cell(row.heard[m]) for m in METRICS)
            unheard = " ".join(_cell(row.unheard[m]) for m in METRICS)
            seeds = ",".join(str(s) for s in row.seeds) or "-"
            flagged = f" (diverged: {','.join(str(s) for s in row.flagged)})" if row.flagged else ""
            lines.append(f"{row.label:<16} | {heard} | {unheard} | {_cell(row.atp_accuracy)} | {seeds}{flagged}")
        lines.append("")
        lines.append("values are percent, mean ± std over seeds")
        for key in sorted(self.provenance):
            if key != "config":
                lines.append(f"{key}: {self.provenance[key]}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> Dict:
        return {"title": self.title, "rows": [asdict(r) for r in self.rows], "provenance": self.provenance}

    def merge(self, other: "ResultTable") -> "ResultTable":
        provenance = dict(self.provenance)
        provenance.setdefault("parts", []).append(other.provenance)
        return ResultTable(self.title, self.rows + other.rows, provenance)

    def write(self, out_dir: Union[str, Path], name: str = "report") -> Tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        text_path, json_path = out_dir / f"{name}.txt", out_dir / f"{name}.json"
        text_path.write_text(self.to_text(), encoding="utf-8")
        json_path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        return text_path, json_path


# --- Manifests ---

def write_manifest(path: Union[str, Path], cfg: RunConfig, seeds: Sequence[int], label: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# {CODE_VERSION}", f"bench.label={label}", f"bench.seeds={','.join(str(s) for s in seeds)}"]
    lines += [f"{k}={v}" for k, v in sorted(cfg.to_flat().items())]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_manifest(path: Union[str, Path]) -> Tuple[RunConfig, List[int], str]:
    values = dict(dotenv_values(path))
    label = values.pop("bench.label", "")
    seeds = [int(s) for s in (values.pop("bench.seeds", "") or "").split(",") if s]
    return RunConfig.from_flat(values).validate(), seeds, label


# --- Runs ---

def _run_seeds(cfg: RunConfig, label: str, seeds: Sequence[int], root: Path, parallel: bool) -> List[SeedResult]:
    if not seeds:
        raise ConfigError("an experiment needs at least one seed")
    if len(seeds) < 3:
        logger.warning("%s: only %d seed(s); at least 3 are recommended", label, len(seeds))
    write_manifest(root / "manifest.env", cfg, seeds, label)
    save_category_manifest(build_categories(cfg), root / "categories.manifest")
    jobs = [(replace(cfg, train=replace(cfg.train, seed=s), out_dir=str(root / f"seed-{s}")), label,
             root / f"seed-{s}") for s in seeds]
    if parallel:
        with ProcessPoolExecutor() as pool:
            list(pool.map(run_seed, *zip(*jobs)))
    else:
        for job in jobs:
            run_seed(*job)
    return [SeedResult.from_dict(RunLog(root / f"seed-{s}" / "result.jsonl").read()[-1]) for s in seeds]


def random_agent_row(cfg: RunConfig, out_dir: Optional[Union[str, Path]] = None) -> ResultRow:
    """Uniformly random actions on the same Heard/Unheard episodes."""
    evaluator = EvaluationService(cfg, None, out_dir, progress=False)
    heard = evaluator.evaluate("heard", policy="random")
    unheard = evaluator.evaluate("unheard", policy="random")
    return aggregate("random", [SeedResult("random", cfg.train.eval_seed, 0, heard.summary, unheard.summary)])


def _base(base: Optional[RunConfig], split: SplitSpec, budget_steps: int) -> RunConfig:
    base = base or RunConfig()
    return replace(base, split=split, train=replace(base.train, budget_steps=budget_steps))


def run_experiment(split: SplitSpec, arm: Union[str, AblationArm], seeds: Sequence[int], budget_steps: int,
                   base: Optional[RunConfig] = None, out_dir: Optional[Union[str, Path]] = None,
                   parallel: bool = False, include_random: bool = False) -> ResultTable:
    arm = AblationArm(arm)
    cfg = apply_arm(_base(base, split, budget_steps), arm).validate()
    root = Path(out_dir if out_dir is not None else cfg.out_dir) / arm.value
    results = _run_seeds(cfg, arm.value, seeds, root, parallel)
    rows = [aggregate(arm.value, results)]
    if include_random:
        rows.insert(0, random_agent_row(cfg, root / "random"))
    table = ResultTable(f"ablation arm {arm.value}", rows, {
        "code_version": CODE_VERSION, "manifest": str(root / "manifest.env"),
        "categories": str(root / "categories.manifest"), "seeds": list(seeds), "budget_steps": budget_steps,
        "config": cfg.to_flat(),
    })
    table.write(root)
    return table


def run_ablation(split: SplitSpec, seeds: Sequence[int], budget_steps: int, arms: Sequence[AblationArm] = ARM_ORDER,
                 base: Optional[RunConfig] = None, out_dir: Optional[Union[str, Path]] = None,
                 parallel: bool = False, include_random: bool = True) -> ResultTable:
    """All requested arms in table order, optionally headed by the random agent."""
    table = ResultTable("ablation (BDA / ATP)", [], {"code_version": CODE_VERSION, "seeds": list(seeds)})
    for i, arm in enumerate(arms):
        part = run_experiment(split, arm, seeds, budget_steps, base, out_dir, parallel,
                              include_random=include_random and i == 0)
        table = table.merge(part)
    table.write(Path(out_dir if out_dir is not None else (base or RunConfig()).out_dir), "ablation")
    return table


def run_lambda_sweep(split: SplitSpec, lambdas: Sequence[float] = LAMBDA_SWEEP, seeds: Sequence[int] = (1, 2, 3),
                     budget_steps: int = 500_000, base: Optional[RunConfig] = None,
                     out_dir: Optional[Union[str, Path]] = None, parallel: bool = False) -> ResultTable:
    """One row per aux weight, BDA off in every row; the 0 row is the plain baseline."""
    if any(lam < 0 for lam in lambdas):
        raise ConfigError(f"aux weights must be >= 0, got {list(lambdas)}")
    start = _base(base, split, budget_steps)
    root = Path(out_dir if out_dir is not None else start.out_dir) / "sweep"
    rows = []
    for lam in lambdas:
        cfg = replace(start, encoder=replace(start.encoder, bda=False),
                      ppo=replace(start.ppo, aux_weight=float(lam))).validate()
        label = f"lambda={lam:g}"
        rows.append(aggregate(label, _run_seeds(cfg, label, seeds, root / f"lambda-{lam:g}", parallel)))
    table = ResultTable("aux weight sweep (BDA off)", rows, {
        "code_version": CODE_VERSION, "lambdas": list(lambdas), "seeds": list(seeds),
        "budget_steps": budget_steps,
    })
    table.write(root)
    return table


# --- Audit ---

@dataclass
class AuditReport:
    episodes: int
    violations: List[str]

    @property
    def clean(self) -> bool:
        return not self.violations


def audit_training_log(path: Union[str, Path], split: SplitSpec) -> AuditReport:
    """No training episode may use a test map or an unheard category."""
    train_maps, heard = set(split.train_maps), set(split.heard_categories)
    episodes, violations = 0, []
    for rec in RunLog(path):
        if rec.get("kind") != "episode":
            continue
        episodes += 1
        if rec.get("map_seed") not in train_maps:
            violations.append(f"{rec['episode_id']}: map seed {rec.get('map_seed')} is not a training map")
        if rec.get("category_id") not in heard:
            violations.append(f"{rec['episode_id']}: category {rec.get('category_id')} is not heard")
    return AuditReport(episodes, violations)


# --- Acceptance ---

ABLATION_MIN_GAP = 0.10
ATP_CHANCE_MARGIN = 0.15


@dataclass
class AcceptanceReport:
    checks: List[str]
    violations: List[str]

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_text(self) -> str:
        lines = [f"check  {c}" for c in self.checks] + [f"FAIL   {v}" for v in self.violations]
        return "\n".join(lines) + "\n"


def _rows_by_label(table: ResultTable, labels: Sequence[str]) -> Dict[str, ResultRow]:
    rows = {r.label: r for r in table.rows}
    missing = [label for label in labels if label not in rows]
    if missing:
        raise ConfigError(f"table '{table.title}' has no rows {missing}")
    return rows


def check_ablation(table: ResultTable, num_actions: int = NUM_ACTIONS, min_gap: float = ABLATION_MIN_GAP,
                   atp_margin: float = ATP_CHANCE_MARGIN) -> AcceptanceReport:
    """
    Unheard SR: full beats none by at least `min_gap`, and no_bda and no_atp
    land between them. The full arm's ATP accuracy clears chance (1/N) by
    `atp_margin`. NaN means fail.
    """
    rows = _rows_by_label(table, [a.value for a in ARM_ORDER])
    sr = {label: row.unheard["sr"][0] for label, row in rows.items()}
    none, full = sr[AblationArm.NONE.value], sr[AblationArm.FULL.value]
    checks, violations = [], []

    checks.append(f"Unheard SR full - none = {full - none:+.3f}, need >= {min_gap:g}")
    if not full - none >= min_gap:
        violations.append(f"Unheard SR gap full - none is {full - none:+.3f}, below {min_gap:g}")
    for arm in (AblationArm.NO_BDA, AblationArm.NO_ATP):
        value = sr[arm.value]
        checks.append(f"Unheard SR {arm.value} = {value:.3f}, need within [{none:.3f}, {full:.3f}]")
        if not none <= value <= full:
            violations.append(f"Unheard SR of {arm.value} ({value:.3f}) is not between none and full")

    floor = 1.0 / num_actions + atp_margin
    accuracy = rows[AblationArm.FULL.value].atp_accuracy[0]
    checks.append(f"ATP accuracy full = {accuracy:.3f}, need >= {floor:.3f}")
    if not accuracy >= floor:
        violations.append(f"ATP accuracy of full ({accuracy:.3f}) is below chance + {atp_margin:g} ({floor:.3f})")
    return AcceptanceReport(checks, violations)


def check_sweep(table: ResultTable, low: float = 0.0, high: float = DEFAULT_AUX_WEIGHT) -> AcceptanceReport:
    """Unheard SR at aux weight `high` beats the one at `low`."""
    lo, hi = f"lambda={low:g}", f"lambda={high:g}"
    rows = _rows_by_label(table, [lo, hi])
    sr_lo, sr_hi = rows[lo].unheard["sr"][0], rows[hi].unheard["sr"][0]
    checks = [f"Unheard SR {hi} = {sr_hi:.3f} vs {lo} = {sr_lo:.3f}, need greater"]
    violations = [] if sr_hi > sr_lo else [f"Unheard SR at {hi} ({sr_hi:.3f}) does not beat {lo} ({sr_lo:.3f})"]
    return AcceptanceReport(checks, violations)
