"""
Navigation metrics and action-transition statistics.

    SR  = (1/M) * sum S_i
    SPL = (1/M) * sum S_i * l_i / max(p_i, l_i)
    SNA = (1/M) * sum S_i * n*_i / max(n_i, n*_i)

p_i counts cells actually entered (turns add nothing), n_i counts every
executed action, so SPL measures path efficiency and SNA action economy.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from errors import MetricError


@dataclass(frozen=True)
class EpisodeRecord:
    success: bool
    path_length: int
    geodesic_optimum: int
    action_count: int
    optimal_action_count: int
    category_id: int = -1
    map_id: str = ""
    episode_id: str = ""
    actions: Tuple[int, ...] = ()
    episode_return: float = 0.0

    def to_dict(self) -> Dict:
        payload = asdict(self)
        payload["actions"] = list(self.actions)
        return payload

    @classmethod
    def from_dict(cls, payload: Dict) -> "EpisodeRecord":
        payload = dict(payload)
        payload["actions"] = tuple(payload.get("actions", ()))
        return cls(**payload)


def _require(records: Sequence[EpisodeRecord]) -> None:
    if not records:
        raise MetricError("metrics need at least one episode record")


def success_rate(records: Sequence[EpisodeRecord]) -> float:
    _require(records)
    return sum(1 for r in records if r.success) / len(records)


def spl(records: Sequence[EpisodeRecord]) -> float:
    _require(records)
    total = 0.0
    for r in records:
        if r.geodesic_optimum < 1:
            raise MetricError(f"episode {r.episode_id or '?'} has geodesic optimum {r.geodesic_optimum} < 1")
        if r.success:
            total += r.geodesic_optimum / max(r.path_length, r.geodesic_optimum)
    return total / len(records)


def sna(records: Sequence[EpisodeRecord]) -> float:
    _require(records)
    total = 0.0
    for r in records:
        if r.optimal_action_count < 1:
            raise MetricError(f"episode {r.episode_id or '?'} has optimal action count "
                              f"{r.optimal_action_count} < 1")
        if r.success:
            total += r.optimal_action_count / max(r.action_count, r.optimal_action_count)
    return total / len(records)


@dataclass(frozen=True)
class MetricSummary:
    sr: float
    spl: float
    sna: float
    episodes: int

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def summarize(records: Sequence[EpisodeRecord]) -> MetricSummary:
    return MetricSummary(success_rate(records), spl(records), sna(records), len(records))


def mean_std(values: Iterable[float]) -> Tuple[float, float]:
    values = [float(v) for v in values]
    if not values:
        return math.nan, math.nan
    return float(np.mean(values)), float(np.std(values))


# --- Transitions ---

@dataclass
class TransitionMatrix:
    counts: np.ndarray

    @property
    def n(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def probabilities(self) -> np.ndarray:
        """Row-normalised; all-zero rows stay zero."""
        rows = self.counts.sum(axis=1, keepdims=True).astype(np.float64)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape, dtype=np.float64), where=rows > 0)


def _check_actions(seq: Sequence[int], n: int) -> None:
    for a in seq:
        if not 0 <= int(a) < n:
            raise MetricError(f"invalid action id {a} for N={n}")


def transition_matrix(sequences: Iterable[Sequence[int]], n: int) -> TransitionMatrix:
    """Counts of consecutive (a, a') pairs within each episode."""
    counts = np.zeros((n, n), dtype=np.int64)
    for seq in sequences:
        _check_actions(seq, n)
        for a, b in zip(seq, seq[1:]):
            counts[int(a), int(b)] += 1
    return TransitionMatrix(counts)


def predicted_transition_matrix(pairs: Iterable[Tuple[Sequence[int], Sequence[int]]], n: int) -> TransitionMatrix:
    """Counts of (a_t, predicted a_{t+1}) for (actions, predictions) pairs of equal length."""
    counts = np.zeros((n, n), dtype=np.int64)
    for actions, predicted in pairs:
        if len(actions) != len(predicted):
            raise MetricError("actions and predictions must have equal length")
        _check_actions(actions, n)
        _check_actions(predicted, n)
        for a, p in zip(actions, predicted):
            counts[int(a), int(p)] += 1
    return TransitionMatrix(counts)


def top_transitions(matrix: TransitionMatrix, k: int = 10) -> List[Tuple[int, int, float]]:
    """The k largest row-normalised transitions as (from, to, probability)."""
    probs = matrix.probabilities()
    flat = [(int(i), int(j), float(probs[i, j])) for i in range(matrix.n) for j in range(matrix.n)
            if matrix.counts[i, j] > 0]
    flat.sort(key=lambda item: (-item[2], item[0], item[1]))
    return flat[:k]


def atp_agreement(predicted: Sequence[int], actual: Sequence[int]) -> float:
    if len(predicted) != len(actual):
        raise MetricError(f"length mismatch: {len(predicted)} predictions vs {len(actual)} actions")
    if len(predicted) == 0:
        raise MetricError("atp_agreement needs at least one position")
    hits = sum(1 for p, a in zip(predicted, actual) if int(p) == int(a))
    return hits / len(predicted)
