"""
Synthetic binaural renderer.

Sound reaches the agent along the geodesic: sin(theta) is averaged over every
first step of a BFS shortest path, taken relative to the agent's heading, so
tied routes around an obstacle cancel. Each ear gets an amplitude gain

    g = 1 / (1 + d)
    g_R = g * (1 + kappa * sin(theta)),  g_L = g * (1 - kappa * sin(theta))

and the spectrogram stores energy, g_e**2 * signature[f] * envelope[t], plus
gaussian noise clamped at zero. The signature cancels in the interaural
log-energy ratio, which is therefore identical for every category.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import CategoryError, EpisodeError
from world import AgentPose, GridMap, shortest_path

logger = logging.getLogger(__name__)

# sin(theta) per relative bearing (first step heading minus agent heading, mod 4)
_SIN_BY_RELATIVE = {0: 0.0, 1: 1.0, 2: 0.0, 3: -1.0}


@dataclass(frozen=True)
class AcousticConfig:
    freq_bins: int = 32
    time_frames: int = 16
    ild_strength: float = 0.6
    noise_std: float = 0.01

    def validate(self) -> None:
        if not 0.0 <= self.ild_strength < 1.0:
            raise CategoryError(f"ild_strength must be in [0, 1), got {self.ild_strength}")
        if self.noise_std < 0:
            raise CategoryError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.freq_bins < 4 or self.time_frames < 1:
            raise CategoryError("spectrogram needs freq_bins >= 4 and time_frames >= 1")


@dataclass
class SoundCategory:
    id: int
    signature: np.ndarray
    envelope: np.ndarray
    seed: Optional[int] = None


def attenuation(distance: float) -> float:
    return 1.0 / (1.0 + distance)


def bearing_sine(relative: int) -> float:
    """sin(theta) for a relative bearing index, 0..3 clockwise from the heading."""
    return _SIN_BY_RELATIVE[relative % 4]


def arrival_bearing(grid_map: GridMap, agent: AgentPose, source: Tuple[int, int],
                    field: Optional[np.ndarray] = None) -> Tuple[float, float]:
    """
    (sin(theta), geodesic distance) of the sound arriving at the agent.

    sin(theta) is the mean over every first step that starts a shortest path,
    so a left-right reflection of map, pose and source negates it exactly.
    """
    path = shortest_path(grid_map, agent.cell, source, field)
    if not path.reachable:
        raise EpisodeError(f"source {source} is unreachable from {agent.cell}")
    if not path.first_steps:
        return 0.0, 0.0
    total = sum(bearing_sine(int(step) - int(agent.heading)) for step in path.first_steps)
    return total / len(path.first_steps), float(path.distance)


def bearing_bucket(sine: float) -> str:
    if sine > 0:
        return "right"
    if sine < 0:
        return "left"
    return "center"


def ear_gains(distance: float, sine: float, ild_strength: float) -> Tuple[float, float]:
    g = attenuation(distance)
    return g * (1.0 - ild_strength * sine), g * (1.0 + ild_strength * sine)


def render_binaural(grid_map: GridMap, agent: AgentPose, source: Tuple[int, int], category: SoundCategory,
                    cfg: AcousticConfig, rng: Optional[np.random.Generator],
                    field: Optional[np.ndarray] = None) -> np.ndarray:
    """2 x F x T energy spectrogram; channel 0 is the left ear."""
    sine, distance = arrival_bearing(grid_map, agent, source, field)
    g_left, g_right = ear_gains(distance, sine, cfg.ild_strength)
    pattern = np.outer(category.signature, category.envelope)
    out = np.stack([g_left ** 2 * pattern, g_right ** 2 * pattern])
    if cfg.noise_std > 0:
        if rng is None:
            raise EpisodeError("render_binaural needs an rng when noise_std > 0")
        out = out + rng.normal(0.0, cfg.noise_std, size=out.shape)
        out = np.maximum(out, 0.0)
    return out


# --- Categories ---

def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def _draw_signature(rng: np.random.Generator, freq_bins: int) -> np.ndarray:
    bins = np.arange(freq_bins)
    signature = np.zeros(freq_bins)
    for _ in range(int(rng.integers(1, 4))):
        center = rng.uniform(0, freq_bins - 1)
        width = rng.uniform(0.6, max(1.0, freq_bins / 10))
        signature += rng.uniform(0.3, 1.0) * np.exp(-0.5 * ((bins - center) / width) ** 2)
    return signature / signature.max()


def _draw_envelope(rng: np.random.Generator, time_frames: int) -> np.ndarray:
    t = np.arange(time_frames, dtype=float)
    attack = rng.uniform(0.5, max(1.0, time_frames / 4))
    decay = rng.uniform(time_frames / 4, 2 * time_frames)
    envelope = (1 - np.exp(-(t + 1) / attack)) * np.exp(-t / decay)
    envelope *= 1 + 0.3 * np.sin(2 * np.pi * t * rng.uniform(0.05, 0.4) + rng.uniform(0, 2 * np.pi))
    envelope = np.clip(envelope, 0.0, None)
    return np.clip(envelope / envelope.max(), 0.0, 1.0)


def make_category_set(n: int, freq_bins: int, time_frames: int, rng: np.random.Generator,
                      max_similarity: float = 0.8, max_attempts: int = 1000,
                      seed: Optional[int] = None) -> List[SoundCategory]:
    """n categories whose signatures have pairwise cosine similarity <= max_similarity."""
    if n < 2:
        raise CategoryError(f"need at least 2 categories, got {n}")
    if freq_bins < 4:
        raise CategoryError(f"need at least 4 frequency bins, got {freq_bins}")
    categories: List[SoundCategory] = []
    attempts = 0
    while len(categories) < n:
        attempts += 1
        if attempts > max_attempts:
            raise CategoryError(f"could not draw {n} categories with cosine similarity <= {max_similarity} "
                                f"after {max_attempts} attempts")
        signature = _draw_signature(rng, freq_bins)
        if any(_cosine(signature, c.signature) > max_similarity for c in categories):
            continue
        categories.append(SoundCategory(len(categories), signature, _draw_envelope(rng, time_frames), seed))
    logger.debug("drew %d categories in %d attempts", n, attempts)
    return categories


def save_category_manifest(categories: Sequence[SoundCategory], path: Union[str, Path]) -> Path:
    path = Path(path)
    lines = ["# sound category manifest: one category per line"]
    for c in categories:
        sig = ",".join(repr(float(v)) for v in c.signature)
        env = ",".join(repr(float(v)) for v in c.envelope)
        seed = "" if c.seed is None else str(c.seed)
        lines.append(f"id={c.id} seed={seed} signature={sig} envelope={env}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_category_manifest(path: Union[str, Path]) -> List[SoundCategory]:
    categories = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        fields = dict(part.split("=", 1) for part in line.split(" "))
        categories.append(SoundCategory(
            id=int(fields["id"]),
            signature=np.array([float(v) for v in fields["signature"].split(",")]),
            envelope=np.array([float(v) for v in fields["envelope"].split(",")]),
            seed=int(fields["seed"]) if fields.get("seed") else None,
        ))
    return categories


def categories_by_id(categories: Sequence[SoundCategory]) -> Dict[int, SoundCategory]:
    return {c.id: c for c in categories}
