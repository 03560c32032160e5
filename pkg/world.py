"""
Procedural gridworld: maps, agent kinematics, depth ray casting, reward
shaping, episode lifecycle and the BFS shortest-path oracle.

Coordinates are (x, y) with y growing southwards; occupancy is indexed
[y, x] and True marks a wall.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import EpisodeError, MapError
from metrics import EpisodeRecord

logger = logging.getLogger(__name__)

INFINITE = math.inf

Cell = Tuple[int, int]


class Heading(IntEnum):
    NORTH = 0
    EAST = 1
    SOUTH = 2
    WEST = 3

    @property
    def delta(self) -> Cell:
        return _DELTAS[self]


_DELTAS = {Heading.NORTH: (0, -1), Heading.EAST: (1, 0), Heading.SOUTH: (0, 1), Heading.WEST: (-1, 0)}


class Action(IntEnum):
    FORWARD = 0
    LEFT = 1
    RIGHT = 2
    STOP = 3


NUM_ACTIONS = len(Action)
NO_ACTION = -1


@dataclass(frozen=True)
class WorldConfig:
    width: int = 15
    height: int = 15
    room_count: int = 4
    depth_height: int = 64
    depth_width: int = 64
    max_range: float = 10.0
    max_steps: int = 200
    step_penalty: float = 0.01
    success_reward: float = 10.0


@dataclass
class GridMap:
    width: int
    height: int
    occupancy: np.ndarray
    id: str
    seed: Optional[int] = None

    def in_bounds(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height

    def is_free(self, x: int, y: int) -> bool:
        return self.in_bounds(x, y) and not self.occupancy[y, x]

    def free_cells(self) -> List[Cell]:
        ys, xs = np.nonzero(~self.occupancy)
        return [(int(x), int(y)) for y, x in zip(ys, xs)]

    def mirrored(self) -> "GridMap":
        """Left-right reflection (x -> width-1-x)."""
        return GridMap(self.width, self.height, self.occupancy[:, ::-1].copy(), f"{self.id}-mirror", self.seed)


@dataclass(frozen=True)
class AgentPose:
    x: int
    y: int
    heading: Heading

    @property
    def cell(self) -> Cell:
        return (self.x, self.y)

    def turned_left(self) -> "AgentPose":
        return AgentPose(self.x, self.y, Heading((self.heading - 1) % 4))

    def turned_right(self) -> "AgentPose":
        return AgentPose(self.x, self.y, Heading((self.heading + 1) % 4))

    def ahead(self) -> Cell:
        dx, dy = self.heading.delta
        return (self.x + dx, self.y + dy)


# --- Map generation ---

def flood_fill(grid_map: GridMap, start: Cell) -> np.ndarray:
    seen = np.zeros_like(grid_map.occupancy, dtype=bool)
    if not grid_map.is_free(*start):
        return seen
    queue = deque([start])
    seen[start[1], start[0]] = True
    while queue:
        x, y = queue.popleft()
        for heading in Heading:
            dx, dy = heading.delta
            nx, ny = x + dx, y + dy
            if grid_map.is_free(nx, ny) and not seen[ny, nx]:
                seen[ny, nx] = True
                queue.append((nx, ny))
    return seen


def is_connected(grid_map: GridMap) -> bool:
    free = grid_map.free_cells()
    if not free:
        return False
    return int(flood_fill(grid_map, free[0]).sum()) == len(free)


def generate_map(seed: int, width: int = 15, height: int = 15, room_count: int = 4,
                 map_id: Optional[str] = None) -> GridMap:
    """Rectangular rooms joined by L-shaped corridors, carved from solid rock."""
    if width < 9 or height < 9:
        raise MapError(f"map must be at least 9x9, got {width}x{height}")
    if room_count < 1:
        raise MapError(f"room_count must be >= 1, got {room_count}")
    interior = (width - 2) * (height - 2)
    if room_count * 4 > interior:
        raise MapError(f"{room_count} rooms cannot fit in a {width}x{height} map")

    rng = np.random.default_rng(seed)
    occupancy = np.ones((height, width), dtype=bool)
    max_w = max(2, min(6, (width - 2) // 2))
    max_h = max(2, min(6, (height - 2) // 2))
    centers: List[Cell] = []
    for _ in range(room_count):
        rw = int(rng.integers(2, max_w + 1))
        rh = int(rng.integers(2, max_h + 1))
        x0 = int(rng.integers(1, width - 1 - rw + 1))
        y0 = int(rng.integers(1, height - 1 - rh + 1))
        occupancy[y0:y0 + rh, x0:x0 + rw] = False
        centers.append((x0 + rw // 2, y0 + rh // 2))

    for (ax, ay), (bx, by) in zip(centers, centers[1:]):
        if rng.integers(0, 2):
            occupancy[ay, min(ax, bx):max(ax, bx) + 1] = False
            occupancy[min(ay, by):max(ay, by) + 1, bx] = False
        else:
            occupancy[min(ay, by):max(ay, by) + 1, ax] = False
            occupancy[by, min(ax, bx):max(ax, bx) + 1] = False

    grid_map = GridMap(width, height, occupancy, map_id or f"map-{seed}", seed)
    if len(grid_map.free_cells()) < 3 or not is_connected(grid_map):
        raise MapError(f"seed {seed} did not yield a connected map")
    logger.debug("generated %s with %d free cells", grid_map.id, len(grid_map.free_cells()))
    return grid_map


def map_to_text(grid_map: GridMap) -> str:
    lines = [f"id={grid_map.id}", f"seed={'' if grid_map.seed is None else grid_map.seed}",
             f"size={grid_map.width}x{grid_map.height}", ""]
    for y in range(grid_map.height):
        lines.append("".join("#" if grid_map.occupancy[y, x] else "." for x in range(grid_map.width)))
    return "\n".join(lines) + "\n"


def map_from_text(text: str) -> GridMap:
    header, _, body = text.partition("\n\n")
    meta = dict(line.split("=", 1) for line in header.splitlines() if "=" in line)
    rows = [r for r in body.splitlines() if r]
    if not rows or len({len(r) for r in rows}) != 1:
        raise MapError("map text must contain equal-length rows")
    occupancy = np.array([[c == "#" for c in row] for row in rows], dtype=bool)
    seed = int(meta["seed"]) if meta.get("seed") else None
    return GridMap(occupancy.shape[1], occupancy.shape[0], occupancy, meta.get("id", "map"), seed)


def render_ascii(grid_map: GridMap, poses: Sequence[AgentPose] = (), source: Optional[Cell] = None) -> str:
    """Map art with the visited cells marked '*', the last pose by its heading and the source 'S'."""
    canvas = [["#" if grid_map.occupancy[y, x] else "." for x in range(grid_map.width)]
              for y in range(grid_map.height)]
    for pose in poses:
        canvas[pose.y][pose.x] = "*"
    if source is not None:
        canvas[source[1]][source[0]] = "S"
    if poses:
        last = poses[-1]
        canvas[last.y][last.x] = "^>v<"[last.heading]
    return "\n".join("".join(row) for row in canvas) + "\n"


# --- Shortest paths ---

def distance_field(grid_map: GridMap, goal: Cell) -> np.ndarray:
    """BFS distance of every cell to goal; -1 marks walls and unreachable cells."""
    dist = np.full(grid_map.occupancy.shape, -1, dtype=np.int64)
    if not grid_map.is_free(*goal):
        return dist
    dist[goal[1], goal[0]] = 0
    queue = deque([goal])
    while queue:
        x, y = queue.popleft()
        for heading in Heading:
            dx, dy = heading.delta
            nx, ny = x + dx, y + dy
            if grid_map.is_free(nx, ny) and dist[ny, nx] < 0:
                dist[ny, nx] = dist[y, x] + 1
                queue.append((nx, ny))
    return dist


@dataclass(frozen=True)
class PathResult:
    distance: float
    first_step: Optional[Heading]
    first_steps: Tuple[Heading, ...] = ()

    @property
    def reachable(self) -> bool:
        return self.distance != INFINITE


def shortest_path(grid_map: GridMap, a: Cell, b: Cell, field: Optional[np.ndarray] = None) -> PathResult:
    """
    BFS distance from a to b over 4-connected free cells.

    `first_steps` holds every move that starts some shortest path, in N, E, S, W
    order; `first_step` is the first of them.
    `field` may carry a precomputed distance_field(grid_map, b).
    """
    if not grid_map.is_free(*a) or not grid_map.is_free(*b):
        raise MapError(f"shortest_path endpoints must be free cells, got {a} and {b}")
    field = distance_field(grid_map, b) if field is None else field
    d = int(field[a[1], a[0]])
    if d < 0:
        return PathResult(INFINITE, None)
    if d == 0:
        return PathResult(0, None)
    steps = []
    for heading in Heading:
        dx, dy = heading.delta
        nx, ny = a[0] + dx, a[1] + dy
        if grid_map.is_free(nx, ny) and field[ny, nx] == d - 1:
            steps.append(heading)
    if not steps:
        raise MapError("distance field is inconsistent")  # unreachable for a valid BFS field
    return PathResult(d, steps[0], tuple(steps))


def optimal_action_count(grid_map: GridMap, start: AgentPose, goal: Cell) -> float:
    """Fewest Forward/Left/Right actions to stand on goal, plus the final Stop."""
    if not grid_map.is_free(*goal):
        return INFINITE
    seen = {start}
    queue = deque([(start, 0)])
    while queue:
        pose, cost = queue.popleft()
        if pose.cell == goal:
            return cost + 1
        successors = [pose.turned_left(), pose.turned_right()]
        if grid_map.is_free(*pose.ahead()):
            successors.append(AgentPose(*pose.ahead(), pose.heading))
        for nxt in successors:
            if nxt not in seen:
                seen.add(nxt)
                queue.append((nxt, cost + 1))
    return INFINITE


# --- Depth ---

def _ray_distance(grid_map: GridMap, ox: float, oy: float, rx: float, ry: float, limit: float) -> float:
    """DDA march; distance between the origin cell centre and the first wall cell centre."""
    cx, cy = int(math.floor(ox)), int(math.floor(oy))
    step_x = 1 if rx > 0 else -1
    step_y = 1 if ry > 0 else -1
    t_dx = abs(1.0 / rx) if abs(rx) > 1e-12 else INFINITE
    t_dy = abs(1.0 / ry) if abs(ry) > 1e-12 else INFINITE
    t_x = ((cx + 1 - ox) if rx > 0 else (ox - cx)) * t_dx if t_dx != INFINITE else INFINITE
    t_y = ((cy + 1 - oy) if ry > 0 else (oy - cy)) * t_dy if t_dy != INFINITE else INFINITE
    x0, y0 = cx, cy
    while True:
        if t_x < t_y:
            cx += step_x
            t_x += t_dx
        else:
            cy += step_y
            t_y += t_dy
        dist = math.hypot(cx - x0, cy - y0)
        if not grid_map.in_bounds(cx, cy) or grid_map.occupancy[cy, cx]:
            return dist
        if dist > limit + 1:
            return dist


def raycast_depth(grid_map: GridMap, pose: AgentPose, height: int, width: int, max_range: float,
                  dtype=np.float32) -> np.ndarray:
    """
    W rays across a 90 degree field of view, column c at offset
    90*(c - W//2)/W degrees (positive to the right). Values are wall
    distance / max_range clamped to [0, 1], replicated over H rows.
    """
    if not grid_map.is_free(pose.x, pose.y):
        raise MapError(f"pose {pose} is not on a free cell")
    hx, hy = pose.heading.delta
    row = np.empty(width, dtype=np.float64)
    ox, oy = pose.x + 0.5, pose.y + 0.5
    for c in range(width):
        phi = math.radians(90.0 * (c - width // 2) / width)
        cos_p, sin_p = math.cos(phi), math.sin(phi)
        rx = hx * cos_p - hy * sin_p
        ry = hx * sin_p + hy * cos_p
        row[c] = _ray_distance(grid_map, ox, oy, rx, ry, max_range)
    row = np.clip(row / max_range, 0.0, 1.0)
    return np.broadcast_to(row, (1, height, width)).astype(dtype)


# --- Episodes ---

@dataclass
class EpisodeSpec:
    map: GridMap
    start: AgentPose
    source: Cell
    category_id: int
    max_steps: int = 200
    episode_id: str = ""

    def validate(self) -> float:
        if not self.map.is_free(*self.start.cell):
            raise EpisodeError(f"start {self.start.cell} is not free")
        if not self.map.is_free(*self.source):
            raise EpisodeError(f"source {self.source} is not free")
        d = shortest_path(self.map, self.start.cell, self.source).distance
        if d == INFINITE:
            raise EpisodeError(f"source {self.source} unreachable from {self.start.cell}")
        if d < 2:
            raise EpisodeError(f"source must start at least 2 cells away, got {d}")
        return d


def sample_episode(rng: np.random.Generator, grid_map: GridMap, category_ids: Sequence[int],
                   max_steps: int = 200, episode_id: str = "") -> EpisodeSpec:
    free = grid_map.free_cells()
    for _ in range(1000):
        sx, sy = free[int(rng.integers(len(free)))]
        field = distance_field(grid_map, (sx, sy))
        far = [c for c in free if field[c[1], c[0]] >= 2]
        if not far:
            continue
        start = far[int(rng.integers(len(far)))]
        heading = Heading(int(rng.integers(4)))
        category = int(category_ids[int(rng.integers(len(category_ids)))])
        return EpisodeSpec(grid_map, AgentPose(start[0], start[1], heading), (sx, sy), category,
                           max_steps, episode_id)
    raise EpisodeError(f"could not place an episode on {grid_map.id}")


@dataclass
class Observation:
    depth: np.ndarray
    audio: np.ndarray
    prev_action: int


@dataclass
class StepResult:
    observation: Observation
    reward: float
    done: bool
    info: Dict[str, Any] = field(default_factory=dict)


class NavigationEnv:
    """One environment lane: owns its episode state and its audio noise stream."""

    def __init__(self, world_cfg: WorldConfig, acoustic_cfg, categories: Dict[int, Any],
                 rng: np.random.Generator, dtype=np.float32):
        from acoustics import render_binaural

        self._render = render_binaural
        self.world_cfg = world_cfg
        self.acoustic_cfg = acoustic_cfg
        self.categories = categories
        self.rng = rng
        self.dtype = dtype
        self.spec: Optional[EpisodeSpec] = None
        self.done = True

    # lifecycle
    def reset(self, spec: EpisodeSpec) -> Observation:
        d0 = spec.validate()
        if spec.category_id not in self.categories:
            raise EpisodeError(f"unknown sound category {spec.category_id}")
        self.spec = spec
        self.pose = spec.start
        self.field = distance_field(spec.map, spec.source)
        self.geodesic = int(d0)
        self.initial_geodesic = int(d0)
        self.steps = 0
        self.path_length = 0
        self.actions: List[int] = []
        self.episode_return = 0.0
        self.success = False
        self.done = False
        self.prev_action = NO_ACTION
        return self.observe()

    def observe(self) -> Observation:
        spec = self.spec
        depth = raycast_depth(spec.map, self.pose, self.world_cfg.depth_height, self.world_cfg.depth_width,
                              self.world_cfg.max_range, self.dtype)
        audio = self._render(spec.map, self.pose, spec.source, self.categories[spec.category_id],
                             self.acoustic_cfg, self.rng, field=self.field).astype(self.dtype)
        return Observation(depth, audio, self.prev_action)

    def step(self, action: int) -> StepResult:
        if self.done or self.spec is None:
            raise EpisodeError("step called on a finished episode; reset first")
        action = Action(int(action))
        cfg = self.world_cfg
        previous = self.geodesic
        reward = -cfg.step_penalty
        if action == Action.STOP:
            self.done = True
            if self.pose.cell == self.spec.source:
                self.success = True
                reward = cfg.success_reward
        elif action == Action.FORWARD:
            if self.spec.map.is_free(*self.pose.ahead()):
                self.pose = AgentPose(*self.pose.ahead(), self.pose.heading)
                self.path_length += 1
        elif action == Action.LEFT:
            self.pose = self.pose.turned_left()
        else:
            self.pose = self.pose.turned_right()

        self.geodesic = int(self.field[self.pose.y, self.pose.x])
        if action != Action.STOP:
            reward = (previous - self.geodesic) - cfg.step_penalty
        self.steps += 1
        self.actions.append(int(action))
        self.prev_action = int(action)
        if self.steps >= self.spec.max_steps:
            self.done = True
        self.episode_return += reward
        obs = self.observe()
        info = {"success": self.success, "geodesic_to_goal": float(self.geodesic)}
        return StepResult(obs, float(reward), self.done, info)

    def episode_record(self) -> EpisodeRecord:
        spec = self.spec
        return EpisodeRecord(
            success=self.success,
            path_length=self.path_length,
            geodesic_optimum=self.initial_geodesic,
            action_count=len(self.actions),
            optimal_action_count=int(optimal_action_count(spec.map, spec.start, spec.source)),
            category_id=spec.category_id,
            map_id=spec.map.id,
            episode_id=spec.episode_id,
            actions=tuple(self.actions),
            episode_return=self.episode_return,
        )

    # resume support
    def state_dict(self) -> Dict[str, Any]:
        if self.spec is None:
            return {"rng": self.rng.bit_generator.state}
        spec = self.spec
        return {
            "rng": self.rng.bit_generator.state,
            "map_seed": spec.map.seed, "map_id": spec.map.id,
            "start": [spec.start.x, spec.start.y, int(spec.start.heading)],
            "source": list(spec.source), "category_id": spec.category_id,
            "max_steps": spec.max_steps, "episode_id": spec.episode_id,
            "pose": [self.pose.x, self.pose.y, int(self.pose.heading)],
            "steps": self.steps, "path_length": self.path_length, "actions": list(self.actions),
            "episode_return": self.episode_return, "success": self.success, "done": self.done,
            "prev_action": self.prev_action,
        }

    def load_state_dict(self, state: Dict[str, Any], maps: Dict[str, GridMap]) -> None:
        self.rng.bit_generator.state = state["rng"]
        if "map_id" not in state:
            return
        grid_map = maps[state["map_id"]]
        sx, sy, sh = state["start"]
        self.spec = EpisodeSpec(grid_map, AgentPose(sx, sy, Heading(sh)), tuple(state["source"]),
                                state["category_id"], state["max_steps"], state["episode_id"])
        self.field = distance_field(grid_map, self.spec.source)
        self.initial_geodesic = int(self.field[sy, sx])
        px, py, ph = state["pose"]
        self.pose = AgentPose(px, py, Heading(ph))
        self.geodesic = int(self.field[py, px])
        self.steps = state["steps"]
        self.path_length = state["path_length"]
        self.actions = list(state["actions"])
        self.episode_return = state["episode_return"]
        self.success = state["success"]
        self.done = state["done"]
        self.prev_action = state["prev_action"]


def replay(grid_map: GridMap, start: AgentPose, actions: Sequence[int]) -> List[AgentPose]:
    """Poses visited when executing `actions` from `start` (kinematics only)."""
    poses = [start]
    pose = start
    for a in actions:
        if a == Action.FORWARD and grid_map.is_free(*pose.ahead()):
            pose = AgentPose(*pose.ahead(), pose.heading)
        elif a == Action.LEFT:
            pose = pose.turned_left()
        elif a == Action.RIGHT:
            pose = pose.turned_right()
        poses.append(pose)
        if a == Action.STOP:
            break
    return poses
