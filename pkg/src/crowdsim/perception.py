"""Agent senses: a forward field-of-view over a bucketed spatial index.

Each agent perceives the agents, wall cells, and attraction points that lie
within its sense range AND in front of it. Frontness is the sign of the dot
product between the heading and the offset to the target: strictly positive
means visible (the default threshold 0 gives a 180 degree field of view,
raising it narrows the cone).

The index buckets agents on a uniform grid so range queries touch only
nearby buckets instead of the whole population.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .worldmap import RawCell

EPS_DEGENERATE = 1e-9


class DegenerateTarget(ValueError):
    """Raised when a visibility target coincides with the observer."""


@dataclass
class PerceptionParams:
    sense_range: float = 5.0
    fov_cos_threshold: float = 0.0  # 0 -> 180 deg total field of view

    def __post_init__(self):
        if self.sense_range <= 0:
            raise ValueError("sense_range must be positive")
        if not (0.0 <= self.fov_cos_threshold < 1.0):
            raise ValueError("fov_cos_threshold must be in [0, 1)")


@dataclass
class PerceivedAgent:
    id: int
    position: np.ndarray
    velocity: np.ndarray
    distance: float
    role: object
    ps_radius: float


@dataclass
class PerceivedWall:
    cell: tuple
    nearest_point: tuple
    distance: float


@dataclass
class Percept:
    """What one agent sees this tick, nearest entries first."""

    visible_agents: list = field(default_factory=list)
    visible_walls: list = field(default_factory=list)
    visible_attractors: list = field(default_factory=list)

    @property
    def is_empty(self) -> bool:
        return not self.visible_agents and not self.visible_walls


class SpatialIndex:
    """Uniform-grid bucket index over a snapshot of agent positions.

    Buckets are keyed by floor(position / cell) so a query of radius r only
    visits the buckets overlapping the query disk. Query results are exact:
    candidates from the buckets are filtered by true distance.
    """

    def __init__(self, agents, cell: float, tick: int = 0):
        if cell <= 0:
            raise ValueError("index cell size must be positive")
        self.cell = cell
        self.tick = tick
        self.agents_by_id = {a.id: a for a in agents}
        self.ids = np.array(sorted(self.agents_by_id), dtype=np.int64)
        n = len(self.ids)
        self.positions = np.zeros((n, 2))
        for i, aid in enumerate(self.ids):
            self.positions[i] = self.agents_by_id[int(aid)].pos
        self.buckets = {}
        keys = np.floor(self.positions / cell).astype(np.int64) if n else np.zeros((0, 2), np.int64)
        for i in range(n):
            self.buckets.setdefault((int(keys[i, 0]), int(keys[i, 1])), []).append(i)

    def query(self, pos, radius: float) -> list:
        """Ids of all indexed agents within ``radius`` of ``pos`` (inclusive)."""
        if len(self.ids) == 0:
            return []
        px, py = float(pos[0]), float(pos[1])
        lo_x = math.floor((px - radius) / self.cell)
        hi_x = math.floor((px + radius) / self.cell)
        lo_y = math.floor((py - radius) / self.cell)
        hi_y = math.floor((py + radius) / self.cell)
        rows = []
        for bx in range(lo_x, hi_x + 1):
            for by in range(lo_y, hi_y + 1):
                rows.extend(self.buckets.get((bx, by), ()))
        if not rows:
            return []
        idx = np.array(rows, dtype=np.int64)
        d = self.positions[idx] - (px, py)
        dist = np.sqrt(d[:, 0] ** 2 + d[:, 1] ** 2)
        hits = idx[dist <= radius]
        return sorted(int(self.ids[i]) for i in hits)


def rebuild_index(agents, index_cell_size: float, tick: int = 0) -> SpatialIndex:
    """Index a snapshot of agents (only live ones should be passed)."""
    return SpatialIndex(agents, cell=index_cell_size, tick=tick)


def in_fov(heading, self_pos, target_pos, cos_threshold: float = 0.0) -> bool:
    """True iff the target lies strictly inside the forward cone.

    The comparison is strict, so a target exactly on the cone boundary
    (perpendicular, for the default threshold) is not visible. Raises
    DegenerateTarget when the target coincides with the observer.
    """
    dx = float(target_pos[0]) - float(self_pos[0])
    dy = float(target_pos[1]) - float(self_pos[1])
    d = math.sqrt(dx * dx + dy * dy)
    if d < EPS_DEGENERATE:
        raise DegenerateTarget("target coincides with observer")
    return float(heading[0]) * dx + float(heading[1]) * dy > cos_threshold * d


def predict(position, velocity, horizon: float) -> np.ndarray:
    """Constant-velocity extrapolation: position + velocity * horizon."""
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    return np.asarray(position, dtype=float) + np.asarray(velocity, dtype=float) * horizon


def nearest_point_of_cell(pos, cell, cell_size: float) -> tuple:
    """Closest point of a cell's square to ``pos`` (clamp to the square)."""
    lo_x = cell[0] * cell_size
    lo_y = cell[1] * cell_size
    return (
        min(max(float(pos[0]), lo_x), lo_x + cell_size),
        min(max(float(pos[1]), lo_y), lo_y + cell_size),
    )


def perceive(agent, world, index: SpatialIndex, params: PerceptionParams) -> Percept:
    """Build the agent's Percept from the current index snapshot.

    All entry lists are sorted by ascending distance; ties break by agent
    id, row-major cell, or attractor id so results are fully deterministic.
    """
    pos = np.asarray(agent.pos, dtype=float)
    heading = agent.heading
    thr = params.fov_cos_threshold
    r = params.sense_range

    agents_out = []
    for other_id in index.query(pos, r):
        if other_id == agent.id:
            continue
        other = index.agents_by_id[other_id]
        dx = float(other.pos[0]) - pos[0]
        dy = float(other.pos[1]) - pos[1]
        d = math.sqrt(dx * dx + dy * dy)
        if d < EPS_DEGENERATE:
            continue  # coincident agents are not classifiable by direction
        if float(heading[0]) * dx + float(heading[1]) * dy > thr * d:
            agents_out.append(
                PerceivedAgent(
                    id=other_id,
                    position=np.asarray(other.pos, dtype=float).copy(),
                    velocity=np.asarray(other.vel, dtype=float).copy(),
                    distance=d,
                    role=other.traits.role,
                    ps_radius=other.traits.personal_space_radius,
                )
            )
    agents_out.sort(key=lambda a: (a.distance, a.id))

    walls_out = []
    grid = world.grid
    s = grid.cell_size
    x_lo = max(0, int((pos[0] - r) // s))
    x_hi = min(grid.width - 1, int((pos[0] + r) // s))
    y_lo = max(0, int((pos[1] - r) // s))
    y_hi = min(grid.height - 1, int((pos[1] + r) // s))
    for cy in range(y_lo, y_hi + 1):
        for cx in range(x_lo, x_hi + 1):
            if grid.cell(cx, cy) is not RawCell.WALL:
                continue
            nx, ny = nearest_point_of_cell(pos, (cx, cy), s)
            dx, dy = nx - pos[0], ny - pos[1]
            d = math.sqrt(dx * dx + dy * dy)
            if d > r:
                continue
            if d >= EPS_DEGENERATE and not (
                float(heading[0]) * dx + float(heading[1]) * dy > thr * d
            ):
                continue
            walls_out.append(PerceivedWall(cell=(cx, cy), nearest_point=(nx, ny), distance=d))
    walls_out.sort(key=lambda w: (w.distance, w.cell[1], w.cell[0]))

    attr_out = []
    for a in world.attractors:
        dx = a.position[0] - pos[0]
        dy = a.position[1] - pos[1]
        d = math.sqrt(dx * dx + dy * dy)
        if d > r or d < EPS_DEGENERATE:
            continue
        if float(heading[0]) * dx + float(heading[1]) * dy > thr * d:
            attr_out.append((d, a.id))
    attr_out.sort()

    return Percept(
        visible_agents=agents_out,
        visible_walls=walls_out,
        visible_attractors=[aid for _, aid in attr_out],
    )
