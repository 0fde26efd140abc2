"""The tick loop: sense, decide, act for every agent.

Each tick runs fixed phases against the previous tick's snapshot: rebuild
the spatial buckets, perceive, decide (goal selection, speed target,
rule-based avoidance), compute forces and integrate, then detect agents
crossing exit-door cells. Everything downstream of the snapshot writes only
to per-agent slots, so the per-agent work can be split across workers
without changing a single output bit.

The engine keeps the population in numpy arrays (struct-of-arrays) and
vectorizes each phase; the per-agent functions in perception/psyche/motion
define the semantics it implements.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import motion as mo
from . import psyche as ps
from .perception import PerceptionParams
from .psyche import (
    Goal,
    GoalKind,
    Knowledge,
    NO_GOAL,
    Patience,
    PersonalSpace,
    PsychState,
    Role,
    Situation,
    Traits,
    make_traits,
)
from .worldmap import CompiledWorld

EPS = 1e-9
SPAWN_ATTEMPTS = 1000

_KIND_CODE = {GoalKind.NONE: 0, GoalKind.PAINTING: 1, GoalKind.EXIT_PORTAL: 2, GoalKind.FOLLOW_AGENT: 3}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}
_ROLE_CODE = {Role.INDEPENDENT: 0, Role.GUIDE: 1, Role.FOLLOWER: 2}


class SpawnFailure(RuntimeError):
    """Could not place the population without overlaps."""


class Termination(Enum):
    ALL_EVACUATED = "all_evacuated"
    TIMEOUT = "timeout"


@dataclass
class Agent:
    id: int
    pos: np.ndarray
    vel: np.ndarray
    heading: np.ndarray
    traits: Traits
    psych: PsychState
    evacuated_at: int = None
    room_id: int = 0


@dataclass
class ExplicitAgent:
    """Scenario-specified agent: position plus traits (heading optional)."""

    pos: tuple
    traits: Traits
    heading: tuple = None


@dataclass
class PopulationSpec:
    count: int = 0
    space_fractions: dict = field(default_factory=lambda: {PersonalSpace.AVERAGE: 1.0})
    patience_fractions: dict = field(default_factory=lambda: {Patience.PATIENT: 1.0})
    role_fractions: dict = field(default_factory=lambda: {Role.INDEPENDENT: 1.0})
    knowledge_fractions: dict = field(default_factory=lambda: {Knowledge.COMPLETE: 1.0})
    v_pref: float = ps.DEFAULT_V_PREF
    v_max: float = ps.DEFAULT_V_MAX
    explicit: list = None  # list of ExplicitAgent overrides count/fractions

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("population count must be >= 0")


@dataclass
class SimConfig:
    dt: float = 0.05
    max_ticks: int = 2000
    rng_seed: int = 1
    alarm_tick: int = None
    perception: PerceptionParams = field(default_factory=PerceptionParams)
    motion: mo.MotionParams = field(default_factory=mo.MotionParams)
    population: PopulationSpec = field(default_factory=PopulationSpec)
    workers: int = 1
    index_cell_size: float = None  # defaults to perception.sense_range

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.max_ticks <= 0:
            raise ValueError("max_ticks must be positive")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


class TrajectoryLog:
    """Columnar per-tick state records plus the run's event list."""

    def __init__(self):
        self._ticks = []
        self._ids = []
        self._pos = []
        self._vel = []
        self._situation = []
        self._room = []
        self.events = []
        self.counters = {"rule_avoid_triggers": 0}

    def append_tick(self, tick, ids, pos, vel, situation, room):
        n = len(ids)
        self._ticks.append(np.full(n, tick, dtype=np.int64))
        self._ids.append(np.asarray(ids, dtype=np.int64).copy())
        self._pos.append(np.asarray(pos, dtype=float).copy())
        self._vel.append(np.asarray(vel, dtype=float).copy())
        self._situation.append(np.asarray(situation, dtype=np.int8).copy())
        self._room.append(np.asarray(room, dtype=np.int64).copy())

    def record_arrays(self) -> dict:
        """Records concatenated into flat arrays, (tick, id) ascending."""
        if not self._ticks:
            return {
                "tick": np.zeros(0, np.int64),
                "id": np.zeros(0, np.int64),
                "pos": np.zeros((0, 2)),
                "vel": np.zeros((0, 2)),
                "situation": np.zeros(0, np.int8),
                "room": np.zeros(0, np.int64),
            }
        return {
            "tick": np.concatenate(self._ticks),
            "id": np.concatenate(self._ids),
            "pos": np.concatenate(self._pos),
            "vel": np.concatenate(self._vel),
            "situation": np.concatenate(self._situation),
            "room": np.concatenate(self._room),
        }

    @property
    def num_records(self) -> int:
        return int(sum(len(t) for t in self._ticks))

    @property
    def last_tick(self) -> int:
        return int(self._ticks[-1][0]) if self._ticks else -1

    def to_csv(self, path) -> None:
        """tick,agent_id,x,y,vx,vy,situation,room_id with 6-decimal floats."""
        rec = self.record_arrays()
        names = {0: Situation.CALM.value, 1: Situation.PANIC.value}
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("tick,agent_id,x,y,vx,vy,situation,room_id\n")
            for i in range(len(rec["tick"])):
                fh.write(
                    "%d,%d,%.6f,%.6f,%.6f,%.6f,%s,%d\n"
                    % (
                        rec["tick"][i],
                        rec["id"][i],
                        rec["pos"][i, 0],
                        rec["pos"][i, 1],
                        rec["vel"][i, 0],
                        rec["vel"][i, 1],
                        names[int(rec["situation"][i])],
                        rec["room"][i],
                    )
                )


@dataclass
class Metrics:
    evacuation_times: dict  # agent id -> seconds (evacuated agents only)
    total_evacuated: int
    mean_exit_flow: dict  # exit portal id -> agents/s over the run
    max_exit_flow: dict  # exit portal id -> peak agents/s in any 1 s window
    peak_density: float  # agents/m^2 over map-resolution cells
    rule_avoid_triggers: int

    def to_json_dict(self) -> dict:
        return {
            "evacuation_times": {str(k): v for k, v in sorted(self.evacuation_times.items())},
            "total_evacuated": self.total_evacuated,
            "mean_exit_flow": {str(k): v for k, v in sorted(self.mean_exit_flow.items())},
            "max_exit_flow": {str(k): v for k, v in sorted(self.max_exit_flow.items())},
            "peak_density": self.peak_density,
            "rule_avoid_triggers": self.rule_avoid_triggers,
        }


@dataclass
class RunResult:
    log: TrajectoryLog
    metrics: Metrics
    termination: Termination
    agents: list


class Engine:
    """Vectorized population state and the per-tick phase pipeline."""

    def __init__(self, world: CompiledWorld, agents, config: SimConfig, tick: int = 0):
        self.world = world
        self.config = config
        self.tick = tick
        self.alarm_fired = False
        self.rule_avoid_triggers = 0
        self.last_events = []

        agents = sorted(agents, key=lambda a: a.id)
        if len({a.id for a in agents}) != len(agents):
            raise ValueError("agent ids must be unique")
        self.agents = agents
        n = len(agents)
        self.n = n
        self.ids = np.array([a.id for a in agents], dtype=np.int64)
        self.pos = np.array([a.pos for a in agents], dtype=float).reshape(n, 2)
        self.vel = np.array([a.vel for a in agents], dtype=float).reshape(n, 2)
        self.heading = np.array([a.heading for a in agents], dtype=float).reshape(n, 2)
        self.alive = np.array([a.evacuated_at is None for a in agents], dtype=bool)
        self.evac_tick = np.array(
            [-1 if a.evacuated_at is None else a.evacuated_at for a in agents], dtype=np.int64
        )
        self.room = np.array([a.room_id for a in agents], dtype=np.int64)

        tr = [a.traits for a in agents]
        self.v_pref = np.array([t.v_pref for t in tr])
        self.v_max = np.array([t.v_max for t in tr])
        self.ps_radius = np.array([t.personal_space_radius for t in tr])
        self.influence = np.array([t.influence_radius for t in tr])
        self.avoid_dist = np.array([ps.avoidance_distance(t) for t in tr])
        self.turn_angle = np.array(
            [
                config.motion.delta_theta_small
                if t.personal_space_class is PersonalSpace.NARROW
                else config.motion.delta_theta_large
                for t in tr
            ]
        )
        self.role = np.array([_ROLE_CODE[t.role] for t in tr], dtype=np.int8)
        self.complete = np.array([t.knowledge is Knowledge.COMPLETE for t in tr], dtype=bool)

        self.panic = np.array([a.psych.situation is Situation.PANIC for a in agents], dtype=bool)
        self.goal_kind = np.array([_KIND_CODE[a.psych.current_goal.kind] for a in agents], dtype=np.int8)
        self.goal_pos = np.array(
            [a.psych.current_goal.position for a in agents], dtype=float
        ).reshape(n, 2)
        self.goal_target = np.array(
            [a.psych.current_goal.target_id for a in agents], dtype=np.int64
        )

        self._prepare_world()

        p = len(self.painting_ids)
        self.visited = np.zeros((n, p), dtype=bool)
        self.visit_timer = np.zeros((n, p))
        col = {int(aid): j for j, aid in enumerate(self.painting_ids)}
        for i, a in enumerate(agents):
            for aid in a.psych.visited_paintings:
                if aid in col:
                    self.visited[i, col[aid]] = True
            for aid, t in a.psych.visit_timers.items():
                if aid in col:
                    self.visit_timer[i, col[aid]] = t

    # ----- world precomputation -------------------------------------------

    def _prepare_world(self):
        world = self.world
        grid = world.grid
        w, h, s = grid.width, grid.height, grid.cell_size
        self.cell_size = s
        labels = np.array(world.labeled.labels, dtype=np.int64).reshape(h, w)
        self.labels_arr = labels
        self.blocked = labels == 0

        self.exit_portal_grid = np.full((h, w), -1, dtype=np.int64)
        for (x, y), pid in world.exit_cell_portals().items():
            self.exit_portal_grid[y, x] = pid

        paintings = world.painting_points()
        self.painting_ids = np.array([a.id for a in paintings], dtype=np.int64)
        self.painting_pos = np.array([a.position for a in paintings], dtype=float).reshape(
            len(paintings), 2
        )
        doors = world.door_points()
        self.door_ids = np.array([a.id for a in doors], dtype=np.int64)
        self.door_pos = np.array([a.position for a in doors], dtype=float).reshape(len(doors), 2)
        exits = world.exit_points()
        self.exit_ids = np.array([a.id for a in exits], dtype=np.int64)
        self.exit_pos = np.array([a.position for a in exits], dtype=float).reshape(len(exits), 2)
        self.attr_pos = np.array(
            [a.position for a in world.attractors], dtype=float
        ).reshape(len(world.attractors), 2)
        self.attr_steer = np.array(
            [world.steer_position(a.id) for a in world.attractors], dtype=float
        ).reshape(len(world.attractors), 2)

        self.room_goal = np.full(world.labeled.room_count + 1, -1, dtype=np.int64)
        for room_id in range(1, world.labeled.room_count + 1):
            target = world.exit_route_attractor(room_id)
            if target is not None:
                self.room_goal[room_id] = target.id

        params = self.config.motion
        sense = self.config.perception.sense_range
        force_reach = min(sense, float(np.max(self.ps_radius, initial=0.0)) + 3.0 * params.b_obs)
        self._force_offsets = self._make_offsets(force_reach)
        self._sense_offsets = self._make_offsets(sense)

    def _make_offsets(self, reach: float) -> np.ndarray:
        r = int(math.ceil(reach / self.cell_size)) + 1
        span = np.arange(-r, r + 1)
        ox, oy = np.meshgrid(span, span, indexing="xy")
        return np.stack([ox.ravel(), oy.ravel()], axis=1)

    # ----- per-tick pipeline ----------------------------------------------

    def trigger_alarm(self):
        """Panic every live agent; a repeat trigger is a no-op."""
        if not self.alarm_fired:
            self.last_events.append({"tick": self.tick, "kind": "alarm"})
            self.alarm_fired = True
        live = self.alive
        self.panic[live] = True
        drop = live & (self.goal_kind == _KIND_CODE[GoalKind.PAINTING])
        self.goal_kind[drop] = _KIND_CODE[GoalKind.NONE]
        self.goal_target[drop] = -1

    def _visible_pairs(self):
        """Directed visible pairs (i sees j) as index arrays.

        Returns (ai, aj, dist, dx, dy) sorted by (ai, dist, id of j) so any
        per-agent reduction over them accumulates in the same order as a
        scalar pass over a sorted Percept.
        """
        alive_idx = np.nonzero(self.alive)[0]
        none = (
            np.zeros(0, np.int64),
            np.zeros(0, np.int64),
            np.zeros(0),
            np.zeros(0),
            np.zeros(0),
        )
        if len(alive_idx) < 2:
            return none
        cell = self.config.index_cell_size or self.config.perception.sense_range
        pts = self.pos[alive_idx]
        kx = np.floor(pts[:, 0] / cell).astype(np.int64)
        ky = np.floor(pts[:, 1] / cell).astype(np.int64)
        stride = int(ky.max()) + 3
        keys = kx * stride + ky
        order = np.argsort(keys, kind="stable")
        skeys = keys[order]
        ukeys, ustarts, ucounts = np.unique(skeys, return_index=True, return_counts=True)

        blocks_i = []
        blocks_j = []
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                tkeys = ukeys + dx * stride + dy
                m = np.searchsorted(ukeys, tkeys)
                m = np.minimum(m, len(ukeys) - 1)
                valid = ukeys[m] == tkeys
                if not valid.any():
                    continue
                src = np.nonzero(valid)[0]
                dst = m[src]
                n1 = ucounts[src]
                n2 = ucounts[dst]
                c = n1 * n2
                total = int(c.sum())
                if total == 0:
                    continue
                bp = np.repeat(np.arange(len(c)), c)
                offs = np.cumsum(c) - c
                within = np.arange(total) - np.repeat(offs, c)
                i_loc = within // n2[bp]
                j_loc = within - i_loc * n2[bp]
                i_sorted = ustarts[src][bp] + i_loc
                j_sorted = ustarts[dst][bp] + j_loc
                blocks_i.append(order[i_sorted])
                blocks_j.append(order[j_sorted])
        if not blocks_i:
            return none
        li = np.concatenate(blocks_i)
        lj = np.concatenate(blocks_j)
        keep = li != lj
        li, lj = li[keep], lj[keep]
        ai = alive_idx[li]
        aj = alive_idx[lj]
        delta = self.pos[aj] - self.pos[ai]
        dist = np.sqrt(delta[:, 0] ** 2 + delta[:, 1] ** 2)
        sense = self.config.perception.sense_range
        thr = self.config.perception.fov_cos_threshold
        dot = self.heading[ai, 0] * delta[:, 0] + self.heading[ai, 1] * delta[:, 1]
        keep = (dist <= sense) & (dist >= EPS) & (dot > thr * dist)
        ai, aj, dist = ai[keep], aj[keep], dist[keep]
        delta = delta[keep]
        perm = np.lexsort((self.ids[aj], dist, ai))
        ai, aj, dist, delta = ai[perm], aj[perm], dist[perm], delta[perm]
        return ai, aj, dist, delta[:, 0], delta[:, 1]

    def _wall_context(self, rows, offsets):
        """Per (row, offset cell): blocked mask, nearest-point offsets, dist.

        rows is an index array into the population; offsets a (k, 2) array
        of cell offsets around each agent's own cell.
        """
        s = self.cell_size
        h, w = self.blocked.shape
        p = self.pos[rows]
        base = np.floor(p / s).astype(np.int64)
        cx = base[:, None, 0] + offsets[None, :, 0]
        cy = base[:, None, 1] + offsets[None, :, 1]
        inb = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
        cxc = np.clip(cx, 0, w - 1)
        cyc = np.clip(cy, 0, h - 1)
        wall = self.blocked[cyc, cxc] & inb
        lo_x = cxc * s
        lo_y = cyc * s
        nx = np.minimum(np.maximum(p[:, None, 0], lo_x), lo_x + s)
        ny = np.minimum(np.maximum(p[:, None, 1], lo_y), lo_y + s)
        dx = nx - p[:, None, 0]
        dy = ny - p[:, None, 1]
        dist = np.sqrt(dx * dx + dy * dy)
        return wall, dx, dy, dist, cxc, cyc

    def _panic_sees_wall(self) -> np.ndarray:
        """has-visible-wall flag per agent (computed for panic rows only)."""
        out = np.zeros(self.n, dtype=bool)
        rows = np.nonzero(self.alive & self.panic)[0]
        if len(rows) == 0:
            return out
        sense = self.config.perception.sense_range
        thr = self.config.perception.fov_cos_threshold
        wall, dx, dy, dist, _, _ = self._wall_context(rows, self._sense_offsets)
        dot = self.heading[rows, 0][:, None] * dx + self.heading[rows, 1][:, None] * dy
        visible = wall & (dist <= sense) & ((dist < EPS) | (dot > thr * dist))
        out[rows] = visible.any(axis=1)
        return out

    def _obstacle_forces(self, rows) -> np.ndarray:
        """Summed wall repulsion for the given rows (visible cells only)."""
        params = self.config.motion
        sense = self.config.perception.sense_range
        thr = self.config.perception.fov_cos_threshold
        wall, dx, dy, dist, cxc, cyc = self._wall_context(rows, self._force_offsets)
        ps_r = self.ps_radius[rows][:, None]
        cutoff = ps_r + 3.0 * params.b_obs
        dot = self.heading[rows, 0][:, None] * dx + self.heading[rows, 1][:, None] * dy
        seen = wall & (dist <= sense) & ((dist < EPS) | (dot > thr * dist))
        act = seen & (dist < cutoff)
        safe = np.maximum(dist, EPS)
        mag = params.a_obs * np.exp((ps_r - dist) / params.b_obs)
        fx = np.where(act, mag * (-dx) / safe, 0.0)
        fy = np.where(act, mag * (-dy) / safe, 0.0)
        # agent centers sitting exactly on a wall edge push from the cell center
        degen = act & (dist < EPS)
        if degen.any():
            p = self.pos[rows]
            ccx = (cxc + 0.5) * self.cell_size
            ccy = (cyc + 0.5) * self.cell_size
            ddx = p[:, None, 0] - ccx
            ddy = p[:, None, 1] - ccy
            dn = np.sqrt(ddx * ddx + ddy * ddy)
            ok = degen & (dn >= EPS)
            m0 = params.a_obs * np.exp(ps_r / params.b_obs)
            fx = np.where(ok, m0 * ddx / np.maximum(dn, EPS), fx)
            fy = np.where(ok, m0 * ddy / np.maximum(dn, EPS), fy)
        return np.stack([fx.sum(axis=1), fy.sum(axis=1)], axis=1)

    def _decide(self, pairs, sees_agent, sees_wall):
        """Goal selection, target speeds, and avoidance overrides."""
        n = self.n
        params = self.config.motion
        live = self.alive

        # visited-painting bookkeeping
        if len(self.painting_ids):
            d = self.pos[:, None, :] - self.painting_pos[None, :, :]
            dist = np.sqrt(d[:, :, 0] ** 2 + d[:, :, 1] ** 2)
            near = (dist <= ps.VISIT_RADIUS) & ~self.visited & live[:, None]
            self.visit_timer = np.where(near, self.visit_timer + self.config.dt, 0.0)
            self.visited |= self.visit_timer >= ps.VISIT_DWELL

        kind = self.goal_kind.copy()
        gpos = self.goal_pos.copy()
        gtarget = self.goal_target.copy()

        # panic never keeps a painting goal
        stale = live & self.panic & (kind == _KIND_CODE[GoalKind.PAINTING])
        kind[stale] = _KIND_CODE[GoalKind.NONE]
        gtarget[stale] = -1

        calm = live & ~self.panic
        if calm.any():
            rows = np.nonzero(calm)[0]
            assigned = np.zeros(len(rows), dtype=bool)
            if len(self.painting_ids):
                d = self.pos[rows][:, None, :] - self.painting_pos[None, :, :]
                dist = np.sqrt(d[:, :, 0] ** 2 + d[:, :, 1] ** 2)
                dist[self.visited[rows]] = np.inf
                best = np.argmin(dist, axis=1)
                ok = np.isfinite(dist[np.arange(len(rows)), best])
                sel = rows[ok]
                kind[sel] = _KIND_CODE[GoalKind.PAINTING]
                gpos[sel] = self.painting_pos[best[ok]]
                gtarget[sel] = self.painting_ids[best[ok]]
                assigned = ok
            if len(self.exit_ids):
                rem = rows[~assigned]
                if len(rem):
                    d = self.pos[rem][:, None, :] - self.exit_pos[None, :, :]
                    dist = np.sqrt(d[:, :, 0] ** 2 + d[:, :, 1] ** 2)
                    best = np.argmin(dist, axis=1)
                    kind[rem] = _KIND_CODE[GoalKind.EXIT_PORTAL]
                    gpos[rem] = self.attr_steer[self.exit_ids[best]]
                    gtarget[rem] = self.exit_ids[best]

        panic_route = live & self.panic & ((self.role == _ROLE_CODE[Role.GUIDE]) | self.complete)
        if panic_route.any():
            rows = np.nonzero(panic_route)[0]
            goal_attr = self.room_goal[self.room[rows]]
            ok = goal_attr >= 0
            sel = rows[ok]
            kind[sel] = _KIND_CODE[GoalKind.EXIT_PORTAL]
            gpos[sel] = self.attr_steer[goal_attr[ok]]
            gtarget[sel] = goal_attr[ok]
            # unreachable rooms retain the prior (non-painting) goal

        follow = live & self.panic & ~panic_route & (self.role == _ROLE_CODE[Role.FOLLOWER])
        fallback = live & self.panic & ~panic_route & ~follow
        if follow.any():
            ai, aj, dist, _, _ = pairs
            sub = follow[ai] & (self.role[aj] == _ROLE_CODE[Role.GUIDE])
            if sub.any():
                fi, fj = ai[sub], aj[sub]
                first_rows, first_idx = np.unique(fi, return_index=True)
                kind[first_rows] = _KIND_CODE[GoalKind.FOLLOW_AGENT]
                gpos[first_rows] = self.pos[fj[first_idx]]
                gtarget[first_rows] = self.ids[fj[first_idx]]
                got_guide = np.zeros(n, dtype=bool)
                got_guide[first_rows] = True
                fallback = fallback | (follow & ~got_guide)
            else:
                fallback = fallback | follow

        if fallback.any() and len(self.door_ids):
            rows = np.nonzero(fallback)[0]
            d = self.door_pos[None, :, :] - self.pos[rows][:, None, :]
            dist = np.sqrt(d[:, :, 0] ** 2 + d[:, :, 1] ** 2)
            dot = (
                self.heading[rows, 0][:, None] * d[:, :, 0]
                + self.heading[rows, 1][:, None] * d[:, :, 1]
            )
            sense = self.config.perception.sense_range
            thr = self.config.perception.fov_cos_threshold
            ok = (dist <= sense) & (dist >= EPS) & (dot > thr * dist)
            dist = np.where(ok, dist, np.inf)
            best = np.argmin(dist, axis=1)
            have = np.isfinite(dist[np.arange(len(rows)), best])
            sel = rows[have]
            kind[sel] = _KIND_CODE[GoalKind.EXIT_PORTAL]
            gpos[sel] = self.attr_steer[self.door_ids[best[have]]]
            gtarget[sel] = self.door_ids[best[have]]
            # nothing visible: retain the prior goal

        self.goal_kind, self.goal_pos, self.goal_target = kind, gpos, gtarget

        # target speed: desired speed, or a sprint when panicking with an
        # empty field of view
        speed = np.where(
            self.panic, np.minimum(ps.PANIC_SPEED_FACTOR * self.v_pref, self.v_max), self.v_pref
        )
        empty = ~sees_agent & ~sees_wall
        self.target_speed = np.where(self.panic & empty, self.v_max, speed)

        # rule-based avoidance overrides
        self.override = np.zeros((n, 2))
        self.has_override = np.zeros(n, dtype=bool)
        ai, aj, dist, dx, dy = pairs
        spd = np.sqrt(self.vel[:, 0] ** 2 + self.vel[:, 1] ** 2)
        cand = (spd[ai] >= mo.MIN_AVOID_SPEED) & (dist <= self.avoid_dist[ai])
        if cand.any():
            ci, cj = ai[cand], aj[cand]
            cd = dist[cand]
            h = self.avoid_dist[ci] / spd[ci]
            fut = self.pos[cj] + self.vel[cj] * h[:, None]
            a = self.pos[ci]
            seg = self.vel[ci] * h[:, None]
            seg_sq = seg[:, 0] ** 2 + seg[:, 1] ** 2
            rel = fut - a
            t = np.where(
                seg_sq < 1e-18,
                0.0,
                np.clip((rel[:, 0] * seg[:, 0] + rel[:, 1] * seg[:, 1]) / np.maximum(seg_sq, 1e-300), 0.0, 1.0),
            )
            mx = rel[:, 0] - t * seg[:, 0]
            my = rel[:, 1] - t * seg[:, 1]
            miss = np.sqrt(mx * mx + my * my)
            threat = miss < self.ps_radius[ci] + self.ps_radius[cj]
            if threat.any():
                ti, tj = ci[threat], cj[threat]
                rows, first = np.unique(ti, return_index=True)
                tj = tj[first]
                hx, hy = self.heading[rows, 0], self.heading[rows, 1]
                ox = self.pos[tj, 0] - self.pos[rows, 0]
                oy = self.pos[tj, 1] - self.pos[rows, 1]
                cross = hx * oy - hy * ox
                angle = np.where(cross > 0, -self.turn_angle[rows], self.turn_angle[rows])
                c, s_ = np.cos(angle), np.sin(angle)
                nhx = c * hx - s_ * hy
                nhy = s_ * hx + c * hy
                norm = np.sqrt(nhx * nhx + nhy * nhy)
                self.override[rows, 0] = nhx / norm
                self.override[rows, 1] = nhy / norm
                self.has_override[rows] = True
                self.rule_avoid_triggers += int(len(rows))

    def _forces(self, pairs, lo: int, hi: int) -> np.ndarray:
        """Total force for agents in [lo, hi), from the tick snapshot."""
        n = self.n
        params = self.config.motion
        sl = slice(lo, hi)
        F = np.zeros((hi - lo, 2))
        live = self.alive[sl]

        # advance + goal attraction
        kind = self.goal_kind[sl]
        has_goal = live & (kind != _KIND_CODE[GoalKind.NONE])
        off = self.goal_pos[sl] - self.pos[sl]
        d = np.sqrt(off[:, 0] ** 2 + off[:, 1] ** 2)
        safe = np.maximum(d, EPS)
        ex, ey = off[:, 0] / safe, off[:, 1] / safe
        adv = has_goal & (d >= mo.ARRIVAL_RADIUS)
        ts = self.target_speed[sl]
        F[:, 0] += np.where(adv, params.mass * (ts * ex - self.vel[sl, 0]) / params.tau, 0.0)
        F[:, 1] += np.where(adv, params.mass * (ts * ey - self.vel[sl, 1]) / params.tau, 0.0)
        pull = has_goal & (d >= mo.ARRIVAL_RADIUS) & (d <= params.r_goal)
        gmag = params.a_goal * np.exp(-d / params.b_goal)
        F[:, 0] += np.where(pull, gmag * ex, 0.0)
        F[:, 1] += np.where(pull, gmag * ey, 0.0)

        ai, aj, dist, dx, dy = pairs
        sub = (ai >= lo) & (ai < hi)
        if sub.any():
            pi, pj, pd = ai[sub], aj[sub], dist[sub]
            pdx, pdy = dx[sub], dy[sub]
            # occupant repulsion (delta points i -> j; force pushes i away)
            r_ij = self.influence[pi] + self.influence[pj]
            ps_sum = self.ps_radius[pi] + self.ps_radius[pj]
            hit = pd < r_ij
            mag = params.a_rep * np.exp((r_ij - pd) / params.b_rep)
            mag = mag + params.k_body * np.maximum(0.0, ps_sum - pd)
            mag = np.where(hit, mag, 0.0)
            fx = mag * (-pdx) / pd
            fy = mag * (-pdy) / pd
            F[:, 0] += np.bincount(pi - lo, weights=fx, minlength=hi - lo)
            F[:, 1] += np.bincount(pi - lo, weights=fy, minlength=hi - lo)

            # occupant attraction toward the moving majority
            spd_j = np.sqrt(self.vel[pj, 0] ** 2 + self.vel[pj, 1] ** 2)
            member = (pd <= params.r_2) & (spd_j > mo.MIN_FOLLOW_SPEED)
            if member.any():
                mi = pi[member] - lo
                ux = self.vel[pj[member], 0] / spd_j[member]
                uy = self.vel[pj[member], 1] / spd_j[member]
                sx = np.bincount(mi, weights=ux, minlength=hi - lo)
                sy = np.bincount(mi, weights=uy, minlength=hi - lo)
                cnt = np.bincount(mi, minlength=hi - lo)
                nearest = np.full(hi - lo, np.inf)
                np.minimum.at(nearest, mi, pd[member])
                norm = np.sqrt(sx * sx + sy * sy)
                gate = (
                    self.panic[sl]
                    & live
                    & (cnt >= params.n_min)
                    & (nearest >= params.r_1)
                    & (norm >= 1e-12)
                )
                safe_n = np.maximum(norm, 1e-12)
                F[:, 0] += np.where(gate, params.a_flw * sx / safe_n, 0.0)
                F[:, 1] += np.where(gate, params.a_flw * sy / safe_n, 0.0)

        rows = np.nonzero(live)[0] + lo
        if len(rows):
            F[rows - lo] += self._obstacle_forces(rows)
        F[~live] = 0.0
        return F

    def _integrate(self, F, lo: int, hi: int):
        """Euler step for rows [lo, hi); returns (pos, vel, heading) blocks."""
        params = self.config.motion
        dt = self.config.dt
        sl = slice(lo, hi)
        live = self.alive[sl]
        vel = self.vel[sl] + F / params.mass * dt
        speed = np.sqrt(vel[:, 0] ** 2 + vel[:, 1] ** 2)
        ov = self.has_override[sl]
        vel = np.where(ov[:, None], speed[:, None] * self.override[sl], vel)
        vmax = self.v_max[sl]
        over = speed > vmax
        scale = np.where(over, vmax / np.maximum(speed, EPS), 1.0)
        vel = vel * scale[:, None]
        speed = np.minimum(speed, vmax)
        pos = self.pos[sl] + vel * dt
        heading = np.where(
            ov[:, None],
            self.override[sl],
            np.where((speed > EPS)[:, None], vel / np.maximum(speed, EPS)[:, None], self.heading[sl]),
        )
        keep = ~live
        pos[keep] = self.pos[sl][keep]
        vel[keep] = self.vel[sl][keep]
        heading[keep] = self.heading[sl][keep]
        return pos, vel, heading

    def step_once(self):
        """Advance one tick; appends this tick's events to last_events."""
        self.last_events = []
        cfg = self.config
        n = self.n
        if not self.alive.any():
            self.tick += 1
            return

        pairs = self._visible_pairs()
        sees_agent = np.zeros(n, dtype=bool)
        if len(pairs[0]):
            sees_agent[np.unique(pairs[0])] = True
        sees_wall = self._panic_sees_wall()

        self._decide(pairs, sees_agent, sees_wall)

        # force + integrate, chunked per worker; slots are disjoint so the
        # split cannot change any output
        chunks = []
        workers = max(1, min(cfg.workers, n))
        size = (n + workers - 1) // workers
        for lo in range(0, n, size):
            chunks.append((lo, min(n, lo + size)))

        results = [None] * len(chunks)

        def work(k):
            lo, hi = chunks[k]
            F = self._forces(pairs, lo, hi)
            if not np.isfinite(F).all():
                bad = np.nonzero(~np.isfinite(F).all(axis=1))[0]
                raise mo.NonFiniteForce(
                    f"non-finite force for agent {int(self.ids[bad[0] + lo])}"
                )
            results[k] = self._integrate(F, lo, hi)

        if workers == 1 or len(chunks) == 1:
            for k in range(len(chunks)):
                work(k)
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(work, range(len(chunks))))

        new_pos = np.concatenate([r[0] for r in results])
        new_vel = np.concatenate([r[1] for r in results])
        new_heading = np.concatenate([r[2] for r in results])

        # wall-penetration guard (rare; handled per offender)
        s = self.cell_size
        h, w = self.blocked.shape
        live_rows = np.nonzero(self.alive)[0]
        cx = np.floor(new_pos[live_rows, 0] / s).astype(np.int64)
        cy = np.floor(new_pos[live_rows, 1] / s).astype(np.int64)
        oob = (
            (new_pos[live_rows, 0] < 0)
            | (new_pos[live_rows, 1] < 0)
            | (cx >= w)
            | (cy >= h)
        )
        inb = ~oob
        hitwall = np.zeros(len(live_rows), dtype=bool)
        hitwall[inb] = self.blocked[cy[inb], cx[inb]]
        for k in np.nonzero(oob | hitwall)[0]:
            i = live_rows[k]
            p, v = mo.resolve_wall_penetration(
                new_pos[i], new_vel[i], self.pos[i], self.world
            )
            new_pos[i] = p
            new_vel[i] = v

        self.pos, self.vel, self.heading = new_pos, new_vel, new_heading

        # room tracking + evacuation detection
        cx = np.floor(self.pos[live_rows, 0] / s).astype(np.int64)
        cy = np.floor(self.pos[live_rows, 1] / s).astype(np.int64)
        cx = np.clip(cx, 0, w - 1)
        cy = np.clip(cy, 0, h - 1)
        lab = self.labels_arr[cy, cx]
        upd = lab > 0
        self.room[live_rows[upd]] = lab[upd]
        portal = self.exit_portal_grid[cy, cx]
        out = portal >= 0
        for k in np.nonzero(out)[0]:
            i = live_rows[k]
            self.alive[i] = False
            self.evac_tick[i] = self.tick
            self.last_events.append(
                {
                    "tick": self.tick,
                    "kind": "evacuated",
                    "agent_id": int(self.ids[i]),
                    "portal_id": int(portal[k]),
                }
            )
        self.tick += 1

    # ----- object extraction ----------------------------------------------

    def extract_agents(self) -> list:
        out = []
        col_ids = self.painting_ids
        for i, proto in enumerate(self.agents):
            goal = Goal(
                kind=_CODE_KIND[int(self.goal_kind[i])],
                position=(float(self.goal_pos[i, 0]), float(self.goal_pos[i, 1])),
                target_id=int(self.goal_target[i]),
            )
            if goal.kind is GoalKind.NONE:
                goal = NO_GOAL
            visited = {int(col_ids[j]) for j in np.nonzero(self.visited[i])[0]}
            timers = {
                int(col_ids[j]): float(self.visit_timer[i, j])
                for j in np.nonzero(self.visit_timer[i] > 0)[0]
                if not self.visited[i, j]
            }
            psych = PsychState(
                situation=Situation.PANIC if self.panic[i] else Situation.CALM,
                current_goal=goal,
                visited_paintings=visited,
                impatience_timer=proto.psych.impatience_timer,
                visit_timers=timers,
            )
            out.append(
                Agent(
                    id=int(self.ids[i]),
                    pos=self.pos[i].copy(),
                    vel=self.vel[i].copy(),
                    heading=self.heading[i].copy(),
                    traits=proto.traits,
                    psych=psych,
                    evacuated_at=None if self.evac_tick[i] < 0 else int(self.evac_tick[i]),
                    room_id=int(self.room[i]),
                )
            )
        return out

    def log_tick(self, log: TrajectoryLog):
        rows = np.nonzero(self.alive)[0]
        log.append_tick(
            self.tick,
            self.ids[rows],
            self.pos[rows],
            self.vel[rows],
            self.panic[rows].astype(np.int8),
            self.room[rows],
        )


def step(world: CompiledWorld, agents, config: SimConfig, tick: int):
    """One tick over an agent list; returns (next agents, events)."""
    engine = Engine(world, agents, config, tick=tick)
    engine.step_once()
    return engine.extract_agents(), engine.last_events


def trigger_alarm(agents) -> list:
    """Apply the panic alarm to every live agent (idempotent)."""
    for a in agents:
        if a.evacuated_at is None:
            a.psych = ps.on_alarm(a.psych)
    return agents


def spawn_population(world: CompiledWorld, config: SimConfig) -> list:
    """Seeded placement of the configured population in free cells.

    Traits come from the per-axis fractions; positions are rejection-sampled
    so no two agents start with overlapping personal spaces. Raises
    SpawnFailure when an agent cannot be placed within the attempt budget.
    """
    rng = np.random.default_rng(config.rng_seed)
    spec = config.population
    s = world.grid.cell_size
    lab = world.labeled

    if spec.explicit is not None:
        agents = []
        for i, ea in enumerate(spec.explicit):
            heading = np.array(ea.heading if ea.heading is not None else (1.0, 0.0), dtype=float)
            norm = math.sqrt(heading[0] ** 2 + heading[1] ** 2)
            if norm < EPS:
                raise ValueError(f"agent {i}: zero heading")
            (cx, cy), label = _spawn_cell(ea.pos, lab)
            if label <= 0:
                raise SpawnFailure(f"agent {i} position {ea.pos} is not in a free cell")
            agents.append(
                Agent(
                    id=i,
                    pos=np.asarray(ea.pos, dtype=float),
                    vel=np.zeros(2),
                    heading=heading / norm,
                    traits=ea.traits,
                    psych=PsychState(),
                    room_id=label,
                )
            )
        return agents

    free = [
        (x, y)
        for y in range(lab.height)
        for x in range(lab.width)
        if lab.label(x, y) > 0
    ]
    if spec.count > 0 and not free:
        raise SpawnFailure("map has no free cells to spawn into")

    def pick(fractions, order):
        u = rng.random()
        acc = 0.0
        for key in order:
            acc += fractions.get(key, 0.0)
            if u < acc:
                return key
        return order[-1]

    agents = []
    placed = np.zeros((spec.count, 2))
    radii = np.zeros(spec.count)
    for i in range(spec.count):
        traits = make_traits(
            space_class=pick(spec.space_fractions, list(PersonalSpace)),
            patience=pick(spec.patience_fractions, list(Patience)),
            role=pick(spec.role_fractions, list(Role)),
            knowledge=pick(spec.knowledge_fractions, list(Knowledge)),
            v_pref=spec.v_pref,
            v_max=spec.v_max,
        )
        angle = rng.random() * 2.0 * math.pi
        heading = np.array([math.cos(angle), math.sin(angle)])
        pos = None
        room = 0
        for _ in range(SPAWN_ATTEMPTS):
            x, y = free[int(rng.integers(len(free)))]
            candidate = np.array([(x + rng.random()) * s, (y + rng.random()) * s])
            if i:
                d = placed[:i] - candidate
                dist = np.sqrt(d[:, 0] ** 2 + d[:, 1] ** 2)
                if (dist < radii[:i] + traits.personal_space_radius).any():
                    continue
            pos = candidate
            room = lab.label(x, y)
            break
        if pos is None:
            raise SpawnFailure(f"could not place agent {i} after {SPAWN_ATTEMPTS} attempts")
        placed[i] = pos
        radii[i] = traits.personal_space_radius
        agents.append(
            Agent(
                id=i,
                pos=pos,
                vel=np.zeros(2),
                heading=heading,
                traits=traits,
                psych=PsychState(),
                room_id=room,
            )
        )
    return agents


def _spawn_cell(pos, lab):
    from .worldmap import cell_at

    return cell_at(pos, lab)


def run(world: CompiledWorld, config: SimConfig) -> RunResult:
    """Spawn, step to completion or max_ticks, and collect log + metrics."""
    agents = spawn_population(world, config)
    engine = Engine(world, agents, config, tick=0)
    log = TrajectoryLog()
    while engine.tick < config.max_ticks and engine.alive.any():
        if config.alarm_tick is not None and engine.tick == config.alarm_tick:
            engine.trigger_alarm()
            log.events.extend(engine.last_events)
            engine.last_events = []
        engine.log_tick(log)
        engine.step_once()
        log.events.extend(engine.last_events)
    log.counters["rule_avoid_triggers"] = engine.rule_avoid_triggers
    termination = Termination.ALL_EVACUATED if not engine.alive.any() else Termination.TIMEOUT
    metrics = compute_metrics(log, world, config.dt)
    return RunResult(log=log, metrics=metrics, termination=termination, agents=engine.extract_agents())


def compute_metrics(log: TrajectoryLog, world: CompiledWorld, dt: float) -> Metrics:
    """Evacuation times, windowed exit flows, and peak local density."""
    evac_times = {}
    per_exit = {}
    for ev in log.events:
        if ev["kind"] != "evacuated":
            continue
        t = ev["tick"] * dt
        evac_times[ev["agent_id"]] = t
        per_exit.setdefault(ev["portal_id"], []).append(t)

    duration = (log.last_tick + 1) * dt if log.last_tick >= 0 else 0.0
    mean_flow = {}
    max_flow = {}
    for pid in sorted(p.id for p in world.graph.portals if p.is_exit):
        times = per_exit.get(pid, [])
        mean_flow[pid] = len(times) / duration if duration > 0 else 0.0
        if times:
            windows = np.bincount(np.floor(np.array(times)).astype(np.int64))
            max_flow[pid] = float(windows.max())
        else:
            max_flow[pid] = 0.0

    peak = 0.0
    rec = log.record_arrays()
    if len(rec["tick"]):
        s = world.grid.cell_size
        w = world.grid.width
        cx = np.floor(rec["pos"][:, 0] / s).astype(np.int64)
        cy = np.floor(rec["pos"][:, 1] / s).astype(np.int64)
        key = rec["tick"] * (w * world.grid.height) + cy * w + cx
        _, counts = np.unique(key, return_counts=True)
        peak = float(counts.max()) / (s * s)

    return Metrics(
        evacuation_times=evac_times,
        total_evacuated=len(evac_times),
        mean_exit_flow=mean_flow,
        max_exit_flow=max_flow,
        peak_density=peak,
        rule_avoid_triggers=log.counters.get("rule_avoid_triggers", 0),
    )
