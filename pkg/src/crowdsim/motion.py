"""Forces and kinematics.

Movement combines two layers. Social forces (advance toward the goal,
attraction to the goal point, attraction toward the moving majority,
repulsion from other occupants and from walls) sum into an explicit Euler
integrator that governs speed. A rule layer sits on top: when a predicted
collision falls inside the agent's avoidance distance the heading is
rotated away from the threat, overriding the force direction for that tick.

Repulsions use exponential decay with a linear body-contact term once
personal spaces overlap; every force is exactly zero beyond its stated
cutoff.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .perception import predict
from .psyche import PersonalSpace, Situation, avoidance_distance, desired_speed

ARRIVAL_RADIUS = 0.05  # m; inside this the goal no longer pulls
EPS_COINCIDENT = 1e-9
MIN_FOLLOW_SPEED = 0.1  # m/s; slower neighbors do not define a majority
MIN_AVOID_SPEED = 0.3  # m/s; below walking pace there is no path to defend


class NonFiniteForce(ArithmeticError):
    """A force evaluated to NaN or infinity."""


@dataclass
class MotionParams:
    tau: float = 0.5  # relaxation time, s
    a_goal: float = 2.0  # goal attraction strength, N
    b_goal: float = 2.0  # goal attraction decay length, m
    r_goal: float = 10.0  # goal attraction cutoff, m
    a_rep: float = 25.0  # occupant repulsion strength, N
    b_rep: float = 0.08  # occupant repulsion decay length, m
    k_body: float = 120.0  # body-contact stiffness, N/m
    a_obs: float = 25.0  # obstacle repulsion strength, N
    b_obs: float = 0.08  # obstacle repulsion decay length, m
    a_flw: float = 5.0  # follow-the-majority strength, N
    r_1: float = 0.6  # min spacing to the followed group, m
    r_2: float = 3.0  # majority neighborhood radius, m
    n_min: int = 3  # min neighbors that count as a majority
    mass: float = 80.0  # kg
    delta_theta_small: float = 0.26  # rad, ~15 deg (narrow personal space)
    delta_theta_large: float = 0.52  # rad, ~30 deg

    def __post_init__(self):
        if self.r_1 >= self.r_2:
            raise ValueError("need r_1 < r_2")
        if self.delta_theta_small >= self.delta_theta_large:
            raise ValueError("need delta_theta_small < delta_theta_large")
        for name in ("tau", "a_goal", "b_goal", "r_goal", "a_rep", "b_rep",
                     "k_body", "a_obs", "b_obs", "a_flw", "mass"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class ForceBreakdown:
    advance: np.ndarray
    goal_attr: np.ndarray
    occupant_attr: np.ndarray
    occupant_rep: np.ndarray
    obstacle_rep: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return (
            self.advance
            + self.goal_attr
            + self.occupant_attr
            + self.occupant_rep
            + self.obstacle_rep
        )


def _vec(p) -> np.ndarray:
    return np.asarray(p, dtype=float)


def _norm(v) -> float:
    return math.sqrt(float(v[0]) ** 2 + float(v[1]) ** 2)


def advance_force(pos, vel, goal, target_speed: float, params: MotionParams) -> np.ndarray:
    """Relaxation toward moving at target_speed straight at the goal.

    F = mass * (target_speed * e - vel) / tau with e the unit vector to the
    goal; zero once the agent is within the arrival radius.
    """
    pos, vel, goal = _vec(pos), _vec(vel), _vec(goal)
    offset = goal - pos
    d = _norm(offset)
    if d < ARRIVAL_RADIUS:
        return np.zeros(2)
    e = offset / d
    return params.mass * (target_speed * e - vel) / params.tau


def acceleration_boost(state, percept, traits) -> float:
    """Target speed for this tick: sprint at v_max only when panicking with
    a clear field of view, otherwise the situation's desired speed."""
    if state.situation is Situation.PANIC and percept.is_empty:
        return traits.v_max
    return desired_speed(traits, state)


def occupant_attractive_force(agent, percept, params: MotionParams) -> np.ndarray:
    """Pull toward the average direction of the moving majority nearby.

    Only acts in panic, when at least n_min visible neighbors within r_2
    are actually moving and the nearest of them is no closer than r_1.
    """
    if agent.psych.situation is not Situation.PANIC:
        return np.zeros(2)
    total = np.zeros(2)
    count = 0
    nearest = math.inf
    for other in percept.visible_agents:
        if other.distance > params.r_2:
            continue
        speed = _norm(other.velocity)
        if speed <= MIN_FOLLOW_SPEED:
            continue
        total = total + _vec(other.velocity) / speed
        count += 1
        nearest = min(nearest, other.distance)
    if count < params.n_min or nearest < params.r_1:
        return np.zeros(2)
    norm = _norm(total)
    if norm < 1e-12:
        return np.zeros(2)  # directions cancel out
    return params.a_flw * total / norm


def goal_attractive_force(pos, attractor_pos, params: MotionParams) -> np.ndarray:
    """Exponential pull toward the goal point, cut off beyond r_goal."""
    pos, attractor_pos = _vec(pos), _vec(attractor_pos)
    offset = attractor_pos - pos
    d = _norm(offset)
    if d < ARRIVAL_RADIUS or d > params.r_goal:
        return np.zeros(2)
    return params.a_goal * math.exp(-d / params.b_goal) * offset / d


def _coincident_direction(id_a: int, id_b: int) -> np.ndarray:
    """Deterministic pseudo-random unit vector for a coincident pair.

    Derived from the ordered id pair so reruns reproduce it; the smaller id
    gets the hashed direction, the larger the opposite, keeping the pair
    push antisymmetric.
    """
    lo, hi = (id_a, id_b) if id_a < id_b else (id_b, id_a)
    h = (lo * 2654435761 + hi * 40503 + 0x9E3779B9) % (2**32)
    angle = 2.0 * math.pi * (h / 2**32)
    direction = np.array([math.cos(angle), math.sin(angle)])
    return direction if id_a == lo else -direction


def occupant_repulsive_force(agent_i, agent_j, params: MotionParams) -> np.ndarray:
    """Repulsion on i from j once their influence rays overlap.

    Exponential psychological term plus a linear body spring when the
    personal spaces themselves overlap. Exactly zero at separations of
    r_ij = influence_i + influence_j and beyond.
    """
    inf_i = agent_i.traits.influence_radius
    inf_j = agent_j.traits.influence_radius
    ps_sum = agent_i.traits.personal_space_radius + agent_j.traits.personal_space_radius
    r_ij = inf_i + inf_j
    offset = _vec(agent_i.pos) - _vec(agent_j.pos)
    d = _norm(offset)
    if d < EPS_COINCIDENT:
        magnitude = params.a_rep * math.exp(r_ij / params.b_rep) + params.k_body * ps_sum
        return magnitude * _coincident_direction(agent_i.id, agent_j.id)
    if d >= r_ij:
        return np.zeros(2)
    magnitude = params.a_rep * math.exp((r_ij - d) / params.b_rep)
    magnitude += params.k_body * max(0.0, ps_sum - d)
    return magnitude * offset / d


def obstacle_repulsive_force(agent, wall_cells, params: MotionParams) -> np.ndarray:
    """Summed repulsion from visible wall cells.

    Per cell: distance from the agent center to the nearest point of the
    cell square; contributes A_obs * exp((ps - d)/B_obs) away from that
    point while d < ps + 3*B_obs, zero beyond.
    """
    ps = agent.traits.personal_space_radius
    cutoff = ps + 3.0 * params.b_obs
    pos = _vec(agent.pos)
    total = np.zeros(2)
    for wall in wall_cells:
        dx = pos[0] - wall.nearest_point[0]
        dy = pos[1] - wall.nearest_point[1]
        d = math.sqrt(dx * dx + dy * dy)
        if d >= cutoff:
            continue
        if d < EPS_COINCIDENT:
            # agent center on the cell boundary: push from the cell center
            cx = (wall.cell[0] + 0.5)
            cy = (wall.cell[1] + 0.5)
            dx, dy = pos[0] - cx, pos[1] - cy
            d0 = math.sqrt(dx * dx + dy * dy)
            if d0 < EPS_COINCIDENT:
                continue
            direction = np.array([dx / d0, dy / d0])
            total = total + params.a_obs * math.exp(ps / params.b_obs) * direction
            continue
        magnitude = params.a_obs * math.exp((ps - d) / params.b_obs)
        total = total + magnitude * np.array([dx / d, dy / d])
    return total


def _point_segment_distance(p, a, b) -> float:
    """Distance from point p to segment a-b."""
    ax, ay = float(a[0]), float(a[1])
    bx, by = float(b[0]), float(b[1])
    px, py = float(p[0]), float(p[1])
    ux, uy = bx - ax, by - ay
    seg_sq = ux * ux + uy * uy
    if seg_sq < 1e-18:
        dx, dy = px - ax, py - ay
        return math.sqrt(dx * dx + dy * dy)
    t = ((px - ax) * ux + (py - ay) * uy) / seg_sq
    t = min(1.0, max(0.0, t))
    dx, dy = px - (ax + t * ux), py - (ay + t * uy)
    return math.sqrt(dx * dx + dy * dy)


def rotate(v, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def rule_avoid(agent, percept, traits, params: MotionParams, dt: float):
    """Heading override that steers away from a predicted collision.

    The agent looks ahead along its own path for as long as it takes to
    cover its avoidance distance. A visible neighbor whose predicted
    position comes within the combined personal spaces of that path -- and
    whose current separation is already inside the avoidance distance --
    triggers a turn of delta_theta away from it (small turn for narrow
    personal space, large otherwise; ties on side rotate left). Returns the
    new heading unit vector, or None when there is no threat.
    """
    speed = _norm(agent.vel)
    if speed < MIN_AVOID_SPEED or not percept.visible_agents:
        return None
    trigger = avoidance_distance(traits)
    horizon = trigger / speed
    ps_i = traits.personal_space_radius
    path_end = predict(agent.pos, agent.vel, horizon)

    threat = None
    for other in percept.visible_agents:
        if other.distance > trigger:
            continue
        future = predict(other.position, other.velocity, horizon)
        miss = _point_segment_distance(future, agent.pos, path_end)
        if miss < ps_i + other.ps_radius:
            key = (other.distance, other.id)
            if threat is None or key < threat[0]:
                threat = (key, other)
    if threat is None:
        return None
    other = threat[1]
    hx, hy = float(agent.heading[0]), float(agent.heading[1])
    ox = float(other.position[0]) - float(agent.pos[0])
    oy = float(other.position[1]) - float(agent.pos[1])
    cross = hx * oy - hy * ox
    delta = (
        params.delta_theta_small
        if traits.personal_space_class is PersonalSpace.NARROW
        else params.delta_theta_large
    )
    # threat on the left (positive cross): turn right; ties turn left
    angle = -delta if cross > 0 else delta
    new_heading = rotate(agent.heading, angle)
    n = _norm(new_heading)
    return new_heading / n


def integrate(agent, force_total, heading_override, dt: float, target_speed: float, world=None):
    """One explicit Euler step; returns (pos, vel, heading).

    The velocity update comes first; a heading override then redirects the
    updated velocity without changing its magnitude. Speed is clamped to
    v_max. If the new position lands in a wall cell it is projected to the
    nearest point of a traversable cell and the velocity component along
    the push-out normal is zeroed.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    force = _vec(force_total)
    if not np.isfinite(force).all():
        raise NonFiniteForce(f"non-finite force for agent {agent.id}: {force}")
    vel = _vec(agent.vel) + force / agent.traits.mass * dt
    speed = _norm(vel)
    if heading_override is not None:
        vel = speed * _vec(heading_override)
    if speed > agent.traits.v_max:
        vel = vel * (agent.traits.v_max / speed)
        speed = agent.traits.v_max
    pos = _vec(agent.pos) + vel * dt
    heading = _vec(agent.heading)
    if heading_override is not None:
        heading = _vec(heading_override)
    elif speed > EPS_COINCIDENT:
        heading = vel / speed

    if world is not None:
        pos, vel = resolve_wall_penetration(pos, vel, _vec(agent.pos), world)
    return pos, vel, heading


def resolve_wall_penetration(pos, vel, prev_pos, world):
    """Project a position out of blocked cells and kill the normal velocity.

    Searches the surrounding cells for the nearest point inside a
    traversable cell; falls back to the previous (valid) position when no
    candidate exists nearby. Points are kept off the far cell edges so the
    half-open cell convention maps them back to the traversable cell.
    """
    grid = world.grid
    s = grid.cell_size
    edge = 1e-9 * max(1.0, s)
    x = min(max(float(pos[0]), 0.0), grid.width * s - edge)
    y = min(max(float(pos[1]), 0.0), grid.height * s - edge)
    cx, cy = int(x // s), int(y // s)
    if not world.is_blocked(cx, cy):
        if x != float(pos[0]) or y != float(pos[1]):
            pos = np.array([x, y])
        return pos, vel

    best = None
    for dy in range(-3, 4):
        for dx in range(-3, 4):
            if dx == 0 and dy == 0:
                continue
            nx, ny = cx + dx, cy + dy
            if not grid.in_bounds(nx, ny) or world.is_blocked(nx, ny):
                continue
            px = min(max(x, nx * s), (nx + 1) * s - edge)
            py = min(max(y, ny * s), (ny + 1) * s - edge)
            ddx, ddy = px - x, py - y
            d = math.sqrt(ddx * ddx + ddy * ddy)
            key = (d, ny, nx)
            if best is None or key < best[0]:
                best = (key, (px, py))
    if best is None:
        return _vec(prev_pos), np.zeros(2)
    target = np.array(best[1])
    normal = target - np.array([x, y])
    n = math.sqrt(normal[0] ** 2 + normal[1] ** 2)
    if n > EPS_COINCIDENT:
        normal = normal / n
        vel = _vec(vel) - (vel[0] * normal[0] + vel[1] * normal[1]) * normal
    return target, vel
