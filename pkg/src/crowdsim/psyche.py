"""Socio-psychological state and its mapping onto motion decisions.

Traits are categorical (personal-space class, patience, role, knowledge)
and resolve to numbers: how far ahead a collision is dealt with, how fast
the agent wants to move, and which goal it steers toward. The panic alarm
flips every agent's situation and forces goals away from paintings and
toward exits (directly for agents who know the building, via guides or
visible doors for the rest).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

from .worldmap import AttractorKind


class PersonalSpace(Enum):
    NARROW = "narrow"
    AVERAGE = "average"
    BROAD = "broad"


class Patience(Enum):
    PATIENT = "patient"
    IMPATIENT = "impatient"


class Role(Enum):
    GUIDE = "guide"
    FOLLOWER = "follower"
    INDEPENDENT = "independent"


class Knowledge(Enum):
    COMPLETE = "complete"
    PARTIAL = "partial"


class Situation(Enum):
    CALM = "calm"
    PANIC = "panic"


class GoalKind(Enum):
    PAINTING = "painting"
    EXIT_PORTAL = "exit_portal"
    FOLLOW_AGENT = "follow_agent"
    NONE = "none"


class NoGoalAvailable(RuntimeError):
    """No attractor exists, nothing is visible, and there is no prior goal."""


# Collision-avoidance trigger distance in meters by (space class, patience).
# The two measured anchors are average/impatient = 2.0 and narrow/patient =
# 1.0; the rest interpolate so the table is monotone along both axes.
AVOIDANCE_DISTANCE = {
    (PersonalSpace.NARROW, Patience.PATIENT): 1.0,
    (PersonalSpace.NARROW, Patience.IMPATIENT): 1.5,
    (PersonalSpace.AVERAGE, Patience.PATIENT): 1.5,
    (PersonalSpace.AVERAGE, Patience.IMPATIENT): 2.0,
    (PersonalSpace.BROAD, Patience.PATIENT): 2.0,
    (PersonalSpace.BROAD, Patience.IMPATIENT): 2.5,
}

PERSONAL_SPACE_RADIUS = {
    PersonalSpace.NARROW: 0.3,
    PersonalSpace.AVERAGE: 0.45,
    PersonalSpace.BROAD: 0.6,
}

INFLUENCE_MARGIN = 0.5  # influence radius = personal space + margin

DEFAULT_V_PREF = 1.34  # m/s, typical walking speed
DEFAULT_V_MAX = 3.0  # m/s
PANIC_SPEED_FACTOR = 1.15

VISIT_RADIUS = 1.0  # m within a painting point that counts as viewing it
VISIT_DWELL = 1.0  # s of continuous viewing before it counts as visited


@dataclass(frozen=True)
class Traits:
    personal_space_class: PersonalSpace = PersonalSpace.AVERAGE
    personal_space_radius: float = PERSONAL_SPACE_RADIUS[PersonalSpace.AVERAGE]
    patience: Patience = Patience.PATIENT
    role: Role = Role.INDEPENDENT
    knowledge: Knowledge = Knowledge.COMPLETE
    influence_radius: float = PERSONAL_SPACE_RADIUS[PersonalSpace.AVERAGE] + INFLUENCE_MARGIN
    v_pref: float = DEFAULT_V_PREF
    v_max: float = DEFAULT_V_MAX

    def __post_init__(self):
        if not (0 < self.personal_space_radius <= self.influence_radius):
            raise ValueError("need 0 < personal_space_radius <= influence_radius")
        if not (0 < self.v_pref <= self.v_max):
            raise ValueError("need 0 < v_pref <= v_max")


def make_traits(
    space_class: PersonalSpace = PersonalSpace.AVERAGE,
    patience: Patience = Patience.PATIENT,
    role: Role = Role.INDEPENDENT,
    knowledge: Knowledge = Knowledge.COMPLETE,
    v_pref: float = DEFAULT_V_PREF,
    v_max: float = DEFAULT_V_MAX,
) -> Traits:
    """Traits with radii resolved from the personal-space class."""
    ps = PERSONAL_SPACE_RADIUS[space_class]
    return Traits(
        personal_space_class=space_class,
        personal_space_radius=ps,
        patience=patience,
        role=role,
        knowledge=knowledge,
        influence_radius=ps + INFLUENCE_MARGIN,
        v_pref=v_pref,
        v_max=v_max,
    )


@dataclass(frozen=True)
class Goal:
    kind: GoalKind = GoalKind.NONE
    position: tuple = (0.0, 0.0)
    target_id: int = -1


NO_GOAL = Goal()


@dataclass
class PsychState:
    situation: Situation = Situation.CALM
    current_goal: Goal = NO_GOAL
    visited_paintings: set = field(default_factory=set)
    impatience_timer: float = 0.0  # reserved for goal abandonment
    visit_timers: dict = field(default_factory=dict)  # attractor id -> dwell seconds


def avoidance_distance(traits: Traits) -> float:
    """Distance at which this agent starts treating a predicted collision."""
    return AVOIDANCE_DISTANCE[(traits.personal_space_class, traits.patience)]


def desired_speed(traits: Traits, state: PsychState) -> float:
    """Calm agents cruise at their preferred speed; panic adds urgency.

    The panic value is a baseline bump capped at v_max -- the full sprint to
    v_max only happens when the field of view is clear (acceleration boost).
    """
    if state.situation is Situation.PANIC:
        return min(PANIC_SPEED_FACTOR * traits.v_pref, traits.v_max)
    return traits.v_pref


def on_alarm(state: PsychState) -> PsychState:
    """Switch to panic; painting goals are dropped so the next decide pass
    picks an exit-directed one. Idempotent."""
    goal = state.current_goal
    if goal.kind is GoalKind.PAINTING:
        goal = NO_GOAL
    return replace(state, situation=Situation.PANIC, current_goal=goal)


def _dist(p, q) -> float:
    dx = float(q[0]) - float(p[0])
    dy = float(q[1]) - float(p[1])
    return math.sqrt(dx * dx + dy * dy)


def _nearest_attractor(pos, attractors):
    """Nearest of a list of attractors by (distance, id); None if empty."""
    best = None
    for a in attractors:
        key = (_dist(pos, a.position), a.id)
        if best is None or key < best[0]:
            best = (key, a)
    return None if best is None else best[1]


def update_visits(agent, world, dt: float) -> None:
    """Accumulate dwell time near painting points and mark them visited.

    A painting counts as visited after VISIT_DWELL seconds continuously
    within VISIT_RADIUS of its point; leaving the radius resets the clock.
    """
    psych = agent.psych
    for a in world.painting_points():
        if a.id in psych.visited_paintings:
            continue
        if _dist(agent.pos, a.position) <= VISIT_RADIUS:
            t = psych.visit_timers.get(a.id, 0.0) + dt
            psych.visit_timers[a.id] = t
            if t >= VISIT_DWELL:
                psych.visited_paintings.add(a.id)
        elif a.id in psych.visit_timers:
            del psych.visit_timers[a.id]


def select_goal(agent, world, percept, paths) -> Goal:
    """Pick the agent's steering goal for this tick.

    Calm: nearest unvisited painting point, else the nearest exit door
    point. Panic with route knowledge (every guide, plus independents who
    know the building): the door point of the next portal on the shortest
    route from the current room to the nearest exit. Panic followers track
    the nearest visible guide, fall back to the nearest visible door point,
    and keep their previous goal when nothing is visible.
    """
    psych = agent.psych
    traits = agent.traits

    if psych.situation is Situation.CALM:
        unvisited = [
            a for a in world.painting_points() if a.id not in psych.visited_paintings
        ]
        target = _nearest_attractor(agent.pos, unvisited)
        if target is not None:
            return Goal(GoalKind.PAINTING, tuple(target.position), target.id)
        exit_pt = _nearest_attractor(agent.pos, world.exit_points())
        if exit_pt is not None:
            return Goal(GoalKind.EXIT_PORTAL, world.steer_position(exit_pt.id), exit_pt.id)
        if psych.current_goal.kind is not GoalKind.NONE:
            return psych.current_goal
        if not world.attractors and percept.is_empty:
            raise NoGoalAvailable("no attractors exist and nothing is visible")
        return NO_GOAL

    # Panic. Retained goals can never be paintings: the alarm cleared them.
    prior = psych.current_goal
    if prior.kind is GoalKind.PAINTING:
        prior = NO_GOAL
    if traits.role is Role.GUIDE or traits.knowledge is Knowledge.COMPLETE:
        target = world.exit_route_attractor(agent.room_id)
        if target is not None:
            return Goal(GoalKind.EXIT_PORTAL, world.steer_position(target.id), target.id)
        return prior  # no exit reachable from here

    if traits.role is Role.FOLLOWER:
        guides = [p for p in percept.visible_agents if p.role is Role.GUIDE]
        if guides:
            best = min(guides, key=lambda p: (p.distance, p.id))
            return Goal(GoalKind.FOLLOW_AGENT, tuple(best.position), best.id)

    # Follower with no guide in sight, or partial-knowledge independent:
    # head for any visible door point.
    visible_doors = [
        world.attractor(aid)
        for aid in percept.visible_attractors
        if world.attractor(aid).kind is AttractorKind.DOOR_POINT
    ]
    if visible_doors:
        target = min(visible_doors, key=lambda a: (_dist(agent.pos, a.position), a.id))
        return Goal(GoalKind.EXIT_PORTAL, world.steer_position(target.id), target.id)
    if prior.kind is not GoalKind.NONE:
        return prior
    if not world.attractors and percept.is_empty:
        raise NoGoalAvailable("no attractors exist and nothing is visible")
    return NO_GOAL
