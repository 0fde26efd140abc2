"""Deterministic microscopic crowd-evacuation simulator.

Floor plans compile into a labeled grid plus a room/portal graph; agents
with socio-psychological traits move under a hybrid social-force /
rule-based model through a fixed-phase Sense-Decide-Act tick loop.
"""

from .worldmap import (
    Attractor,
    AttractorKind,
    CellPortalGraph,
    CompiledWorld,
    GridMap,
    LabeledGrid,
    MapError,
    OUTSIDE,
    PathTable,
    Portal,
    RawCell,
    RoomNode,
    build_portal_graph,
    cell_at,
    compile_world,
    label_rooms,
    load_map,
    parse_grid,
    parse_map_file,
    place_attractors,
    precompute_exit_paths,
    world_from_json,
    world_to_json,
)
from .perception import (
    Percept,
    PerceptionParams,
    SpatialIndex,
    in_fov,
    perceive,
    predict,
    rebuild_index,
)
from .psyche import (
    Goal,
    GoalKind,
    Knowledge,
    Patience,
    PersonalSpace,
    PsychState,
    Role,
    Situation,
    Traits,
    avoidance_distance,
    desired_speed,
    make_traits,
    on_alarm,
    select_goal,
)
from .motion import (
    ForceBreakdown,
    MotionParams,
    NonFiniteForce,
    acceleration_boost,
    advance_force,
    goal_attractive_force,
    integrate,
    obstacle_repulsive_force,
    occupant_attractive_force,
    occupant_repulsive_force,
    rule_avoid,
)
from .simulation import (
    Agent,
    Engine,
    ExplicitAgent,
    Metrics,
    PopulationSpec,
    RunResult,
    SimConfig,
    SpawnFailure,
    Termination,
    TrajectoryLog,
    compute_metrics,
    run,
    spawn_population,
    step,
    trigger_alarm,
)

__version__ = "0.1.0"
