"""Command-line front end.

  crowdsim run --map plan.txt --scenario s.json --out results/
               [--ticks N] [--dt F] [--seed U64] [--alarm-at SECONDS]
               [--frames-every N]
  crowdsim compile --map plan.txt --out world.json
  crowdsim validate --map plan.txt

``run`` writes trajectory.csv and metrics.json into the output directory,
plus frame_<tick>.svg files when --frames-every is given. Scenarios are
JSON; every field except the population is optional.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import simulation as sim
from .perception import PerceptionParams
from .motion import MotionParams
from .psyche import (
    Knowledge,
    Patience,
    PersonalSpace,
    PsychState,
    Role,
    Situation,
    make_traits,
)
from .simulation import ExplicitAgent, PopulationSpec, SimConfig, Termination
from .worldmap import (
    MapError,
    RawCell,
    compile_world,
    dump_world,
    load_map,
)


class SchemaError(ValueError):
    """Scenario file failed validation; the message carries the field path."""


class FractionSumError(SchemaError):
    """A trait-fraction axis does not sum to 1."""


FRACTION_TOLERANCE = 1e-9

_SPACE = {e.value: e for e in PersonalSpace}
_PATIENCE = {e.value: e for e in Patience}
_ROLE = {e.value: e for e in Role}
_KNOWLEDGE = {e.value: e for e in Knowledge}


@dataclass
class Scenario:
    map_path: str = None
    population: PopulationSpec = field(default_factory=PopulationSpec)
    perception: PerceptionParams = field(default_factory=PerceptionParams)
    motion: MotionParams = field(default_factory=MotionParams)
    dt: float = 0.05
    max_ticks: int = 2000
    seed: int = 1
    alarm_time: float = None  # seconds; converted to a tick at run time
    workers: int = 1

    def to_config(self) -> SimConfig:
        alarm_tick = None
        if self.alarm_time is not None:
            alarm_tick = int(math.floor(self.alarm_time / self.dt + 0.5))
        return SimConfig(
            dt=self.dt,
            max_ticks=self.max_ticks,
            rng_seed=self.seed,
            alarm_tick=alarm_tick,
            perception=self.perception,
            motion=self.motion,
            population=self.population,
            workers=self.workers,
        )


@dataclass
class RunArtifacts:
    trajectory_path: Path
    metrics_path: Path
    frame_paths: list


def _expect(cond, path, message):
    if not cond:
        raise SchemaError(f"{path}: {message}")


def _check_fractions(raw, mapping, path):
    fractions = {}
    for key, value in raw.items():
        _expect(key in mapping, f"{path}.{key}", f"unknown category {key!r}")
        _expect(
            isinstance(value, (int, float)) and value >= 0,
            f"{path}.{key}",
            "fraction must be a nonnegative number",
        )
        fractions[mapping[key]] = float(value)
    total = sum(fractions.values())
    if abs(total - 1.0) > FRACTION_TOLERANCE:
        raise FractionSumError(f"{path}: fractions sum to {total}, expected 1")
    return fractions


def _parse_traits_block(doc, path="traits"):
    known = {"personal_space", "patience", "role", "knowledge", "v_pref", "v_max"}
    for key in doc:
        _expect(key in known, f"{path}.{key}", "unknown field")
    out = {}
    if "personal_space" in doc:
        out["space_fractions"] = _check_fractions(doc["personal_space"], _SPACE, f"{path}.personal_space")
    if "patience" in doc:
        out["patience_fractions"] = _check_fractions(doc["patience"], _PATIENCE, f"{path}.patience")
    if "role" in doc:
        out["role_fractions"] = _check_fractions(doc["role"], _ROLE, f"{path}.role")
    if "knowledge" in doc:
        out["knowledge_fractions"] = _check_fractions(doc["knowledge"], _KNOWLEDGE, f"{path}.knowledge")
    if "v_pref" in doc:
        out["v_pref"] = float(doc["v_pref"])
    if "v_max" in doc:
        out["v_max"] = float(doc["v_max"])
    return out


def _parse_explicit_agent(doc, path):
    known = {"pos", "personal_space", "patience", "role", "knowledge", "v_pref", "v_max", "heading"}
    for key in doc:
        _expect(key in known, f"{path}.{key}", "unknown field")
    _expect("pos" in doc, path, "explicit agent needs a pos")
    pos = doc["pos"]
    _expect(
        isinstance(pos, list) and len(pos) == 2,
        f"{path}.pos",
        "must be [x, y] in meters",
    )
    try:
        traits = make_traits(
            space_class=_SPACE[doc.get("personal_space", "average")],
            patience=_PATIENCE[doc.get("patience", "patient")],
            role=_ROLE[doc.get("role", "independent")],
            knowledge=_KNOWLEDGE[doc.get("knowledge", "complete")],
            v_pref=float(doc.get("v_pref", 1.34)),
            v_max=float(doc.get("v_max", 3.0)),
        )
    except KeyError as exc:
        raise SchemaError(f"{path}: unknown category {exc.args[0]!r}") from None
    heading = doc.get("heading")
    if heading is not None:
        _expect(
            isinstance(heading, list) and len(heading) == 2,
            f"{path}.heading",
            "must be [hx, hy]",
        )
        heading = tuple(float(v) for v in heading)
    return ExplicitAgent(pos=(float(pos[0]), float(pos[1])), traits=traits, heading=heading)


def _params_from(doc, cls, path):
    defaults = cls()
    known = set(vars(defaults))
    kwargs = {}
    for key, value in doc.items():
        _expect(key in known, f"{path}.{key}", "unknown field")
        _expect(
            isinstance(value, (int, float)) and not isinstance(value, bool),
            f"{path}.{key}",
            "must be a number",
        )
        kwargs[key] = type(getattr(defaults, key))(value)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise SchemaError(f"{path}: {exc}") from None


def parse_scenario(doc: dict) -> Scenario:
    known = {
        "map", "population", "traits", "perception", "motion",
        "dt", "max_ticks", "seed", "alarm_time", "workers",
    }
    _expect(isinstance(doc, dict), "$", "scenario must be a JSON object")
    for key in doc:
        _expect(key in known, key, "unknown field")

    pop_doc = doc.get("population", 0)
    trait_kwargs = _parse_traits_block(doc.get("traits", {}))
    if isinstance(pop_doc, list):
        explicit = [
            _parse_explicit_agent(a, f"population[{i}]") for i, a in enumerate(pop_doc)
        ]
        population = PopulationSpec(count=len(explicit), explicit=explicit, **trait_kwargs)
    else:
        _expect(
            isinstance(pop_doc, int) and pop_doc >= 0,
            "population",
            "must be a nonnegative integer or a list of agents",
        )
        population = PopulationSpec(count=pop_doc, **trait_kwargs)

    scenario = Scenario(
        map_path=doc.get("map"),
        population=population,
        perception=_params_from(doc.get("perception", {}), PerceptionParams, "perception"),
        motion=_params_from(doc.get("motion", {}), MotionParams, "motion"),
    )
    if "dt" in doc:
        _expect(isinstance(doc["dt"], (int, float)) and doc["dt"] > 0, "dt", "must be > 0")
        scenario.dt = float(doc["dt"])
    if "max_ticks" in doc:
        _expect(
            isinstance(doc["max_ticks"], int) and doc["max_ticks"] > 0,
            "max_ticks",
            "must be a positive integer",
        )
        scenario.max_ticks = doc["max_ticks"]
    if "seed" in doc:
        _expect(isinstance(doc["seed"], int) and doc["seed"] >= 0, "seed", "must be a nonnegative integer")
        scenario.seed = doc["seed"]
    if "alarm_time" in doc and doc["alarm_time"] is not None:
        _expect(
            isinstance(doc["alarm_time"], (int, float)) and doc["alarm_time"] >= 0,
            "alarm_time",
            "must be >= 0 seconds",
        )
        scenario.alarm_time = float(doc["alarm_time"])
    if "workers" in doc:
        _expect(isinstance(doc["workers"], int) and doc["workers"] >= 1, "workers", "must be >= 1")
        scenario.workers = doc["workers"]
    return scenario


def load_scenario(path) -> Scenario:
    """Read and validate a scenario file; defaults fill omitted fields."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"$: not valid JSON ({exc})") from None
    return parse_scenario(doc)


def scenario_to_json(scenario: Scenario) -> dict:
    """Scenario with all defaults materialized (round-trip form)."""
    pop = scenario.population
    doc = {
        "map": scenario.map_path,
        "dt": scenario.dt,
        "max_ticks": scenario.max_ticks,
        "seed": scenario.seed,
        "alarm_time": scenario.alarm_time,
        "workers": scenario.workers,
        "perception": dict(vars(scenario.perception)),
        "motion": dict(vars(scenario.motion)),
        "traits": {
            "personal_space": {k.value: v for k, v in pop.space_fractions.items()},
            "patience": {k.value: v for k, v in pop.patience_fractions.items()},
            "role": {k.value: v for k, v in pop.role_fractions.items()},
            "knowledge": {k.value: v for k, v in pop.knowledge_fractions.items()},
            "v_pref": pop.v_pref,
            "v_max": pop.v_max,
        },
    }
    if pop.explicit is not None:
        doc["population"] = [
            {
                "pos": list(ea.pos),
                "personal_space": ea.traits.personal_space_class.value,
                "patience": ea.traits.patience.value,
                "role": ea.traits.role.value,
                "knowledge": ea.traits.knowledge.value,
                "v_pref": ea.traits.v_pref,
                "v_max": ea.traits.v_max,
            }
            for ea in pop.explicit
        ]
    else:
        doc["population"] = pop.count
    return doc


# --- rendering --------------------------------------------------------------

CALM_COLOR = "#2d7dd2"
PANIC_COLOR = "#d7263d"
WALL_COLOR = "#3c3c3c"
DOOR_COLOR = "#c9a36a"
EXIT_COLOR = "#41b06e"
ATTRACTOR_COLOR = "#9a4fb3"
PX_PER_METER = 40


def render_frame(world, agents, tick: int) -> str:
    """One SVG frame: walls and doors, attractors, agents colored by state."""
    grid = world.grid
    s = grid.cell_size
    width = grid.width * s * PX_PER_METER
    height = grid.height * s * PX_PER_METER

    def px(v):
        return v * PX_PER_METER

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" '
        f'height="{height:.0f}" viewBox="0 0 {width:.0f} {height:.0f}">',
        f'<title>tick {tick}</title>',
        f'<rect width="{width:.0f}" height="{height:.0f}" fill="#f5f2eb"/>',
    ]
    for y in range(grid.height):
        for x in range(grid.width):
            kind = grid.cell(x, y)
            if kind is RawCell.FREE:
                continue
            color = {
                RawCell.WALL: WALL_COLOR,
                RawCell.PAINTING: "#7a5a3a",
                RawCell.DOOR: DOOR_COLOR,
                RawCell.EXIT_DOOR: EXIT_COLOR,
            }[kind]
            parts.append(
                f'<rect x="{px(x * s):.1f}" y="{px(y * s):.1f}" '
                f'width="{px(s):.1f}" height="{px(s):.1f}" fill="{color}"/>'
            )
    half = px(0.12)
    for a in world.attractors:
        cx, cy = px(a.position[0]), px(a.position[1])
        parts.append(
            f'<polygon points="{cx:.1f},{cy - half:.1f} {cx + half:.1f},{cy:.1f} '
            f'{cx:.1f},{cy + half:.1f} {cx - half:.1f},{cy:.1f}" '
            f'fill="{ATTRACTOR_COLOR}" opacity="0.6"/>'
        )
    for agent in agents:
        if agent.evacuated_at is not None:
            continue
        color = PANIC_COLOR if agent.psych.situation is Situation.PANIC else CALM_COLOR
        cx, cy = px(float(agent.pos[0])), px(float(agent.pos[1]))
        radius = px(agent.traits.personal_space_radius)
        hx = cx + float(agent.heading[0]) * radius
        hy = cy + float(agent.heading[1]) * radius
        parts.append(
            f'<circle class="agent" cx="{cx:.1f}" cy="{cy:.1f}" r="{radius:.1f}" '
            f'fill="{color}" fill-opacity="0.82"/>'
        )
        parts.append(
            f'<line x1="{cx:.1f}" y1="{cy:.1f}" x2="{hx:.1f}" y2="{hy:.1f}" '
            f'stroke="#111" stroke-width="1.5"/>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _render_frames_from_log(world, result, out_dir: Path, every: int) -> list:
    """Rebuild lightweight frame states from the trajectory log."""
    roster = {a.id: a for a in result.agents}
    rec = result.log.record_arrays()
    paths = []
    if len(rec["tick"]) == 0:
        return paths
    ticks = sorted(set(int(t) for t in rec["tick"]))
    for tick in ticks:
        if tick % every != 0:
            continue
        mask = rec["tick"] == tick
        frame_agents = []
        for i in mask.nonzero()[0]:
            aid = int(rec["id"][i])
            proto = roster[aid]
            vel = rec["vel"][i]
            speed = math.sqrt(vel[0] ** 2 + vel[1] ** 2)
            heading = (vel / speed) if speed > 1e-9 else proto.heading
            situation = Situation.PANIC if rec["situation"][i] else Situation.CALM
            frame_agents.append(
                sim.Agent(
                    id=aid,
                    pos=rec["pos"][i],
                    vel=vel,
                    heading=heading,
                    traits=proto.traits,
                    psych=PsychState(situation=situation),
                    room_id=int(rec["room"][i]),
                )
            )
        path = out_dir / f"frame_{tick:06d}.svg"
        path.write_text(render_frame(world, frame_agents, tick), encoding="utf-8")
        paths.append(path)
    return paths


# --- commands ----------------------------------------------------------------


def run_command(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    scenario = load_scenario(args.scenario) if args.scenario else Scenario()
    map_path = args.map or scenario.map_path
    if not map_path:
        print("error: no map given (use --map or the scenario's map field)", file=sys.stderr)
        return 2
    world = compile_world(load_map(map_path))

    if args.ticks is not None:
        scenario.max_ticks = args.ticks
    if args.dt is not None:
        scenario.dt = args.dt
    if args.seed is not None:
        scenario.seed = args.seed
    if args.alarm_at is not None:
        scenario.alarm_time = args.alarm_at
    config = scenario.to_config()

    result = sim.run(world, config)

    trajectory_path = out_dir / "trajectory.csv"
    result.log.to_csv(trajectory_path)
    metrics_path = out_dir / "metrics.json"
    doc = result.metrics.to_json_dict()
    doc["termination"] = result.termination.value
    with open(metrics_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")

    frame_paths = []
    if args.frames_every:
        frame_paths = _render_frames_from_log(world, result, out_dir, args.frames_every)

    if result.termination is Termination.TIMEOUT:
        print(
            f"warning: timeout after {config.max_ticks} ticks with "
            f"{result.metrics.total_evacuated} evacuated",
            file=sys.stderr,
        )
    print(f"{result.termination.value}: {result.metrics.total_evacuated} evacuated")
    print(f"wrote {trajectory_path} and {metrics_path}")
    return 0


def compile_command(args) -> int:
    world = compile_world(load_map(args.map))
    dump_world(world, args.out)
    print(f"wrote {args.out}")
    return 0


def validate_command(args) -> int:
    try:
        world = compile_world(load_map(args.map))
    except MapError as exc:
        print(f"invalid map: {exc}", file=sys.stderr)
        return 1
    graph = world.graph
    print(f"rooms: {world.labeled.room_count}")
    print(f"portals: {len(graph.portals)} ({len(graph.exit_portals())} exits)")
    print(f"attractors: {len(world.attractors)}")
    for warning in graph.warnings:
        print(f"warning: {warning}")
    problems = 0
    if not graph.exit_portals():
        print("problem: map has no exit", file=sys.stderr)
        problems += 1
    else:
        for room in graph.rooms:
            if world.path_table.best_exit(room.id) is None:
                print(f"problem: room {room.id} cannot reach any exit", file=sys.stderr)
                problems += 1
    return 1 if problems else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crowdsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate a scenario and write artifacts")
    p_run.add_argument("--map", help="floor-plan file (overrides the scenario's map)")
    p_run.add_argument("--scenario", help="scenario JSON file")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--ticks", type=int, help="override max_ticks")
    p_run.add_argument("--dt", type=float, help="override time step (s)")
    p_run.add_argument("--seed", type=int, help="override RNG seed")
    p_run.add_argument("--alarm-at", type=float, help="alarm time in seconds")
    p_run.add_argument("--frames-every", type=int, help="write an SVG frame every N ticks")
    p_run.set_defaults(func=run_command)

    p_compile = sub.add_parser("compile", help="emit the compiled world as JSON")
    p_compile.add_argument("--map", required=True)
    p_compile.add_argument("--out", required=True)
    p_compile.set_defaults(func=compile_command)

    p_validate = sub.add_parser("validate", help="labeling and portal diagnostics")
    p_validate.add_argument("--map", required=True)
    p_validate.set_defaults(func=validate_command)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return 2
    except (MapError, SchemaError, sim.SpawnFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
