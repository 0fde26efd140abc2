"""Floor-plan compilation.

Turns an ASCII floor plan into everything the simulation needs to navigate:
a labeled occupancy grid (rooms found by flood fill), a room/portal graph
(doors join rooms, exit doors join a room to the outside), attraction points
at doors and paintings, and a table of alternative portal routes from every
room to every exit.

Glyphs: '#' wall, '.' free, 'D' door, 'E' exit door, 'P' painting (occupies
a wall cell; its attraction point sits in the adjacent free cell).

Coordinates are (x, y) cell indices, x growing right and y growing down.
World positions are in meters; cell (x, y) spans the half-open square
[x*cell_size, (x+1)*cell_size) x [y*cell_size, (y+1)*cell_size).
"""

from __future__ import annotations

import heapq
import json
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

logger = logging.getLogger(__name__)

#: Virtual node id used as room_b of exit portals.
OUTSIDE = 0

DEFAULT_CELL_SIZE = 0.5  # meters; roughly one body width
DEFAULT_PATH_ALTERNATIVES = 3

# Cell labels: 0 wall (and painting), -1 door/exit door, >0 room id.
WALL_LABEL = 0
DOOR_LABEL = -1


class MapError(ValueError):
    """Base class for floor-plan compilation failures."""


class RaggedInput(MapError):
    pass


class UnknownGlyph(MapError):
    pass


class TooSmall(MapError):
    pass


class NoFreeCells(MapError):
    pass


class AmbiguousDoor(MapError):
    pass


class DanglingDoor(MapError):
    pass


class OrphanPainting(MapError):
    pass


class NoExits(MapError):
    pass


class OutOfBounds(MapError):
    pass


class RawCell(Enum):
    WALL = "#"
    FREE = "."
    DOOR = "D"
    EXIT_DOOR = "E"
    PAINTING = "P"


GLYPH_TO_CELL = {c.value: c for c in RawCell}

_N4 = ((0, -1), (-1, 0), (1, 0), (0, 1))  # scan order: north, west, east, south


@dataclass
class GridMap:
    """Discretized floor plan: one RawCell per character of the input."""

    width: int
    height: int
    cell_size: float
    cells: list  # row-major list of RawCell, length width * height

    def in_bounds(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height

    def cell(self, x: int, y: int) -> RawCell:
        return self.cells[y * self.width + x]

    def rows(self) -> list:
        """Grid as glyph strings, one per row (inverse of parse_grid)."""
        out = []
        for y in range(self.height):
            row = self.cells[y * self.width : (y + 1) * self.width]
            out.append("".join(c.value for c in row))
        return out


@dataclass
class LabeledGrid:
    """GridMap plus per-cell room labels (0 wall, -1 door, >0 room id)."""

    grid: GridMap
    labels: list  # row-major ints, same length as grid.cells
    room_count: int

    @property
    def width(self) -> int:
        return self.grid.width

    @property
    def height(self) -> int:
        return self.grid.height

    @property
    def cell_size(self) -> float:
        return self.grid.cell_size

    def label(self, x: int, y: int) -> int:
        return self.labels[y * self.grid.width + x]

    def cell_center(self, x: int, y: int) -> tuple:
        s = self.grid.cell_size
        return ((x + 0.5) * s, (y + 0.5) * s)


@dataclass
class Portal:
    """A doorway joining two rooms (room_b == OUTSIDE for exits).

    Multi-cell doorways are one portal: ``cells`` holds the maximal run of
    collinear door cells joining the same room pair, ``cell`` its first
    (row-major) member. ``sides`` maps each adjoining positive room id to
    the unit cell offset pointing from the door into that room.
    """

    id: int
    cell: tuple
    cells: list
    room_a: int
    room_b: int
    is_exit: bool
    sides: dict = field(default_factory=dict, repr=False)


@dataclass
class RoomNode:
    id: int
    cells: list
    attractors: list = field(default_factory=list)


@dataclass
class CellPortalGraph:
    rooms: list
    portals: list
    warnings: list = field(default_factory=list)

    def room(self, room_id: int) -> RoomNode:
        return self.rooms[room_id - 1]

    def exit_portals(self) -> list:
        return [p for p in self.portals if p.is_exit]


class AttractorKind(Enum):
    DOOR_POINT = "door"
    PAINTING_POINT = "painting"


@dataclass
class Attractor:
    """A goal point agents can steer toward (door side or painting)."""

    id: int
    kind: AttractorKind
    position: tuple
    room_id: int
    is_exit: bool
    portal_id: int = -1  # -1 for painting points
    painting_cell: tuple = None


@dataclass
class PathTable:
    """Portal-id routes per (room_id, exit_portal_id), shortest first.

    Every (room, exit) pair has an entry; unreachable pairs hold [].
    """

    paths: dict

    def routes(self, room_id: int, exit_portal_id: int) -> list:
        return self.paths.get((room_id, exit_portal_id), [])

    def best_exit(self, room_id: int):
        """(exit_portal_id, shortest route) for the closest reachable exit.

        Ties on hop count break toward the smaller exit portal id. Returns
        None when no exit is reachable from the room.
        """
        best = None
        for (room, exit_id), routes in sorted(self.paths.items()):
            if room != room_id or not routes:
                continue
            key = (len(routes[0]), exit_id)
            if best is None or key < best[0]:
                best = (key, exit_id, routes[0])
        if best is None:
            return None
        return best[1], best[2]


def parse_grid(text: str, cell_size: float = DEFAULT_CELL_SIZE) -> GridMap:
    """Parse an ASCII map into a GridMap.

    Raises RaggedInput for unequal row lengths, UnknownGlyph for characters
    outside the map alphabet, TooSmall for maps under 3x3.
    """
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines = lines[:-1]
    width = len(lines[0]) if lines else 0
    for y, line in enumerate(lines):
        if len(line) != width:
            raise RaggedInput(f"row {y} has {len(line)} cells, expected {width}")
    cells = []
    for y, line in enumerate(lines):
        for x, ch in enumerate(line):
            kind = GLYPH_TO_CELL.get(ch)
            if kind is None:
                raise UnknownGlyph(f"unknown glyph {ch!r} at ({x},{y})")
            cells.append(kind)
    if width < 3 or len(lines) < 3:
        raise TooSmall(f"map must be at least 3x3, got {width}x{len(lines)}")
    return GridMap(width=width, height=len(lines), cell_size=cell_size, cells=cells)


def parse_map_file(text: str) -> GridMap:
    """Parse map-file content: optional 'cellsize=<float>' header line."""
    text = text.replace("\r\n", "\n")
    cell_size = DEFAULT_CELL_SIZE
    if text.startswith("cellsize="):
        header, _, rest = text.partition("\n")
        try:
            cell_size = float(header[len("cellsize=") :])
        except ValueError as exc:
            raise MapError(f"bad cellsize header: {header!r}") from exc
        if cell_size <= 0:
            raise MapError(f"cellsize must be positive, got {cell_size}")
        text = rest
    return parse_grid(text, cell_size=cell_size)


def load_map(path) -> GridMap:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_map_file(fh.read())


def label_rooms(grid: GridMap) -> LabeledGrid:
    """Assign room ids to free cells by BFS flood fill.

    Seeds are taken in row-major order starting from the first free cell
    (top-left), so numbering is deterministic. Walls and paintings label 0,
    doors and exit doors -1; fill never crosses either.
    """
    w, h = grid.width, grid.height
    labels = [WALL_LABEL] * (w * h)
    for i, c in enumerate(grid.cells):
        if c in (RawCell.DOOR, RawCell.EXIT_DOOR):
            labels[i] = DOOR_LABEL
    room_count = 0
    for start in range(w * h):
        if grid.cells[start] is not RawCell.FREE or labels[start] != WALL_LABEL:
            continue
        room_count += 1
        labels[start] = room_count
        queue = deque([start])
        while queue:
            idx = queue.popleft()
            x, y = idx % w, idx // w
            for dx, dy in _N4:
                nx, ny = x + dx, y + dy
                if not (0 <= nx < w and 0 <= ny < h):
                    continue
                nidx = ny * w + nx
                if grid.cells[nidx] is RawCell.FREE and labels[nidx] == WALL_LABEL:
                    labels[nidx] = room_count
                    queue.append(nidx)
    if room_count == 0:
        raise NoFreeCells("map contains no free cells")
    return LabeledGrid(grid=grid, labels=labels, room_count=room_count)


def cell_at(pos, lg: LabeledGrid):
    """((x, y) cell index, label) for a world position in meters.

    Cells are half-open, so a position exactly on a shared edge belongs to
    the higher-index cell. Raises OutOfBounds outside the grid.
    """
    s = lg.grid.cell_size
    x = int(pos[0] // s)
    y = int(pos[1] // s)
    if pos[0] < 0 or pos[1] < 0 or x >= lg.grid.width or y >= lg.grid.height:
        raise OutOfBounds(f"position {tuple(pos)} outside the map")
    return (x, y), lg.label(x, y)


def _door_axis_info(lg: LabeledGrid, x: int, y: int):
    """Classify one door cell against its N/S and E/W neighbor pairs.

    Returns (interior_pairs, exit_sides, room_sides) where interior_pairs
    is a list of ((room_a, room_b), {room: offset}) per qualifying axis,
    exit_sides a list of (room, offset) per axis qualifying as an exit, and
    room_sides every (room, offset) with a positive room.
    """

    def lab(nx, ny):
        if not lg.grid.in_bounds(nx, ny):
            return None  # outside the map counts as boundary
        return lg.label(nx, ny)

    axes = (
        ((0, -1), (0, 1)),  # north/south
        ((-1, 0), (1, 0)),  # east/west
    )
    interior_pairs = []
    exit_sides = []
    room_sides = []
    is_exit_cell = lg.grid.cell(x, y) is RawCell.EXIT_DOOR
    for (d1, d2) in axes:
        l1 = lab(x + d1[0], y + d1[1])
        l2 = lab(x + d2[0], y + d2[1])
        for lv, dv in ((l1, d1), (l2, d2)):
            if lv is not None and lv > 0:
                room_sides.append((lv, dv))
        if l1 is not None and l2 is not None and l1 > 0 and l2 > 0 and l1 != l2:
            interior_pairs.append(((l1, l2), {l1: d1, l2: d2}))
        elif is_exit_cell:
            # one positive room, other side wall/door/boundary
            if l1 is not None and l1 > 0 and (l2 is None or l2 <= 0):
                exit_sides.append((l1, d1))
            elif l2 is not None and l2 > 0 and (l1 is None or l1 <= 0):
                exit_sides.append((l2, d2))
    return interior_pairs, exit_sides, room_sides


def build_portal_graph(lg: LabeledGrid) -> CellPortalGraph:
    """Scan door cells row-major and join rooms into a cell/portal graph.

    Collinear runs of door cells joining the same room pair merge into one
    portal. Doors that do not separate two rooms are dropped with a warning;
    a door with no adjacent room raises DanglingDoor, one joining distinct
    rooms on both axes raises AmbiguousDoor.
    """
    w, h = lg.grid.width, lg.grid.height
    rooms = [RoomNode(id=i + 1, cells=[]) for i in range(lg.room_count)]
    for y in range(h):
        for x in range(w):
            lab = lg.label(x, y)
            if lab > 0:
                rooms[lab - 1].cells.append((x, y))

    # Per-cell classification first, merging into runs second.
    classified = {}  # (x, y) -> (key, sides) with key = (room_a, room_b, is_exit)
    warnings = []
    for y in range(h):
        for x in range(w):
            kind = lg.grid.cell(x, y)
            if kind not in (RawCell.DOOR, RawCell.EXIT_DOOR):
                continue
            interior, exits, room_sides = _door_axis_info(lg, x, y)
            if len(interior) + len(exits) > 1:
                raise AmbiguousDoor(
                    f"door at ({x},{y}) joins distinct rooms on both axes"
                )
            if not room_sides:
                raise DanglingDoor(f"door at ({x},{y}) touches no room")
            if interior:
                (la, lb), sides = interior[0]
                is_exit = kind is RawCell.EXIT_DOOR
                key = (min(la, lb), max(la, lb), is_exit)
                classified[(x, y)] = (key, sides)
            elif exits:
                room, side = exits[0]
                classified[(x, y)] = ((room, OUTSIDE, True), {room: side})
            else:
                warnings.append(
                    f"door at ({x},{y}) does not separate two rooms; ignored"
                )
    for msg in warnings:
        logger.warning(msg)

    # Merge maximal collinear runs with identical room pairs.
    portals = []
    assigned = set()
    for y in range(h):
        for x in range(w):
            if (x, y) not in classified or (x, y) in assigned:
                continue
            key, sides = classified[(x, y)]
            run = [(x, y)]
            # try horizontal run first, then vertical
            for dx, dy in ((1, 0), (0, 1)):
                if len(run) == 1:
                    nx, ny = x + dx, y + dy
                    while (nx, ny) in classified and (nx, ny) not in assigned and classified[(nx, ny)][0] == key:
                        run.append((nx, ny))
                        nx, ny = nx + dx, ny + dy
                    if len(run) > 1:
                        break
            assigned.update(run)
            merged_sides = dict(sides)
            for cell in run[1:]:
                merged_sides.update(classified[cell][1])
            room_a, room_b, is_exit = key
            portals.append(
                Portal(
                    id=len(portals),
                    cell=run[0],
                    cells=run,
                    room_a=room_a,
                    room_b=room_b,
                    is_exit=is_exit,
                    sides=merged_sides,
                )
            )
    return CellPortalGraph(rooms=rooms, portals=portals, warnings=warnings)


def place_attractors(lg: LabeledGrid, graph: CellPortalGraph) -> list:
    """Create door points for every portal and painting points for paintings.

    A door point sits at the center of the free cell the door opens into
    (the run midpoint displaced one cell toward the room): two per interior
    portal, one per exit portal. A painting point sits at the center of the
    painting's first free 4-neighbor. Raises OrphanPainting when a painting
    has no free neighbor.
    """
    s = lg.grid.cell_size
    attractors = []
    for portal in graph.portals:
        cx = sum(c[0] for c in portal.cells) / len(portal.cells)
        cy = sum(c[1] for c in portal.cells) / len(portal.cells)
        mid = ((cx + 0.5) * s, (cy + 0.5) * s)
        for room_id in sorted(portal.sides):
            dx, dy = portal.sides[room_id]
            pos = (mid[0] + dx * s, mid[1] + dy * s)
            attractors.append(
                Attractor(
                    id=len(attractors),
                    kind=AttractorKind.DOOR_POINT,
                    position=pos,
                    room_id=room_id,
                    is_exit=portal.is_exit,
                    portal_id=portal.id,
                )
            )
    for y in range(lg.grid.height):
        for x in range(lg.grid.width):
            if lg.grid.cell(x, y) is not RawCell.PAINTING:
                continue
            spot = None
            for dx, dy in _N4:
                nx, ny = x + dx, y + dy
                if lg.grid.in_bounds(nx, ny) and lg.grid.cell(nx, ny) is RawCell.FREE:
                    spot = (nx, ny)
                    break
            if spot is None:
                raise OrphanPainting(f"painting at ({x},{y}) has no free neighbor")
            attractors.append(
                Attractor(
                    id=len(attractors),
                    kind=AttractorKind.PAINTING_POINT,
                    position=lg.cell_center(*spot),
                    room_id=lg.label(*spot),
                    is_exit=False,
                    painting_cell=(x, y),
                )
            )
    return attractors


def precompute_exit_paths(graph: CellPortalGraph, k: int = DEFAULT_PATH_ALTERNATIVES) -> PathTable:
    """Up to k loop-free portal routes from every room to every exit portal.

    Routes are ordered by hop count, ties by ascending portal-id sequence.
    Raises NoExits when the graph has no exit portal.
    """
    exits = graph.exit_portals()
    if not exits:
        raise NoExits("portal graph has no exit portal")

    room_portals = {room.id: [] for room in graph.rooms}
    for portal in graph.portals:
        for room_id in portal.sides:
            room_portals[room_id].append(portal.id)
    for ids in room_portals.values():
        ids.sort()
    portal_rooms = {p.id: sorted(p.sides) for p in graph.portals}

    def neighbors(pid):
        seen = set()
        out = []
        for room_id in portal_rooms[pid]:
            for q in room_portals[room_id]:
                if q != pid and q not in seen:
                    seen.add(q)
                    out.append(q)
        return sorted(out)

    paths = {}
    for room in graph.rooms:
        for exit_portal in exits:
            found = []
            heap = [(1, (pid,)) for pid in room_portals[room.id]]
            heapq.heapify(heap)
            pops = 0
            while heap and len(found) < k and pops < 100_000:
                _, path = heapq.heappop(heap)
                pops += 1
                last = path[-1]
                if last == exit_portal.id:
                    found.append(list(path))
                    continue
                for q in neighbors(last):
                    if q not in path:
                        heapq.heappush(heap, (len(path) + 1, path + (q,)))
            paths[(room.id, exit_portal.id)] = found
    return PathTable(paths=paths)


@dataclass
class CompiledWorld:
    """Everything derived from one floor plan, ready for simulation."""

    grid: GridMap
    labeled: LabeledGrid
    graph: CellPortalGraph
    attractors: list
    path_table: PathTable
    _route_cache: dict = field(default_factory=dict, repr=False)

    def attractor(self, attractor_id: int) -> Attractor:
        return self.attractors[attractor_id]

    def door_points(self) -> list:
        return [a for a in self.attractors if a.kind is AttractorKind.DOOR_POINT]

    def painting_points(self) -> list:
        return [a for a in self.attractors if a.kind is AttractorKind.PAINTING_POINT]

    def exit_points(self) -> list:
        return [a for a in self.attractors if a.is_exit]

    def door_point_for(self, portal_id: int, room_id: int):
        for a in self.attractors:
            if a.portal_id == portal_id and a.room_id == room_id:
                return a
        return None

    def exit_route_attractor(self, room_id: int):
        """Attractor to steer toward when routing room -> nearest exit.

        The first portal of the shortest route, taken on its far side so the
        agent aims through the doorway (exit portals only have the near
        side). None when no exit is reachable.
        """
        if room_id in self._route_cache:
            return self._route_cache[room_id]
        result = None
        best = self.path_table.best_exit(room_id)
        if best is not None:
            _, route = best
            first = self.graph.portals[route[0]]
            far = [r for r in sorted(first.sides) if r != room_id]
            side = far[0] if far else room_id
            result = self.door_point_for(first.id, side)
        self._route_cache[room_id] = result
        return result

    def steer_position(self, attractor_id: int) -> tuple:
        """Where an agent aiming at this attractor should actually steer.

        For an exit portal's door point that is the center of the door run
        itself, so arriving agents cross into the exit cell instead of
        parking at the point just inside the room; everything else steers
        at the attractor position.
        """
        a = self.attractors[attractor_id]
        if a.kind is AttractorKind.DOOR_POINT and a.is_exit:
            portal = self.graph.portals[a.portal_id]
            s = self.grid.cell_size
            mx = sum(c[0] for c in portal.cells) / len(portal.cells)
            my = sum(c[1] for c in portal.cells) / len(portal.cells)
            return ((mx + 0.5) * s, (my + 0.5) * s)
        return a.position

    def is_blocked(self, x: int, y: int) -> bool:
        """True for wall/painting cells (label 0); doors are traversable."""
        return self.labeled.label(x, y) == WALL_LABEL

    def exit_cell_portals(self) -> dict:
        """(x, y) -> portal id for every cell of every exit portal."""
        out = {}
        for p in self.graph.portals:
            if p.is_exit:
                for cell in p.cells:
                    out[cell] = p.id
        return out


def compile_world(source, k: int = DEFAULT_PATH_ALTERNATIVES) -> CompiledWorld:
    """Run the full pipeline: parse (if needed), label, portals, attractors,
    exit routes. ``source`` is map text or an existing GridMap."""
    grid = parse_map_file(source) if isinstance(source, str) else source
    labeled = label_rooms(grid)
    graph = build_portal_graph(labeled)
    attractors = place_attractors(labeled, graph)
    for a in attractors:
        graph.room(a.room_id).attractors.append(a.id)
    path_table = precompute_exit_paths(graph, k=k) if graph.exit_portals() else PathTable(paths={})
    return CompiledWorld(
        grid=grid,
        labeled=labeled,
        graph=graph,
        attractors=attractors,
        path_table=path_table,
    )


def world_to_json(world: CompiledWorld) -> dict:
    """Compiled world as a JSON-ready dict (ints for labels, floats for meters)."""
    table = {}
    for (room_id, exit_id), routes in sorted(world.path_table.paths.items()):
        table.setdefault(str(room_id), {})[str(exit_id)] = routes
    return {
        "grid": {
            "width": world.grid.width,
            "height": world.grid.height,
            "cell_size": world.grid.cell_size,
            "cells": world.grid.rows(),
        },
        "labels": {
            "room_count": world.labeled.room_count,
            "labels": list(world.labeled.labels),
        },
        "rooms": [
            {"id": r.id, "cells": [list(c) for c in r.cells], "attractors": r.attractors}
            for r in world.graph.rooms
        ],
        "portals": [
            {
                "id": p.id,
                "cell": list(p.cell),
                "cells": [list(c) for c in p.cells],
                "room_a": p.room_a,
                "room_b": p.room_b,
                "is_exit": p.is_exit,
            }
            for p in world.graph.portals
        ],
        "attractors": [
            {
                "id": a.id,
                "kind": a.kind.value,
                "position": list(a.position),
                "room_id": a.room_id,
                "is_exit": a.is_exit,
                "portal_id": a.portal_id,
            }
            for a in world.attractors
        ],
        "path_table": table,
    }


def world_from_json(doc: dict) -> CompiledWorld:
    """Rebuild a compiled world from its JSON form (recomputes derived sides)."""
    grid_doc = doc["grid"]
    text = "\n".join(grid_doc["cells"]) + "\n"
    return compile_world(parse_grid(text, cell_size=grid_doc["cell_size"]))


def dump_world(world: CompiledWorld, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(world_to_json(world), fh, indent=2)
        fh.write("\n")
