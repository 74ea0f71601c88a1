import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from config import DEFAULT_KNOWN_CATEGORIES, TopologyConfig, WorldConfig
from errors import WorldParamsError
from graph.scene_graph import FLOOR_LEVEL, SceneGraph, make_id
from model_client import stub_embedding
from scene_schema import AreaNode, Box3D, ObjectNode, Relation, RoomMask, RoomNode, SpatialEdge, Vec2, Vec3
from streams.geometric import FREE, OCCUPIED, OccupancyGrid
from streams.topology import pair_relations
from synthetic.prng import SplitMix64

logger = logging.getLogger(__name__)

GRID_STEP = 0.05
MIN_ROOM_M = 4.0
DOOR_CLEARANCE_M = 0.6
CLUTTER_TRIES = 60

COLORS: Tuple[str, ...] = ("red", "blue", "green", "white", "black", "brown", "gray", "yellow")

LABEL_MATERIALS: Dict[str, Tuple[str, ...]] = {
    "bed": ("wooden", "metal"),
    "pillow": ("cotton", "silk"),
    "nightstand": ("wooden", "metal"),
    "lamp": ("metal", "ceramic", "glass"),
    "wardrobe": ("wooden", "lacquered"),
    "chair": ("wooden", "metal", "plastic", "leather"),
    "sofa": ("fabric", "leather"),
    "table": ("wooden", "glass", "metal"),
    "remote": ("plastic", "rubber"),
    "book": ("paperback", "hardcover"),
    "cabinet": ("wooden", "metal"),
    "tv": ("plastic", "metal"),
    "shelf": ("wooden", "metal"),
    "fridge": ("steel", "enamel"),
    "stove": ("steel", "enamel"),
    "microwave": ("steel", "plastic"),
    "sink": ("ceramic", "steel"),
    "cup": ("ceramic", "glass", "plastic"),
    "desk": ("wooden", "metal"),
    "monitor": ("plastic", "metal"),
    "plant": ("ceramic", "terracotta"),
    "toilet": ("ceramic", "porcelain"),
    "bathtub": ("ceramic", "acrylic"),
    "mirror": ("framed", "frameless"),
    "towel": ("cotton", "linen"),
    "box": ("cardboard", "plastic"),
    "basket": ("wicker", "plastic"),
    "vase": ("glass", "ceramic"),
    "bag": ("fabric", "leather"),
    "toy": ("plastic", "wooden"),
    "bottle": ("glass", "plastic"),
}

CLUTTER_SIZES: Dict[str, Vec3] = {
    "box": (0.3, 0.25, 0.25),
    "basket": (0.3, 0.3, 0.25),
    "vase": (0.15, 0.15, 0.3),
    "bag": (0.3, 0.15, 0.35),
    "toy": (0.15, 0.15, 0.15),
    "bottle": (0.1, 0.1, 0.3),
}


@dataclass(frozen=True)
class Slot:
    """
    One furnishing of a room template

    Positions are (fraction of the room extent, offset in meters) along each axis, so
    (1, -0.9) sits 0.9 m from the far wall. `on` names the supporting slot by index.
    """
    label: str
    x: Tuple[float, float]
    y: Tuple[float, float]
    size: Vec3
    area: Optional[str] = None
    on: Optional[int] = None


TEMPLATES: Dict[str, Tuple[Slot, ...]] = {
    "bedroom": (
        Slot("bed", (0, 1.0), (0, 1.4), (1.6, 2.0, 0.5)),
        Slot("pillow", (0, 1.0), (0, 0.7), (0.5, 0.35, 0.15), on=0),
        Slot("nightstand", (0, 2.3), (0, 0.5), (0.5, 0.45, 0.55)),
        Slot("lamp", (0, 2.2), (0, 0.5), (0.25, 0.25, 0.4), on=2),
        Slot("book", (0, 2.45), (0, 0.5), (0.2, 0.15, 0.04), on=2),
        Slot("wardrobe", (1, -0.9), (1, -0.4), (1.2, 0.6, 2.0)),
        Slot("chair", (1, -0.9), (0, 1.2), (0.5, 0.5, 0.9)),
    ),
    "living room": (
        Slot("sofa", (0, 1.3), (0, 0.65), (2.0, 0.9, 0.85), area="lounge area"),
        Slot("table", (0, 1.3), (0, 1.55), (1.0, 0.6, 0.45), area="lounge area"),
        Slot("remote", (0, 1.05), (0, 1.55), (0.2, 0.06, 0.03), area="lounge area", on=1),
        Slot("book", (0, 1.55), (0, 1.55), (0.2, 0.15, 0.04), area="lounge area", on=1),
        Slot("pillow", (0, 1.0), (0, 0.65), (0.45, 0.45, 0.15), area="lounge area", on=0),
        Slot("cabinet", (0, 1.3), (0, 2.65), (1.2, 0.4, 0.5), area="lounge area"),
        Slot("tv", (0, 1.3), (0, 2.65), (1.0, 0.25, 0.6), area="lounge area", on=5),
        Slot("lamp", (0, 0.3), (0, 1.7), (0.3, 0.3, 1.5), area="lounge area"),
        Slot("chair", (1, -0.8), (1, -1.4), (0.7, 0.7, 0.9), area="reading area"),
        Slot("lamp", (1, -0.4), (1, -0.4), (0.3, 0.3, 1.5), area="reading area"),
        Slot("shelf", (1, -1.9), (1, -0.25), (0.8, 0.35, 1.6), area="reading area"),
        Slot("book", (1, -1.9), (1, -0.25), (0.2, 0.15, 0.04), area="reading area", on=10),
    ),
    "kitchen": (
        Slot("fridge", (0, 0.5), (0, 0.45), (0.8, 0.7, 1.8), area="cooking area"),
        Slot("stove", (0, 1.4), (0, 0.4), (0.7, 0.6, 0.9), area="cooking area"),
        Slot("microwave", (0, 1.4), (0, 0.4), (0.5, 0.4, 0.3), area="cooking area", on=1),
        Slot("sink", (0, 2.2), (0, 0.35), (0.6, 0.5, 0.9), area="cooking area"),
        Slot("cup", (0, 2.2), (0, 0.35), (0.1, 0.1, 0.12), area="cooking area", on=3),
        Slot("table", (1, -1.2), (1, -1.2), (1.2, 0.8, 0.75), area="dining area"),
        Slot("chair", (1, -1.2), (1, -2.0), (0.5, 0.5, 0.9), area="dining area"),
        Slot("chair", (1, -1.2), (1, -0.4), (0.5, 0.5, 0.9), area="dining area"),
        Slot("cup", (1, -1.5), (1, -1.2), (0.1, 0.1, 0.12), area="dining area", on=5),
        Slot("book", (1, -0.9), (1, -1.2), (0.2, 0.15, 0.04), area="dining area", on=5),
    ),
    "office": (
        Slot("desk", (0, 1.0), (0, 0.45), (1.4, 0.7, 0.75), area="work area"),
        Slot("monitor", (0, 0.8), (0, 0.4), (0.6, 0.2, 0.4), area="work area", on=0),
        Slot("book", (0, 1.45), (0, 0.45), (0.2, 0.15, 0.04), area="work area", on=0),
        Slot("chair", (0, 1.0), (0, 1.25), (0.5, 0.5, 0.9), area="work area"),
        Slot("shelf", (1, -0.6), (1, -0.25), (0.8, 0.35, 1.6), area="storage area"),
        Slot("book", (1, -0.6), (1, -0.25), (0.2, 0.15, 0.04), area="storage area", on=4),
        Slot("cabinet", (1, -0.5), (1, -1.3), (0.8, 0.5, 1.0), area="storage area"),
        Slot("plant", (1, -1.6), (1, -0.35), (0.4, 0.4, 0.8), area="storage area"),
    ),
    "bathroom": (
        Slot("toilet", (0, 0.5), (0, 0.5), (0.4, 0.7, 0.8)),
        Slot("bathtub", (1, -1.0), (0, 0.5), (1.7, 0.8, 0.6)),
        Slot("towel", (1, -1.0), (0, 0.5), (0.4, 0.3, 0.05), on=1),
        Slot("sink", (0, 0.5), (1, -0.35), (0.6, 0.5, 0.9)),
        Slot("mirror", (0, 0.5), (1, -0.15), (0.6, 0.1, 0.8)),
        Slot("cabinet", (1, -0.5), (1, -0.3), (0.6, 0.4, 0.8)),
    ),
    "dining room": (
        Slot("table", (0.5, 0.0), (0.5, 0.0), (1.6, 0.9, 0.75)),
        Slot("chair", (0.5, -0.5), (0.5, -0.8), (0.5, 0.5, 0.9)),
        Slot("chair", (0.5, 0.5), (0.5, 0.8), (0.5, 0.5, 0.9)),
        Slot("cup", (0.5, -0.4), (0.5, 0.0), (0.1, 0.1, 0.12), on=0),
        Slot("remote", (0.5, 0.4), (0.5, 0.0), (0.2, 0.06, 0.03), on=0),
        Slot("cabinet", (0, 0.7), (1, -0.3), (1.0, 0.45, 0.9)),
        Slot("lamp", (0, 0.7), (1, -0.3), (0.25, 0.25, 0.4), on=5),
        Slot("plant", (1, -0.4), (0, 0.4), (0.4, 0.4, 0.8)),
    ),
}

# the mirror hangs above the sink
MOUNT_HEIGHTS: Dict[Tuple[str, str], float] = {("bathroom", "mirror"): 1.3}

ROOM_KINDS: Tuple[str, ...] = tuple(TEMPLATES)


def snap(value: float) -> float:
    return round(round(value / GRID_STEP) * GRID_STEP, 6)


def _fixed(values: Sequence[float]) -> Tuple[float, ...]:
    return tuple(round(float(v), 6) for v in values)


class AreaSpec(BaseModel):
    label: str
    object_ids: List[int] = Field(default_factory=list)


class RoomSpec(BaseModel):
    """Axis-aligned room interior on one floor"""
    id: int = Field(..., ge=1)
    floor_index: int = Field(..., ge=1)
    kind: str
    lo: Vec2
    hi: Vec2
    areas: List[AreaSpec] = Field(default_factory=list)

    def contains(self, x: float, y: float) -> bool:
        return self.lo[0] <= x <= self.hi[0] and self.lo[1] <= y <= self.hi[1]

    @property
    def center(self) -> Vec2:
        return ((self.lo[0] + self.hi[0]) / 2.0, (self.lo[1] + self.hi[1]) / 2.0)

    @property
    def size(self) -> Vec2:
        return (self.hi[0] - self.lo[0], self.hi[1] - self.lo[1])


class DoorSpec(BaseModel):
    """Opening in the wall slab x_lo..x_hi between two neighboring rooms"""
    floor_index: int
    rooms: Tuple[int, int]
    x_lo: float
    x_hi: float
    y_lo: float
    y_hi: float

    @property
    def center(self) -> Vec2:
        return ((self.x_lo + self.x_hi) / 2.0, (self.y_lo + self.y_hi) / 2.0)

    @property
    def width(self) -> float:
        return self.y_hi - self.y_lo


class FloorSpec(BaseModel):
    index: int = Field(..., ge=1)
    z_base: float
    room_ids: List[int]


class ObjectSpec(BaseModel):
    id: int = Field(..., ge=1)
    label: str
    known_category: bool
    color: str
    material: str
    room_id: int
    floor_index: int
    area: Optional[str] = None
    center: Vec3
    size: Vec3
    support_id: Optional[int] = None

    @property
    def description(self) -> str:
        return f"{self.color} {self.material}"

    @property
    def attributes(self) -> Tuple[str, str]:
        return (self.color, self.material)

    @property
    def box(self) -> Box3D:
        return Box3D(
            lo=_fixed(c - s / 2.0 for c, s in zip(self.center, self.size)),
            hi=_fixed(c + s / 2.0 for c, s in zip(self.center, self.size)),
        )

    def footprint(self, margin: float = 0.0) -> Tuple[float, float, float, float]:
        hx, hy = self.size[0] / 2.0 + margin, self.size[1] / 2.0 + margin
        return (self.center[0] - hx, self.center[1] - hy, self.center[0] + hx, self.center[1] + hy)


class TruthRelation(BaseModel):
    src: int
    relation: Relation
    dst: int


class WorldSpec(BaseModel):
    """A generated building: floors of rooms in a strip, doors, furnishings and their relations"""
    seed: int
    wall_m: float
    floor_height_m: float
    extent: Vec2
    floors: List[FloorSpec]
    rooms: List[RoomSpec]
    doors: List[DoorSpec]
    objects: List[ObjectSpec]
    relations: List[TruthRelation] = Field(default_factory=list)

    @model_validator(mode="after")
    def check_layout(self) -> "WorldSpec":
        by_floor: Dict[int, List[RoomSpec]] = {}
        for room in self.rooms:
            by_floor.setdefault(room.floor_index, []).append(room)
        for rooms in by_floor.values():
            for i, a in enumerate(rooms):
                for b in rooms[i + 1:]:
                    dx = min(a.hi[0], b.hi[0]) - max(a.lo[0], b.lo[0])
                    dy = min(a.hi[1], b.hi[1]) - max(a.lo[1], b.lo[1])
                    if dx > 0 and dy > 0:
                        raise ValueError(f"rooms {a.id} and {b.id} overlap")
        for obj in self.objects:
            holders = [r.id for r in by_floor.get(obj.floor_index, []) if r.contains(obj.center[0], obj.center[1])]
            if holders != [obj.room_id]:
                raise ValueError(f"object {obj.id} lies in rooms {holders}, expected [{obj.room_id}]")
        return self

    def room(self, room_id: int) -> RoomSpec:
        for room in self.rooms:
            if room.id == room_id:
                return room
        raise KeyError(room_id)

    def rooms_on_floor(self, floor_index: int) -> List[RoomSpec]:
        return [r for r in self.rooms if r.floor_index == floor_index]

    def objects_on_floor(self, floor_index: int) -> List[ObjectSpec]:
        return [o for o in self.objects if o.floor_index == floor_index]

    def object(self, object_id: int) -> ObjectSpec:
        return self.objects[object_id - 1]

    def floor(self, floor_index: int) -> FloorSpec:
        return self.floors[floor_index - 1]

    def doors_on_floor(self, floor_index: int) -> List[DoorSpec]:
        return [d for d in self.doors if d.floor_index == floor_index]


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _check_params(cfg: WorldConfig) -> None:
    if cfg.room_min_m < MIN_ROOM_M:
        raise WorldParamsError(f"rooms need at least {MIN_ROOM_M} m for their furnishings, got {cfg.room_min_m}")
    if cfg.door_min_m < 2 * GRID_STEP:
        raise WorldParamsError(f"doors narrower than {2 * GRID_STEP} m cannot be rasterized")
    if cfg.door_max_m > cfg.room_min_m - 2 * DOOR_CLEARANCE_M:
        raise WorldParamsError(f"door width {cfg.door_max_m} does not fit a {cfg.room_min_m} m wall")
    unknown = [kind for kind in cfg.room_kinds if kind not in TEMPLATES]
    if unknown:
        raise WorldParamsError(f"unknown room kinds {unknown}; known: {', '.join(ROOM_KINDS)}")


def _floor_kinds(rng: SplitMix64, cfg: WorldConfig) -> List[str]:
    if cfg.room_kinds:
        return [cfg.room_kinds[i % len(cfg.room_kinds)] for i in range(cfg.rooms_per_floor)]
    pool = list(ROOM_KINDS)
    rng.shuffle(pool)
    return [pool[i % len(pool)] for i in range(cfg.rooms_per_floor)]


def _furnish(
    rng: SplitMix64,
    room: RoomSpec,
    z_base: float,
    next_id: int,
    known: Sequence[str],
) -> List[ObjectSpec]:
    width, depth = room.size
    placed: List[ObjectSpec] = []
    for slot in TEMPLATES[room.kind]:
        x = room.lo[0] + slot.x[0] * width + slot.x[1]
        y = room.lo[1] + slot.y[0] * depth + slot.y[1]
        support = placed[slot.on] if slot.on is not None else None
        if support is not None:
            base = support.center[2] + support.size[2] / 2.0
        else:
            base = z_base + MOUNT_HEIGHTS.get((room.kind, slot.label), 0.0)
        placed.append(
            ObjectSpec(
                id=next_id + len(placed),
                label=slot.label,
                known_category=slot.label in known,
                color=rng.choice(COLORS),
                material=rng.choice(LABEL_MATERIALS[slot.label]),
                room_id=room.id,
                floor_index=room.floor_index,
                area=slot.area,
                center=_fixed((x, y, base + slot.size[2] / 2.0)),
                size=slot.size,
                support_id=support.id if support is not None else None,
            )
        )
    return placed


def _overlaps(a: Tuple[float, float, float, float], b: Tuple[float, float, float, float]) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def _scatter(
    rng: SplitMix64,
    room: RoomSpec,
    z_base: float,
    count: int,
    taken: List[ObjectSpec],
    next_id: int,
    known: Sequence[str],
) -> List[ObjectSpec]:
    """Floor-standing clutter on free spots of a room; spots that cannot be found are skipped"""
    footprints = [obj.footprint(0.05) for obj in taken]
    labels = sorted(CLUTTER_SIZES)
    scattered: List[ObjectSpec] = []
    for _ in range(count):
        label = rng.choice(labels)
        size = CLUTTER_SIZES[label]
        color, material = rng.choice(COLORS), rng.choice(LABEL_MATERIALS[label])
        for _ in range(CLUTTER_TRIES):
            x = snap(rng.uniform(room.lo[0] + size[0] / 2 + 0.1, room.hi[0] - size[0] / 2 - 0.1))
            y = snap(rng.uniform(room.lo[1] + size[1] / 2 + 0.1, room.hi[1] - size[1] / 2 - 0.1))
            box = (x - size[0] / 2, y - size[1] / 2, x + size[0] / 2, y + size[1] / 2)
            if any(_overlaps(box, other) for other in footprints):
                continue
            footprints.append((box[0] - 0.05, box[1] - 0.05, box[2] + 0.05, box[3] + 0.05))
            scattered.append(
                ObjectSpec(
                    id=next_id + len(scattered),
                    label=label,
                    known_category=label in known,
                    color=color,
                    material=material,
                    room_id=room.id,
                    floor_index=room.floor_index,
                    center=_fixed((x, y, z_base + size[2] / 2.0)),
                    size=size,
                )
            )
            break
        else:
            logger.debug(f"Room {room.id}: no free spot for a {label}, skipped")
    return scattered


def _proxy(obj: ObjectSpec) -> ObjectNode:
    return ObjectNode(
        id=obj.id,
        label=obj.label,
        embedding=(1.0,),
        centroid=obj.center,
        bbox3d=obj.box,
        floor_id=obj.floor_index,
    )


def truth_relations(objects: Sequence[ObjectSpec], cfg: Optional[TopologyConfig] = None) -> List[TruthRelation]:
    """Geometric relation rules over every pair of objects sharing a room"""
    cfg = cfg or TopologyConfig()
    by_room: Dict[int, List[ObjectSpec]] = {}
    for obj in objects:
        by_room.setdefault(obj.room_id, []).append(obj)
    relations: List[TruthRelation] = []
    for room_id in sorted(by_room):
        members = [_proxy(obj) for obj in sorted(by_room[room_id], key=lambda o: o.id)]
        for i, first in enumerate(members):
            for second in members[i + 1:]:
                for edge in pair_relations(first, second, cfg):
                    relations.append(TruthRelation(src=edge.src_object_id, relation=edge.relation, dst=edge.dst_object_id))
    return relations


def generate_world(cfg: WorldConfig) -> WorldSpec:
    """
    Generate a furnished multi-floor building from a seed

    Every floor repeats the same strip of rooms along x, joined by one door per shared
    wall; room kinds, door positions, attributes and clutter are drawn per floor.

    Args:
        cfg: World size parameters

    Returns:
        A validated WorldSpec

    Raises:
        WorldParamsError: when the parameters cannot produce a furnished world
    """
    _check_params(cfg)
    rng = SplitMix64(cfg.seed)
    layout = rng.fork("layout")
    wall = snap(cfg.wall_m)
    depth = snap(layout.uniform(cfg.room_min_m, cfg.room_max_m))
    widths = [snap(layout.uniform(cfg.room_min_m, cfg.room_max_m)) for _ in range(cfg.rooms_per_floor)]
    starts: List[float] = []
    cursor = wall
    for width in widths:
        starts.append(round(cursor, 6))
        cursor = round(cursor + width + wall, 6)
    extent = (cursor, round(depth + 2 * wall, 6))
    known = DEFAULT_KNOWN_CATEGORIES

    floors: List[FloorSpec] = []
    rooms: List[RoomSpec] = []
    doors: List[DoorSpec] = []
    objects: List[ObjectSpec] = []
    for floor_index in range(1, cfg.floors + 1):
        floor_rng = rng.fork(f"floor-{floor_index}")
        z_base = round((floor_index - 1) * cfg.floor_height_m, 6)
        kinds = _floor_kinds(floor_rng, cfg)
        floor_rooms = []
        for start, width, kind in zip(starts, widths, kinds):
            room = RoomSpec(
                id=len(rooms) + 1,
                floor_index=floor_index,
                kind=kind,
                lo=(start, wall),
                hi=(round(start + width, 6), round(wall + depth, 6)),
            )
            rooms.append(room)
            floor_rooms.append(room)

        for left, right in zip(floor_rooms, floor_rooms[1:]):
            door_width = snap(floor_rng.uniform(cfg.door_min_m, cfg.door_max_m))
            mid = wall + depth / 2.0
            y_lo = snap(floor_rng.uniform(mid - 0.5, mid + 0.5) - door_width / 2.0)
            y_lo = min(max(y_lo, wall + DOOR_CLEARANCE_M), wall + depth - DOOR_CLEARANCE_M - door_width)
            doors.append(
                DoorSpec(
                    floor_index=floor_index,
                    rooms=(left.id, right.id),
                    x_lo=left.hi[0],
                    x_hi=right.lo[0],
                    y_lo=round(y_lo, 6),
                    y_hi=round(y_lo + door_width, 6),
                )
            )

        for room in floor_rooms:
            furnished = _furnish(floor_rng, room, z_base, len(objects) + 1, known)
            objects.extend(furnished)
            if cfg.clutter_per_room:
                objects.extend(_scatter(floor_rng, room, z_base, cfg.clutter_per_room, furnished, len(objects) + 1, known))
            for label in dict.fromkeys(slot.area for slot in TEMPLATES[room.kind] if slot.area):
                members = [o.id for o in furnished if o.area == label]
                room.areas.append(AreaSpec(label=label, object_ids=members))
        floors.append(FloorSpec(index=floor_index, z_base=z_base, room_ids=[r.id for r in floor_rooms]))

    world = WorldSpec(
        seed=cfg.seed,
        wall_m=wall,
        floor_height_m=cfg.floor_height_m,
        extent=extent,
        floors=floors,
        rooms=rooms,
        doors=doors,
        objects=objects,
        relations=truth_relations(objects),
    )
    logger.info(
        f"World seed {cfg.seed}: {len(floors)} floors, {len(rooms)} rooms, "
        f"{len(objects)} objects, {len(world.relations)} relations"
    )
    return world


# ---------------------------------------------------------------------------
# Derived views of a world
# ---------------------------------------------------------------------------

def wall_boxes(world: WorldSpec, floor_index: int) -> np.ndarray:
    """Wall slabs of one floor as rows (x0, y0, x1, y1); door openings are left out"""
    width, height = world.extent
    t = world.wall_m
    boxes = [
        (0.0, 0.0, width, t),
        (0.0, height - t, width, height),
        (0.0, 0.0, t, height),
        (width - t, 0.0, width, height),
    ]
    for door in world.doors_on_floor(floor_index):
        boxes.append((door.x_lo, t, door.x_hi, door.y_lo))
        boxes.append((door.x_lo, door.y_hi, door.x_hi, height - t))
    return np.array(boxes, dtype=np.float64)


def _cells(lo: float, hi: float, origin: float, resolution: float) -> Tuple[int, int]:
    return int(round((lo - origin) / resolution)), int(round((hi - origin) / resolution))


def room_mask(room: RoomSpec, resolution: float = GRID_STEP) -> RoomMask:
    c0, c1 = _cells(room.lo[0], room.hi[0], 0.0, resolution)
    r0, r1 = _cells(room.lo[1], room.hi[1], 0.0, resolution)
    cells = np.ones((r1 - r0, c1 - c0), dtype=bool)
    return RoomMask.from_array(cells, (c0 * resolution, r0 * resolution), resolution)


def world_occupancy(world: WorldSpec, floor_index: int, resolution: float = GRID_STEP) -> OccupancyGrid:
    """Rasterized truth: walls occupied, room interiors and door passages free"""
    pad = 2
    origin = (-pad * resolution, -pad * resolution)
    cols = int(round(world.extent[0] / resolution)) + 2 * pad
    rows = int(round(world.extent[1] / resolution)) + 2 * pad
    grid = OccupancyGrid(make_id(FLOOR_LEVEL, floor_index), resolution, origin, (rows, cols))

    def paint(x0: float, y0: float, x1: float, y1: float, value: int) -> None:
        c0, c1 = _cells(x0, x1, origin[0], resolution)
        r0, r1 = _cells(y0, y1, origin[1], resolution)
        grid.cells[r0:r1, c0:c1] = value

    for box in wall_boxes(world, floor_index):
        paint(*box, OCCUPIED)
    for room in world.rooms_on_floor(floor_index):
        paint(room.lo[0], room.lo[1], room.hi[0], room.hi[1], FREE)
    for door in world.doors_on_floor(floor_index):
        paint(door.x_lo, door.y_lo, door.x_hi, door.y_hi, FREE)
    return grid


def world_to_graph(
    world: WorldSpec,
    embedding_dim: int = 512,
    resolution: float = GRID_STEP,
    with_areas: bool = True,
) -> Tuple[SceneGraph, Dict[int, int]]:
    """
    Scene graph built straight from truth

    Rooms are labeled with their kind and areas with their functional label; object
    descriptions are the attribute tags, so stub similarities follow the tokens exactly.

    Returns:
        (graph, truth object id -> graph object id)
    """
    graph = SceneGraph(embedding_dim=embedding_dim, known_categories=DEFAULT_KNOWN_CATEGORIES, grid_resolution_m=resolution)
    floor_ids: Dict[int, int] = {}
    room_ids: Dict[int, int] = {}
    for floor in world.floors:
        node = graph.add_floor(floor.index, floor.z_base, floor.z_base + world.floor_height_m)
        floor_ids[floor.index] = node.id
        rooms = world.rooms_on_floor(floor.index)
        created = graph.set_floor_rooms(
            node.id,
            [RoomNode(id=0, floor_id=node.id, mask=room_mask(room, resolution), label=room.kind) for room in rooms],
        )
        room_ids.update(zip((room.id for room in rooms), created))

    id_map: Dict[int, int] = {}
    for obj in world.objects:
        node = ObjectNode(
            label=obj.label,
            is_open_vocab=not obj.known_category,
            embedding=tuple(float(v) for v in stub_embedding(f"{obj.description} {obj.label}", embedding_dim)),
            description=obj.description,
            centroid=obj.center,
            bbox3d=obj.box,
            room_id=room_ids[obj.room_id],
            floor_id=floor_ids[obj.floor_index],
        )
        id_map[obj.id] = graph.upsert_object(node)

    if with_areas:
        for room in world.rooms:
            areas = []
            for area in room.areas:
                if not area.object_ids:
                    continue
                points = np.array([world.object(oid).center[:2] for oid in area.object_ids])
                areas.append(
                    AreaNode(
                        id=0,
                        room_id=room_ids[room.id],
                        label=area.label,
                        object_ids=tuple(id_map[oid] for oid in area.object_ids),
                        centroid=_fixed(points.mean(axis=0)),
                    )
                )
            if areas:
                graph.set_room_areas(room_ids[room.id], areas)

    graph.add_edges(
        SpatialEdge(src_object_id=id_map[r.src], dst_object_id=id_map[r.dst], relation=r.relation, confidence=1.0)
        for r in world.relations
    )
    logger.info(f"Truth graph for seed {world.seed}: {graph.snapshot().counts()}")
    return graph, id_map


def floor_of_z(world: WorldSpec, z: float) -> Optional[int]:
    for floor in world.floors:
        if floor.z_base <= z < floor.z_base + world.floor_height_m:
            return floor.index
    return None


def camera_height(world: WorldSpec, floor_index: int, eye_m: float = 1.2) -> float:
    return round(world.floor(floor_index).z_base + eye_m, 6)


def distance_xy(a: Sequence[float], b: Sequence[float]) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])
