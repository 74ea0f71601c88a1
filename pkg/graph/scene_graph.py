import logging
import threading
from datetime import datetime, timezone
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np

from errors import GraphInvariantError, UnknownNodeError
from scene_schema import (
    SYMMETRIC_RELATIONS,
    UNASSIGNED,
    AreaNode,
    FloorNode,
    ObjectNode,
    Relation,
    RoomNode,
    SpatialEdge,
)
from utils.geometry import mask_overlap

logger = logging.getLogger(__name__)

FLOOR_LEVEL, ROOM_LEVEL, AREA_LEVEL, OBJECT_LEVEL = 1, 2, 3, 4
LEVEL_NAMES = {FLOOR_LEVEL: "floor", ROOM_LEVEL: "room", AREA_LEVEL: "area", OBJECT_LEVEL: "object"}
ID_STRIDE = 10 ** 12

EdgeKey = Tuple[int, int, Relation]
Node = Union[FloorNode, RoomNode, AreaNode, ObjectNode]


def make_id(level: int, counter: int) -> int:
    return level * ID_STRIDE + counter


def level_of(node_id: int) -> int:
    return int(node_id) // ID_STRIDE


def normalize_edge(edge: SpatialEdge) -> SpatialEdge:
    """Symmetric relations are stored once, with the lower id as source"""
    if edge.relation in SYMMETRIC_RELATIONS and edge.src_object_id > edge.dst_object_id:
        return edge.model_copy(update={"src_object_id": edge.dst_object_id, "dst_object_id": edge.src_object_id})
    return edge


@dataclass(frozen=True)
class GraphView:
    """
    Immutable read view of the scene graph at one revision

    The dicts are never mutated after construction; writers build a new view.
    """
    revision: int = 0
    embedding_dim: int = 512
    floors: Dict[int, FloorNode] = field(default_factory=dict)
    rooms: Dict[int, RoomNode] = field(default_factory=dict)
    areas: Dict[int, AreaNode] = field(default_factory=dict)
    objects: Dict[int, ObjectNode] = field(default_factory=dict)
    edges: Dict[EdgeKey, SpatialEdge] = field(default_factory=dict)
    tombstones: FrozenSet[int] = frozenset()
    counters: Tuple[int, int, int, int] = (0, 0, 0, 0)

    def get(self, node_id: int) -> Node:
        table = {
            FLOOR_LEVEL: self.floors,
            ROOM_LEVEL: self.rooms,
            AREA_LEVEL: self.areas,
            OBJECT_LEVEL: self.objects,
        }.get(level_of(node_id))
        if table is None or node_id not in table:
            raise UnknownNodeError(node_id)
        return table[node_id]

    def get_object(self, object_id: int) -> ObjectNode:
        if object_id not in self.objects:
            raise UnknownNodeError(object_id)
        return self.objects[object_id]

    def floor_by_index(self, index: int) -> Optional[FloorNode]:
        for floor in self.floors.values():
            if floor.index == index:
                return floor
        return None

    def floor_of(self, node: Union[RoomNode, AreaNode, ObjectNode]) -> FloorNode:
        if isinstance(node, AreaNode):
            node = self.rooms[node.room_id]
        return self.floors[node.floor_id]

    def rooms_on_floor(self, floor_id: int) -> List[RoomNode]:
        return [self.rooms[rid] for rid in sorted(self.rooms) if self.rooms[rid].floor_id == floor_id]

    def objects_on_floor(self, floor_id: int) -> List[ObjectNode]:
        return [self.objects[oid] for oid in sorted(self.objects) if self.objects[oid].floor_id == floor_id]

    def objects_in_room(self, room_id: int) -> List[ObjectNode]:
        return [self.objects[oid] for oid in sorted(self.objects) if self.objects[oid].room_id == room_id]

    def room_of(self, obj: ObjectNode) -> Optional[RoomNode]:
        if obj.room_id == UNASSIGNED:
            return None
        return self.rooms.get(obj.room_id)

    def area_of(self, obj: ObjectNode) -> Optional[AreaNode]:
        if obj.area_id is None:
            return None
        return self.areas.get(obj.area_id)

    @cached_property
    def adjacency(self) -> Dict[int, List[Tuple[Relation, int, float]]]:
        """Outgoing (relation, other, confidence) per object; symmetric edges appear at both ends"""
        table: Dict[int, List[Tuple[Relation, int, float]]] = {}
        for key in sorted(self.edges, key=lambda k: (k[0], k[1], k[2].value)):
            edge = self.edges[key]
            table.setdefault(edge.src_object_id, []).append((edge.relation, edge.dst_object_id, edge.confidence))
            if edge.relation in SYMMETRIC_RELATIONS:
                table.setdefault(edge.dst_object_id, []).append((edge.relation, edge.src_object_id, edge.confidence))
        return table

    def neighbors(self, object_id: int, relation: Optional[Relation] = None) -> List[Tuple[int, float]]:
        return [
            (other, conf)
            for rel, other, conf in self.adjacency.get(object_id, ())
            if relation is None or rel == relation
        ]

    def edges_from(self, object_id: int, relation: Optional[Relation] = None) -> List[SpatialEdge]:
        found = []
        for edge in self.edges.values():
            if relation is not None and edge.relation != relation:
                continue
            if edge.src_object_id == object_id or (
                edge.relation in SYMMETRIC_RELATIONS and edge.dst_object_id == object_id
            ):
                found.append(edge)
        return sorted(found, key=lambda e: (e.src_object_id, e.dst_object_id, e.relation.value))

    def counts(self) -> Dict[str, int]:
        return {
            "floors": len(self.floors),
            "rooms": len(self.rooms),
            "areas": len(self.areas),
            "objects": len(self.objects),
            "edges": len(self.edges),
        }


def validate_graph(view: GraphView) -> List[str]:
    """
    Full-graph invariant check

    Returns:
        One "[invariant] detail" line per violation; empty when the graph is consistent
    """
    problems: List[str] = []
    live_ids = set(view.floors) | set(view.rooms) | set(view.areas) | set(view.objects)
    for node_id in sorted(live_ids & view.tombstones):
        problems.append(f"[id-not-retired] live node {node_id} is tombstoned")
    for node_id in sorted(live_ids):
        level = level_of(node_id)
        if node_id - make_id(level, 0) > view.counters[level - 1]:
            problems.append(f"[id-counter] {node_id} beyond the {LEVEL_NAMES.get(level, '?')} counter")

    floors = sorted(view.floors.values(), key=lambda f: f.z_min)
    for lower, upper in zip(floors, floors[1:]):
        if lower.z_max > upper.z_min:
            problems.append(f"[floor-bands-disjoint] floors {lower.id} and {upper.id} overlap")

    for room in view.rooms.values():
        if room.floor_id not in view.floors:
            problems.append(f"[room-floor-exists] room {room.id} on missing floor {room.floor_id}")
        for area_id in room.area_ids:
            if area_id not in view.areas or view.areas[area_id].room_id != room.id:
                problems.append(f"[room-area-link] room {room.id} lists area {area_id}")
    by_floor: Dict[int, List[RoomNode]] = {}
    for room in view.rooms.values():
        by_floor.setdefault(room.floor_id, []).append(room)
    for rooms in by_floor.values():
        rooms.sort(key=lambda r: r.id)
        for i, first in enumerate(rooms):
            for second in rooms[i + 1:]:
                if mask_overlap(first.mask, second.mask) > 0:
                    problems.append(f"[room-masks-disjoint] rooms {first.id} and {second.id} overlap")

    for area in view.areas.values():
        if area.room_id not in view.rooms:
            problems.append(f"[area-room-exists] area {area.id} in missing room {area.room_id}")
        if not area.object_ids:
            problems.append(f"[area-non-empty] area {area.id} has no objects")
        for object_id in area.object_ids:
            obj = view.objects.get(object_id)
            if obj is None or obj.room_id != area.room_id or obj.area_id != area.id:
                problems.append(f"[area-members-in-room] area {area.id} member {object_id}")

    for obj in view.objects.values():
        norm = float(np.linalg.norm(obj.embedding))
        if len(obj.embedding) != view.embedding_dim:
            problems.append(f"[embedding-dimension] object {obj.id} has dimension {len(obj.embedding)}")
        if abs(norm - 1.0) > 1e-6:
            problems.append(f"[embedding-unit-norm] object {obj.id} norm {norm:.6f}")
        if not obj.bbox3d.contains(obj.centroid, tol=1e-6):
            problems.append(f"[bbox-contains-centroid] object {obj.id}")
        if obj.floor_id not in view.floors:
            problems.append(f"[object-floor-exists] object {obj.id} on missing floor {obj.floor_id}")
        if obj.room_id != UNASSIGNED and obj.room_id not in view.rooms:
            problems.append(f"[object-room-exists] object {obj.id} in missing room {obj.room_id}")
        if obj.area_id is not None:
            area = view.areas.get(obj.area_id)
            if area is None or obj.id not in area.object_ids:
                problems.append(f"[object-area-link] object {obj.id} claims area {obj.area_id}")

    for key, edge in view.edges.items():
        if key != edge.key:
            problems.append(f"[edge-key] edge stored under {key}")
        if edge.src_object_id not in view.objects or edge.dst_object_id not in view.objects:
            problems.append(f"[edge-endpoints-exist] edge {edge.key}")
        if edge.relation in SYMMETRIC_RELATIONS and edge.src_object_id > edge.dst_object_id:
            problems.append(f"[edge-symmetric-order] edge {edge.key}")
    return problems


class SceneGraph:
    """
    Single-writer store for the Floor/Room/Area/Object hierarchy

    Every mutation builds a new GraphView under the writer lock, so a snapshot is just
    the current view and can be handed to any number of readers.
    """

    def __init__(
        self,
        embedding_dim: int = 512,
        known_categories: Sequence[str] = (),
        grid_resolution_m: float = 0.05,
        view: Optional[GraphView] = None,
        created_at: Optional[str] = None,
    ):
        self._lock = threading.RLock()
        self._view = view if view is not None else GraphView(embedding_dim=embedding_dim)
        self.known_categories: Tuple[str, ...] = tuple(known_categories)
        self.grid_resolution_m = grid_resolution_m
        self.created_at = created_at or datetime.now(timezone.utc).isoformat(timespec="seconds")

    @property
    def revision(self) -> int:
        return self._view.revision

    @property
    def embedding_dim(self) -> int:
        return self._view.embedding_dim

    def snapshot(self) -> GraphView:
        with self._lock:
            return self._view

    # -- internals ---------------------------------------------------------

    def _commit(self, **changes) -> GraphView:
        self._view = replace(self._view, revision=self._view.revision + 1, **changes)
        return self._view

    @staticmethod
    def _claim_id(counters: List[int], tombstones: FrozenSet[int], level: int, node_id: int) -> int:
        if node_id == 0:
            counters[level - 1] += 1
            return make_id(level, counters[level - 1])
        if level_of(node_id) != level:
            raise GraphInvariantError("id-level", f"id {node_id} is not a {LEVEL_NAMES[level]} id")
        if node_id in tombstones:
            raise GraphInvariantError("id-not-retired", f"id {node_id} was retired")
        counters[level - 1] = max(counters[level - 1], node_id - make_id(level, 0))
        return node_id

    def _check_object(self, view: GraphView, node: ObjectNode) -> None:
        if len(node.embedding) != view.embedding_dim:
            raise GraphInvariantError(
                "embedding-dimension", f"embedding has {len(node.embedding)} dims, map uses {view.embedding_dim}"
            )
        norm = float(np.linalg.norm(node.embedding))
        if abs(norm - 1.0) > 1e-6:
            raise GraphInvariantError("embedding-unit-norm", f"|embedding| = {norm:.6f}")
        if not node.bbox3d.contains(node.centroid, tol=1e-6):
            raise GraphInvariantError("bbox-contains-centroid", f"centroid {node.centroid} outside bbox3d")
        if node.observation_count < 1:
            raise GraphInvariantError("observation-count", "observation_count must be >= 1")
        if node.floor_id not in view.floors:
            raise GraphInvariantError("object-floor-exists", f"floor {node.floor_id} does not exist")
        if node.room_id != UNASSIGNED and node.room_id not in view.rooms:
            raise GraphInvariantError("object-room-exists", f"room {node.room_id} does not exist")
        if node.area_id is not None:
            area = view.areas.get(node.area_id)
            if area is None or node.id not in area.object_ids or area.room_id != node.room_id:
                raise GraphInvariantError("object-area-link", f"object {node.id} is not a member of area {node.area_id}")

    @staticmethod
    def _drop_member(
        areas: Dict[int, AreaNode],
        rooms: Dict[int, RoomNode],
        tombstones: Set[int],
        area_id: int,
        object_id: int,
    ) -> None:
        area = areas.get(area_id)
        if area is None:
            return
        remaining = tuple(oid for oid in area.object_ids if oid != object_id)
        if remaining:
            areas[area_id] = area.model_copy(update={"object_ids": remaining})
            return
        del areas[area_id]
        tombstones.add(area_id)
        room = rooms.get(area.room_id)
        if room is not None:
            rooms[room.id] = room.model_copy(update={"area_ids": tuple(a for a in room.area_ids if a != area_id)})
        logger.debug(f"Area {area_id} retired after losing its last member {object_id}")

    # -- floors ------------------------------------------------------------

    def add_floor(self, index: int, z_min: float, z_max: float) -> FloorNode:
        with self._lock:
            view = self._view
            for floor in view.floors.values():
                if z_min < floor.z_max and floor.z_min < z_max:
                    raise GraphInvariantError(
                        "floor-bands-disjoint",
                        f"band [{z_min:.2f}, {z_max:.2f}] overlaps floor {floor.id} [{floor.z_min:.2f}, {floor.z_max:.2f}]",
                    )
            counters = list(view.counters)
            floor_id = self._claim_id(counters, view.tombstones, FLOOR_LEVEL, 0)
            floor = FloorNode(id=floor_id, index=index, z_min=z_min, z_max=z_max)
            self._commit(floors={**view.floors, floor_id: floor}, counters=tuple(counters))
            logger.info(f"Floor {index} created as {floor_id} with band [{z_min:.2f}, {z_max:.2f}]")
            return floor

    # -- objects -----------------------------------------------------------

    def upsert_object(self, node: ObjectNode) -> int:
        """
        Insert a new object (id 0) or replace an existing one by id

        Returns:
            The object's id

        Raises:
            GraphInvariantError: naming the violated invariant
        """
        with self._lock:
            view = self._view
            counters = list(view.counters)
            existing = view.objects.get(node.id)
            if existing is None:
                object_id = self._claim_id(counters, view.tombstones, OBJECT_LEVEL, node.id)
                node = node.model_copy(update={"id": object_id})
            elif existing == node:
                return node.id
            self._check_object(view, node)
            self._commit(objects={**view.objects, node.id: node}, counters=tuple(counters))
            return node.id

    def update_description(self, object_id: int, description: str) -> ObjectNode:
        with self._lock:
            view = self._view
            node = view.get_object(object_id)
            if node.description == description:
                return node
            updated = node.model_copy(update={"description": description})
            self._commit(objects={**view.objects, object_id: updated})
            return updated

    def merge_objects(self, survivor_id: int, victim_id: int, merged_fields: Mapping[str, object]) -> ObjectNode:
        """
        Fold victim into survivor and retire the victim id

        Args:
            survivor_id: Object that keeps its id
            victim_id: Object that disappears
            merged_fields: Field values computed by association (centroid, bbox3d, ...)

        Returns:
            The updated survivor
        """
        with self._lock:
            view = self._view
            if survivor_id == victim_id:
                raise GraphInvariantError("distinct-merge-ids", f"cannot merge {survivor_id} into itself")
            survivor = view.get_object(survivor_id)
            victim = view.get_object(victim_id)
            update = {k: v for k, v in merged_fields.items() if k not in ("id", "observation_count")}
            update["observation_count"] = survivor.observation_count + victim.observation_count
            merged = ObjectNode.model_validate({**survivor.model_dump(), **update})

            objects = dict(view.objects)
            areas = dict(view.areas)
            rooms = dict(view.rooms)
            tombstones = set(view.tombstones)
            del objects[victim_id]
            if victim.area_id is not None:
                self._drop_member(areas, rooms, tombstones, victim.area_id, victim_id)
            if merged.area_id is not None and merged.area_id not in areas:
                merged = merged.model_copy(update={"area_id": None})
            objects[survivor_id] = merged
            tombstones.add(victim_id)

            edges: Dict[EdgeKey, SpatialEdge] = {}
            for edge in view.edges.values():
                src = survivor_id if edge.src_object_id == victim_id else edge.src_object_id
                dst = survivor_id if edge.dst_object_id == victim_id else edge.dst_object_id
                if src == dst:
                    continue
                rewired = normalize_edge(edge.model_copy(update={"src_object_id": src, "dst_object_id": dst}))
                current = edges.get(rewired.key)
                if current is None or rewired.confidence > current.confidence:
                    edges[rewired.key] = rewired

            interim = replace(view, objects=objects, areas=areas, rooms=rooms)
            self._check_object(interim, merged)
            self._commit(objects=objects, areas=areas, rooms=rooms, edges=edges, tombstones=frozenset(tombstones))
            logger.debug(f"Merged object {victim_id} into {survivor_id} (count {merged.observation_count})")
            return merged

    def reassign_objects_to_rooms(self) -> int:
        """
        Point-in-mask room assignment on each object's own floor

        Returns:
            Number of objects whose room_id changed
        """
        with self._lock:
            view = self._view
            by_floor: Dict[int, List[RoomNode]] = {}
            for room_id in sorted(view.rooms):
                room = view.rooms[room_id]
                by_floor.setdefault(room.floor_id, []).append(room)
            objects = dict(view.objects)
            areas = dict(view.areas)
            rooms = dict(view.rooms)
            tombstones = set(view.tombstones)
            changed = 0
            for object_id in sorted(objects):
                obj = objects[object_id]
                target = UNASSIGNED
                for room in by_floor.get(obj.floor_id, ()):
                    if room.mask.contains(obj.centroid[0], obj.centroid[1]):
                        target = room.id
                        break
                if target == obj.room_id:
                    continue
                changed += 1
                update = {"room_id": target}
                if obj.area_id is not None:
                    self._drop_member(areas, rooms, tombstones, obj.area_id, object_id)
                    update["area_id"] = None
                objects[object_id] = obj.model_copy(update=update)
            if changed:
                self._commit(objects=objects, areas=areas, rooms=rooms, tombstones=frozenset(tombstones))
                logger.info(f"Re-assigned {changed} objects to rooms")
            return changed

    # -- rooms -------------------------------------------------------------

    def set_floor_rooms(self, floor_id: int, rooms: Sequence[RoomNode]) -> List[int]:
        """
        Replace the room set of one floor in a single revision

        Rooms with id 0 are created, known ids are updated in place (their areas are kept),
        and rooms of this floor missing from `rooms` are retired.

        Returns:
            Room ids in input order
        """
        with self._lock:
            view = self._view
            if floor_id not in view.floors:
                raise UnknownNodeError(floor_id)
            counters = list(view.counters)
            new_rooms = dict(view.rooms)
            ids: List[int] = []
            for room in rooms:
                if room.floor_id != floor_id:
                    raise GraphInvariantError("room-floor-exists", f"room for floor {room.floor_id} passed to floor {floor_id}")
                existing = view.rooms.get(room.id)
                if existing is not None:
                    if existing.floor_id != floor_id:
                        raise GraphInvariantError("room-floor-exists", f"room {room.id} lives on floor {existing.floor_id}")
                    room = room.model_copy(update={"area_ids": existing.area_ids})
                else:
                    room_id = self._claim_id(counters, view.tombstones, ROOM_LEVEL, room.id)
                    room = room.model_copy(update={"id": room_id, "area_ids": ()})
                new_rooms[room.id] = room
                ids.append(room.id)
            if len(set(ids)) != len(ids):
                raise GraphInvariantError("room-ids-unique", "a room id appears twice")
            for i, first in enumerate(ids):
                for second in ids[i + 1:]:
                    if mask_overlap(new_rooms[first].mask, new_rooms[second].mask) > 0:
                        raise GraphInvariantError("room-masks-disjoint", f"rooms {first} and {second} overlap")

            retired = [rid for rid, r in view.rooms.items() if r.floor_id == floor_id and rid not in set(ids)]
            objects = dict(view.objects)
            areas = dict(view.areas)
            tombstones = set(view.tombstones)
            for room_id in retired:
                for area_id in new_rooms[room_id].area_ids:
                    areas.pop(area_id, None)
                    tombstones.add(area_id)
                del new_rooms[room_id]
                tombstones.add(room_id)
            if retired:
                for object_id, obj in view.objects.items():
                    if obj.room_id in retired:
                        objects[object_id] = obj.model_copy(update={"room_id": UNASSIGNED, "area_id": None})

            if new_rooms == view.rooms and not retired:
                return ids
            self._commit(
                rooms=new_rooms, objects=objects, areas=areas,
                tombstones=frozenset(tombstones), counters=tuple(counters),
            )
            return ids

    def upsert_room(self, room: RoomNode) -> int:
        with self._lock:
            others = [r for r in self._view.rooms_on_floor(room.floor_id) if r.id != room.id]
            return self.set_floor_rooms(room.floor_id, others + [room])[-1]

    def retire_room(self, room_id: int) -> None:
        with self._lock:
            room = self._view.rooms.get(room_id)
            if room is None:
                raise UnknownNodeError(room_id)
            keep = [r for r in self._view.rooms_on_floor(room.floor_id) if r.id != room_id]
            self.set_floor_rooms(room.floor_id, keep)

    def update_room(
        self,
        room_id: int,
        label: Optional[str] = None,
        summary: Optional[str] = None,
        best_view_keyframe: Optional[str] = None,
    ) -> RoomNode:
        with self._lock:
            view = self._view
            room = view.rooms.get(room_id)
            if room is None:
                raise UnknownNodeError(room_id)
            update = {}
            if label is not None:
                update["label"] = label
            if summary is not None:
                update["summary"] = summary
            if best_view_keyframe is not None:
                update["best_view_keyframe"] = best_view_keyframe
            updated = room.model_copy(update=update)
            if updated == room:
                return room
            self._commit(rooms={**view.rooms, room_id: updated})
            return updated

    # -- areas -------------------------------------------------------------

    def set_room_areas(self, room_id: int, areas: Sequence[AreaNode]) -> List[int]:
        """
        Replace the functional areas of one room in a single revision

        Returns:
            Area ids in input order
        """
        with self._lock:
            view = self._view
            room = view.rooms.get(room_id)
            if room is None:
                raise UnknownNodeError(room_id)
            counters = list(view.counters)
            new_areas = dict(view.areas)
            ids: List[int] = []
            claimed: Dict[int, int] = {}
            for area in areas:
                if area.room_id != room_id:
                    raise GraphInvariantError("area-room-exists", f"area for room {area.room_id} passed to room {room_id}")
                if not area.object_ids:
                    raise GraphInvariantError("area-non-empty", "area has no objects")
                for object_id in area.object_ids:
                    obj = view.objects.get(object_id)
                    if obj is None or obj.room_id != room_id:
                        raise GraphInvariantError("area-members-in-room", f"object {object_id} is not in room {room_id}")
                    if object_id in claimed:
                        raise GraphInvariantError("area-members-disjoint", f"object {object_id} listed in two areas")
                    claimed[object_id] = len(ids)
                existing = view.areas.get(area.id)
                if existing is not None and existing.room_id != room_id:
                    raise GraphInvariantError("area-room-exists", f"area {area.id} belongs to room {existing.room_id}")
                if existing is None:
                    area_id = self._claim_id(counters, view.tombstones, AREA_LEVEL, area.id)
                    area = area.model_copy(update={"id": area_id})
                area = area.model_copy(update={"object_ids": tuple(sorted(area.object_ids))})
                new_areas[area.id] = area
                ids.append(area.id)

            tombstones = set(view.tombstones)
            for area_id in room.area_ids:
                if area_id not in ids:
                    new_areas.pop(area_id, None)
                    tombstones.add(area_id)

            objects = dict(view.objects)
            for object_id, obj in view.objects.items():
                if obj.room_id != room_id:
                    continue
                target = ids[claimed[object_id]] if object_id in claimed else None
                if obj.area_id != target:
                    objects[object_id] = obj.model_copy(update={"area_id": target})

            new_room = room.model_copy(update={"area_ids": tuple(sorted(ids))})
            if new_areas == view.areas and objects == view.objects and new_room == room:
                return ids
            self._commit(
                areas=new_areas, objects=objects, rooms={**view.rooms, room_id: new_room},
                tombstones=frozenset(tombstones), counters=tuple(counters),
            )
            return ids

    def upsert_area(self, area: AreaNode) -> int:
        with self._lock:
            room = self._view.rooms.get(area.room_id)
            if room is None:
                raise UnknownNodeError(area.room_id)
            others = [self._view.areas[a] for a in room.area_ids if a != area.id]
            return self.set_room_areas(area.room_id, others + [area])[-1]

    def retire_area(self, area_id: int) -> None:
        with self._lock:
            area = self._view.areas.get(area_id)
            if area is None:
                raise UnknownNodeError(area_id)
            room = self._view.rooms[area.room_id]
            keep = [self._view.areas[a] for a in room.area_ids if a != area_id]
            self.set_room_areas(area.room_id, keep)

    # -- edges -------------------------------------------------------------

    def add_edges(self, edges: Iterable[SpatialEdge]) -> int:
        """
        Add spatial edges; duplicates keep the highest confidence

        Returns:
            Number of edges inserted or strengthened
        """
        with self._lock:
            view = self._view
            table = dict(view.edges)
            changed = 0
            for edge in edges:
                if edge.src_object_id not in view.objects or edge.dst_object_id not in view.objects:
                    raise GraphInvariantError("edge-endpoints-exist", f"edge {edge.key} references a missing object")
                edge = normalize_edge(edge)
                current = table.get(edge.key)
                if current is not None and current.confidence >= edge.confidence:
                    continue
                table[edge.key] = edge
                changed += 1
            if changed:
                self._commit(edges=table)
            return changed

    def add_edge(self, edge: SpatialEdge) -> bool:
        return self.add_edges([edge]) > 0
