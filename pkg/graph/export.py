import json
import logging
from typing import Dict, List, Tuple

import networkx as nx

from errors import MapFormatError
from graph.keyframes import KeyframeStore
from graph.persistence import FORMAT_VERSION
from graph.scene_graph import GraphView, SceneGraph, validate_graph
from scene_schema import AreaNode, FloorNode, KeyframeEntry, ObjectNode, RoomNode, SpatialEdge

logger = logging.getLogger(__name__)

RANKS = ("floor", "room", "area", "object")


def export_json(graph: SceneGraph, store: KeyframeStore) -> str:
    """Whole map as one JSON document, masks inline"""
    view = graph.snapshot()
    document = {
        "manifest": {
            "format_version": FORMAT_VERSION,
            "embedding_dim": view.embedding_dim,
            "grid_resolution_m": graph.grid_resolution_m,
            "created_at": graph.created_at,
            "known_categories": list(graph.known_categories),
            "revision": view.revision,
            "id_counters": list(view.counters),
        },
        "floors": [view.floors[k].model_dump(mode="json") for k in sorted(view.floors)],
        "rooms": [view.rooms[k].model_dump(mode="json") for k in sorted(view.rooms)],
        "areas": [view.areas[k].model_dump(mode="json") for k in sorted(view.areas)],
        "objects": [view.objects[k].model_dump(mode="json") for k in sorted(view.objects)],
        "edges": [
            view.edges[k].model_dump(mode="json")
            for k in sorted(view.edges, key=lambda k: (k[0], k[1], k[2].value))
        ],
        "keyframes": [e.model_dump(mode="json") for e in store.entries()],
        "tombstones": sorted(view.tombstones),
    }
    return json.dumps(document, ensure_ascii=False, indent=1)


def import_json(text: str) -> Tuple[SceneGraph, KeyframeStore]:
    try:
        document = json.loads(text)
        manifest = document["manifest"]
        view = GraphView(
            revision=int(manifest["revision"]),
            embedding_dim=int(manifest["embedding_dim"]),
            floors={n.id: n for n in map(FloorNode.model_validate, document["floors"])},
            rooms={n.id: n for n in map(RoomNode.model_validate, document["rooms"])},
            areas={n.id: n for n in map(AreaNode.model_validate, document["areas"])},
            objects={n.id: n for n in map(ObjectNode.model_validate, document["objects"])},
            edges={e.key: e for e in map(SpatialEdge.model_validate, document["edges"])},
            tombstones=frozenset(int(t) for t in document["tombstones"]),
            counters=tuple(int(c) for c in manifest["id_counters"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise MapFormatError("<json export>", None, f"{type(e).__name__}: {str(e).splitlines()[0]}") from e
    problems = validate_graph(view)
    if problems:
        raise MapFormatError("<json export>", None, "; ".join(problems[:5]))
    graph = SceneGraph(
        known_categories=manifest.get("known_categories", ()),
        grid_resolution_m=float(manifest.get("grid_resolution_m", 0.05)),
        view=view,
        created_at=manifest.get("created_at"),
    )
    store = KeyframeStore()
    for record in document.get("keyframes", []):
        store.put_entry(KeyframeEntry.model_validate(record))
    return graph, store


def to_networkx(view: GraphView) -> nx.MultiDiGraph:
    """Hierarchy edges (kind="contains") plus spatial edges (kind=relation)"""
    g = nx.MultiDiGraph()
    for floor in view.floors.values():
        g.add_node(floor.id, rank="floor", label=f"floor {floor.index}")
    for room in view.rooms.values():
        g.add_node(room.id, rank="room", label=room.label or f"room {room.id}")
        g.add_edge(room.floor_id, room.id, kind="contains")
    for area in view.areas.values():
        g.add_node(area.id, rank="area", label=area.label or f"area {area.id}")
        g.add_edge(area.room_id, area.id, kind="contains")
    for obj in view.objects.values():
        g.add_node(obj.id, rank="object", label=obj.label)
        if obj.area_id is not None:
            g.add_edge(obj.area_id, obj.id, kind="contains")
        elif obj.room_id != "unassigned":
            g.add_edge(obj.room_id, obj.id, kind="contains")
        else:
            g.add_edge(obj.floor_id, obj.id, kind="contains")
    for edge in view.edges.values():
        g.add_edge(edge.src_object_id, edge.dst_object_id, kind=edge.relation.value, confidence=edge.confidence)
    return g


def _quote(text: str) -> str:
    return '"' + str(text).replace("\\", "\\\\").replace('"', '\\"') + '"'


def export_dot(graph: SceneGraph) -> str:
    """DOT document with one rank group per hierarchy level"""
    g = to_networkx(graph.snapshot())
    lines: List[str] = ["digraph scene {", "  rankdir=TB;"]
    by_rank: Dict[str, List[int]] = {rank: [] for rank in RANKS}
    for node_id, data in sorted(g.nodes(data=True)):
        by_rank[data["rank"]].append(node_id)
        lines.append(f"  n{node_id} [label={_quote(data['label'])}];")
    for rank in RANKS:
        if by_rank[rank]:
            members = "; ".join(f"n{node_id}" for node_id in by_rank[rank])
            lines.append(f"  {{ rank=same; {members}; }}")
    for src, dst, data in sorted(g.edges(data=True), key=lambda e: (e[0], e[1], e[2]["kind"])):
        if data["kind"] == "contains":
            lines.append(f"  n{src} -> n{dst};")
        else:
            lines.append(f"  n{src} -> n{dst} [label={_quote(data['kind'])}, style=dashed];")
    lines.append("}")
    return "\n".join(lines) + "\n"
