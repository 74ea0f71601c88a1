import json
import logging
import os
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Tuple, Type, TypeVar

from pydantic import BaseModel, ValidationError

from errors import MapFormatError
from graph.keyframes import KeyframeStore, hash_bytes
from graph.scene_graph import GraphView, SceneGraph, validate_graph
from scene_schema import AreaNode, FloorNode, KeyframeEntry, ObjectNode, RoomMask, RoomNode, SpatialEdge

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

NODE_FILES = ("floors.jsonl", "rooms.jsonl", "areas.jsonl", "objects.jsonl", "edges.jsonl", "keyframes.jsonl", "tombstones.jsonl")

Record = TypeVar("Record", bound=BaseModel)


def _dumps(record: dict) -> str:
    return json.dumps(record, ensure_ascii=False, separators=(",", ":"))


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(text)
    os.replace(tmp, path)


def _write_lines(path: Path, lines: List[str]) -> None:
    _write_text(path, "".join(f"{line}\n" for line in lines))


def mask_lines(mask: RoomMask) -> List[str]:
    header = {"origin": list(mask.origin), "resolution": mask.resolution, "shape": list(mask.shape)}
    return [_dumps(header), " ".join(str(r) for r in mask.runs)]


def save_map(graph: SceneGraph, store: KeyframeStore, directory: str) -> Path:
    """
    Write the graph and keyframe table to a map directory

    Args:
        graph: Scene graph to persist (a snapshot is taken)
        store: Keyframe table; in-memory image payloads go to images/
        directory: Target directory, created if missing

    Returns:
        Path of the map directory
    """
    root = Path(directory)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    view = graph.snapshot()

    manifest = {
        "format_version": FORMAT_VERSION,
        "embedding_dim": view.embedding_dim,
        "grid_resolution_m": graph.grid_resolution_m,
        "created_at": graph.created_at,
        "known_categories": list(graph.known_categories),
        "revision": view.revision,
        "id_counters": list(view.counters),
    }

    _write_lines(root / "floors.jsonl", [view.floors[k].model_dump_json() for k in sorted(view.floors)])
    _write_lines(
        root / "rooms.jsonl",
        [_dumps(view.rooms[k].model_dump(mode="json", exclude={"mask"})) for k in sorted(view.rooms)],
    )
    _write_lines(root / "areas.jsonl", [view.areas[k].model_dump_json() for k in sorted(view.areas)])
    _write_lines(root / "objects.jsonl", [view.objects[k].model_dump_json() for k in sorted(view.objects)])
    edge_keys = sorted(view.edges, key=lambda k: (k[0], k[1], k[2].value))
    _write_lines(root / "edges.jsonl", [view.edges[k].model_dump_json() for k in edge_keys])
    _write_lines(root / "keyframes.jsonl", [e.model_dump_json() for e in store.entries()])
    _write_lines(root / "tombstones.jsonl", [_dumps({"id": node_id}) for node_id in sorted(view.tombstones)])

    live_masks = set()
    for room_id in sorted(view.rooms):
        name = f"{room_id}.rle"
        live_masks.add(name)
        _write_lines(root / "masks" / name, mask_lines(view.rooms[room_id].mask))
    for leftover in (root / "masks").glob("*.rle"):
        if leftover.name not in live_masks:
            leftover.unlink()

    payloads = store.payloads()
    if payloads:
        images = root / "images"
        images.mkdir(exist_ok=True)
        for content_hash, payload in sorted(payloads.items()):
            target = images / f"{content_hash}.png"
            if not target.exists():
                target.write_bytes(payload)

    # the manifest goes last; its presence marks a complete save
    _write_text(root / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    logger.info(f"Saved map to {root} at revision {view.revision} ({view.counts()})")
    return root


def _read_records(path: Path, parse: Callable[[dict], Record]) -> Iterator[Record]:
    if not path.is_file():
        raise MapFormatError(str(path), None, "file is missing")
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                yield parse(json.loads(line))
            except (json.JSONDecodeError, ValidationError, KeyError, TypeError, ValueError) as e:
                raise MapFormatError(str(path), line_no, f"{type(e).__name__}: {str(e).splitlines()[0]}") from e


def _model_parser(model: Type[Record]) -> Callable[[dict], Record]:
    return model.model_validate


def read_mask(path: Path) -> RoomMask:
    if not path.is_file():
        raise MapFormatError(str(path), None, "mask file is missing")
    lines = path.read_text(encoding="utf-8").splitlines()
    if len(lines) < 2:
        raise MapFormatError(str(path), len(lines) + 1, "mask file is truncated")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise MapFormatError(str(path), 1, f"bad mask header: {e}") from e
    try:
        runs = tuple(int(token) for token in lines[1].split())
        mask = RoomMask(
            origin=tuple(header["origin"]),
            resolution=header["resolution"],
            shape=tuple(header["shape"]),
            runs=runs,
        )
        if sum(runs) != mask.shape[0] * mask.shape[1]:
            raise ValueError(f"runs cover {sum(runs)} cells, shape needs {mask.shape[0] * mask.shape[1]}")
        return mask
    except (KeyError, ValueError, ValidationError) as e:
        raise MapFormatError(str(path), 2, f"bad mask runs: {str(e).splitlines()[0]}") from e


def load_map(directory: str) -> Tuple[SceneGraph, KeyframeStore]:
    """
    Read a map directory written by save_map

    Returns:
        (graph, keyframe store); keyframes whose image bytes no longer match their hash
        are listed in store.stale and logged as a warning

    Raises:
        MapFormatError: naming the offending file and line
    """
    root = Path(directory)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise MapFormatError(str(manifest_path), None, "not a map directory (manifest.json missing)")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise MapFormatError(str(manifest_path), e.lineno, f"bad manifest: {e.msg}") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise MapFormatError(str(manifest_path), None, f"unsupported format_version {manifest.get('format_version')}")
    embedding_dim = int(manifest["embedding_dim"])

    floors: Dict[int, FloorNode] = {f.id: f for f in _read_records(root / "floors.jsonl", _model_parser(FloorNode))}

    def parse_room(record: dict) -> RoomNode:
        record = dict(record)
        record["mask"] = read_mask(root / "masks" / f"{record['id']}.rle")
        return RoomNode.model_validate(record)

    rooms = {r.id: r for r in _read_records(root / "rooms.jsonl", parse_room)}
    areas = {a.id: a for a in _read_records(root / "areas.jsonl", _model_parser(AreaNode))}

    objects_path = root / "objects.jsonl"
    objects: Dict[int, ObjectNode] = {}
    for line_no, obj in enumerate(_read_records(objects_path, _model_parser(ObjectNode)), start=1):
        if len(obj.embedding) != embedding_dim:
            raise MapFormatError(
                str(objects_path), line_no,
                f"embedding dimension {len(obj.embedding)} differs from manifest {embedding_dim}",
            )
        objects[obj.id] = obj

    edges = {e.key: e for e in _read_records(root / "edges.jsonl", _model_parser(SpatialEdge))}
    tombstones = frozenset(
        int(r["id"]) for r in _read_records(root / "tombstones.jsonl", lambda record: {"id": int(record["id"])})
    )

    view = GraphView(
        revision=int(manifest["revision"]),
        embedding_dim=embedding_dim,
        floors=floors,
        rooms=rooms,
        areas=areas,
        objects=objects,
        edges=edges,
        tombstones=tombstones,
        counters=tuple(int(c) for c in manifest["id_counters"]),
    )
    problems = validate_graph(view)
    if problems:
        raise MapFormatError(str(root), None, "; ".join(problems[:5]))

    graph = SceneGraph(
        known_categories=manifest.get("known_categories", ()),
        grid_resolution_m=float(manifest.get("grid_resolution_m", 0.05)),
        view=view,
        created_at=manifest.get("created_at"),
    )

    store = KeyframeStore(image_root=root)
    for entry in _read_records(root / "keyframes.jsonl", _model_parser(KeyframeEntry)):
        store.put_entry(entry)
        if entry.image_path is None:
            continue
        image = root / entry.image_path
        if image.is_file() and hash_bytes(image.read_bytes()) != entry.content_hash:
            store.stale.append(entry.keyframe_id)
    if store.stale:
        logger.warning(f"Keyframe store has {len(store.stale)} stale entries: {', '.join(store.stale)}")

    logger.info(f"Loaded map from {root} at revision {view.revision} ({view.counts()})")
    return graph, store
