import json
import os
from pathlib import Path

import imageio.v3 as iio
import networkx as nx
import numpy as np
import pytest

from errors import MapFormatError, UnknownNodeError
from graph.export import export_dot, export_json, import_json, to_networkx
from graph.keyframes import KeyframeStore, crop_image, hash_bytes
from graph.persistence import load_map, save_map
from graph.scene_graph import SceneGraph
from scene_schema import AreaNode, Box3D, ObjectNode, Pose, Relation, RoomMask, RoomNode, SpatialEdge

DIM = 4
IDENTITY = (0.0, 0.0, 0.0, 1.0)


def png_bytes(shade: int = 0, shape=(40, 60)) -> bytes:
    image = np.full(shape + (3,), shade, dtype=np.uint8)
    return iio.imwrite("<bytes>", image, extension=".png")


def pose_at(t: float) -> Pose:
    return Pose(timestamp=t, position=(1.0, 1.0, 1.2), orientation=IDENTITY)


def make_object(label: str, x: float, y: float, floor_id: int, axis: int) -> ObjectNode:
    embedding = [0.0] * DIM
    embedding[axis] = 1.0
    box = Box3D(lo=(x - 0.2, y - 0.2, 0.3), hi=(x + 0.2, y + 0.2, 0.7))
    return ObjectNode(label=label, embedding=tuple(embedding), centroid=(x, y, 0.5), bbox3d=box, floor_id=floor_id)


def build_map():
    """One floor, two rooms, an area, two objects, an edge and two keyframes sharing an image"""
    graph = SceneGraph(embedding_dim=DIM, known_categories=("bed", "lamp"), grid_resolution_m=0.5)
    floor = graph.add_floor(1, 0.0, 3.0)
    bed = graph.upsert_object(make_object("bed", 1.0, 1.0, floor.id, axis=0))
    lamp = graph.upsert_object(make_object("lamp", 1.5, 1.0, floor.id, axis=1))
    left = np.zeros((8, 8), dtype=bool)
    left[:, :4] = True
    bedroom, _ = graph.set_floor_rooms(floor.id, [
        RoomNode(id=0, floor_id=floor.id, mask=RoomMask.from_array(left, (0.0, 0.0), 0.5), label="bedroom"),
        RoomNode(id=0, floor_id=floor.id, mask=RoomMask.from_array(~left, (0.0, 0.0), 0.5)),
    ])
    graph.reassign_objects_to_rooms()
    graph.set_room_areas(bedroom, [AreaNode(id=0, room_id=bedroom, label="sleeping area", object_ids=(bed, lamp), centroid=(1.25, 1.0))])
    graph.add_edge(SpatialEdge(src_object_id=lamp, dst_object_id=bed, relation=Relation.NEAR, confidence=0.8))

    store = KeyframeStore()
    image = png_bytes(120)
    store.add("kf-000", pose_at(0.0), 60, 40, floor_id=floor.id, image_bytes=image)
    store.add("kf-001", pose_at(0.5), 60, 40, floor_id=floor.id, image_bytes=image)
    store.add("kf-002", pose_at(1.0), 60, 40, floor_id=floor.id)
    return graph, store


class TestMapDirectory:
    """Test saving and loading map directories"""

    def test_round_trip(self, tmp_path):
        """Test a saved map loads back to the same graph"""
        graph, store = build_map()
        save_map(graph, store, str(tmp_path / "map"))
        loaded, loaded_store = load_map(str(tmp_path / "map"))
        assert loaded.snapshot() == graph.snapshot()
        assert loaded.known_categories == ("bed", "lamp")
        assert loaded.grid_resolution_m == 0.5
        assert loaded_store.entries() == store.entries()
        assert loaded_store.stale == []

    def test_layout(self, tmp_path):
        """Test the files a map directory is made of"""
        graph, store = build_map()
        root = save_map(graph, store, str(tmp_path / "map"))
        manifest = json.loads((root / "manifest.json").read_text())
        assert manifest["format_version"] == 1
        assert manifest["embedding_dim"] == DIM
        assert manifest["id_counters"] == [1, 2, 1, 2]
        assert sorted(p.name for p in (root / "masks").iterdir()) == ["2000000000001.rle", "2000000000002.rle"]
        assert len(list((root / "images").iterdir())) == 1
        assert "mask" not in json.loads((root / "rooms.jsonl").read_text().splitlines()[0])

    def test_save_is_deterministic(self, tmp_path):
        """Test two saves of one graph write identical files"""
        graph, store = build_map()
        first = save_map(graph, store, str(tmp_path / "a"))
        second = save_map(graph, store, str(tmp_path / "b"))
        for name in ("objects.jsonl", "edges.jsonl", "rooms.jsonl", "manifest.json"):
            assert (first / name).read_bytes() == (second / name).read_bytes()

    def test_manifest_written_last(self, tmp_path, monkeypatch):
        """Test every file is moved into place from a temp file, the manifest last"""
        graph, store = build_map()
        replaced = []
        real_replace = os.replace

        def record(src, dst):
            replaced.append((Path(src).name, Path(dst).name))
            real_replace(src, dst)

        monkeypatch.setattr("graph.persistence.os.replace", record)
        root = save_map(graph, store, str(tmp_path / "map"))
        assert replaced[-1] == ("manifest.json.tmp", "manifest.json")
        assert all(src == f"{dst}.tmp" for src, dst in replaced)
        assert {"objects.jsonl", "edges.jsonl"} <= {dst for _, dst in replaced}
        assert not list(root.rglob("*.tmp"))

    def test_missing_manifest(self, tmp_path):
        """Test a directory without manifest is not a map"""
        with pytest.raises(MapFormatError, match="manifest.json missing"):
            load_map(str(tmp_path))

    def test_corrupt_line_is_located(self, tmp_path):
        """Test a broken record names its file and line"""
        graph, store = build_map()
        root = save_map(graph, store, str(tmp_path / "map"))
        lines = (root / "objects.jsonl").read_text().splitlines()
        lines[1] = "{not json"
        (root / "objects.jsonl").write_text("\n".join(lines) + "\n")
        with pytest.raises(MapFormatError, match=r"objects\.jsonl:2"):
            load_map(str(root))

    def test_unsupported_version(self, tmp_path):
        """Test a future format version is refused"""
        graph, store = build_map()
        root = save_map(graph, store, str(tmp_path / "map"))
        manifest = json.loads((root / "manifest.json").read_text())
        manifest["format_version"] = 99
        (root / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(MapFormatError, match="unsupported format_version 99"):
            load_map(str(root))

    def test_stale_image(self, tmp_path):
        """Test keyframes whose image changed on disk are flagged and yield no bytes"""
        graph, store = build_map()
        root = save_map(graph, store, str(tmp_path / "map"))
        (image,) = (root / "images").iterdir()
        image.write_bytes(png_bytes(7))
        _, loaded_store = load_map(str(root))
        assert loaded_store.stale == ["kf-000", "kf-001"]
        assert loaded_store.image_bytes("kf-000") is None

    def test_images_read_lazily(self, tmp_path):
        """Test image payloads come back from disk on demand"""
        graph, store = build_map()
        root = save_map(graph, store, str(tmp_path / "map"))
        _, loaded_store = load_map(str(root))
        assert loaded_store.payloads() == {}
        assert loaded_store.image_bytes("kf-001") == png_bytes(120)
        assert loaded_store.image_bytes("kf-002") is None


class TestKeyframeStore:
    """Test the content-addressed keyframe table"""

    def test_shared_payload(self):
        """Test identical images are stored once"""
        _, store = build_map()
        content_hash = hash_bytes(png_bytes(120))
        assert store.references(content_hash) == 2
        assert list(store.payloads()) == [content_hash]
        assert store.get("kf-001").image_path == f"images/{content_hash}.png"
        assert len(store) == 3

    def test_unknown_keyframe(self):
        """Test reading a keyframe that was never added"""
        with pytest.raises(UnknownNodeError, match="unknown id: kf-404"):
            KeyframeStore().get("kf-404")

    def test_crop_pads_and_clips(self):
        """Test crops grow by the padding and stay inside the image"""
        crop = iio.imread(crop_image(png_bytes(50), (10, 10, 30, 20), pad=0.1))
        assert crop.shape[:2] == (12, 24)
        corner = iio.imread(crop_image(png_bytes(50), (0, 0, 10, 10), pad=0.5))
        assert corner.shape[:2] == (15, 15)

    def test_empty_crop(self):
        """Test a crop outside the image is refused"""
        with pytest.raises(ValueError, match="is empty"):
            crop_image(png_bytes(50), (70, 50, 80, 60), pad=0.0)


class TestExport:
    """Test JSON and DOT exports"""

    def test_json_round_trip(self):
        """Test the JSON export imports back to the same graph"""
        graph, store = build_map()
        imported, imported_store = import_json(export_json(graph, store))
        assert imported.snapshot() == graph.snapshot()
        assert [e.keyframe_id for e in imported_store.entries()] == ["kf-000", "kf-001", "kf-002"]

    def test_json_inlines_masks(self):
        """Test room masks are carried inside the document"""
        graph, store = build_map()
        document = json.loads(export_json(graph, store))
        assert document["rooms"][0]["mask"]["shape"] == [8, 8]
        assert document["tombstones"] == []

    def test_bad_document(self):
        """Test a malformed export is reported"""
        with pytest.raises(MapFormatError, match="<json export>"):
            import_json('{"manifest": {}}')

    def test_networkx_hierarchy(self):
        """Test objects hang under their area and relations link objects"""
        graph, _ = build_map()
        view = graph.snapshot()
        g = to_networkx(view)
        area_id = next(iter(view.areas))
        bed = min(view.objects)
        assert g.has_edge(area_id, bed)
        assert nx.is_directed_acyclic_graph(nx.DiGraph(
            (u, v) for u, v, kind in g.edges(data="kind") if kind == "contains"
        ))
        assert {kind for _, _, kind in g.edges(data="kind")} == {"contains", "near"}

    def test_dot_ranks(self):
        """Test DOT output groups each level on one rank"""
        graph, _ = build_map()
        dot = export_dot(graph)
        assert dot.startswith("digraph scene {")
        assert dot.count("rank=same") == 4
        assert '[label="near", style=dashed]' in dot
        assert '[label="bedroom"]' in dot

    def test_dot_empty_graph(self):
        """Test an empty graph still exports a valid document"""
        dot = export_dot(SceneGraph(embedding_dim=DIM))
        assert dot == "digraph scene {\n  rankdir=TB;\n}\n"
