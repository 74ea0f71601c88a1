import math

import numpy as np
import pytest
from pydantic import ValidationError

from cli.bench import storage_breakdown
from config import GridConfig, PipelineConfig, RunConfig, TrajectoryConfig, WorldConfig
from errors import SequenceFormatError, WorldParamsError
from graph.keyframes import KeyframeStore
from graph.persistence import load_map, save_map
from graph.scene_graph import validate_graph
from model_client import ProviderSet
from retrieval.parser import parse_query_rules
from retrieval.scoring import SimilarityIndex, rank
from scene_schema import Relation
from streams.geometric import FREE, OCCUPIED, segment_rooms
from streams.pipeline import BuildPipeline
from synthetic.oracle import oracle_rank
from synthetic.prng import SplitMix64, keyed_stream
from synthetic.queries import NEGATION_TEMPLATES, SCORED_TEMPLATES, QueryInstance, generate_query_bank
from synthetic.sequence import cast_rays, generate_sequence, global_feature, plan_trajectory, segment_blocked
from synthetic.truth import load_ground_truth, load_world, simulate
from synthetic.world import GRID_STEP, TruthRelation, generate_world, room_mask, world_occupancy, world_to_graph
from utils.geometry import mask_iou

DIM = 256
KITCHEN_OFFICE = WorldConfig(rooms_per_floor=2, room_kinds="kitchen,office")
SMALL_TRIP = TrajectoryConfig(spin_steps=4, corner_views=False, image_width=160, image_height=120, fx=80.0, rays=64)


class TestPrng:
    """Test the seeded generator"""

    def test_reference_outputs(self):
        """Test seed 0 reproduces the published SplitMix64 sequence"""
        rng = SplitMix64(0)
        assert rng.next_u64() == 0xE220A8397B1DCDAF
        assert rng.next_u64() == 0x6E789E6AA1B965F4

    def test_randint_is_inclusive(self):
        """Test both bounds are drawn and nothing outside them"""
        rng = SplitMix64(3)
        assert {rng.randint(1, 3) for _ in range(300)} == {1, 2, 3}
        with pytest.raises(ValueError, match="empty range"):
            rng.randint(2, 1)

    def test_random_range(self):
        """Test doubles stay in [0, 1)"""
        rng = SplitMix64(11)
        values = [rng.random() for _ in range(1000)]
        assert min(values) >= 0.0
        assert max(values) < 1.0

    def test_keyed_streams(self):
        """Test a keyed stream depends only on seed and tag"""
        assert keyed_stream(7, "layout").next_u64() == keyed_stream(7, "layout").next_u64()
        assert keyed_stream(7, "layout").next_u64() != keyed_stream(7, "floor-1").next_u64()
        assert keyed_stream(7, "layout").next_u64() != keyed_stream(8, "layout").next_u64()

    def test_fork_follows_parent_state(self):
        """Test forking the same tag twice gives different children"""
        parent = SplitMix64(5)
        assert parent.fork("x").next_u64() != parent.fork("x").next_u64()

    def test_unit_vector(self):
        """Test directions are unit length and reproducible"""
        vector = keyed_stream(1, "v").unit_vector(32)
        assert np.linalg.norm(vector) == pytest.approx(1.0)
        assert np.array_equal(vector, keyed_stream(1, "v").unit_vector(32))


class TestWorld:
    """Test world generation and its derived views"""

    def setup_method(self):
        """Set up the default three-room world"""
        self.world = generate_world(WorldConfig())

    def test_same_seed_same_world(self):
        """Test generation is deterministic"""
        assert generate_world(WorldConfig()).model_dump() == self.world.model_dump()
        assert generate_world(WorldConfig(seed=1)).model_dump() != self.world.model_dump()

    def test_rooms_form_a_strip(self):
        """Test room sizes stay in range and neighbors are one wall apart"""
        rooms = self.world.rooms
        assert [r.id for r in rooms] == [1, 2, 3]
        for room in rooms:
            width, depth = room.size
            assert 4.0 - 1e-6 <= width <= 5.0 + 1e-6
            assert 4.0 - 1e-6 <= depth <= 5.0 + 1e-6
        for left, right in zip(rooms, rooms[1:]):
            assert right.lo[0] - left.hi[0] == pytest.approx(self.world.wall_m)

    def test_one_door_per_shared_wall(self):
        """Test every door sits in the wall between its two rooms"""
        doors = self.world.doors
        assert [d.rooms for d in doors] == [(1, 2), (2, 3)]
        for door in doors:
            left, right = self.world.room(door.rooms[0]), self.world.room(door.rooms[1])
            assert (door.x_lo, door.x_hi) == (left.hi[0], right.lo[0])
            assert 0.7 - 1e-6 <= door.width <= 1.0 + 1e-6
            assert left.lo[1] < door.y_lo < door.y_hi < left.hi[1]

    def test_objects_numbered_in_order(self):
        """Test object ids run from 1 and index the object list"""
        ids = [o.id for o in self.world.objects]
        assert ids == list(range(1, len(ids) + 1))
        assert all(self.world.object(i).id == i for i in ids)

    def test_room_kinds_cycle(self):
        """Test configured kinds repeat over the rooms of a floor"""
        world = generate_world(WorldConfig(room_kinds="kitchen,office"))
        assert [r.kind for r in world.rooms] == ["kitchen", "office", "kitchen"]

    def test_furnishings_and_areas(self):
        """Test supported objects rest on their support and areas group their slots"""
        world = generate_world(KITCHEN_OFFICE)
        microwave = world.object(3)
        assert (microwave.label, microwave.support_id) == ("microwave", 2)
        assert microwave.center[2] == pytest.approx(1.05)
        kitchen = world.room(1)
        assert [(a.label, a.object_ids) for a in kitchen.areas] == [
            ("cooking area", [1, 2, 3, 4, 5]),
            ("dining area", [6, 7, 8, 9, 10]),
        ]

    def test_truth_relations(self):
        """Test support and proximity come out of the geometric rules"""
        world = generate_world(KITCHEN_OFFICE)
        assert TruthRelation(src=3, relation=Relation.ON, dst=2) in world.relations
        assert TruthRelation(src=6, relation=Relation.NEAR, dst=7) in world.relations

    def test_floors_stack(self):
        """Test every floor repeats the strip one storey higher"""
        world = generate_world(WorldConfig(floors=2, rooms_per_floor=2))
        assert [f.z_base for f in world.floors] == [0.0, 3.0]
        assert [f.room_ids for f in world.floors] == [[1, 2], [3, 4]]
        assert all(o.center[2] >= 3.0 for o in world.objects_on_floor(2))

    @pytest.mark.parametrize("params, message", [
        ({"room_min_m": 3.5}, "at least"),
        ({"door_max_m": 3.0}, "does not fit"),
        ({"room_kinds": "garage"}, "unknown room kinds"),
    ])
    def test_bad_parameters(self, params, message):
        """Test parameters that cannot be furnished are refused"""
        with pytest.raises(WorldParamsError, match=message):
            generate_world(WorldConfig(**params))

    def test_occupancy(self):
        """Test walls are occupied and rooms and doors are free"""
        grid = world_occupancy(self.world, 1)
        room = self.world.rooms[0]
        door = self.world.doors[0]

        def cell(x, y):
            row, col = grid.world_to_cell(x, y)
            return grid.cells[int(row), int(col)]

        assert cell(*room.center) == FREE
        assert cell(0.1, room.center[1]) == OCCUPIED
        assert cell(*door.center) == FREE
        assert cell(door.center[0], self.world.wall_m + 0.3) == OCCUPIED

    def test_truth_graph(self):
        """Test the truth graph mirrors rooms, areas, objects and relations"""
        world = generate_world(KITCHEN_OFFICE)
        graph, id_map = world_to_graph(world, DIM)
        view = graph.snapshot()
        assert view.counts() == {
            "floors": 1,
            "rooms": 2,
            "areas": 4,
            "objects": len(world.objects),
            "edges": len(world.relations),
        }
        assert sorted(id_map) == [o.id for o in world.objects]
        for obj in world.objects:
            node = view.objects[id_map[obj.id]]
            assert view.rooms[node.room_id].label == world.room(obj.room_id).kind
            assert node.description == obj.description
        assert validate_graph(view) == []

    def test_truth_graph_without_areas(self):
        """Test the area ablation leaves areas out"""
        graph, _ = world_to_graph(generate_world(KITCHEN_OFFICE), DIM, with_areas=False)
        assert graph.snapshot().counts()["areas"] == 0


@pytest.mark.slow
class TestSegmentationSweep:
    """Test room segmentation of rasterized truth over seeded worlds"""

    SEEDS = range(20)

    def test_rooms_match_truth(self):
        """Test per-room IoU and the partition property on 2 to 6 room worlds"""
        cfg = GridConfig(resolution_m=GRID_STEP)
        ious, widest = [], 0.0
        for seed in self.SEEDS:
            world = generate_world(WorldConfig(seed=seed, rooms_per_floor=2 + seed % 5))
            widest = max([widest] + [door.width for door in world.doors])
            grid = world_occupancy(world, 1)
            masks = segment_rooms(grid, cfg)

            coverage = np.sum([grid.paint(m).astype(int) for m in masks], axis=0)
            assert np.array_equal(coverage, grid.free_mask().astype(int)), f"seed {seed}"

            for room in world.rooms_on_floor(1):
                truth = room_mask(room)
                ious.append(max(mask_iou(truth, m) for m in masks))
            assert len(masks) == len(world.rooms_on_floor(1)), f"seed {seed}"

        assert widest > 0.9
        assert sum(iou >= 0.9 for iou in ious) >= 0.95 * len(ious)


@pytest.mark.slow
class TestLargeWorld:
    """Test retrieval and storage on a four-floor world of about a thousand objects"""

    CONFIG = WorldConfig(floors=4, rooms_per_floor=8, clutter_per_room=25, queries_per_template=20)

    def setup_method(self):
        """Set up the truth graph of the large world"""
        self.world = generate_world(self.CONFIG)
        self.graph, self.id_map = world_to_graph(self.world, DIM)
        self.view = self.graph.snapshot()
        self.embedder = ProviderSet.stub(DIM).embedder

    def test_rank_matches_reference(self):
        """Test top-5 ranking agrees with the brute-force scorer on every scored query"""
        assert len(self.view.objects) >= 900
        queries = [
            q for q in generate_query_bank(self.world, self.CONFIG)
            if q.template in SCORED_TEMPLATES and not q.manual_eval
        ]
        assert len(queries) >= 100
        index = SimilarityIndex(self.view, self.embedder)
        for instance in queries:
            query = parse_query_rules(instance.text)
            ranked = [c.object_id for c in rank(self.view, query, 5, self.embedder, index)]
            assert ranked == oracle_rank(self.view, query, self.embedder.embed, 5), instance.text

    def test_storage(self, tmp_path):
        """Test per-object records stay small, carry no dense geometry and load back unchanged"""
        root = save_map(self.graph, KeyframeStore(), str(tmp_path / "map"))
        row = storage_breakdown(root, self.CONFIG.seed)
        assert row.objects == len(self.view.objects)
        assert row.node_per_node <= 64 * 1024
        assert row.dense_records == 0
        loaded, _ = load_map(str(root))
        assert loaded.snapshot() == self.view


@pytest.mark.slow
class TestNegationSweep:
    """Test negated queries over seeded worlds"""

    SEEDS = range(6)

    def test_positive_outranks_hard_negatives(self):
        """Test the best positive of every D1 to D5 instance ranks above all its hard negatives"""
        embedder = ProviderSet.stub(DIM).embedder
        checked = 0
        for seed in self.SEEDS:
            cfg = WorldConfig(seed=seed, rooms_per_floor=6, clutter_per_room=8, queries_per_template=25)
            world = generate_world(cfg)
            graph, id_map = world_to_graph(world, DIM)
            view = graph.snapshot()
            index = SimilarityIndex(view, embedder)
            for instance in generate_query_bank(world, cfg):
                if instance.template not in NEGATION_TEMPLATES:
                    continue
                order = [c.object_id for c in rank(view, parse_query_rules(instance.text), len(view.objects), embedder, index)]
                best_positive = min(order.index(id_map[i]) for i in instance.positives)
                first_negative = min(order.index(id_map[i]) for i in instance.hard_negatives)
                assert best_positive < first_negative, f"seed {seed}: {instance.text}"
                checked += 1
        assert checked >= 200


class TestQueryBank:
    """Test template instantiation against world truth"""

    def setup_method(self):
        """Set up a kitchen and office world and its bank"""
        self.world = generate_world(KITCHEN_OFFICE)
        self.bank = generate_query_bank(self.world, KITCHEN_OFFICE)

    def texts(self, template):
        return [q.text for q in self.bank if q.template == template]

    def test_deterministic(self):
        """Test the same world gives the same bank"""
        again = generate_query_bank(generate_world(KITCHEN_OFFICE), KITCHEN_OFFICE)
        assert [q.model_dump() for q in again] == [q.model_dump() for q in self.bank]

    def test_room_queries(self):
        """Test room queries cover labels found in both rooms"""
        assert self.texts("A1") == [
            "find a book in the kitchen",
            "find a book in the office",
            "find a chair in the kitchen",
            "find a chair in the office",
        ]
        query = next(q for q in self.bank if q.text == "find a book in the kitchen")
        assert (query.positives, query.hard_negatives) == ([10], [13, 16])

    def test_area_queries(self):
        """Test area queries split a label across the areas of one room"""
        assert self.texts("B1") == [
            "find a book in the storage area",
            "find a book in the work area",
            "find a cup in the cooking area",
            "find a cup in the dining area",
        ]
        query = next(q for q in self.bank if q.text == "find a cup in the cooking area")
        assert (query.positives, query.hard_negatives) == ([5], [9])

    def test_negated_room_queries(self):
        """Test negated rooms swap positives and negatives"""
        query = next(q for q in self.bank if q.text == "find a book not in the kitchen")
        assert (query.positives, query.hard_negatives) == ([13, 16], [10])

    def test_negated_attributes_are_sound(self):
        """Test no positive of an attribute negation carries the attribute"""
        for query in self.bank:
            if query.template != "D4":
                continue
            attribute = query.slots["attribute"]
            assert all(attribute not in self.world.object(i).attributes for i in query.positives)
            assert all(attribute in self.world.object(i).attributes for i in query.hard_negatives)

    def test_template_cap(self):
        """Test no template contributes more than queries_per_template"""
        bank = generate_query_bank(self.world, KITCHEN_OFFICE.model_copy(update={"queries_per_template": 2}))
        templates = [q.template for q in bank]
        assert all(templates.count(t) <= 2 for t in set(templates))

    def test_fuzzy_query_needs_reading_area(self):
        """Test the manual-evaluation query only appears with a reading corner"""
        assert not self.texts("F")
        world = generate_world(WorldConfig(rooms_per_floor=2, room_kinds="living room,kitchen"))
        fuzzy = [q for q in generate_query_bank(world) if q.template == "F"]
        assert [q.text for q in fuzzy] == ["find something comfortable to sit on while reading"]
        assert fuzzy[0].manual_eval

    def test_too_small_world(self):
        """Test a single room cannot carry a bank"""
        with pytest.raises(WorldParamsError, match="at least 2 rooms"):
            generate_query_bank(generate_world(WorldConfig(rooms_per_floor=1)))

    def test_answer_key_checked(self):
        """Test malformed answer keys are refused"""
        with pytest.raises(ValidationError, match="no positive"):
            QueryInstance(template="A1", text="find a cup", positives=[], hard_negatives=[1])
        with pytest.raises(ValidationError, match="no hard negative"):
            QueryInstance(template="A1", text="find a cup", positives=[1])
        with pytest.raises(ValidationError, match="positive and negative"):
            QueryInstance(template="A1", text="find a cup", positives=[1], hard_negatives=[1])

    @pytest.mark.parametrize("template", ["A1", "B1", "D4"])
    def test_oracle_answers_truth_graph(self, template):
        """Test the reference scorer puts a positive first on the truth graph"""
        graph, id_map = world_to_graph(self.world, DIM)
        view = graph.snapshot()
        embed = ProviderSet.stub(DIM).embedder.embed
        for query in self.bank:
            if query.template != template:
                continue
            top = oracle_rank(view, parse_query_rules(query.text), embed, 1)[0]
            assert top in {id_map[i] for i in query.positives}, query.text


class TestSequence:
    """Test the simulated camera and sensor"""

    def test_ray_casting(self):
        """Test rays stop at the first wall or at the range limit"""
        boxes = np.array([[1.0, -1.0, 2.0, 1.0]])
        endpoints, hits = cast_rays((0.0, 0.0), np.array([0.0, math.pi]), boxes, 10.0)
        assert endpoints[0].tolist() == pytest.approx([1.0, 0.0])
        assert endpoints[1].tolist() == pytest.approx([-10.0, 0.0])
        assert hits.tolist() == [True, False]

    def test_segment_blocking(self):
        """Test segments through a wall are blocked"""
        boxes = np.array([[1.0, -1.0, 2.0, 1.0]])
        blocked = segment_blocked((0.0, 0.0), np.array([[3.0, 0.0], [0.5, 0.0], [3.0, 6.0]]), boxes)
        assert blocked.tolist() == [True, False, False]

    def test_trajectory_steps(self):
        """Test the camera never moves more than one step between frames"""
        world = generate_world(KITCHEN_OFFICE)
        points = plan_trajectory(world, SMALL_TRIP)
        assert (points[0].x, points[0].y) == pytest.approx(world.rooms[0].center)
        for a, b in zip(points, points[1:]):
            assert math.hypot(b.x - a.x, b.y - a.y) <= SMALL_TRIP.step_m + 1e-5
        assert {p.room_id for p in points if p.room_id is not None} == {1, 2}

    def test_stairs_are_blind(self):
        """Test the climb between floors observes nothing"""
        world = generate_world(WorldConfig(floors=2, rooms_per_floor=2))
        points = plan_trajectory(world, SMALL_TRIP)
        blind = [p for p in points if not p.observe]
        assert len(blind) == SMALL_TRIP.stair_frames + SMALL_TRIP.landing_frames
        assert {p.floor_index for p in points} == {1, 2}

    def test_global_feature_unit(self):
        """Test place descriptors are unit vectors"""
        world = generate_world(KITCHEN_OFFICE)
        point = plan_trajectory(world, SMALL_TRIP)[0]
        assert np.linalg.norm(global_feature(0, point)) == pytest.approx(1.0)

    def test_generate_sequence(self, tmp_path):
        """Test the written sequence loads and its identities match its detections"""
        world = generate_world(KITCHEN_OFFICE)
        simulated = generate_sequence(world, SMALL_TRIP, str(tmp_path / "a"), 32)
        sequence = simulated.sequence
        assert len(sequence.frames) == len(simulated.waypoints)
        assert simulated.detections
        for frame_id, ids in simulated.detections.items():
            assert len(sequence.detections(frame_id)) == len(ids)
            assert all(world.object(i).floor_index == 1 for i in ids)
        assert (tmp_path / "a" / "images").is_dir()

        again = generate_sequence(world, SMALL_TRIP, str(tmp_path / "b"), 32)
        assert again.detections == simulated.detections
        assert (tmp_path / "b" / "frames.jsonl").read_text() == (tmp_path / "a" / "frames.jsonl").read_text()


class TestSimulate:
    """Test the world + sequence + truth bundle"""

    def test_round_trip(self, tmp_path):
        """Test world.json and truth.json load back to what was simulated"""
        world, simulated, truth = simulate(KITCHEN_OFFICE, SMALL_TRIP, str(tmp_path), 32)
        assert load_world(str(tmp_path)).model_dump() == world.model_dump()
        loaded = load_ground_truth(str(tmp_path))
        assert [q.text for q in loaded.queries] == [q.text for q in truth.queries]
        assert loaded.detections == simulated.detections
        assert set(loaded.observed_objects()) <= {o.id for o in world.objects}
        assert loaded.object_areas[5] == "cooking area"

    def test_missing_files(self, tmp_path):
        """Test a directory without truth files is reported"""
        with pytest.raises(SequenceFormatError, match="missing"):
            load_world(str(tmp_path))
        with pytest.raises(SequenceFormatError, match="missing"):
            load_ground_truth(str(tmp_path))

    def test_corrupt_truth(self, tmp_path):
        """Test unparseable truth names its file"""
        (tmp_path / "truth.json").write_text("{not json")
        with pytest.raises(SequenceFormatError, match="truth.json"):
            load_ground_truth(str(tmp_path))

    def test_build_from_simulation(self, tmp_path):
        """Test a map built from a simulated walk holds its floor, rooms and objects"""
        _, simulated, _ = simulate(KITCHEN_OFFICE, SMALL_TRIP, str(tmp_path / "seq"), 32)
        config = RunConfig(pipeline=PipelineConfig(threaded=False, embedding_dim=32))
        result = BuildPipeline(simulated.sequence, config, ProviderSet.stub(32)).run()
        view = result.graph.snapshot()
        counts = view.counts()
        assert result.frames == len(simulated.sequence.frames)
        assert counts["floors"] == 1
        assert counts["rooms"] >= 1
        assert counts["objects"] > 0
        assert result.reports
        assert validate_graph(view) == []

        threaded = RunConfig(pipeline=PipelineConfig(threaded=True, embedding_dim=32))
        again = BuildPipeline(simulated.sequence, threaded, ProviderSet.stub(32)).run()
        assert again.graph.snapshot().counts()["floors"] == 1
        assert validate_graph(again.graph.snapshot()) == []
