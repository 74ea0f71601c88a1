import json
import math

import imageio.v3 as iio
import numpy as np
import pytest

from config import RetrievalConfig
from errors import QueryParseError
from graph.keyframes import KeyframeStore
from graph.scene_graph import SceneGraph
from model_client import LatencyRecorder, ProviderRole, ProviderSet, StubFixtures, stub_embedding
from query_schema import CandidateScore, ScoreTerm
from retrieval.audit import AcceptAllAuditor, KeyedAuditor, ModelAuditor, audit_request
from retrieval.flow import RetrievalWorkflow, retrieve
from retrieval.memory import fuse_temporal_memory, stub_fuse, truncate_oldest
from retrieval.parser import parse_query_rules
from retrieval.scoring import ConstraintEvaluator, SimilarityIndex, clamp_sim, combine_terms, rank, rank_key
from scene_schema import AreaNode, BestViewRef, Box3D, ObjectNode, Pose, Relation, RoomMask, RoomNode, SpatialEdge
from synthetic.oracle import oracle_rank, oracle_scores
from utils.geometry import camera_quaternion

DIM = 256

QUERIES = [
    "find the mug on the table",
    "find the mug not in the kitchen",
    "find the lamp on floor 2",
    "find the mug on the desk near the sofa",
    "find a mug in the coffee corner area",
    "find the mug that is not red",
    "where is my blue mug",
]


def place(graph: SceneGraph, label: str, x: float, y: float, z: float, floor_id: int, description: str = "", **extra) -> int:
    text = f"{description} {label}".strip()
    box = Box3D(lo=(x - 0.2, y - 0.2, z - 0.2), hi=(x + 0.2, y + 0.2, z + 0.2))
    node = ObjectNode(
        label=label, description=description, embedding=tuple(stub_embedding(text, DIM)),
        centroid=(x, y, z), bbox3d=box, floor_id=floor_id, **extra,
    )
    return graph.upsert_object(node)


def rect_mask(cols) -> RoomMask:
    cells = np.zeros((20, 20), dtype=bool)
    cells[0:10, cols[0]:cols[1]] = True
    return RoomMask.from_array(cells, (0.0, 0.0), 0.5)


def kitchen_world(best_view: BestViewRef = None):
    """
    Kitchen and bedroom on floor 1, a lamp on floor 2

    A red mug stands on the kitchen table, a blue mug on the bedroom desk, and the sofa
    is near the desk.
    """
    graph = SceneGraph(embedding_dim=DIM)
    ground = graph.add_floor(1, 0.0, 3.0)
    upper = graph.add_floor(2, 3.0, 6.0)
    kitchen, bedroom = graph.set_floor_rooms(ground.id, [
        RoomNode(id=0, floor_id=ground.id, mask=rect_mask((0, 10))),
        RoomNode(id=0, floor_id=ground.id, mask=rect_mask((10, 20))),
    ])
    graph.update_room(kitchen, label="kitchen")
    graph.update_room(bedroom, label="bedroom")
    ids = {
        "table": place(graph, "table", 2.0, 2.0, 0.4, ground.id),
        "mug_k": place(graph, "mug", 2.2, 2.0, 0.9, ground.id, description="red", best_view=best_view),
        "desk": place(graph, "desk", 7.0, 2.0, 0.4, ground.id),
        "mug_b": place(graph, "mug", 7.2, 2.0, 0.9, ground.id, description="blue"),
        "sofa": place(graph, "sofa", 8.0, 4.0, 0.4, ground.id),
        "lamp": place(graph, "lamp", 3.0, 3.0, 3.5, upper.id),
    }
    graph.reassign_objects_to_rooms()
    graph.set_room_areas(kitchen, [
        AreaNode(id=0, room_id=kitchen, label="coffee corner", object_ids=(ids["table"], ids["mug_k"]), centroid=(2.1, 2.0)),
    ])
    graph.add_edges([
        SpatialEdge(src_object_id=ids["mug_k"], dst_object_id=ids["table"], relation=Relation.ON, confidence=0.9),
        SpatialEdge(src_object_id=ids["mug_b"], dst_object_id=ids["desk"], relation=Relation.ON, confidence=0.9),
        SpatialEdge(src_object_id=ids["sofa"], dst_object_id=ids["desk"], relation=Relation.NEAR, confidence=0.8),
    ])
    return graph, ids


def png_bytes(size: int = 40) -> bytes:
    return iio.imwrite("<bytes>", np.full((size, size, 3), 90, dtype=np.uint8), extension=".png")


class TestScoring:
    """Test the composite relevance score"""

    def setup_method(self):
        """Set up the two-room world and a stub embedder"""
        self.graph, self.ids = kitchen_world()
        self.view = self.graph.snapshot()
        self.embedder = ProviderSet.stub(DIM).embedder

    def ranked(self, text: str, k: int = 10):
        return rank(self.view, parse_query_rules(text), k, self.embedder)

    def test_clamp_and_combine(self):
        """Test similarities are clipped and terms summed with their sign"""
        assert clamp_sim(-0.3) == 0.0
        assert clamp_sim(1.0000000001) == 1.0
        terms = [
            ScoreTerm(constraint_index=0, polarity=1, weight=0.5, sim=0.8),
            ScoreTerm(constraint_index=1, polarity=-1, weight=0.5, sim=0.4),
        ]
        assert combine_terms(1, terms) == pytest.approx(0.2)
        assert combine_terms(0, terms) == 0.0

    def test_relation_picks_supported_object(self):
        """Test the mug on the table beats the mug on the desk"""
        top = self.ranked("find the mug on the table")[0]
        assert top.object_id == self.ids["mug_k"]
        assert top.reference_id == self.ids["table"]
        mug = self.view.objects[self.ids["mug_k"]]
        table = self.view.objects[self.ids["table"]]
        assert top.reference_distance == pytest.approx(math.dist(mug.centroid, table.centroid))

    def test_negated_room(self):
        """Test negating the kitchen pushes the kitchen mug below zero"""
        ranked = self.ranked("find the mug not in the kitchen")
        assert ranked[0].object_id == self.ids["mug_b"]
        kitchen_mug = next(c for c in ranked if c.object_id == self.ids["mug_k"])
        assert kitchen_mug.score < 0.0

    def test_floor_filter(self):
        """Test objects on other floors are never candidates"""
        ranked = self.ranked("find the lamp on floor 2")
        assert [c.object_id for c in ranked] == [self.ids["lamp"]]
        assert ranked[0].score == pytest.approx(1.0)
        assert [t.constraint_index for t in ranked[0].terms] == [0]

    def test_anchored_relation(self):
        """Test a chained relation is evaluated at the reference it describes"""
        query = parse_query_rules("find the mug on the desk near the sofa")
        evaluator = ConstraintEvaluator(SimilarityIndex(self.view, self.embedder), query)
        assert evaluator.sims(2)[self.ids["mug_b"]] == pytest.approx(1.0)
        assert evaluator.sims(2)[self.ids["mug_k"]] == 0.0
        assert evaluator.sims(2)[self.ids["sofa"]] == 0.0
        top = rank(self.view, query, 1, self.embedder)[0]
        assert top.object_id == self.ids["mug_b"]

    def test_scores_recompute(self):
        """Test every candidate's score follows from its terms"""
        for text in QUERIES:
            for candidate in self.ranked(text):
                assert candidate.recompute() == candidate.score

    @pytest.mark.parametrize("text", QUERIES)
    def test_matches_brute_force(self, text):
        """Test ranked scores and order agree with the brute-force reference"""
        query = parse_query_rules(text)
        ranked = rank(self.view, query, 10, self.embedder)
        reference = oracle_scores(self.view, query, self.embedder.embed)
        assert {c.object_id: c.score for c in ranked} == pytest.approx({oid: s for oid, (s, _) in reference.items()})
        assert [c.object_id for c in ranked] == oracle_rank(self.view, query, self.embedder.embed)

    def test_tie_break(self):
        """Test equal scores fall to reference distance, then id"""
        candidates = [
            CandidateScore(object_id=5, h_floor=1, score=0.5, reference_distance=2.0),
            CandidateScore(object_id=9, h_floor=1, score=0.5, reference_distance=1.0),
            CandidateScore(object_id=1, h_floor=1, score=0.5),
            CandidateScore(object_id=7, h_floor=1, score=0.6),
        ]
        assert [c.object_id for c in sorted(candidates, key=rank_key)] == [7, 9, 5, 1]

    def test_index_tracks_snapshot(self):
        """Test the similarity index is only valid for its own snapshot"""
        index = SimilarityIndex(self.view, self.embedder)
        assert index.matches(self.view)
        self.graph.update_description(self.ids["sofa"], "grey")
        assert not index.matches(self.graph.snapshot())

    def test_invalid_k(self):
        """Test k below one is refused"""
        with pytest.raises(ValueError, match="k must be at least 1"):
            self.ranked("find the mug", k=0)


class TestRetrievalWorkflow:
    """Test parse, rank, verify and finalize end to end"""

    def setup_method(self):
        """Set up the world, stub providers and a latency recorder"""
        self.graph, self.ids = kitchen_world()
        self.providers = ProviderSet.stub(DIM)
        self.recorder = LatencyRecorder()

    def workflow(self, auditor=None, **settings) -> RetrievalWorkflow:
        config = RetrievalConfig(**settings)
        return RetrievalWorkflow(
            self.graph.snapshot(), None, self.providers, config, auditor=auditor, recorder=self.recorder
        )

    def test_accept_all(self):
        """Test the first audited candidate is accepted"""
        answer = self.workflow(AcceptAllAuditor()).retrieve("find the mug on the table")
        assert (answer.status, answer.object_id, answer.label) == ("accepted", self.ids["mug_k"], "mug")
        assert len(answer.verifications) == 1
        assert self.recorder.latency_report()["query"].count == 1
        assert answer.elapsed_ms > 0.0

    def test_rejection_advances(self):
        """Test a rejected top candidate hands the answer to the next one"""
        answer = self.workflow(KeyedAuditor([self.ids["mug_b"]])).retrieve("find the mug on the table")
        assert answer.status == "accepted"
        assert answer.object_id == self.ids["mug_b"]
        assert [v.verdict for v in answer.verifications] == ["reject", "accept"]
        assert answer.candidates[0].object_id == self.ids["mug_k"]

    def test_budget_exhausted(self):
        """Test the top candidate is returned unverified when nothing is accepted"""
        answer = self.workflow(KeyedAuditor([]), verify_budget=2).retrieve("find the mug on the table")
        assert answer.status == "unverified"
        assert answer.object_id == self.ids["mug_k"]
        assert len(answer.verifications) == 2

    def test_verification_disabled(self):
        """Test turning audits off accepts the top candidate"""
        answer = self.workflow(verify=False).retrieve("find the mug not in the kitchen")
        assert (answer.status, answer.object_id) == ("accepted", self.ids["mug_b"])
        assert answer.verifications[0].rationale == "verification disabled"

    def test_model_auditor_without_views(self):
        """Test objects without a best view cannot be verified"""
        answer = self.workflow(verify_budget=3).retrieve("find the mug on the table")
        assert answer.status == "unverified"
        assert [v.verdict for v in answer.verifications] == ["provider_unavailable"] * 3
        assert answer.verifications[0].rationale == "no best view"

    def test_empty_floor(self):
        """Test a floor filter with no objects gives an empty answer"""
        answer = self.workflow(AcceptAllAuditor()).retrieve("find the lamp on floor 3")
        assert answer.status == "empty"
        assert answer.object_id is None
        assert answer.candidates == []

    def test_parse_error(self):
        """Test a query without target raises instead of answering"""
        with pytest.raises(QueryParseError):
            self.workflow().retrieve("find")

    def test_refresh(self):
        """Test a refreshed workflow sees objects added after it was built"""
        flow = self.workflow(AcceptAllAuditor())
        kettle = place(self.graph, "kettle", 1.0, 1.0, 0.9, self.graph.snapshot().floor_by_index(1).id)
        assert flow.retrieve("find the kettle").object_id != kettle
        flow.refresh(self.graph.snapshot())
        assert flow.retrieve("find the kettle").object_id == kettle

    def test_audit_record(self):
        """Test the audit record is plain JSON with ranked candidates"""
        answer = retrieve(
            self.graph.snapshot(), "find a lamp near the sofa that is not white",
            RetrievalConfig(auditor="accept_all"), self.providers,
        )
        record = json.loads(json.dumps(answer.audit_record()))
        assert [c["kind"] for c in record["constraints"]] == ["target_attribute", "relation", "target_attribute"]
        assert record["constraints"][1]["relation"] == "near"
        assert [c["rank"] for c in record["candidates"]] == list(range(1, len(record["candidates"]) + 1))
        assert record["answer"]["status"] == "accepted"


class TestModelAuditor:
    """Test vision verification over stored best-view crops"""

    def setup_method(self):
        """Set up a world whose kitchen mug has a stored best view"""
        self.view_ref = BestViewRef.from_bbox("kf-1", (5, 5, 20, 20), 40, 40)
        self.graph, self.ids = kitchen_world(best_view=self.view_ref)
        self.store = KeyframeStore()
        pose = Pose(timestamp=0.0, position=(2.0, 0.5, 1.2), orientation=camera_quaternion(math.pi / 2))
        self.store.add("kf-1", pose, 40, 40, image_bytes=png_bytes())
        fixtures = StubFixtures()
        fixtures.register_default(ProviderRole.VERIFIER, '{"verdict": "accept", "rationale": "red mug on a table"}')
        self.client = ProviderSet.stub(DIM, fixtures=fixtures).get(ProviderRole.VERIFIER)
        self.query = parse_query_rules("find the mug on the table")
        self.candidate = CandidateScore(object_id=self.ids["mug_k"], h_floor=1, score=0.9)

    def test_accepts_with_crop(self):
        """Test a stored crop is sent and the verdict parsed"""
        result = ModelAuditor(self.client).verify(self.candidate, self.query, self.graph.snapshot(), self.store)
        assert (result.verdict, result.rationale) == ("accept", "red mug on a table")

    def test_image_absent(self):
        """Test a map without images cannot verify"""
        result = ModelAuditor(self.client).verify(self.candidate, self.query, self.graph.snapshot(), None)
        assert (result.verdict, result.rationale) == ("provider_unavailable", "image absent")

    def test_malformed_reply(self):
        """Test a reply outside the verdict schema is not a rejection"""
        fixtures = StubFixtures()
        fixtures.register_default(ProviderRole.VERIFIER, '{"verdict": "probably"}')
        client = ProviderSet.stub(DIM, fixtures=fixtures).get(ProviderRole.VERIFIER)
        result = ModelAuditor(client).verify(self.candidate, self.query, self.graph.snapshot(), self.store)
        assert (result.verdict, result.rationale) == ("provider_unavailable", "malformed reply")

    def test_request_lists_constraints(self):
        """Test the audit request names place, floor and constraint polarity"""
        query = parse_query_rules("find the mug not in the bedroom")
        request = audit_request(self.candidate, query, self.graph.snapshot())
        assert "Room: kitchen" in request
        assert "Area: coffee corner" in request
        assert "Floor: 1" in request
        assert "Constraint 1 (room): bedroom [must NOT match]" in request

    def test_workflow_accepts(self):
        """Test the workflow answers through the model auditor"""
        providers = ProviderSet.stub(DIM, fixtures=StubFixtures())
        flow = RetrievalWorkflow(
            self.graph.snapshot(), self.store, providers, RetrievalConfig(), auditor=ModelAuditor(self.client),
            recorder=LatencyRecorder(),
        )
        answer = flow.retrieve("find the mug on the table")
        assert (answer.status, answer.object_id) == ("accepted", self.ids["mug_k"])


class TestTemporalMemory:
    """Test fusing interactions into object descriptions"""

    def setup_method(self):
        """Set up the world"""
        self.graph, self.ids = kitchen_world()

    def test_truncate_oldest(self):
        """Test truncation keeps the newest whole words"""
        assert truncate_oldest("alpha beta gamma", 10) == "beta gamma"
        assert truncate_oldest("alpha beta gamma", 8) == "gamma"
        assert truncate_oldest("short", 10) == "short"

    def test_stub_appends(self):
        """Test the stub path appends the interaction"""
        assert stub_fuse("red", "moved to the sink", 512) == "red moved to the sink"
        revision = self.graph.snapshot().revision
        node = fuse_temporal_memory(self.graph, self.ids["mug_k"], "moved to the sink")
        assert node.description == "red moved to the sink"
        assert self.graph.snapshot().revision == revision + 1

    def test_model_rewrite(self):
        """Test a provider rewrite replaces the description"""
        fixtures = StubFixtures()
        fixtures.register_default(ProviderRole.SUMMARIZER, '{"description": "red mug, now by the sink"}')
        client = ProviderSet.stub(DIM, fixtures=fixtures).get(ProviderRole.SUMMARIZER)
        node = fuse_temporal_memory(self.graph, self.ids["mug_k"], "moved to the sink", client=client)
        assert node.description == "red mug, now by the sink"

    def test_unavailable_provider_appends(self):
        """Test an unreachable provider falls back to appending"""
        client = ProviderSet.stub(DIM).get(ProviderRole.SUMMARIZER)
        node = fuse_temporal_memory(self.graph, self.ids["mug_b"], "has a chip", client=client, max_len=8)
        assert node.description == "a chip"

    def test_empty_interaction(self):
        """Test an empty interaction is refused"""
        with pytest.raises(ValueError, match="interaction text cannot be empty"):
            fuse_temporal_memory(self.graph, self.ids["mug_k"], "  ")
