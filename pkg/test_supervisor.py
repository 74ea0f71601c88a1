import json

import numpy as np
import pytest

from config import GridConfig, SupervisorConfig
from graph.keyframes import KeyframeStore
from graph.scene_graph import SceneGraph
from model_client import ProviderRole, ProviderSet, StubFixtures
from scene_schema import UNASSIGNED, Box3D, KeyframeEntry, ObjectNode, Pose
from streams.geometric import FREE, OCCUPIED, EndOfStream, OccupancyGrid, Segmentation, TriggerCheck, segment_rooms
from supervisor.bev import FREE_COLOR, TRAJECTORY_COLOR, WALL_COLOR, render_bev, room_color
from supervisor.triggers import (
    TriggerState,
    UpdatePoint,
    check_hard_trigger,
    check_soft_trigger,
    rules_soft_trigger,
)
from supervisor.update import (
    Supervisor,
    build_room_areas,
    run_update,
    select_room_best_view,
    stub_area_label,
    stub_room_label,
)
from utils.geometry import camera_quaternion

DIM = 8
GRID_CFG = GridConfig(resolution_m=0.1)


def two_room_grid() -> OccupancyGrid:
    """Two 4 m rooms side by side joined by a 0.8 m doorway, 0.1 m cells"""
    grid = OccupancyGrid(1, 0.1, (0.0, 0.0), (44, 86))
    grid.cells[:, :] = OCCUPIED
    grid.cells[2:42, 2:42] = FREE
    grid.cells[2:42, 44:84] = FREE
    grid.cells[18:26, 42:44] = FREE
    return grid


def pose_at(x: float, y: float, t: float = 0.0, yaw: float = 0.0) -> Pose:
    return Pose(timestamp=t, position=(x, y, 1.2), orientation=camera_quaternion(yaw))


def put_object(graph: SceneGraph, label: str, x: float, y: float, floor_id: int, size: float = 0.4, axis: int = 0) -> int:
    embedding = [0.0] * DIM
    embedding[axis] = 1.0
    half = size / 2.0
    box = Box3D(lo=(x - half, y - half, 0.0), hi=(x + half, y + half, 0.8))
    return graph.upsert_object(
        ObjectNode(label=label, embedding=tuple(embedding), centroid=(x, y, 0.4), bbox3d=box, floor_id=floor_id)
    )


def furnished_graph():
    """Bed and nightstand west of the doorway, desk, monitor and a far sofa east of it"""
    graph = SceneGraph(embedding_dim=DIM)
    floor = graph.add_floor(1, 0.0, 3.0)
    ids = {
        "bed": put_object(graph, "bed", 1.0, 1.0, floor.id, size=1.6),
        "nightstand": put_object(graph, "nightstand", 2.2, 1.0, floor.id, axis=1),
        "desk": put_object(graph, "desk", 6.0, 3.0, floor.id, size=1.0, axis=2),
        "monitor": put_object(graph, "monitor", 6.2, 3.0, floor.id, size=0.3, axis=3),
        "sofa": put_object(graph, "sofa", 8.0, 0.8, floor.id, size=0.8, axis=4),
    }
    return graph, floor, ids


def segmentation_of(grid: OccupancyGrid, revision: int = 1) -> Segmentation:
    return Segmentation(revision, tuple(segment_rooms(grid, GRID_CFG)), grid.frozen_copy())


class TestHardTrigger:
    """Test floor switch detection"""

    def test_first_check_never_fires(self):
        """Test the first check only records the floor"""
        state = TriggerState()
        assert not check_hard_trigger(state, (1, 1), 1)
        assert state.current_floor_id == 1

    def test_switch_fires(self):
        """Test a new floor at the check fires"""
        state = TriggerState(current_floor_id=1)
        assert check_hard_trigger(state, (1, 2), 2)
        assert not check_hard_trigger(state, (2, 2), 2)

    def test_round_trip_inside_interval(self):
        """Test leaving and returning within one interval still fires"""
        state = TriggerState(current_floor_id=1)
        assert check_hard_trigger(state, (1, 2, 1), 1)


class TestSoftTrigger:
    """Test the rule and model supervisors"""

    def setup_method(self):
        """Set up a furnished floor and its segmentation"""
        self.graph, self.floor, self.ids = furnished_graph()
        self.grid = two_room_grid()
        self.segmentation = segmentation_of(self.grid)
        self.cfg = SupervisorConfig()

    def check(self, *poses: Pose) -> TriggerCheck:
        return TriggerCheck(
            frame_index=len(poses), timestamp=poses[-1].timestamp, floor_id=self.floor.id,
            floor_path=tuple(self.floor.id for _ in poses), poses=tuple(poses),
            segmentations={self.floor.id: self.segmentation},
        )

    def test_new_area(self):
        """Test standing in an unsummarized room fires"""
        decision = rules_soft_trigger(TriggerState(), self.graph.snapshot(), self.check(pose_at(2.0, 2.0)), self.cfg)
        assert (decision.trigger, decision.reason, decision.source) == (True, "new area", "rules")

    def test_summarized_room_holds(self):
        """Test a room summarized by an update does not fire again"""
        run_update(self.graph, KeyframeStore(), self.floor.id, self.grid, GRID_CFG, self.cfg)
        state = TriggerState()
        decision = rules_soft_trigger(state, self.graph.snapshot(), self.check(pose_at(2.0, 2.0)), self.cfg)
        assert not decision.trigger
        assert len(state.rooms_visited_since_update) == 1

    def test_loop_closure_fires_once(self):
        """Test returning to an old update point after a long walk fires one time"""
        run_update(self.graph, KeyframeStore(), self.floor.id, self.grid, GRID_CFG, self.cfg)
        state = TriggerState()
        start = pose_at(2.0, 2.0)
        state.advance([start], [self.floor.id], self.cfg.loop_radius_m)
        state.mark_update(start, self.floor.id)
        walk = [pose_at(2.0 + dx, 2.0) for dx in (0.0, 2.5, 0.0)] * 6
        state.advance(walk, [self.floor.id] * len(walk), self.cfg.loop_radius_m)
        assert state.odometer_m >= self.cfg.loop_path_len_m
        back = self.check(pose_at(2.1, 2.0))
        decision = rules_soft_trigger(state, self.graph.snapshot(), back, self.cfg)
        assert decision.trigger
        assert decision.reason.startswith("loop closure after")
        assert not rules_soft_trigger(state, self.graph.snapshot(), back, self.cfg).trigger

    def test_object_count(self):
        """Test enough new objects fire an update"""
        run_update(self.graph, KeyframeStore(), self.floor.id, self.grid, GRID_CFG, self.cfg)
        state = TriggerState(objects_changed_since_update=25)
        decision = rules_soft_trigger(state, self.graph.snapshot(), self.check(pose_at(2.0, 2.0)), self.cfg)
        assert decision.reason == "25 new objects"

    def test_model_decision(self):
        """Test the model supervisor's reply is used when it parses"""
        fixtures = StubFixtures()
        fixtures.register_default(ProviderRole.SUPERVISOR, '{"trigger": true, "reason": "unexplored corridor"}')
        client = ProviderSet.stub(DIM, fixtures=fixtures).get(ProviderRole.SUPERVISOR)
        cfg = SupervisorConfig(mode="model")
        decision = check_soft_trigger(TriggerState(), self.graph.snapshot(), self.check(pose_at(2.0, 2.0)), cfg, client, b"png")
        assert (decision.trigger, decision.reason, decision.source) == (True, "unexplored corridor", "model")

    def test_model_falls_back_to_rules(self):
        """Test an unusable supervisor reply falls back to the rules"""
        fixtures = StubFixtures()
        fixtures.register_default(ProviderRole.SUPERVISOR, "I would say yes")
        client = ProviderSet.stub(DIM, fixtures=fixtures).get(ProviderRole.SUPERVISOR)
        cfg = SupervisorConfig(mode="model")
        decision = check_soft_trigger(TriggerState(), self.graph.snapshot(), self.check(pose_at(2.0, 2.0)), cfg, client, b"png")
        assert decision.source == "rules"
        assert decision.reason == "new area"

    def test_age_weight(self):
        """Test update markers fade linearly"""
        point = UpdatePoint(pose=pose_at(0.0, 0.0, t=0.0), floor_id=1, odometer_m=0.0)
        assert point.age_weight(60.0, 120.0) == pytest.approx(0.5)
        assert point.age_weight(500.0, 120.0) == 0.0


class TestStubLabels:
    """Test deterministic area and room labels"""

    def test_area_label_modal(self):
        """Test the most frequent label names the area"""
        graph, _, ids = furnished_graph()
        view = graph.snapshot()
        members = [view.objects[ids["desk"]], view.objects[ids["monitor"]]]
        assert stub_area_label(members) == ("desk area", "desk area with desk, monitor")

    def test_area_label_counts(self):
        """Test repeated labels are counted in the summary"""
        graph, floor, ids = furnished_graph()
        second = put_object(graph, "monitor", 6.4, 3.0, floor.id, size=0.3, axis=5)
        view = graph.snapshot()
        members = [view.objects[i] for i in (ids["desk"], ids["monitor"], second)]
        assert stub_area_label(members) == ("monitor area", "monitor area with desk, 2 monitor")

    def test_room_label_votes(self):
        """Test room hints vote and unknown objects give a plain room"""
        graph, _, ids = furnished_graph()
        view = graph.snapshot()
        hints = SupervisorConfig().room_hints
        office = [view.objects[ids[k]] for k in ("desk", "monitor", "sofa")]
        assert stub_room_label(office, hints) == "office"
        assert stub_room_label([], hints) == "room"


class TestRunUpdate:
    """Test the bottom-up floor reorganization"""

    def setup_method(self):
        """Set up a furnished floor with its occupancy grid"""
        self.graph, self.floor, self.ids = furnished_graph()
        self.grid = two_room_grid()
        self.cfg = SupervisorConfig()

    def update(self, grid=None, store=None):
        return run_update(self.graph, store or KeyframeStore(), self.floor.id, grid or self.grid, GRID_CFG, self.cfg)

    def test_first_update(self):
        """Test rooms, assignments, areas and labels come out of one update"""
        report = self.update()
        assert (report.rooms_created, report.rooms_matched, report.rooms_retired) == (2, 0, 0)
        assert report.objects_moved == 5
        assert report.areas_built == 3
        view = self.graph.snapshot()
        west, east = view.rooms_on_floor(self.floor.id)
        assert west.label == "bedroom"
        assert east.label == "office"
        assert west.summary == "bedroom containing bed area with bed, nightstand. Objects: bed, nightstand"
        assert view.get_object(self.ids["sofa"]).room_id == east.id
        assert report.revision == view.revision

    def test_update_is_fixpoint(self):
        """Test repeating an update on an unchanged grid changes nothing"""
        self.update()
        view = self.graph.snapshot()
        report = self.update()
        assert (report.rooms_created, report.rooms_matched, report.objects_moved) == (0, 2, 0)
        assert self.graph.snapshot().revision == view.revision

    def test_area_ids_persist(self):
        """Test an area keeps its id when a member joins"""
        self.update()
        before = {a.label: a.id for a in self.graph.snapshot().areas.values()}
        put_object(self.graph, "lamp", 6.5, 3.2, self.floor.id, size=0.3, axis=6)
        self.update()
        after = self.graph.snapshot()
        desk_area = after.areas[before["desk area"]]
        assert len(desk_area.object_ids) == 3

    def test_vanished_room_retires(self):
        """Test a room missing from the new segmentation is retired and its objects released"""
        self.update()
        east_id = self.graph.snapshot().rooms_on_floor(self.floor.id)[1].id
        shrunk = two_room_grid()
        shrunk.cells[:, 42:] = OCCUPIED
        report = self.update(grid=shrunk)
        assert (report.rooms_matched, report.rooms_retired) == (1, 1)
        view = self.graph.snapshot()
        assert east_id in view.tombstones
        assert view.get_object(self.ids["desk"]).room_id == UNASSIGNED

    def test_room_best_view(self):
        """Test each room's best view is the keyframe that sees most of it"""
        store = KeyframeStore()
        store.add("kf-west", pose_at(0.5, 2.2, t=0.0), 100, 80, floor_id=self.floor.id)
        store.add("kf-east", pose_at(4.6, 2.2, t=1.0), 100, 80, floor_id=self.floor.id)
        report = self.update(store=store)
        assert report.best_views_selected == 2
        west, east = self.graph.snapshot().rooms_on_floor(self.floor.id)
        assert west.best_view_keyframe == "kf-west"
        assert east.best_view_keyframe == "kf-east"

    def test_best_view_needs_visibility(self):
        """Test keyframes of another floor are never chosen"""
        self.update()
        room = self.graph.snapshot().rooms_on_floor(self.floor.id)[0]
        entry = KeyframeEntry(
            keyframe_id="kf-up", content_hash="", pose=pose_at(2.0, 2.0), timestamp=0.0, width=100, height=80, floor_id=999,
        )
        assert select_room_best_view(room, [entry], self.grid) is None

    def test_model_area_labels(self):
        """Test summarizer replies replace the stub area labels"""
        self.update()
        fixtures = StubFixtures()
        fixtures.register_default(ProviderRole.SUMMARIZER, '{"label": "sleeping corner", "summary": "bed with a nightstand"}')
        summarizer = ProviderSet.stub(DIM, fixtures=fixtures).get(ProviderRole.SUMMARIZER)
        view = self.graph.snapshot()
        west = view.rooms_on_floor(self.floor.id)[0]
        (area,) = build_room_areas(view, west, self.cfg, summarizer)
        assert (area.label, area.summary) == ("sleeping corner", "bed with a nightstand")
        assert area.id == west.area_ids[0]


class TestBev:
    """Test bird's-eye rendering"""

    def test_render(self):
        """Test rooms are tinted, walls dark and the trajectory red, north up"""
        graph, floor, _ = furnished_graph()
        grid = two_room_grid()
        run_update(graph, KeyframeStore(), floor.id, grid, GRID_CFG, SupervisorConfig())
        state = TriggerState()
        state.advance([pose_at(2.25, 2.25), pose_at(3.05, 2.25)], [floor.id, floor.id], 2.0)
        view = graph.snapshot()
        west = view.rooms_on_floor(floor.id)[0]
        bev = render_bev(view, state, floor.id, grid, now=0.0, fade_s=120.0, scale=0.05)
        assert bev.pixels.shape == (88, 172, 3)
        assert bev.scale == pytest.approx(0.05)
        assert set(bev.legend) == {r.id for r in view.rooms_on_floor(floor.id)}
        assert tuple(bev.pixels[-1, 0]) == WALL_COLOR
        tint = np.rint(0.4 * np.array(FREE_COLOR) + 0.6 * np.array(room_color(west.id))).astype(int)
        assert tuple(bev.pixels[87 - 60, 20]) == tuple(tint)
        assert tuple(bev.pixels[87 - 44, 44]) == TRAJECTORY_COLOR
        assert bev.to_png().startswith(b"\x89PNG")


class TestSupervisor:
    """Test queued trigger checks end to end on the writer side"""

    def setup_method(self):
        """Set up a furnished floor and a supervisor writing artifacts"""
        self.graph, self.floor, _ = furnished_graph()
        self.grid = two_room_grid()
        self.segmentation = segmentation_of(self.grid)

    def check(self, index, pose, floor_path, floor_id, segmentations):
        return TriggerCheck(
            frame_index=index, timestamp=pose.timestamp, floor_id=floor_id,
            floor_path=floor_path, poses=(pose,), segmentations=segmentations,
        )

    def test_soft_then_hold(self, tmp_path):
        """Test a new room fires one update and the next check holds"""
        supervisor = Supervisor(self.graph, KeyframeStore(), ProviderSet.stub(DIM), GRID_CFG, SupervisorConfig(), artifacts_dir=tmp_path)
        segs = {self.floor.id: self.segmentation}
        first = supervisor.on_check(self.check(4, pose_at(2.0, 2.0, t=0.4), (self.floor.id,), self.floor.id, segs))
        assert [r.reason for r in first] == ["new area"]
        assert supervisor.on_check(self.check(9, pose_at(2.0, 2.1, t=0.9), (self.floor.id,), self.floor.id, segs)) == []
        lines = (tmp_path / "updates.jsonl").read_text().splitlines()
        assert json.loads(lines[0])["reason"] == "new area"
        assert (tmp_path / "bev_0001.png").is_file()
        assert len(supervisor.state.last_update_poses) == 1

    def test_floor_switch_updates_left_floor(self):
        """Test leaving a floor updates the floor that was left"""
        upper = self.graph.add_floor(2, 3.0, 6.0)
        supervisor = Supervisor(self.graph, KeyframeStore(), ProviderSet.stub(DIM), GRID_CFG, SupervisorConfig())
        supervisor.state.current_floor_id = self.floor.id
        reports = supervisor.on_check(
            self.check(9, pose_at(2.0, 2.0, t=0.9), (self.floor.id, upper.id), upper.id, {self.floor.id: self.segmentation})
        )
        assert [(r.floor_id, r.reason) for r in reports] == [(self.floor.id, "floor switch")]
        assert supervisor.hard_triggers == 1

    def test_end_of_stream(self):
        """Test the final update runs for every segmented floor"""
        supervisor = Supervisor(self.graph, KeyframeStore(), ProviderSet.stub(DIM), GRID_CFG, SupervisorConfig())
        reports = supervisor.on_end(EndOfStream(20, 2.0, {self.floor.id: self.segmentation}))
        assert [r.reason for r in reports] == ["end of stream"]
        assert reports[0].update_index == 1
