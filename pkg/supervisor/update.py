import json
import logging
import math
from collections import Counter
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from skimage.draw import line as draw_line

from config import GridConfig, SupervisorConfig
from errors import ProviderUnavailable
from graph.keyframes import KeyframeStore
from graph.scene_graph import GraphView, SceneGraph
from model_client import ModelClient, ProviderRole, ProviderSet
from scene_schema import AreaNode, KeyframeEntry, ObjectNode, RoomNode, UpdateReport
from streams.geometric import OCCUPIED, EndOfStream, OccupancyGrid, Segmentation, TriggerCheck, segment_rooms
from streams.semantic import match_masks
from supervisor.bev import render_bev
from supervisor.triggers import TriggerState, check_hard_trigger, check_soft_trigger
from utils.geometry import single_linkage
from utils.llm import load_prompt, parse_reply

logger = logging.getLogger(__name__)

DEFAULT_HORIZONTAL_FOV = math.radians(90.0)


class LabelReply(BaseModel):
    label: str = Field(min_length=1)
    summary: str = ""


# ---------------------------------------------------------------------------
# Room best view
# ---------------------------------------------------------------------------

def visible_cells(grid: OccupancyGrid, entry: KeyframeEntry, fov: float, rays: int, view_range: float) -> np.ndarray:
    """Boolean grid of cells seen from a keyframe; rays stop at the first occupied cell"""
    seen = np.zeros(grid.shape, dtype=bool)
    x, y = entry.pose.position[0], entry.pose.position[1]
    r0, c0 = (int(v) for v in grid.world_to_cell(x, y))
    if not (0 <= r0 < grid.shape[0] and 0 <= c0 < grid.shape[1]):
        return seen
    fx, fy = entry.pose.forward_xy()
    heading = math.atan2(fy, fx)
    for angle in np.linspace(heading - fov / 2.0, heading + fov / 2.0, rays):
        r1, c1 = grid.world_to_cell(x + view_range * math.cos(angle), y + view_range * math.sin(angle))
        rr, cc = draw_line(r0, c0, int(r1), int(c1))
        inside = (rr >= 0) & (rr < grid.shape[0]) & (cc >= 0) & (cc < grid.shape[1])
        if not inside.all():
            stop = int(np.argmin(inside))
            rr, cc = rr[:stop], cc[:stop]
        blocked = np.flatnonzero(grid.cells[rr, cc] == OCCUPIED)
        if blocked.size:
            rr, cc = rr[:blocked[0]], cc[:blocked[0]]
        seen[rr, cc] = True
    return seen


def select_room_best_view(
    room: RoomNode,
    keyframes: Sequence[KeyframeEntry],
    grid: OccupancyGrid,
    fov: float = DEFAULT_HORIZONTAL_FOV,
    rays: int = 90,
    view_range: float = 10.0,
) -> Optional[str]:
    """
    Keyframe whose field of view covers most of the room's mask

    Returns:
        Keyframe id, ties to the earliest keyframe; None when no candidate sees the room
    """
    candidates = [k for k in keyframes if k.floor_id in (None, room.floor_id)]
    if not candidates:
        return None
    footprint = grid.paint(room.mask)
    best: Optional[Tuple[int, float, str]] = None
    for entry in sorted(candidates, key=lambda k: (k.timestamp, k.keyframe_id)):
        score = int(np.count_nonzero(visible_cells(grid, entry, fov, rays, view_range) & footprint))
        if score > 0 and (best is None or score > best[0]):
            best = (score, entry.timestamp, entry.keyframe_id)
    return best[2] if best else None


# ---------------------------------------------------------------------------
# Stub labelling
# ---------------------------------------------------------------------------

def _footprint(obj: ObjectNode) -> float:
    sx, sy, _ = obj.bbox3d.size
    return sx * sy


def stub_area_label(members: Sequence[ObjectNode]) -> Tuple[str, str]:
    """Most frequent member label; ties go to the larger total footprint, then alphabetical"""
    counts = Counter(obj.label for obj in members)
    footprint: Dict[str, float] = {}
    for obj in members:
        footprint[obj.label] = footprint.get(obj.label, 0.0) + _footprint(obj)
    modal = min(counts, key=lambda label: (-counts[label], -footprint[label], label))
    listing = ", ".join(f"{label}" if counts[label] == 1 else f"{counts[label]} {label}" for label in sorted(counts))
    return f"{modal} area", f"{modal} area with {listing}"


def stub_room_label(objects: Sequence[ObjectNode], hints: Dict[str, str]) -> str:
    votes = Counter(hints[obj.label] for obj in objects if obj.label in hints)
    if not votes:
        return "room"
    return min(votes, key=lambda room: (-votes[room], room))


def stub_room_summary(label: str, areas: Sequence[AreaNode], objects: Sequence[ObjectNode]) -> str:
    if not objects:
        return f"{label} with no mapped objects"
    counts = Counter(obj.label for obj in objects)
    listing = ", ".join(label_ if n == 1 else f"{n} {label_}" for label_, n in sorted(counts.items()))
    if areas:
        area_text = "; ".join(area.summary or area.label for area in areas)
        return f"{label} containing {area_text}. Objects: {listing}"
    return f"{label}. Objects: {listing}"


def _ask_label(client: Optional[ModelClient], prompt: str, request: str, images: Sequence[bytes] = ()) -> Optional[LabelReply]:
    if client is None:
        return None
    try:
        reply = client.chat(load_prompt(prompt), request, images=images)
    except ProviderUnavailable as e:
        logger.debug(f"{prompt}: provider unavailable ({e.reason}), stub label")
        return None
    return parse_reply(reply, LabelReply)


# ---------------------------------------------------------------------------
# Bottom-up update
# ---------------------------------------------------------------------------

def _jaccard(a: Sequence[int], b: Sequence[int]) -> float:
    sa, sb = set(a), set(b)
    union = sa | sb
    return len(sa & sb) / len(union) if union else 0.0


def build_room_areas(
    view: GraphView,
    room: RoomNode,
    cfg: SupervisorConfig,
    summarizer: Optional[ModelClient] = None,
) -> List[AreaNode]:
    """Cluster a room's objects into areas, reusing ids of previous areas with matching members"""
    objects = view.objects_in_room(room.id)
    if not objects:
        return []
    points = np.array([[o.centroid[0], o.centroid[1]] for o in objects])
    clusters = [[objects[i] for i in members] for members in single_linkage(points, cfg.area_radius_m)]
    previous = [view.areas[a] for a in room.area_ids if a in view.areas]

    ids: List[int] = [0] * len(clusters)
    member_ids = [tuple(sorted(o.id for o in cluster)) for cluster in clusters]
    used = set()
    for i, members in enumerate(member_ids):
        for area in previous:
            if area.object_ids == members and area.id not in used:
                ids[i] = area.id
                used.add(area.id)
                break
    pairs = sorted(
        (-_jaccard(members, area.object_ids), area.id, i)
        for i, members in enumerate(member_ids) if ids[i] == 0
        for area in previous if area.id not in used
    )
    for score, area_id, i in pairs:
        if -score < cfg.area_match_jaccard:
            break
        if ids[i] == 0 and area_id not in used:
            ids[i] = area_id
            used.add(area_id)

    areas = []
    for area_id, cluster in zip(ids, clusters):
        label, summary = stub_area_label(cluster)
        request = "\n".join(f"- {o.label}: {o.description or 'no description'}" for o in cluster)
        reply = _ask_label(summarizer, "area_label", request)
        if reply is not None:
            label, summary = reply.label.strip(), reply.summary.strip()
        centroid = (
            float(np.mean([o.centroid[0] for o in cluster])),
            float(np.mean([o.centroid[1] for o in cluster])),
        )
        areas.append(
            AreaNode(
                id=area_id,
                room_id=room.id,
                label=label,
                summary=summary,
                object_ids=tuple(sorted(o.id for o in cluster)),
                centroid=(round(centroid[0], 9), round(centroid[1], 9)),
            )
        )
    return areas


def run_update(
    graph: SceneGraph,
    store: KeyframeStore,
    floor_id: int,
    grid: OccupancyGrid,
    grid_cfg: GridConfig,
    cfg: SupervisorConfig,
    providers: Optional[ProviderSet] = None,
    reason: str = "manual",
    timestamp: float = 0.0,
    update_index: int = 0,
    horizontal_fov: float = DEFAULT_HORIZONTAL_FOV,
) -> UpdateReport:
    """
    Bottom-up reorganization of one floor

    Steps run in a fixed order: re-segment and match rooms, re-assign objects, build
    areas, label areas, pick room best views, summarize rooms. Provider failures fall back
    to the stub labellers without changing the order.

    Returns:
        UpdateReport with room/object/area counts
    """
    report = UpdateReport(update_index=update_index, floor_id=floor_id, reason=reason, timestamp=timestamp, revision=0)
    summarizer = providers.get(ProviderRole.SUMMARIZER) if providers is not None else None

    masks = segment_rooms(grid, grid_cfg)
    view = graph.snapshot()
    old_rooms = view.rooms_on_floor(floor_id)
    if masks:
        matches = match_masks(old_rooms, masks, cfg.room_match_iou)
        updated: List[RoomNode] = []
        for mask, room_id in zip(masks, matches):
            if room_id is None:
                updated.append(RoomNode(id=0, floor_id=floor_id, mask=mask))
                report.rooms_created += 1
            else:
                updated.append(view.rooms[room_id].model_copy(update={"mask": mask}))
                report.rooms_matched += 1
        report.rooms_retired = len(old_rooms) - report.rooms_matched
        graph.set_floor_rooms(floor_id, updated)

    report.objects_moved = graph.reassign_objects_to_rooms()

    view = graph.snapshot()
    for room in view.rooms_on_floor(floor_id):
        graph.set_room_areas(room.id, build_room_areas(view, room, cfg, summarizer))

    view = graph.snapshot()
    keyframes = [k for k in store.entries() if k.floor_id == floor_id]
    for room in view.rooms_on_floor(floor_id):
        best_view = select_room_best_view(room, keyframes, grid, horizontal_fov, cfg.fov_rays, cfg.view_range_m)
        if best_view is not None:
            report.best_views_selected += 1
        best_view = best_view or room.best_view_keyframe

        objects = view.objects_in_room(room.id)
        areas = [view.areas[a] for a in room.area_ids if a in view.areas]
        label = stub_room_label(objects, cfg.room_hints)
        summary = stub_room_summary(room.label or label, areas, objects)
        images = []
        if best_view is not None and best_view in store:
            payload = store.image_bytes(best_view)
            if payload is not None:
                images.append(payload)
        request = "\n".join(f"- {a.label}: {a.summary}" for a in areas) or "No functional areas."
        reply = _ask_label(summarizer, "room_summary", request, images)
        if reply is not None:
            label, summary = reply.label.strip(), reply.summary.strip() or summary
        graph.update_room(
            room.id,
            label=room.label or label,
            summary=summary,
            best_view_keyframe=best_view,
        )

    view = graph.snapshot()
    report.areas_built = sum(len(r.area_ids) for r in view.rooms_on_floor(floor_id))
    report.revision = view.revision
    logger.info(
        f"Update {update_index} on floor {floor_id} ({reason}): rooms matched {report.rooms_matched}, "
        f"created {report.rooms_created}, retired {report.rooms_retired}, objects moved {report.objects_moved}, "
        f"areas {report.areas_built}"
    )
    return report


# ---------------------------------------------------------------------------
# Supervisor
# ---------------------------------------------------------------------------

class Supervisor:
    """
    Evaluates queued trigger checks on the writer context and runs the updates they call for

    Reports are appended to artifacts/updates.jsonl and a BEV of the updated floor is
    written next to them when an artifacts directory is configured.
    """

    def __init__(
        self,
        graph: SceneGraph,
        store: KeyframeStore,
        providers: ProviderSet,
        grid_cfg: GridConfig,
        cfg: SupervisorConfig,
        artifacts_dir: Optional[Path] = None,
        horizontal_fov: float = DEFAULT_HORIZONTAL_FOV,
    ):
        self.graph = graph
        self.store = store
        self.providers = providers
        self.grid_cfg = grid_cfg
        self.cfg = cfg
        self.artifacts_dir = Path(artifacts_dir) if artifacts_dir is not None else None
        self.horizontal_fov = horizontal_fov
        self.state = TriggerState()
        self.reports: List[UpdateReport] = []
        self.soft_triggers = 0
        self.hard_triggers = 0
        if self.artifacts_dir is not None:
            self.artifacts_dir.mkdir(parents=True, exist_ok=True)
            (self.artifacts_dir / "updates.jsonl").write_text("", encoding="utf-8")

    def note_changes(self, created: int) -> None:
        self.state.objects_changed_since_update += created

    def _bev_png(self, floor_id: int, segmentation: Segmentation, now: float) -> Optional[bytes]:
        if segmentation.grid is None:
            return None
        bev = render_bev(
            self.graph.snapshot(), self.state, floor_id, segmentation.grid, now, self.cfg.wedge_fade_s, self.cfg.bev_scale_m
        )
        return bev.to_png()

    def _update(self, floor_id: int, segmentation: Segmentation, reason: str, timestamp: float) -> Optional[UpdateReport]:
        if segmentation.grid is None:
            logger.debug(f"Floor {floor_id} has no grid yet, skipping update ({reason})")
            return None
        report = run_update(
            self.graph, self.store, floor_id, segmentation.grid, self.grid_cfg, self.cfg, self.providers,
            reason=reason, timestamp=timestamp, update_index=len(self.reports) + 1, horizontal_fov=self.horizontal_fov,
        )
        self.reports.append(report)
        if self.state.last_pose is not None:
            self.state.mark_update(self.state.last_pose, self.state.current_floor_id or floor_id)
        if self.artifacts_dir is not None:
            with open(self.artifacts_dir / "updates.jsonl", "a", encoding="utf-8", newline="\n") as handle:
                handle.write(json.dumps(report.model_dump(mode="json"), sort_keys=True) + "\n")
            png = self._bev_png(floor_id, segmentation, timestamp)
            if png is not None:
                (self.artifacts_dir / f"bev_{report.update_index:04d}.png").write_bytes(png)
        return report

    def on_check(self, check: TriggerCheck) -> List[UpdateReport]:
        reports = []
        left = self.state.current_floor_id
        hard = check_hard_trigger(self.state, check.floor_path, check.floor_id)
        self.state.advance(check.poses, check.floor_path, self.cfg.loop_radius_m)
        if hard and left is not None and left in check.segmentations:
            self.hard_triggers += 1
            logger.info(f"Hard trigger: left floor {left} for floor {check.floor_id}")
            report = self._update(left, check.segmentations[left], "floor switch", check.timestamp)
            if report is not None:
                reports.append(report)

        segmentation = check.segmentations.get(check.floor_id)
        bev = None
        if self.cfg.mode == "model" and segmentation is not None:
            bev = self._bev_png(check.floor_id, segmentation, check.timestamp)
        decision = check_soft_trigger(
            self.state, self.graph.snapshot(), check, self.cfg, self.providers.get(ProviderRole.SUPERVISOR), bev
        )
        if decision.trigger and segmentation is not None:
            self.soft_triggers += 1
            logger.info(f"Soft trigger at frame {check.frame_index}: {decision.reason} ({decision.source})")
            report = self._update(check.floor_id, segmentation, decision.reason, check.timestamp)
            if report is not None:
                reports.append(report)
        return reports

    def on_end(self, end: EndOfStream) -> List[UpdateReport]:
        reports = []
        for floor_id in sorted(end.segmentations):
            report = self._update(floor_id, end.segmentations[floor_id], "end of stream", end.timestamp)
            if report is not None:
                reports.append(report)
        return reports
