import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

from pydantic import BaseModel

from config import SupervisorConfig
from errors import ProviderUnavailable
from graph.scene_graph import GraphView
from model_client import ModelClient
from scene_schema import Pose, RoomNode
from streams.geometric import Segmentation, TriggerCheck
from streams.semantic import match_masks
from utils.llm import load_prompt, parse_reply

logger = logging.getLogger(__name__)


class TriggerReply(BaseModel):
    trigger: bool
    reason: str


@dataclass
class UpdatePoint:
    """Pose at which a map update ran; drawn as a fading wedge on the BEV"""
    pose: Pose
    floor_id: int
    odometer_m: float
    departed: bool = False
    consumed: bool = False

    @property
    def xy(self) -> Tuple[float, float]:
        return (self.pose.position[0], self.pose.position[1])

    def age_weight(self, now: float, fade_s: float) -> float:
        return max(0.0, min(1.0, 1.0 - (now - self.pose.timestamp) / fade_s))


@dataclass(frozen=True)
class SoftDecision:
    trigger: bool
    reason: str
    source: str = "rules"


@dataclass
class TriggerState:
    last_update_poses: List[UpdatePoint] = field(default_factory=list)
    rooms_visited_since_update: Set[int] = field(default_factory=set)
    objects_changed_since_update: int = 0
    current_floor_id: Optional[int] = None
    odometer_m: float = 0.0
    trajectory: Dict[int, List[Tuple[float, float]]] = field(default_factory=dict)
    last_pose: Optional[Pose] = None

    def advance(self, poses: Sequence[Pose], floor_path: Sequence[int], loop_radius: float) -> None:
        """Accumulate travel, the per-floor trajectory and update-point departures"""
        for pose, floor_id in zip(poses, floor_path):
            x, y = pose.position[0], pose.position[1]
            if self.last_pose is not None:
                self.odometer_m += math.dist(self.last_pose.position, pose.position)
            self.last_pose = pose
            self.trajectory.setdefault(floor_id, []).append((x, y))
            for point in self.last_update_poses:
                if point.floor_id == floor_id and math.dist(point.xy, (x, y)) > loop_radius:
                    point.departed = True

    def mark_update(self, pose: Pose, floor_id: int) -> None:
        self.last_update_poses.append(UpdatePoint(pose=pose, floor_id=floor_id, odometer_m=self.odometer_m))
        self.rooms_visited_since_update.clear()
        self.objects_changed_since_update = 0

    def age_weights(self, now: float, fade_s: float) -> List[float]:
        return [point.age_weight(now, fade_s) for point in self.last_update_poses]


def check_hard_trigger(state: TriggerState, floor_path: Sequence[int], floor_id: int) -> bool:
    """
    Edge-triggered floor switch detection

    Any floor in the interval's path that differs from the floor at the previous check
    fires, so 1 -> 2 -> 1 inside one interval still counts.
    """
    previous = state.current_floor_id
    state.current_floor_id = floor_id
    if previous is None:
        return False
    return any(f != previous for f in floor_path) or floor_id != previous


def current_room(
    view: GraphView,
    segmentation: Segmentation,
    floor_id: int,
    x: float,
    y: float,
    min_iou: float,
) -> Tuple[Optional[int], Optional[RoomNode]]:
    """
    Mask under (x, y) and the graph room it maps to

    Returns:
        (mask index or None, matched room or None)
    """
    masks = segmentation.masks
    hit = next((i for i, mask in enumerate(masks) if mask.contains(x, y)), None)
    if hit is None:
        return None, None
    matches = match_masks(view.rooms_on_floor(floor_id), masks, min_iou)
    room_id = matches[hit]
    return hit, (view.rooms[room_id] if room_id is not None else None)


def rules_soft_trigger(
    state: TriggerState,
    view: GraphView,
    check: TriggerCheck,
    cfg: SupervisorConfig,
) -> SoftDecision:
    """
    Rule supervisor

    Fires on (a) entering a never-summarized room, (b) re-entering an old update point's
    neighborhood after loop_path_len_m of travel, or (c) n_obj_trigger new objects.
    """
    pose = check.poses[-1] if check.poses else state.last_pose
    if pose is None:
        return SoftDecision(False, "no pose")
    x, y = pose.position[0], pose.position[1]

    segmentation = check.segmentations.get(check.floor_id)
    if segmentation is not None:
        hit, room = current_room(view, segmentation, check.floor_id, x, y, cfg.room_match_iou)
        if room is not None:
            state.rooms_visited_since_update.add(room.id)
        if hit is not None and (room is None or not room.summary):
            return SoftDecision(True, "new area")

    for point in state.last_update_poses:
        if point.consumed or not point.departed or point.floor_id != check.floor_id:
            continue
        travelled = state.odometer_m - point.odometer_m
        if travelled >= cfg.loop_path_len_m and math.dist(point.xy, (x, y)) <= cfg.loop_radius_m:
            point.consumed = True
            return SoftDecision(True, f"loop closure after {travelled:.1f} m")

    if state.objects_changed_since_update >= cfg.n_obj_trigger:
        return SoftDecision(True, f"{state.objects_changed_since_update} new objects")
    return SoftDecision(False, "hold")


def model_soft_trigger(
    client: ModelClient,
    bev_png: bytes,
    state: TriggerState,
    floor_index: int,
) -> Optional[SoftDecision]:
    """Ask the supervisor provider; None when no usable reply came back"""
    request = (
        f"Floor {floor_index}. Rooms visited since the last update: {len(state.rooms_visited_since_update)}. "
        f"Objects created since the last update: {state.objects_changed_since_update}. "
        f"Past update points: {len(state.last_update_poses)}."
    )
    try:
        reply = client.chat(load_prompt("supervisor_bev"), request, images=[bev_png])
    except ProviderUnavailable as e:
        logger.warning(f"Supervisor provider unavailable ({e.reason}), using rules")
        return None
    parsed = parse_reply(reply, TriggerReply)
    if parsed is None:
        logger.warning("Supervisor reply did not match {trigger, reason}, using rules")
        return None
    logger.info(f"Model supervisor: trigger={parsed.trigger} ({parsed.reason})")
    return SoftDecision(parsed.trigger, parsed.reason, "model")


def check_soft_trigger(
    state: TriggerState,
    view: GraphView,
    check: TriggerCheck,
    cfg: SupervisorConfig,
    client: Optional[ModelClient] = None,
    bev_png: Optional[bytes] = None,
) -> SoftDecision:
    if cfg.mode == "model" and client is not None and bev_png is not None:
        floor = view.floors.get(check.floor_id)
        decision = model_soft_trigger(client, bev_png, state, floor.index if floor else 0)
        if decision is not None:
            return decision
    return rules_soft_trigger(state, view, check, cfg)
