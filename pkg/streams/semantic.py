import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from config import AssociationConfig, TopologyConfig
from errors import KnowledgeBaseError, ProviderUnavailable
from graph.keyframes import KeyframeStore, crop_image
from graph.scene_graph import GraphView, SceneGraph
from model_client import ProviderRole, ProviderSet
from scene_schema import (
    UNASSIGNED,
    BestViewRef,
    Box3D,
    Detection,
    Intrinsics,
    ObjectNode,
    ObservationFrame,
    Pose,
    RoomMask,
    RoomNode,
    RoomRef,
    Vec3,
)
from streams.geometric import RoomMaskRegistry
from streams.topology import build_local_topology
from utils.geometry import cosine, iou_3d, mask_iou, unproject
from utils.llm import load_prompt, parse_reply

logger = logging.getLogger(__name__)

Locator = Callable[[float, float], RoomRef]


class DescriptionReply(BaseModel):
    description: str = Field(min_length=1)


@dataclass(frozen=True)
class Observation:
    """A back-projected detection waiting for association"""
    label: str
    known_category: bool
    embedding: np.ndarray
    description: str
    centroid: Vec3
    bbox3d: Box3D
    best_view: BestViewRef
    floor_id: int


@dataclass(frozen=True)
class AssociationResult:
    outcome: str
    object_id: int
    stage: Optional[str] = None
    cosine: float = 0.0


class KeyframeDelta(BaseModel):
    keyframe_id: str
    created: int = 0
    merged: int = 0
    skipped: int = 0
    edges: int = 0
    errors: List[str] = Field(default_factory=list)
    object_ids: List[int] = Field(default_factory=list)


def backproject_detection(
    det: Detection,
    pose: Pose,
    intrinsics: Intrinsics,
    k_min: int = 10,
) -> Optional[Tuple[Vec3, Box3D]]:
    """
    World centroid and box of a detection from its depth samples

    Returns:
        (centroid, bbox3d), or None when fewer than k_min samples carry a valid depth
    """
    samples = np.asarray(det.depth_samples, dtype=np.float64).reshape(-1, 3)
    valid = samples[np.isfinite(samples).all(axis=1) & (samples[:, 2] > 0)]
    if len(valid) < k_min:
        logger.debug(f"Skipping '{det.label}': {len(valid)} valid depth samples, need {k_min}")
        return None
    rotation = pose.rotation()
    position = np.asarray(pose.position, dtype=np.float64)
    k = (intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy)

    u, v, depth = np.median(valid[:, 0]), np.median(valid[:, 1]), np.median(valid[:, 2])
    center = rotation.apply(unproject(np.array([u]), np.array([v]), np.array([depth]), *k))[0] + position
    points = rotation.apply(unproject(valid[:, 0], valid[:, 1], valid[:, 2], *k)) + position
    lo = np.minimum(np.percentile(points, 5, axis=0), center)
    hi = np.maximum(np.percentile(points, 95, axis=0), center)
    centroid = tuple(float(c) for c in center)
    return centroid, Box3D(lo=tuple(float(c) for c in lo), hi=tuple(float(c) for c in hi))


def best_view_update(current: Optional[BestViewRef], new_view: BestViewRef) -> BestViewRef:
    """Keep the more central view; ties keep the incumbent"""
    if current is None or new_view.center_offset < current.center_offset:
        return new_view
    return current


def _distance(a: Sequence[float], b: Sequence[float]) -> float:
    return float(math.dist(a, b))


def _merged_fields(node: ObjectNode, candidate: Observation) -> Dict[str, object]:
    n = node.observation_count
    centroid = tuple(float((c * n + d) / (n + 1)) for c, d in zip(node.centroid, candidate.centroid))
    embedding = (np.asarray(node.embedding) * n + candidate.embedding) / (n + 1)
    embedding = embedding / np.linalg.norm(embedding)
    return {
        "centroid": centroid,
        "bbox3d": node.bbox3d.union(candidate.bbox3d),
        "embedding": tuple(float(x) for x in embedding),
        "best_view": best_view_update(node.best_view, candidate.best_view),
        "observation_count": n + 1,
        "description": node.description or candidate.description,
    }


def _stage_one(objects: Sequence[ObjectNode], candidate: Observation, cfg: AssociationConfig) -> Optional[Tuple[ObjectNode, float]]:
    best = None
    for obj in objects:
        sim = cosine(obj.embedding, candidate.embedding)
        if sim < cfg.tau_vis_strict or iou_3d(obj.bbox3d, candidate.bbox3d) < cfg.tau_iou3d:
            continue
        key = (-sim, _distance(obj.centroid, candidate.centroid), obj.id)
        if best is None or key < best[0]:
            best = (key, obj, sim)
    return None if best is None else (best[1], best[2])


def _stage_two(
    objects: Sequence[ObjectNode],
    candidate: Observation,
    cfg: AssociationConfig,
    known: bool,
) -> Optional[Tuple[ObjectNode, float, str]]:
    best = None
    for obj in objects:
        dist = _distance(obj.centroid, candidate.centroid)
        if dist > cfg.relaxed_radius:
            continue
        sim = cosine(obj.embedding, candidate.embedding)
        if known:
            if obj.label != candidate.label:
                continue
            key = (dist, -sim, obj.id)
        else:
            if sim < cfg.tau_vis_open:
                continue
            key = (-sim, dist, obj.id)
        if best is None or key < best[0]:
            best = (key, obj, sim)
    if best is None:
        return None
    return best[1], best[2], "label" if known else "open"


def is_known_category(graph: SceneGraph, candidate: Observation) -> bool:
    if graph.known_categories:
        return candidate.label in graph.known_categories
    return candidate.known_category


def associate(
    graph: SceneGraph,
    candidate: Observation,
    cfg: AssociationConfig,
    locate: Optional[Locator] = None,
) -> AssociationResult:
    """
    Two-stage association cascade against the objects on the candidate's floor

    Stage 1 merges on 3D IoU plus strict visual similarity. Stage 2 merges known
    categories with the nearest same-label node inside relaxed_radius and open-vocabulary
    items only above tau_vis_open. Anything else becomes a new node.

    Args:
        graph: Scene graph (the writer context owns it)
        candidate: Back-projected observation
        cfg: Association thresholds
        locate: Maps an (x, y) to a room id; applied to new nodes and unassigned survivors

    Returns:
        AssociationResult with outcome "merged" or "created"
    """
    view = graph.snapshot()
    objects = view.objects_on_floor(candidate.floor_id)
    known = is_known_category(graph, candidate)

    match = _stage_one(objects, candidate, cfg)
    stage = "strict" if match else None
    if match is None:
        second = _stage_two(objects, candidate, cfg, known)
        if second is not None:
            match, stage = (second[0], second[1]), second[2]

    if match is not None:
        node, sim = match
        fields = _merged_fields(node, candidate)
        if node.room_id == UNASSIGNED and locate is not None:
            fields["room_id"] = locate(fields["centroid"][0], fields["centroid"][1])
        graph.upsert_object(node.model_copy(update=fields))
        logger.debug(f"Merged '{candidate.label}' into {node.id} at stage {stage} (cos {sim:.3f})")
        return AssociationResult("merged", node.id, stage, sim)

    node = ObjectNode(
        label=candidate.label,
        is_open_vocab=not known,
        embedding=tuple(float(x) for x in candidate.embedding),
        description=candidate.description,
        centroid=candidate.centroid,
        bbox3d=candidate.bbox3d,
        room_id=locate(candidate.centroid[0], candidate.centroid[1]) if locate else UNASSIGNED,
        floor_id=candidate.floor_id,
        best_view=candidate.best_view,
    )
    object_id = graph.upsert_object(node)
    logger.debug(f"Created object {object_id} '{candidate.label}'")
    return AssociationResult("created", object_id)


def match_masks(rooms: Sequence[RoomNode], masks: Sequence[RoomMask], min_iou: float) -> List[Optional[int]]:
    """
    Greedy identity matching of fresh masks to existing rooms by IoU

    Returns:
        For each mask, the matched room id or None when no room reaches min_iou
    """
    pairs = []
    for i, mask in enumerate(masks):
        for room in rooms:
            score = mask_iou(mask, room.mask)
            if score >= min_iou and score > 0:
                pairs.append((-score, room.id, i))
    pairs.sort()
    matched: List[Optional[int]] = [None] * len(masks)
    used = set()
    for _, room_id, i in pairs:
        if matched[i] is None and room_id not in used:
            matched[i] = room_id
            used.add(room_id)
    return matched


def mask_locator(masks: Sequence[RoomMask], room_ids: Sequence[Optional[int]]) -> Locator:
    def locate(x: float, y: float) -> RoomRef:
        for mask, room_id in zip(masks, room_ids):
            if mask.contains(x, y):
                return room_id if room_id is not None else UNASSIGNED
        return UNASSIGNED
    return locate


def clip_box(box: Tuple[int, int, int, int], width: int, height: int) -> Tuple[int, int, int, int]:
    x0, y0, x1, y1 = box
    x0, x1 = min(max(x0, 0), width), min(max(x1, 0), width)
    y0, y1 = min(max(y0, 0), height), min(max(y1, 0), height)
    return (x0, y0, max(x0, x1), max(y0, y1))


class SemanticStream:
    """Single consumer of the semantic queue; runs on the writer context"""

    def __init__(
        self,
        graph: SceneGraph,
        store: KeyframeStore,
        registry: RoomMaskRegistry,
        providers: ProviderSet,
        association: AssociationConfig,
        topology: TopologyConfig,
        room_match_iou: float = 0.3,
        crop_pad: float = 0.1,
    ):
        self.graph = graph
        self.store = store
        self.registry = registry
        self.providers = providers
        self.association = association
        self.topology = topology
        self.room_match_iou = room_match_iou
        self.crop_pad = crop_pad

    def _locator(self, floor_id: int) -> Locator:
        _, masks = self.registry.latest_room_mask(floor_id)
        rooms = self.graph.snapshot().rooms_on_floor(floor_id)
        return mask_locator(masks, match_masks(rooms, masks, self.room_match_iou))

    def describe(self, label: str, image_bytes: Optional[bytes], bbox2d: Tuple[int, int, int, int]) -> str:
        """Summarizer-written node description; empty when no provider reply is usable"""
        if image_bytes is None:
            return ""
        try:
            crop = crop_image(image_bytes, bbox2d, self.crop_pad)
            reply = self.providers.get(ProviderRole.SUMMARIZER).chat(
                load_prompt("node_description"), f"Object label: {label}", images=[crop]
            )
        except ProviderUnavailable as e:
            logger.debug(f"No description for '{label}': {e.reason}")
            return ""
        except ValueError as e:
            logger.warning(f"Could not crop '{label}' for description: {e}")
            return ""
        parsed = parse_reply(reply, DescriptionReply)
        return parsed.description.strip() if parsed else ""

    def _observation(self, frame: ObservationFrame, det: Detection) -> Optional[Observation]:
        located = backproject_detection(det, frame.pose, frame.intrinsics, self.association.k_min_depth)
        if located is None:
            return None
        centroid, bbox3d = located
        width, height = frame.intrinsics.width, frame.intrinsics.height
        view = BestViewRef.from_bbox(frame.keyframe_id, clip_box(det.pixel_box(), width, height), width, height)
        return Observation(
            label=det.label,
            known_category=det.known_category,
            embedding=np.asarray(det.embedding, dtype=np.float64),
            description=det.description or "",
            centroid=centroid,
            bbox3d=bbox3d,
            best_view=view,
            floor_id=frame.floor_id,
        )

    def process_keyframe(self, frame: ObservationFrame, image_bytes: Optional[bytes] = None) -> KeyframeDelta:
        """
        Instantiate, associate and relate the detections of one keyframe

        Room assignment reads the latest segmentation of the keyframe's own floor, whatever
        floor the robot is on by the time the keyframe is processed.

        Returns:
            KeyframeDelta with created/merged/skipped/edges counts and per-detection errors
        """
        delta = KeyframeDelta(keyframe_id=frame.keyframe_id)
        locate = self._locator(frame.floor_id)
        touched: List[int] = []
        for index, det in enumerate(frame.detections):
            try:
                candidate = self._observation(frame, det)
                if candidate is None:
                    delta.skipped += 1
                    continue
                result = associate(self.graph, candidate, self.association, locate)
                if result.outcome == "created":
                    delta.created += 1
                    if not candidate.description:
                        text = self.describe(candidate.label, image_bytes, candidate.best_view.bbox2d)
                        if text:
                            self.graph.update_description(result.object_id, text)
                else:
                    delta.merged += 1
                if result.object_id not in touched:
                    touched.append(result.object_id)
            except (KnowledgeBaseError, ValueError) as e:
                delta.skipped += 1
                delta.errors.append(f"detection {index} ({det.label}): {e}")
                logger.warning(f"Keyframe {frame.keyframe_id}: detection {index} failed: {e}")

        if len(touched) > 1:
            view: GraphView = self.graph.snapshot()
            nodes = [view.objects[oid] for oid in touched if oid in view.objects]
            relation_client = self.providers.get(ProviderRole.RELATION) if self.topology.mode == "model" else None
            edges = build_local_topology(
                nodes, self.topology, self.association.cluster_radius, relation_client, image_bytes
            )
            try:
                delta.edges = self.graph.add_edges(edges)
            except KnowledgeBaseError as e:
                delta.errors.append(f"edges: {e}")
                logger.warning(f"Keyframe {frame.keyframe_id}: edge insertion failed: {e}")
        delta.object_ids = touched
        logger.info(
            f"Keyframe {frame.keyframe_id} on floor {frame.floor_id}: created {delta.created}, "
            f"merged {delta.merged}, skipped {delta.skipped}, edges {delta.edges}"
        )
        return delta
