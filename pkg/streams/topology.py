import logging
import math
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from config import TopologyConfig
from errors import ProviderUnavailable
from model_client import ModelClient
from scene_schema import EdgeSource, ObjectNode, Relation, SpatialEdge
from utils.geometry import horizontal_overlap, single_linkage, vertical_overlap
from utils.llm import extract_json_from_text, load_prompt

logger = logging.getLogger(__name__)

Pair = Tuple[int, int]


class RelationTriple(BaseModel):
    subject: int
    relation: Relation
    object: int
    confidence: float = Field(default=1.0, ge=0.0, le=1.0)


def pair_relations(a: ObjectNode, b: ObjectNode, cfg: TopologyConfig) -> List[SpatialEdge]:
    """Geometric rules for one unordered pair; both vertical orders are tested"""
    edges: List[SpatialEdge] = []
    overlap = horizontal_overlap(a.bbox3d, b.bbox3d)
    for upper, lower in ((a, b), (b, a)):
        gap = upper.bbox3d.lo[2] - lower.bbox3d.hi[2]
        if cfg.on_gap_min_m <= gap <= cfg.on_gap_max_m and overlap >= cfg.on_overlap:
            edges.append(_edge(upper.id, lower.id, Relation.ON, overlap))
        elif gap > cfg.on_gap_max_m and overlap > 0:
            edges.append(_edge(upper.id, lower.id, Relation.ABOVE, overlap))
            edges.append(_edge(lower.id, upper.id, Relation.BELOW, overlap))

    distance = math.hypot(a.centroid[0] - b.centroid[0], a.centroid[1] - b.centroid[1])
    if distance < cfg.near_distance_m:
        lo, hi = sorted((a.id, b.id))
        edges.append(_edge(lo, hi, Relation.NEAR, 1.0 - distance / cfg.near_distance_m))
        shared = vertical_overlap(a.bbox3d, b.bbox3d)
        if shared >= cfg.next_to_vertical:
            edges.append(_edge(lo, hi, Relation.NEXT_TO, shared))
    return edges


def _edge(src: int, dst: int, relation: Relation, confidence: float, source: EdgeSource = EdgeSource.GEOMETRIC) -> SpatialEdge:
    return SpatialEdge(
        src_object_id=src,
        dst_object_id=dst,
        relation=relation,
        confidence=round(min(max(confidence, 0.0), 1.0), 6),
        source=source,
    )


def cluster_objects(objects: Sequence[ObjectNode], cluster_radius: float) -> List[List[ObjectNode]]:
    """Single-linkage clusters on the horizontal plane"""
    if not objects:
        return []
    ordered = sorted(objects, key=lambda o: o.id)
    points = np.array([[o.centroid[0], o.centroid[1]] for o in ordered])
    return [[ordered[i] for i in members] for members in single_linkage(points, cluster_radius)]


def geometric_topology(objects: Sequence[ObjectNode], cfg: TopologyConfig, cluster_radius: float) -> List[SpatialEdge]:
    edges: List[SpatialEdge] = []
    for cluster in cluster_objects(objects, cluster_radius):
        for i, first in enumerate(cluster):
            for second in cluster[i + 1:]:
                edges.extend(pair_relations(first, second, cfg))
    return edges


def _relation_request(cluster: Sequence[ObjectNode]) -> str:
    lines = ["Objects:"]
    for obj in cluster:
        lo = ", ".join(f"{v:.2f}" for v in obj.bbox3d.lo)
        hi = ", ".join(f"{v:.2f}" for v in obj.bbox3d.hi)
        lines.append(f"- id {obj.id}: {obj.label}, box [{lo}] to [{hi}]")
    return "\n".join(lines)


def _model_cluster_edges(
    cluster: Sequence[ObjectNode],
    cfg: TopologyConfig,
    client: ModelClient,
    image: Optional[bytes],
) -> List[SpatialEdge]:
    by_id = {obj.id: obj for obj in cluster}
    all_pairs = [(a.id, b.id) for i, a in enumerate(cluster) for b in cluster[i + 1:]]
    try:
        reply = client.chat(load_prompt("relation"), _relation_request(cluster), images=[image] if image else ())
    except ProviderUnavailable as e:
        logger.warning(f"Relation provider failed ({e.reason}), geometric fallback for {len(cluster)} objects")
        return [edge for a, b in all_pairs for edge in pair_relations(by_id[a], by_id[b], cfg)]

    data = extract_json_from_text(reply)
    raw_triples = data.get("triples") if isinstance(data, dict) else None
    if not isinstance(raw_triples, list):
        logger.warning("Relation reply has no triples list, geometric fallback for the cluster")
        return [edge for a, b in all_pairs for edge in pair_relations(by_id[a], by_id[b], cfg)]

    accepted: Dict[Pair, List[SpatialEdge]] = {}
    fallback: Set[Pair] = set()
    for raw in raw_triples:
        try:
            triple = RelationTriple.model_validate(raw)
        except ValidationError:
            pair = _pair_of(raw, by_id)
            if pair is not None:
                fallback.add(pair)
            continue
        if triple.subject not in by_id or triple.object not in by_id or triple.subject == triple.object:
            continue
        pair = tuple(sorted((triple.subject, triple.object)))
        accepted.setdefault(pair, []).append(
            _edge(triple.subject, triple.object, triple.relation, triple.confidence, EdgeSource.MODEL)
        )

    edges: List[SpatialEdge] = []
    for pair in all_pairs:
        if pair in accepted:
            edges.extend(accepted[pair])
        elif pair in fallback:
            edges.extend(pair_relations(by_id[pair[0]], by_id[pair[1]], cfg))
    return edges


def _pair_of(raw: object, by_id: Dict[int, ObjectNode]) -> Optional[Pair]:
    if not isinstance(raw, dict):
        return None
    try:
        subject, other = int(raw.get("subject")), int(raw.get("object"))
    except (TypeError, ValueError):
        return None
    if subject in by_id and other in by_id and subject != other:
        return tuple(sorted((subject, other)))
    return None


def build_local_topology(
    frame_objects: Sequence[ObjectNode],
    cfg: TopologyConfig,
    cluster_radius: float,
    relation_client: Optional[ModelClient] = None,
    image: Optional[bytes] = None,
) -> List[SpatialEdge]:
    """
    Spatial edges among the objects touched by one keyframe

    Args:
        frame_objects: Objects created or merged by the keyframe
        cfg: Relation thresholds and mode
        cluster_radius: Horizontal single-linkage radius
        relation_client: Provider used in model mode
        image: Keyframe image sent along in model mode

    Returns:
        Edges with symmetric relations already oriented low id -> high id
    """
    if cfg.mode == "geometric" or relation_client is None:
        return geometric_topology(frame_objects, cfg, cluster_radius)
    edges: List[SpatialEdge] = []
    for cluster in cluster_objects(frame_objects, cluster_radius):
        if len(cluster) > 1:
            edges.extend(_model_cluster_edges(cluster, cfg, relation_client, image))
    return edges
