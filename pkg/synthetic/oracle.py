"""
Brute-force reference for the retrieval score

Written without the retrieval package: it re-derives every similarity from the raw graph
view with plain loops, so a drift in the ranked scorer shows up as a disagreement.
"""
import math
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from graph.scene_graph import GraphView
from query_schema import ConstraintKind, ParsedQuery
from scene_schema import SYMMETRIC_RELATIONS, UNASSIGNED, Relation

Embed = Callable[[str], np.ndarray]

DECIMALS = 9


def _clip(value: float) -> float:
    return round(min(1.0, max(0.0, float(value))), DECIMALS)


class _Tables:
    def __init__(self, view: GraphView, embed: Embed):
        self.view = view
        self.embed = embed
        self.ids = sorted(view.objects)
        self.stack = np.vstack([embed(view.objects[i].text) for i in self.ids]) if self.ids else None
        self.text_cache: Dict[str, Dict[int, float]] = {}
        self.out: Dict[int, List[Tuple[Relation, int]]] = {i: [] for i in self.ids}
        for edge in view.edges.values():
            self.out[edge.src_object_id].append((edge.relation, edge.dst_object_id))
            if edge.relation in SYMMETRIC_RELATIONS:
                self.out[edge.dst_object_id].append((edge.relation, edge.src_object_id))

    def text(self, text: str) -> Dict[int, float]:
        if text not in self.text_cache:
            raw = self.stack @ self.embed(text)
            self.text_cache[text] = {oid: _clip(raw[row]) for row, oid in enumerate(self.ids)}
        return self.text_cache[text]

    def place(self, label: str, summary: str, text: str) -> float:
        words = f"{label} {summary}".strip()
        if not words:
            return 0.0
        return _clip(float(self.embed(words) @ self.embed(text)))

    def linked(self, oid: int, relation: Relation) -> List[int]:
        return [other for rel, other in self.out.get(oid, []) if rel == relation]


def _leaf(tables: _Tables, constraint, oid: int) -> float:
    view = tables.view
    node = view.objects[oid]
    if constraint.kind in (ConstraintKind.TARGET_ATTRIBUTE, ConstraintKind.DESCRIPTION):
        return tables.text(constraint.text)[oid]
    if constraint.kind == ConstraintKind.ROOM:
        if node.room_id == UNASSIGNED or node.room_id not in view.rooms:
            return 0.0
        room = view.rooms[node.room_id]
        return tables.place(room.label, room.summary, constraint.text)
    if constraint.kind == ConstraintKind.AREA:
        if node.area_id is None or node.area_id not in view.areas:
            return 0.0
        area = view.areas[node.area_id]
        return tables.place(area.label, area.summary, constraint.text)
    if constraint.kind == ConstraintKind.RELATION:
        sims = tables.text(constraint.text)
        values = [sims[other] for other in tables.linked(oid, constraint.relation)]
        return max(values) if values else 0.0
    return 0.0


def _through(tables: _Tables, query: ParsedQuery, hops: List[int], constraint, oid: int) -> float:
    if not hops:
        return _leaf(tables, constraint, oid)
    hop = query.constraints[hops[0]]
    sims = tables.text(hop.text)
    best = 0.0
    for other in tables.linked(oid, hop.relation):
        best = max(best, sims[other] * _through(tables, query, hops[1:], constraint, other))
    return best


def _hops(query: ParsedQuery, constraint) -> List[int]:
    hops = []
    anchor = constraint.anchor
    while anchor is not None:
        hops.insert(0, anchor)
        anchor = query.constraints[anchor].anchor
    return hops


def oracle_scores(view: GraphView, query: ParsedQuery, embed: Embed) -> Dict[int, Tuple[float, float]]:
    """
    Score of every object that passes the floor filter, with its reference distance

    Returns:
        object id -> (score, distance to the best first-relation reference, inf when none)
    """
    tables = _Tables(view, embed)
    first_relation = None
    for c in query.constraints:
        if c.kind == ConstraintKind.RELATION and c.anchor is None:
            first_relation = c
            break
    has_relation = any(c.kind == ConstraintKind.RELATION for c in query.constraints)
    results: Dict[int, Tuple[float, float]] = {}
    for oid in tables.ids:
        node = view.objects[oid]
        if query.target_floor is not None:
            floor = view.floors.get(node.floor_id)
            if floor is None or floor.index != query.target_floor:
                continue
        total = 0.0
        for c in query.constraints:
            if c.kind == ConstraintKind.FLOOR:
                continue
            sim = _clip(_through(tables, query, _hops(query, c), c, oid))
            total += c.polarity * c.weight * sim
        distance = math.inf
        if has_relation and first_relation is not None:
            sims = tables.text(first_relation.text)
            linked = tables.linked(oid, first_relation.relation)
            if linked:
                best = min(linked, key=lambda other: (-sims[other], other))
                distance = math.dist(node.centroid, view.objects[best].centroid)
        results[oid] = (total, distance)
    return results


def oracle_rank(view: GraphView, query: ParsedQuery, embed: Embed, k: Optional[int] = None) -> List[int]:
    scores = oracle_scores(view, query, embed)
    ordered = sorted(scores, key=lambda oid: (-scores[oid][0], scores[oid][1], oid))
    return ordered if k is None else ordered[:k]


def oracle_retrieve(view: GraphView, query: ParsedQuery, embed: Embed) -> Optional[int]:
    ranked = oracle_rank(view, query, embed, 1)
    return ranked[0] if ranked else None
