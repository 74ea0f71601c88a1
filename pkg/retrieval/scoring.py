import logging
import math
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from graph.scene_graph import GraphView
from model_client import ModelClient
from query_schema import CandidateScore, Constraint, ConstraintKind, ParsedQuery, ScoreTerm
from scene_schema import ObjectNode

logger = logging.getLogger(__name__)

SIM_DECIMALS = 9

NodeSims = Dict[int, float]


def clamp_sim(value: float) -> float:
    """Negative cosines carry no meaning here; polarity handles negation"""
    return round(min(1.0, max(0.0, float(value))), SIM_DECIMALS)


def place_text(label: str, summary: str) -> str:
    return f"{label} {summary}".strip()


def combine_terms(h_floor: int, terms: Sequence[ScoreTerm]) -> float:
    """H_floor times the polar weighted sum, accumulated in constraint order"""
    total = 0.0
    for term in terms:
        total += term.polarity * term.weight * term.sim
    return h_floor * total


class SimilarityIndex:
    """
    Embeddings of one graph view, computed once and reused across queries

    Object rows follow ascending id; rooms and areas are embedded from label + summary.

    Args:
        view: Graph snapshot the index belongs to
        embedder: Embedding client (stub or http)
    """

    def __init__(self, view: GraphView, embedder: ModelClient):
        self.view = view
        self.embedder = embedder
        self.object_ids: List[int] = sorted(view.objects)
        self._row = {oid: i for i, oid in enumerate(self.object_ids)}
        if self.object_ids:
            self._matrix = np.vstack([embedder.embed(view.objects[oid].text) for oid in self.object_ids])
        else:
            self._matrix = np.zeros((0, view.embedding_dim))
        self._places: Dict[int, Optional[np.ndarray]] = {}
        for place in list(view.rooms.values()) + list(view.areas.values()):
            text = place_text(place.label, place.summary)
            self._places[place.id] = embedder.embed(text) if text else None
        self._text_cache: Dict[str, NodeSims] = {}

    def matches(self, view: GraphView) -> bool:
        return self.view is view

    def text_sims(self, text: str) -> NodeSims:
        """Clamped cosine of every object's description + label against `text`"""
        cached = self._text_cache.get(text)
        if cached is not None:
            return cached
        if not self.object_ids:
            sims: NodeSims = {}
        else:
            raw = self._matrix @ self.embedder.embed(text)
            sims = {oid: clamp_sim(value) for oid, value in zip(self.object_ids, raw)}
        self._text_cache[text] = sims
        return sims

    def place_sim(self, place_id: Optional[int], text: str) -> float:
        vector = self._places.get(place_id) if place_id is not None else None
        if vector is None:
            return 0.0
        return clamp_sim(float(vector @ self.embedder.embed(text)))


class ConstraintEvaluator:
    """
    Similarity of every object against each constraint of one query

    Relation constraints take the best neighbor through the named relation. Anchored
    constraints are walked through the anchor chain: each hop multiplies the reference
    similarity of the node it lands on, and the constraint's own similarity is taken at
    the last node reached.
    """

    def __init__(self, index: SimilarityIndex, query: ParsedQuery):
        self.index = index
        self.view = index.view
        self.query = query
        self._cache: Dict[int, NodeSims] = {}

    def _base(self, constraint: Constraint) -> Callable[[int], float]:
        kind = constraint.kind
        if kind in (ConstraintKind.TARGET_ATTRIBUTE, ConstraintKind.DESCRIPTION):
            sims = self.index.text_sims(constraint.text)
            return lambda oid: sims.get(oid, 0.0)
        if kind == ConstraintKind.ROOM:
            def room_sim(oid: int) -> float:
                room = self.view.room_of(self.view.objects[oid])
                return self.index.place_sim(room.id if room else None, constraint.text)
            return room_sim
        if kind == ConstraintKind.AREA:
            def area_sim(oid: int) -> float:
                return self.index.place_sim(self.view.objects[oid].area_id, constraint.text)
            return area_sim
        if kind == ConstraintKind.RELATION:
            sims = self.index.text_sims(constraint.text)

            def relation_sim(oid: int) -> float:
                best = 0.0
                for other, _ in self.view.neighbors(oid, constraint.relation):
                    best = max(best, sims.get(other, 0.0))
                return best
            return relation_sim
        return lambda oid: 0.0

    def _chain(self, constraint: Constraint) -> List[Constraint]:
        chain: List[Constraint] = []
        anchor = constraint.anchor
        while anchor is not None:
            step = self.query.constraints[anchor]
            chain.append(step)
            anchor = step.anchor
        chain.reverse()
        return chain

    def _walk(self, oid: int, chain: Sequence[Constraint], leaf: Callable[[int], float]) -> float:
        if not chain:
            return leaf(oid)
        hop = chain[0]
        reference = self.index.text_sims(hop.text)
        best = 0.0
        for other, _ in self.view.neighbors(oid, hop.relation):
            weight = reference.get(other, 0.0)
            if weight > best:
                best = max(best, weight * self._walk(other, chain[1:], leaf))
        return best

    def sims(self, constraint_index: int) -> NodeSims:
        cached = self._cache.get(constraint_index)
        if cached is not None:
            return cached
        constraint = self.query.constraints[constraint_index]
        leaf = self._base(constraint)
        chain = self._chain(constraint)
        sims = {oid: clamp_sim(self._walk(oid, chain, leaf)) for oid in self.index.object_ids}
        self._cache[constraint_index] = sims
        return sims

    def best_reference(self, node: ObjectNode) -> Tuple[Optional[int], Optional[float]]:
        """Neighbor best matching the first unanchored relation, and its centroid distance"""
        relation = next(
            (c for c in self.query.constraints if c.kind == ConstraintKind.RELATION and c.anchor is None),
            None,
        )
        if relation is None:
            return None, None
        reference = self.index.text_sims(relation.text)
        best_id, best_sim = None, -1.0
        for other, _ in self.view.neighbors(node.id, relation.relation):
            sim = reference.get(other, 0.0)
            if sim > best_sim or (sim == best_sim and best_id is not None and other < best_id):
                best_id, best_sim = other, sim
        if best_id is None:
            return None, math.inf
        return best_id, math.dist(node.centroid, self.view.objects[best_id].centroid)


def h_floor(view: GraphView, node: ObjectNode, query: ParsedQuery) -> int:
    if query.target_floor is None:
        return 1
    floor = view.floors.get(node.floor_id)
    return int(floor is not None and floor.index == query.target_floor)


def score_candidate(
    node: ObjectNode,
    query: ParsedQuery,
    view: GraphView,
    evaluator: ConstraintEvaluator,
) -> CandidateScore:
    """
    Composite relevance S(n) = H_floor * sum_i p_i * w_i * sim_i

    Args:
        node: Object to score
        query: Parsed query
        view: Graph snapshot
        evaluator: Per-query similarity tables over the same snapshot

    Returns:
        CandidateScore holding every term, so S can be recomputed from it
    """
    h = h_floor(view, node, query)
    terms = [
        ScoreTerm(
            constraint_index=c.index,
            polarity=c.polarity,
            weight=c.weight,
            sim=evaluator.sims(c.index)[node.id],
        )
        for c in query.scored
    ]
    reference_id, distance = evaluator.best_reference(node) if query.has_relation() else (None, None)
    return CandidateScore(
        object_id=node.id,
        h_floor=h,
        terms=terms,
        score=combine_terms(h, terms),
        reference_id=reference_id,
        reference_distance=distance,
    )


def rank_key(candidate: CandidateScore) -> Tuple[float, float, int]:
    distance = candidate.reference_distance if candidate.reference_distance is not None else math.inf
    return (-candidate.score, distance, candidate.object_id)


def rank(
    view: GraphView,
    query: ParsedQuery,
    k: int,
    embedder: ModelClient,
    index: Optional[SimilarityIndex] = None,
) -> List[CandidateScore]:
    """
    Score every object passing the floor filter and return the top k

    Ties fall to the smaller distance to the best-matching reference when the query has
    a relation, then to the lower id.
    """
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    if not view.objects:
        return []
    if index is None or not index.matches(view):
        index = SimilarityIndex(view, embedder)
    evaluator = ConstraintEvaluator(index, query)
    scored = []
    for oid in index.object_ids:
        node = view.objects[oid]
        if h_floor(view, node, query) == 0:
            continue
        scored.append(score_candidate(node, query, view, evaluator))
    scored.sort(key=rank_key)
    logger.debug(f"Ranked {len(scored)} candidates for '{query.raw[:60]}'")
    return scored[:k]
