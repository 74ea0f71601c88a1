import logging
from typing import Iterable, Literal, Optional, Protocol

from pydantic import BaseModel

from config import RetrievalConfig
from errors import ProviderUnavailable, UnknownNodeError
from graph.keyframes import KeyframeStore, crop_image
from graph.scene_graph import GraphView
from model_client import ModelClient, ProviderRole, ProviderSet
from query_schema import CandidateScore, ParsedQuery, VerificationResult
from utils.llm import load_prompt, parse_reply

logger = logging.getLogger(__name__)


class VerifyReply(BaseModel):
    verdict: Literal["accept", "reject"]
    rationale: str = ""


class Auditor(Protocol):
    def verify(
        self,
        candidate: CandidateScore,
        query: ParsedQuery,
        view: GraphView,
        store: Optional[KeyframeStore],
    ) -> VerificationResult:
        ...


class AcceptAllAuditor:
    """Stub verifier that accepts every candidate"""

    def verify(self, candidate, query, view, store) -> VerificationResult:
        return VerificationResult(object_id=candidate.object_id, verdict="accept", rationale="accept-all stub")


class KeyedAuditor:
    """Stub verifier that accepts exactly the given object ids"""

    def __init__(self, accepted_ids: Iterable[int]):
        self.accepted_ids = frozenset(accepted_ids)

    def verify(self, candidate, query, view, store) -> VerificationResult:
        if candidate.object_id in self.accepted_ids:
            return VerificationResult(object_id=candidate.object_id, verdict="accept", rationale="keyed: positive")
        return VerificationResult(object_id=candidate.object_id, verdict="reject", rationale="keyed: not a positive")


def audit_request(candidate: CandidateScore, query: ParsedQuery, view: GraphView) -> str:
    node = view.get_object(candidate.object_id)
    room = view.room_of(node)
    area = view.area_of(node)
    facts = [
        f"Request: {query.raw}",
        f"Candidate label: {node.label}",
        f"Candidate description: {node.description or 'none'}",
        f"Room: {room.label if room and room.label else 'unknown'}",
        f"Area: {area.label if area else 'unknown'}",
        f"Floor: {view.floors[node.floor_id].index}",
    ]
    for constraint in query.constraints:
        sign = "must NOT match" if constraint.polarity < 0 else "must match"
        relation = f" {constraint.relation.value}" if constraint.relation else ""
        facts.append(f"Constraint {constraint.index} ({constraint.kind.value}{relation}): {constraint.text} [{sign}]")
    return "\n".join(facts)


class ModelAuditor:
    """
    Vision-provider verifier over the candidate's stored best-view crop

    Args:
        client: Verifier-role client
        crop_pad: Fractional padding added around the best-view box
    """

    def __init__(self, client: ModelClient, crop_pad: float = 0.1):
        self.client = client
        self.crop_pad = crop_pad

    def _unavailable(self, candidate: CandidateScore, reason: str) -> VerificationResult:
        return VerificationResult(object_id=candidate.object_id, verdict="provider_unavailable", rationale=reason)

    def verify(self, candidate, query, view, store) -> VerificationResult:
        node = view.get_object(candidate.object_id)
        if node.best_view is None:
            return self._unavailable(candidate, "no best view")
        payload = None
        if store is not None:
            try:
                payload = store.image_bytes(node.best_view.keyframe_id)
            except UnknownNodeError:
                payload = None
        if payload is None:
            return self._unavailable(candidate, "image absent")
        try:
            crop = crop_image(payload, node.best_view.bbox2d, self.crop_pad)
        except ValueError as e:
            return self._unavailable(candidate, f"crop failed: {e}")
        try:
            reply = self.client.chat(load_prompt("verify"), audit_request(candidate, query, view), images=[crop])
        except ProviderUnavailable as e:
            logger.warning(f"Verifier unavailable for object {candidate.object_id}: {e.reason}")
            return self._unavailable(candidate, e.reason)
        parsed = parse_reply(reply, VerifyReply)
        if parsed is None:
            logger.warning(f"Verifier reply for object {candidate.object_id} did not match its schema")
            return self._unavailable(candidate, "malformed reply")
        return VerificationResult(object_id=candidate.object_id, verdict=parsed.verdict, rationale=parsed.rationale)


def verify_candidate(
    candidate: CandidateScore,
    query: ParsedQuery,
    view: GraphView,
    store: Optional[KeyframeStore],
    auditor: Auditor,
) -> VerificationResult:
    result = auditor.verify(candidate, query, view, store)
    logger.info(f"Audit of object {candidate.object_id}: {result.verdict} ({result.rationale})")
    return result


def make_auditor(
    cfg: RetrievalConfig,
    providers: ProviderSet,
    accepted_ids: Optional[Iterable[int]] = None,
) -> Auditor:
    if cfg.auditor == "accept_all":
        return AcceptAllAuditor()
    if cfg.auditor == "keyed":
        return KeyedAuditor(accepted_ids or ())
    return ModelAuditor(providers.get(ProviderRole.VERIFIER), cfg.crop_pad)
