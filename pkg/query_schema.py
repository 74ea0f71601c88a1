import math
from enum import Enum
from typing import Dict, List, Literal, Optional, Sequence

from pydantic import BaseModel, Field, field_validator, model_validator

from scene_schema import Relation, Vec3

WEIGHT_TOLERANCE = 1e-6


class ConstraintKind(str, Enum):
    TARGET_ATTRIBUTE = "target_attribute"
    ROOM = "room"
    AREA = "area"
    FLOOR = "floor"
    RELATION = "relation"
    DESCRIPTION = "description"


class Constraint(BaseModel):
    """One atomic, weighted and polar clause of a query"""
    index: int = Field(..., ge=0)
    kind: ConstraintKind
    text: str = Field(..., min_length=1, description="Attribute, place or reference text")
    polarity: Literal[1, -1] = 1
    weight: float = Field(default=0.0, ge=0.0)
    relation: Optional[Relation] = None
    anchor: Optional[int] = Field(
        default=None,
        description="Index of the relation constraint whose reference this clause applies to",
    )
    floor_index: Optional[int] = Field(default=None, ge=1)

    @field_validator("text")
    @classmethod
    def validate_text(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("Constraint text cannot be blank")
        return v.strip()

    @model_validator(mode="after")
    def check_kind_fields(self) -> "Constraint":
        if self.kind == ConstraintKind.RELATION and self.relation is None:
            raise ValueError("relation constraints need a relation type")
        if self.kind != ConstraintKind.RELATION and self.relation is not None:
            raise ValueError(f"{self.kind.value} constraints carry no relation type")
        if self.kind == ConstraintKind.FLOOR:
            if self.floor_index is None:
                raise ValueError("floor constraints need a floor index")
            if self.weight != 0.0:
                raise ValueError("floor constraints are hard filters and carry weight 0")
        if self.anchor is not None and self.anchor >= self.index:
            raise ValueError("anchor must point at an earlier constraint")
        return self


class ParsedQuery(BaseModel):
    """Query text decomposed into constraints whose weights sum to 1"""
    raw: str
    constraints: List[Constraint] = Field(..., min_length=1)
    target_floor: Optional[int] = Field(default=None, ge=1)
    parser: Literal["rules", "model"] = "rules"

    @model_validator(mode="after")
    def check_constraints(self) -> "ParsedQuery":
        for position, constraint in enumerate(self.constraints):
            if constraint.index != position:
                raise ValueError(f"constraint at position {position} has index {constraint.index}")
            if constraint.anchor is not None:
                anchor = self.constraints[constraint.anchor]
                if anchor.kind != ConstraintKind.RELATION:
                    raise ValueError(f"constraint {position} is anchored to a {anchor.kind.value} constraint")
        floors = [c for c in self.constraints if c.kind == ConstraintKind.FLOOR]
        if len(floors) > 1:
            raise ValueError("at most one floor constraint is allowed")
        expected_floor = floors[0].floor_index if floors else None
        if self.target_floor != expected_floor:
            raise ValueError(f"target_floor {self.target_floor} disagrees with floor constraint {expected_floor}")
        total = sum(c.weight for c in self.constraints)
        if abs(total - 1.0) > WEIGHT_TOLERANCE:
            raise ValueError(f"constraint weights sum to {total}, expected 1")
        return self

    @property
    def k(self) -> int:
        return len(self.constraints)

    @property
    def scored(self) -> List[Constraint]:
        """Constraints entering the weighted sum (everything but the floor filter)"""
        return [c for c in self.constraints if c.kind != ConstraintKind.FLOOR]

    def has_relation(self) -> bool:
        return any(c.kind == ConstraintKind.RELATION for c in self.constraints)


def normalized_weights(kinds: Sequence[ConstraintKind], raw: Sequence[float]) -> List[float]:
    """
    Zero the floor weights and rescale the rest to sum 1

    Raises:
        ValueError: when no positive weight remains
    """
    weights = [0.0 if kind == ConstraintKind.FLOOR else float(w) for kind, w in zip(kinds, raw)]
    if any(w < 0 or not math.isfinite(w) for w in weights):
        raise ValueError(f"invalid weights {list(raw)}")
    total = sum(weights)
    if total <= 0:
        raise ValueError("no positive weight on a scored constraint")
    return [w / total for w in weights]


class ScoreTerm(BaseModel):
    constraint_index: int
    polarity: Literal[1, -1]
    weight: float
    sim: float = Field(..., ge=0.0, le=1.0)

    @property
    def contribution(self) -> float:
        return self.polarity * self.weight * self.sim


class CandidateScore(BaseModel):
    """Score of one object with every term kept for the explanation output"""
    object_id: int
    h_floor: Literal[0, 1]
    terms: List[ScoreTerm] = Field(default_factory=list)
    score: float
    reference_id: Optional[int] = Field(default=None, description="Best-matching relation reference")
    reference_distance: Optional[float] = None

    def recompute(self) -> float:
        total = 0.0
        for term in self.terms:
            total += term.contribution
        return self.h_floor * total


class VerificationResult(BaseModel):
    object_id: int
    verdict: Literal["accept", "reject", "provider_unavailable"]
    rationale: str = ""


class RetrievalAnswer(BaseModel):
    """Final answer plus the audit trail that explains it"""
    query: ParsedQuery
    status: Literal["accepted", "unverified", "empty"]
    object_id: Optional[int] = None
    label: Optional[str] = None
    centroid: Optional[Vec3] = None
    score: Optional[CandidateScore] = None
    candidates: List[CandidateScore] = Field(default_factory=list)
    verifications: List[VerificationResult] = Field(default_factory=list)
    elapsed_ms: float = 0.0

    def audit_record(self) -> Dict[str, object]:
        """Structured record documented in docs/audit_trail.md"""
        constraints = [
            {
                "index": c.index,
                "kind": c.kind.value,
                "text": c.text,
                "polarity": c.polarity,
                "weight": c.weight,
                "relation": c.relation.value if c.relation else None,
                "anchor": c.anchor,
                "floor_index": c.floor_index,
            }
            for c in self.query.constraints
        ]
        return {
            "query": self.query.raw,
            "parser": self.query.parser,
            "target_floor": self.query.target_floor,
            "constraints": constraints,
            "candidates": [
                {
                    "rank": rank,
                    "object_id": cand.object_id,
                    "h_floor": cand.h_floor,
                    "score": cand.score,
                    "terms": [t.model_dump() for t in cand.terms],
                    "reference_id": cand.reference_id,
                }
                for rank, cand in enumerate(self.candidates, start=1)
            ],
            "verifications": [v.model_dump() for v in self.verifications],
            "answer": {
                "status": self.status,
                "object_id": self.object_id,
                "label": self.label,
                "centroid": list(self.centroid) if self.centroid is not None else None,
                "score": self.score.score if self.score is not None else None,
            },
            "elapsed_ms": self.elapsed_ms,
        }
