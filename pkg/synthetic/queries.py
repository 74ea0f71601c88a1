import logging
from typing import Callable, Dict, Iterable, List, Literal, Optional, Set, Tuple

from pydantic import BaseModel, Field, model_validator

from config import WorldConfig
from errors import WorldParamsError
from model_client import tokenize
from scene_schema import SYMMETRIC_RELATIONS, Relation
from synthetic.prng import keyed_stream
from synthetic.world import ObjectSpec, WorldSpec

logger = logging.getLogger(__name__)

Template = Literal["A1", "B1", "C1", "C2", "D1", "D2", "D3", "D4", "D5", "E1", "F"]

SCORED_TEMPLATES: Tuple[str, ...] = ("A1", "B1", "C1", "C2", "D1", "D2", "D3", "D4", "D5", "E1")
NEGATION_TEMPLATES: Tuple[str, ...] = ("D1", "D2", "D3", "D4", "D5")
AREA_TEMPLATES: Tuple[str, ...] = ("B1",)

RELATION_PHRASES = {Relation.ON: "on", Relation.NEAR: "near"}


class QueryInstance(BaseModel):
    """One generated query with its answer key"""
    template: Template
    text: str = Field(..., min_length=1)
    slots: Dict[str, str] = Field(default_factory=dict)
    positives: List[int]
    hard_negatives: List[int] = Field(default_factory=list)
    manual_eval: bool = False

    @model_validator(mode="after")
    def check_answer_key(self) -> "QueryInstance":
        if not self.positives:
            raise ValueError(f"{self.template} query '{self.text}' has no positive")
        if self.template != "F" and not self.hard_negatives:
            raise ValueError(f"{self.template} query '{self.text}' has no hard negative")
        if set(self.positives) & set(self.hard_negatives):
            raise ValueError(f"{self.template} query '{self.text}' lists an object as positive and negative")
        return self


class WorldFacts:
    """Lookup tables over a world's truth: labels, places, attributes and relations"""

    def __init__(self, world: WorldSpec):
        self.world = world
        self.objects = list(world.objects)
        self.by_label: Dict[str, List[ObjectSpec]] = {}
        for obj in self.objects:
            self.by_label.setdefault(obj.label, []).append(obj)
        self.kind_of_room = {room.id: room.kind for room in world.rooms}
        self.rooms_with_area: Dict[str, Set[int]] = {}
        for room in world.rooms:
            for area in room.areas:
                self.rooms_with_area.setdefault(area.label, set()).add(room.id)
        self._related: Dict[Tuple[int, Relation], Set[int]] = {}
        for relation in world.relations:
            self._related.setdefault((relation.src, relation.relation), set()).add(relation.dst)
            if relation.relation in SYMMETRIC_RELATIONS:
                self._related.setdefault((relation.dst, relation.relation), set()).add(relation.src)

    def labels(self) -> List[str]:
        return sorted(self.by_label)

    def kind(self, obj: ObjectSpec) -> str:
        return self.kind_of_room[obj.room_id]

    def related(self, object_id: int, relation: Relation, label: Optional[str] = None) -> List[int]:
        found = sorted(self._related.get((object_id, relation), ()))
        if label is None:
            return found
        return [oid for oid in found if self.world.object(oid).label == label]

    def relation_pairs(self, relation: Relation) -> List[Tuple[str, str]]:
        """(subject label, reference label) pairs that occur under `relation`"""
        pairs = set()
        for obj in self.objects:
            for other in self.related(obj.id, relation):
                label = self.world.object(other).label
                if label != obj.label:
                    pairs.add((obj.label, label))
        return sorted(pairs)


def _ids(objects: Iterable[ObjectSpec]) -> List[int]:
    return sorted(obj.id for obj in objects)


def _instance(template: str, text: str, slots: Dict[str, str], positives: Iterable[ObjectSpec],
              negatives: Iterable[ObjectSpec]) -> Optional[QueryInstance]:
    pos, neg = _ids(positives), _ids(negatives)
    if not pos or not neg:
        return None
    return QueryInstance(template=template, text=text, slots=slots, positives=pos, hard_negatives=neg)


# ---------------------------------------------------------------------------
# Templates
# ---------------------------------------------------------------------------

def room_queries(facts: WorldFacts) -> List[QueryInstance]:
    """A1: find a L in the K; negatives are L in rooms of another kind"""
    found = []
    for label in facts.labels():
        members = facts.by_label[label]
        for kind in sorted({facts.kind(o) for o in members}):
            instance = _instance(
                "A1", f"find a {label} in the {kind}", {"label": label, "room": kind},
                [o for o in members if facts.kind(o) == kind],
                [o for o in members if facts.kind(o) != kind],
            )
            if instance:
                found.append(instance)
    return found


def area_queries(facts: WorldFacts) -> List[QueryInstance]:
    """B1: find a L in the A; negatives are L elsewhere in a room holding such an area"""
    found = []
    for area in sorted(facts.rooms_with_area):
        rooms = facts.rooms_with_area[area]
        for label in facts.labels():
            members = [o for o in facts.by_label[label] if o.room_id in rooms]
            instance = _instance(
                "B1", f"find a {label} in the {area}", {"label": label, "area": area},
                [o for o in members if o.area == area],
                [o for o in members if o.area != area],
            )
            if instance:
                found.append(instance)
    return found


def relation_queries(facts: WorldFacts) -> List[QueryInstance]:
    """C1: find a L on/near the R; negatives are L without that relation to any R"""
    found = []
    for relation, phrase in RELATION_PHRASES.items():
        for label, reference in facts.relation_pairs(relation):
            members = facts.by_label[label]
            instance = _instance(
                "C1", f"find a {label} {phrase} the {reference}",
                {"label": label, "relation": relation.value, "reference": reference},
                [o for o in members if facts.related(o.id, relation, reference)],
                [o for o in members if not facts.related(o.id, relation, reference)],
            )
            if instance:
                found.append(instance)
    return found


def _supports(facts: WorldFacts, obj: ObjectSpec, reference: str) -> List[int]:
    return facts.related(obj.id, Relation.ON, reference)


def chained_queries(facts: WorldFacts) -> List[QueryInstance]:
    """C2: find a L on the R1 next to the R2; negatives rest on an R1 with no R2 beside it"""
    found = []
    for label, first in facts.relation_pairs(Relation.ON):
        seconds = set()
        for obj in facts.by_label[label]:
            for support in _supports(facts, obj, first):
                for other in facts.related(support, Relation.NEXT_TO):
                    seconds.add(facts.world.object(other).label)
        for second in sorted(seconds - {label, first}):
            def beside(obj: ObjectSpec) -> bool:
                return any(facts.related(s, Relation.NEXT_TO, second) for s in _supports(facts, obj, first))
            on_first = [o for o in facts.by_label[label] if _supports(facts, o, first)]
            instance = _instance(
                "C2", f"find a {label} on the {first} next to the {second}",
                {"label": label, "reference": first, "second": second},
                [o for o in on_first if beside(o)],
                [o for o in on_first if not beside(o)],
            )
            if instance:
                found.append(instance)
    return found


def negated_room_queries(facts: WorldFacts) -> List[QueryInstance]:
    """D1: find a L not in the K; some positive must sit in a kind sharing no word with K"""
    found = []
    for label in facts.labels():
        members = facts.by_label[label]
        for kind in sorted({facts.kind(o) for o in members}):
            words = set(tokenize(kind))
            outside = [o for o in members if facts.kind(o) != kind]
            if not any(not (set(tokenize(facts.kind(o))) & words) for o in outside):
                continue
            instance = _instance(
                "D1", f"find a {label} not in the {kind}", {"label": label, "room": kind},
                outside,
                [o for o in members if facts.kind(o) == kind],
            )
            if instance:
                found.append(instance)
    return found


def negated_relation_queries(facts: WorldFacts) -> List[QueryInstance]:
    """D2: find a L not near the R; negatives are L that are near an R"""
    found = []
    for label, reference in facts.relation_pairs(Relation.NEAR):
        members = facts.by_label[label]
        instance = _instance(
            "D2", f"find a {label} not near the {reference}",
            {"label": label, "relation": Relation.NEAR.value, "reference": reference},
            [o for o in members if not facts.related(o.id, Relation.NEAR, reference)],
            [o for o in members if facts.related(o.id, Relation.NEAR, reference)],
        )
        if instance:
            found.append(instance)
    return found


def negated_chain_queries(facts: WorldFacts) -> List[QueryInstance]:
    """D3: find a L on the R1 not near the R2; negatives rest on an R1 that is near an R2"""
    found = []
    for label, first in facts.relation_pairs(Relation.ON):
        on_first = [o for o in facts.by_label[label] if _supports(facts, o, first)]
        seconds = set()
        for obj in on_first:
            for support in _supports(facts, obj, first):
                for other in facts.related(support, Relation.NEAR):
                    seconds.add(facts.world.object(other).label)
        for second in sorted(seconds - {label, first}):
            def crowded(obj: ObjectSpec) -> bool:
                return any(facts.related(s, Relation.NEAR, second) for s in _supports(facts, obj, first))
            instance = _instance(
                "D3", f"find a {label} on the {first} not near the {second}",
                {"label": label, "reference": first, "second": second},
                [o for o in on_first if not crowded(o)],
                [o for o in on_first if crowded(o)],
            )
            if instance:
                found.append(instance)
    return found


def negated_attribute_queries(facts: WorldFacts) -> List[QueryInstance]:
    """D4: find a L that is not ATTR; negatives carry the attribute"""
    found = []
    for label in facts.labels():
        members = facts.by_label[label]
        for attribute in sorted({a for o in members for a in o.attributes}):
            instance = _instance(
                "D4", f"find a {label} that is not {attribute}", {"label": label, "attribute": attribute},
                [o for o in members if attribute not in o.attributes],
                [o for o in members if attribute in o.attributes],
            )
            if instance:
                found.append(instance)
    return found


def negated_reference_attribute_queries(facts: WorldFacts) -> List[QueryInstance]:
    """D5: find a L on the R that is not ATTR; negatives rest on an R bearing the attribute"""
    found = []
    world = facts.world
    for label, reference in facts.relation_pairs(Relation.ON):
        on_reference = [o for o in facts.by_label[label] if _supports(facts, o, reference)]
        attributes = sorted({a for o in on_reference for s in _supports(facts, o, reference) for a in world.object(s).attributes})
        for attribute in attributes:
            def marked(obj: ObjectSpec) -> bool:
                return any(attribute in world.object(s).attributes for s in _supports(facts, obj, reference))
            instance = _instance(
                "D5", f"find a {label} on the {reference} that is not {attribute}",
                {"label": label, "reference": reference, "attribute": attribute},
                [o for o in on_reference if not marked(o)],
                [o for o in on_reference if marked(o)],
            )
            if instance:
                found.append(instance)
    return found


def floor_queries(facts: WorldFacts) -> List[QueryInstance]:
    """E1: find a COLOR L on floor n; negatives are L on other floors or in another colour"""
    found = []
    for floor in facts.world.floors:
        for label in facts.labels():
            members = facts.by_label[label]
            colors = sorted({o.color for o in members if o.floor_index == floor.index})
            for color in colors:
                def wanted(obj: ObjectSpec) -> bool:
                    return obj.floor_index == floor.index and obj.color == color
                instance = _instance(
                    "E1", f"find a {color} {label} on floor {floor.index}",
                    {"label": label, "color": color, "floor": str(floor.index)},
                    [o for o in members if wanted(o)],
                    [o for o in members if not wanted(o)],
                )
                if instance:
                    found.append(instance)
    return found


def fuzzy_queries(facts: WorldFacts) -> List[QueryInstance]:
    """F: intent-only requests with no machine-checkable answer; marked for manual evaluation"""
    seats = [o for o in facts.by_label.get("chair", []) if o.area == "reading area"]
    if not seats:
        return []
    return [
        QueryInstance(
            template="F",
            text="find something comfortable to sit on while reading",
            positives=_ids(seats),
            manual_eval=True,
        )
    ]


TEMPLATES: Dict[str, Callable[[WorldFacts], List[QueryInstance]]] = {
    "A1": room_queries,
    "B1": area_queries,
    "C1": relation_queries,
    "C2": chained_queries,
    "D1": negated_room_queries,
    "D2": negated_relation_queries,
    "D3": negated_chain_queries,
    "D4": negated_attribute_queries,
    "D5": negated_reference_attribute_queries,
    "E1": floor_queries,
    "F": fuzzy_queries,
}


def generate_query_bank(world: WorldSpec, cfg: Optional[WorldConfig] = None) -> List[QueryInstance]:
    """
    Instantiate every query template against a world's truth

    Each template contributes up to `queries_per_template` instances, sampled from all of
    its satisfiable instantiations; a template with none is skipped.

    Args:
        world: Generated world
        cfg: World settings carrying queries_per_template

    Returns:
        Query instances in template order

    Raises:
        WorldParamsError: when the world has fewer than 2 rooms or 5 objects
    """
    cfg = cfg or WorldConfig(seed=world.seed)
    if len(world.rooms) < 2 or len(world.objects) < 5:
        raise WorldParamsError(
            f"query bank needs at least 2 rooms and 5 objects, world has {len(world.rooms)} and {len(world.objects)}"
        )
    facts = WorldFacts(world)
    bank: List[QueryInstance] = []
    for template, build in TEMPLATES.items():
        candidates = sorted(build(facts), key=lambda q: q.text)
        if not candidates:
            logger.info(f"Template {template} is not satisfiable in world seed {world.seed}, skipped")
            continue
        rng = keyed_stream(world.seed, f"queries-{template}")
        chosen = rng.sample(candidates, min(cfg.queries_per_template, len(candidates)))
        bank.extend(sorted(chosen, key=lambda q: q.text))
    logger.info(f"Query bank for seed {world.seed}: {len(bank)} queries")
    return bank
