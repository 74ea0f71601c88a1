import json
import logging
import re
from dataclasses import dataclass
from typing import List, Literal, Optional, Sequence, Tuple

from pydantic import BaseModel, Field, ValidationError

from errors import ProviderUnavailable, QueryParseError
from model_client import ModelClient, tokenize
from query_schema import Constraint, ConstraintKind, ParsedQuery, normalized_weights
from scene_schema import Relation
from utils.llm import load_prompt, parse_reply

logger = logging.getLogger(__name__)

_WORD_RE = re.compile(r"[^\W_]+(?:'[^\W_]+)*")

ARTICLES = frozenset({"a", "an", "the", "some", "any", "me", "us"})
FILLERS = frozenset({"is", "are", "located", "placed", "sitting", "standing", "lying", "it", "one"})
ATTRIBUTE_LEADS = frozenset({"that", "which", "who"})
RELATION_WORDS = {
    "on": Relation.ON,
    "near": Relation.NEAR,
    "above": Relation.ABOVE,
    "below": Relation.BELOW,
}
BOUNDARY = frozenset({"in", "not", "and", "next"}) | ATTRIBUTE_LEADS | FILLERS | frozenset(RELATION_WORDS)

FLOOR_WORDS = frozenset({"floor", "fl", "level", "storey"})
NUMBER_WORDS = {
    "one": 1, "two": 2, "three": 3, "four": 4, "five": 5, "six": 6, "seven": 7, "eight": 8, "nine": 9,
    "first": 1, "second": 2, "third": 3, "fourth": 4, "fifth": 5, "sixth": 6, "seventh": 7,
    "eighth": 8, "ninth": 9, "ground": 1,
}


@dataclass(frozen=True)
class Word:
    text: str
    start: int
    end: int


def split_words(text: str) -> List[Word]:
    return [Word(m.group(0).lower(), m.start(), m.end()) for m in _WORD_RE.finditer(text)]


def _floor_number(word: str) -> Optional[int]:
    if word.isdecimal():
        value = int(word)
        return value if value >= 1 else None
    ordinal = re.fullmatch(r"(\d+)(?:st|nd|rd|th)", word)
    if ordinal:
        return int(ordinal.group(1)) or None
    return NUMBER_WORDS.get(word)


def _match_floor(words: Sequence[Word], pos: int) -> Tuple[Optional[int], int]:
    """
    Recognize "floor 2", "fl 2", "the second floor" starting at `pos`

    Returns:
        (floor index or None, position after the clause)
    """
    while pos < len(words) and words[pos].text in ARTICLES:
        pos += 1
    if pos + 1 < len(words) and words[pos].text in FLOOR_WORDS:
        number = _floor_number(words[pos + 1].text)
        if number is not None:
            return number, pos + 2
    if pos + 1 < len(words) and words[pos + 1].text in FLOOR_WORDS:
        number = _floor_number(words[pos].text)
        if number is not None:
            return number, pos + 2
    return None, pos


def _phrase(words: Sequence[Word], pos: int) -> Tuple[List[Word], int]:
    """Content words up to the next keyword, articles dropped"""
    collected: List[Word] = []
    while pos < len(words) and words[pos].text not in BOUNDARY:
        if words[pos].text not in ARTICLES:
            collected.append(words[pos])
        pos += 1
    return collected, pos


def _join(phrase: Sequence[Word]) -> str:
    return " ".join(w.text for w in phrase)


def _assemble(text: str, drafts: List[dict], parser: Literal["rules", "model"] = "rules",
              weights: Optional[Sequence[float]] = None) -> ParsedQuery:
    kinds = [d["kind"] for d in drafts]
    raw = list(weights) if weights is not None else [1.0] * len(drafts)
    final = normalized_weights(kinds, raw)
    constraints = [
        Constraint(index=i, weight=w, **draft)
        for i, (draft, w) in enumerate(zip(drafts, final))
    ]
    floor = next((c.floor_index for c in constraints if c.kind == ConstraintKind.FLOOR), None)
    return ParsedQuery(raw=text, constraints=constraints, target_floor=floor, parser=parser)


def parse_query_rules(text: str) -> ParsedQuery:
    """
    Deterministic grammar parser

    Grammar, one constraint per clause:
        QUERY := "find" TARGET (LOC | REL | NEG)*
        LOC   := ("in" | "on floor") PHRASE
        REL   := ("on" | "near" | "next to" | "above" | "below") PHRASE
        NEG   := "not" (LOC | REL | ADJ)

    A relation following another relation applies to the previous reference ("remote on
    table next to sofa"); "and" or a location clause ends such a chain. Adjectives after
    "that/which is" describe the latest reference, or the target when there is none.
    Trailing text the grammar does not cover becomes one description constraint.

    Args:
        text: Query text, any UTF-8

    Returns:
        ParsedQuery with uniform weights over the scored constraints

    Raises:
        QueryParseError: when no target can be recognized, or a floor clause is negated
    """
    words = split_words(text)
    if not words:
        raise QueryParseError("empty query", (0, len(text)), text)
    if words[0].text != "find":
        if tokenize(text):
            logger.debug(f"Query without 'find', using one description constraint: {text[:60]}")
            return _assemble(text, [{"kind": ConstraintKind.DESCRIPTION, "text": text.strip()}])
        raise QueryParseError("no content words", (0, len(text)), text)

    target, pos = _phrase(words, 1)
    if not target:
        end = words[pos].end if pos < len(words) else len(text)
        raise QueryParseError("no target after 'find'", (words[0].end, end), text)
    drafts: List[dict] = [{"kind": ConstraintKind.TARGET_ATTRIBUTE, "text": _join(target)}]

    last_relation: Optional[int] = None
    chain_open = False
    negate = False
    negated_at = 0
    attribute_mode = False
    has_floor = False

    def emit(draft: dict) -> int:
        nonlocal negate, attribute_mode
        draft["polarity"] = -1 if negate else 1
        drafts.append(draft)
        negate = False
        attribute_mode = False
        return len(drafts) - 1

    while pos < len(words):
        word = words[pos]
        if word.text in ARTICLES or word.text in FILLERS:
            pos += 1
            continue
        if word.text in ATTRIBUTE_LEADS:
            attribute_mode = True
            pos += 1
            continue
        if word.text == "and":
            chain_open = False
            pos += 1
            continue
        if word.text == "not":
            negate = True
            negated_at = word.start
            pos += 1
            continue

        if word.text in ("in", "on"):
            floor, after = _match_floor(words, pos + 1)
            if floor is not None and not has_floor:
                if negate:
                    # the hard filter can only keep one floor
                    raise QueryParseError("negated floor clause", (negated_at, words[after - 1].end), text)
                emit({"kind": ConstraintKind.FLOOR, "text": f"floor {floor}", "floor_index": floor})
                has_floor = True
                pos = after
                continue

        if word.text == "in":
            phrase, after = _phrase(words, pos + 1)
            if not phrase:
                pos = after
                continue
            kind = ConstraintKind.AREA if phrase[-1].text == "area" else ConstraintKind.ROOM
            emit({"kind": kind, "text": _join(phrase)})
            last_relation, chain_open = None, False
            pos = after
            continue

        relation: Optional[Relation] = None
        step = 1
        if word.text == "next" and pos + 1 < len(words) and words[pos + 1].text == "to":
            relation, step = Relation.NEXT_TO, 2
        elif word.text in RELATION_WORDS:
            relation = RELATION_WORDS[word.text]
        if relation is not None:
            phrase, after = _phrase(words, pos + step)
            if phrase:
                anchor = last_relation if chain_open else None
                index = emit({
                    "kind": ConstraintKind.RELATION,
                    "text": _join(phrase),
                    "relation": relation,
                    "anchor": anchor,
                })
                last_relation, chain_open = index, True
            pos = after
            continue

        if word.text == "next":
            pos += 1
            continue

        if attribute_mode or negate:
            phrase, after = _phrase(words, pos)
            emit({"kind": ConstraintKind.TARGET_ATTRIBUTE, "text": _join(phrase), "anchor": last_relation})
            pos = after
            continue

        trailing = text[word.start:].strip()
        if tokenize(trailing):
            emit({"kind": ConstraintKind.DESCRIPTION, "text": trailing})
        break

    return _assemble(text, drafts)


# ---------------------------------------------------------------------------
# Model-backed parsing: decomposition, negation, weighting
# ---------------------------------------------------------------------------

class DecomposedConstraint(BaseModel):
    kind: ConstraintKind
    text: str = Field(..., min_length=1)
    relation: Optional[Relation] = None
    reference: Optional[str] = None
    anchor: Optional[int] = None


class DecomposeReply(BaseModel):
    constraints: List[DecomposedConstraint] = Field(..., min_length=1)


class NegationReply(BaseModel):
    polarities: List[Literal[1, -1]]


class WeightsReply(BaseModel):
    weights: List[float]


def _draft_dicts(reply: DecomposeReply) -> List[dict]:
    drafts = []
    for item in reply.constraints:
        draft: dict = {"kind": item.kind, "text": item.text}
        if item.kind == ConstraintKind.RELATION:
            draft["relation"] = item.relation
            draft["text"] = item.reference or item.text
        elif item.kind == ConstraintKind.FLOOR:
            parts = item.text.lower().split()
            floor = _floor_number(parts[-1]) if parts else None
            if floor is None:
                raise ValueError(f"unreadable floor '{item.text}'")
            draft["floor_index"] = floor
            draft["text"] = f"floor {floor}"
        if item.anchor is not None:
            draft["anchor"] = item.anchor
        drafts.append(draft)
    return drafts


def negation_request(text: str, drafts: Sequence[dict]) -> str:
    listing = [
        {"index": i, "kind": d["kind"].value, "text": d["text"]}
        for i, d in enumerate(drafts)
    ]
    return json.dumps({"query": text, "constraints": listing}, sort_keys=True)


def weights_request(text: str, drafts: Sequence[dict], polarities: Sequence[int]) -> str:
    listing = [
        {"index": i, "kind": d["kind"].value, "text": d["text"], "polarity": p}
        for i, (d, p) in enumerate(zip(drafts, polarities))
    ]
    return json.dumps({"query": text, "constraints": listing}, sort_keys=True)


def parse_query_model(text: str, client: ModelClient) -> ParsedQuery:
    """
    Three sequential provider calls: decomposition, negation extraction, intent weighting

    Every reply must follow its schema; any violation, or an unreachable provider, falls
    back to parse_query_rules(text). A floor marked negative is refused with
    QueryParseError, since the floor filter can only keep one floor.
    """
    try:
        decomposed = parse_reply(client.chat(load_prompt("parse_decompose"), text), DecomposeReply)
        if decomposed is None:
            raise ValueError("decomposition reply did not match its schema")
        drafts = _draft_dicts(decomposed)

        negation = parse_reply(
            client.chat(load_prompt("parse_negation"), negation_request(text, drafts)), NegationReply
        )
        if negation is None or len(negation.polarities) != len(drafts):
            raise ValueError("negation reply did not match the constraint list")
        for draft, polarity in zip(drafts, negation.polarities):
            if draft["kind"] == ConstraintKind.FLOOR and polarity == -1:
                raise QueryParseError(f"negated floor clause '{draft['text']}'", (0, len(text)), text)
            draft["polarity"] = polarity

        weighting = parse_reply(
            client.chat(load_prompt("parse_weights"), weights_request(text, drafts, negation.polarities)),
            WeightsReply,
        )
        if weighting is None or len(weighting.weights) != len(drafts):
            raise ValueError("weighting reply did not match the constraint list")
        return _assemble(text, drafts, parser="model", weights=weighting.weights)
    except QueryParseError:
        raise
    except ProviderUnavailable as e:
        logger.warning(f"Parser provider unavailable ({e.reason}), using rules")
    except (ValueError, ValidationError) as e:
        logger.warning(f"Model parse rejected ({e}), using rules")
    return parse_query_rules(text)


def parse_query(text: str, mode: str = "rules", client: Optional[ModelClient] = None) -> ParsedQuery:
    if mode == "model" and client is not None:
        return parse_query_model(text, client)
    return parse_query_rules(text)
