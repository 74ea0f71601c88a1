import json
import logging
import re
from functools import lru_cache
from pathlib import Path
from typing import Any, Optional, Type, TypeVar, Union

from pydantic import BaseModel, ValidationError

logger = logging.getLogger(__name__)

PROMPTS_DIR = Path(__file__).resolve().parent.parent / "prompts"

ReplyModel = TypeVar("ReplyModel", bound=BaseModel)
JsonValue = Union[dict, list]


@lru_cache(maxsize=None)
def load_prompt(name: str) -> str:
    """
    Load a versioned prompt asset from prompts/

    Args:
        name: File stem, e.g. "verify"

    Returns:
        Prompt text with surrounding whitespace stripped
    """
    path = PROMPTS_DIR / f"{name}.txt"
    return path.read_text(encoding="utf-8").strip()


def extract_json_from_text(text: str) -> Optional[JsonValue]:
    """
    Extract a JSON object or array from a reply that may wrap it in fences or prose

    Args:
        text: Raw reply text

    Returns:
        Parsed JSON value or None if extraction fails
    """
    if not text or not text.strip():
        logger.warning("Empty text provided for JSON extraction")
        return None

    text = text.strip()

    # Fenced blocks first
    fence_patterns = [
        r'```json\s*\n(.*?)\n```',
        r'```\s*\n(.*?)\n```',
    ]
    for pattern in fence_patterns:
        for match in re.findall(pattern, text, re.DOTALL):
            try:
                return json.loads(match.strip())
            except json.JSONDecodeError:
                continue

    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass

    for open_char, close_char in (("{", "}"), ("[", "]")):
        start = text.find(open_char)
        end = text.rfind(close_char)
        if start != -1 and end > start:
            try:
                return json.loads(text[start:end + 1])
            except json.JSONDecodeError:
                continue

    logger.warning(f"Could not extract valid JSON from text: {text[:200]}...")
    return None


def validate_reply(data: Any, model: Type[ReplyModel]) -> ReplyModel:
    """
    Validate extracted JSON against a reply schema

    Raises:
        ValueError: If validation fails
    """
    try:
        return model.model_validate(data)
    except ValidationError as e:
        logger.error(f"{model.__name__} validation failed: {e}")
        raise ValueError(f"Invalid {model.__name__} format: {e}") from e


def parse_reply(raw_reply: str, model: Type[ReplyModel]) -> Optional[ReplyModel]:
    """
    Turn a raw provider reply into a validated schema instance

    Args:
        raw_reply: Reply text from the provider
        model: Pydantic schema the reply must follow

    Returns:
        Validated instance, or None when the caller must take its fallback path
    """
    data = extract_json_from_text(raw_reply)
    if data is None:
        return None
    try:
        return validate_reply(data, model)
    except ValueError:
        return None
