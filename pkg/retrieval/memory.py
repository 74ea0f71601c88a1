import json
import logging
from typing import Optional

from pydantic import BaseModel, Field

from errors import ProviderUnavailable
from graph.scene_graph import SceneGraph
from model_client import ModelClient
from scene_schema import ObjectNode
from utils.llm import load_prompt, parse_reply

logger = logging.getLogger(__name__)


class FusionReply(BaseModel):
    description: str = Field(..., min_length=1)


def truncate_oldest(text: str, max_len: int) -> str:
    """Keep the newest `max_len` characters, starting on a word boundary"""
    if len(text) <= max_len:
        return text
    tail = text[-max_len:]
    cut = tail.find(" ")
    if 0 <= cut < len(tail) - 1 and not text[-max_len - 1].isspace():
        tail = tail[cut + 1:]
    return tail.strip()


def stub_fuse(description: str, interaction: str, max_len: int) -> str:
    combined = f"{description.strip()} {interaction.strip()}".strip()
    return truncate_oldest(combined, max_len)


def fuse_temporal_memory(
    graph: SceneGraph,
    object_id: int,
    interaction: str,
    client: Optional[ModelClient] = None,
    max_len: int = 512,
) -> ObjectNode:
    """
    Merge a user interaction into an object's stored description

    The provider rewrites the description under the fusion prompt; without a usable reply
    the interaction is appended and the oldest text is dropped past `max_len`.

    Args:
        graph: Live scene graph (the write bumps its revision)
        object_id: Object to update
        interaction: New interaction text
        client: Text provider, None for the stub path
        max_len: Description length cap in characters

    Returns:
        The updated ObjectNode
    """
    if not interaction or not interaction.strip():
        raise ValueError("interaction text cannot be empty")
    node = graph.snapshot().get_object(object_id)
    fused: Optional[str] = None
    if client is not None:
        request = json.dumps({"description": node.description, "interaction": interaction.strip()})
        try:
            parsed = parse_reply(client.chat(load_prompt("memory_fusion"), request), FusionReply)
            if parsed is None:
                logger.warning(f"Memory fusion reply for object {object_id} did not match its schema, appending")
            else:
                fused = truncate_oldest(parsed.description.strip(), max_len)
        except ProviderUnavailable as e:
            logger.info(f"Memory fusion provider unavailable ({e.reason}), appending")
    if fused is None:
        fused = stub_fuse(node.description, interaction, max_len)
    updated = graph.update_description(object_id, fused)
    logger.info(f"Fused memory into object {object_id}: {len(fused)} chars")
    return updated
