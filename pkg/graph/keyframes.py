import hashlib
import logging
import math
import threading
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import imageio.v3 as iio
import numpy as np

from errors import UnknownNodeError
from scene_schema import KeyframeEntry, Pose

logger = logging.getLogger(__name__)


def hash_bytes(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


class KeyframeStore:
    """
    Global keyframe table with content-addressed image payloads

    Objects only keep a keyframe id; identical images share one payload file.
    """

    def __init__(self, image_root: Optional[Path] = None):
        self._lock = threading.Lock()
        self._entries: Dict[str, KeyframeEntry] = {}
        self._payloads: Dict[str, bytes] = {}
        self.image_root = Path(image_root) if image_root is not None else None
        self.stale: List[str] = []

    def add(
        self,
        keyframe_id: str,
        pose: Pose,
        width: int,
        height: int,
        floor_id: Optional[int] = None,
        image_bytes: Optional[bytes] = None,
    ) -> KeyframeEntry:
        content_hash = hash_bytes(image_bytes) if image_bytes is not None else ""
        entry = KeyframeEntry(
            keyframe_id=keyframe_id,
            image_path=f"images/{content_hash}.png" if image_bytes is not None else None,
            content_hash=content_hash,
            pose=pose,
            timestamp=pose.timestamp,
            width=width,
            height=height,
            floor_id=floor_id,
        )
        with self._lock:
            self._entries[keyframe_id] = entry
            if image_bytes is not None:
                self._payloads.setdefault(content_hash, image_bytes)
        return entry

    def put_entry(self, entry: KeyframeEntry) -> None:
        with self._lock:
            self._entries[entry.keyframe_id] = entry

    def get(self, keyframe_id: str) -> KeyframeEntry:
        with self._lock:
            entry = self._entries.get(keyframe_id)
        if entry is None:
            raise UnknownNodeError(keyframe_id)
        return entry

    def entries(self) -> List[KeyframeEntry]:
        with self._lock:
            return [self._entries[k] for k in sorted(self._entries)]

    def __contains__(self, keyframe_id: str) -> bool:
        return keyframe_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def references(self, content_hash: str) -> int:
        """Number of keyframes sharing one payload"""
        with self._lock:
            return sum(1 for e in self._entries.values() if e.content_hash == content_hash)

    def payloads(self) -> Dict[str, bytes]:
        with self._lock:
            return dict(self._payloads)

    def image_bytes(self, keyframe_id: str) -> Optional[bytes]:
        """Image payload of a keyframe, or None when the map carries no image for it"""
        entry = self.get(keyframe_id)
        if not entry.content_hash or entry.content_hash in self.stale_hashes():
            return None
        with self._lock:
            payload = self._payloads.get(entry.content_hash)
        if payload is not None:
            return payload
        if self.image_root is None or entry.image_path is None:
            return None
        path = self.image_root / entry.image_path
        if not path.is_file():
            return None
        payload = path.read_bytes()
        if hash_bytes(payload) != entry.content_hash:
            logger.warning(f"Keyframe {keyframe_id}: image bytes no longer match {entry.content_hash[:12]}")
            return None
        with self._lock:
            self._payloads[entry.content_hash] = payload
        return payload

    def stale_hashes(self) -> set:
        with self._lock:
            return {self._entries[k].content_hash for k in self.stale if k in self._entries}

    def drop_payloads(self) -> None:
        """Forget in-memory images (used to emulate a map saved without images/)"""
        with self._lock:
            self._payloads.clear()


def crop_image(payload: bytes, bbox2d: Tuple[int, int, int, int], pad: float = 0.1) -> bytes:
    """
    PNG crop of a pixel box, grown by `pad` of its size on each side and clipped to the image

    Args:
        payload: Encoded image bytes
        bbox2d: (x0, y0, x1, y1) in pixels
        pad: Fractional padding per side

    Returns:
        PNG-encoded crop
    """
    image = iio.imread(payload)
    height, width = image.shape[:2]
    x0, y0, x1, y1 = bbox2d
    pad_x = (x1 - x0) * pad
    pad_y = (y1 - y0) * pad
    left = max(0, int(math.floor(x0 - pad_x)))
    top = max(0, int(math.floor(y0 - pad_y)))
    right = min(width, int(math.ceil(x1 + pad_x)))
    bottom = min(height, int(math.ceil(y1 + pad_y)))
    if right <= left or bottom <= top:
        raise ValueError(f"crop {bbox2d} is empty on a {width}x{height} image")
    return iio.imwrite("<bytes>", np.ascontiguousarray(image[top:bottom, left:right]), extension=".png")
