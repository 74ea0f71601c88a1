import json
import logging
import struct
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import imageio.v3 as iio
import numpy as np
from pydantic import BaseModel, Field, ValidationError, model_validator

from errors import FeatureError, SequenceFormatError
from scene_schema import Detection, Intrinsics, Pose, RoomMask

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"IKBF"


def write_features(path: Path, vectors: np.ndarray) -> None:
    """Write rows as little-endian float32 behind the 8-byte IKBF header"""
    rows = np.atleast_2d(np.asarray(vectors, dtype="<f4"))
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(FEATURE_MAGIC)
        handle.write(struct.pack("<I", rows.shape[1]))
        handle.write(rows.tobytes(order="C"))


@lru_cache(maxsize=64)
def _read_feature_file(path: str, mtime_ns: int) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != FEATURE_MAGIC:
        raise FeatureError(f"{path}: missing IKBF header")
    (dim,) = struct.unpack("<I", data[4:8])
    if dim == 0 or (len(data) - 8) % (4 * dim) != 0:
        raise FeatureError(f"{path}: payload is not a whole number of {dim}-dim rows")
    rows = np.frombuffer(data, dtype="<f4", offset=8).reshape(-1, dim).astype(np.float64)
    rows.setflags(write=False)
    return rows


def read_features(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FeatureError(f"{path}: feature file is missing")
    return _read_feature_file(str(path), path.stat().st_mtime_ns)


class SequenceMeta(BaseModel):
    intrinsics: Intrinsics
    depth_scale: float = Field(default=0.001, gt=0)
    seed: Optional[int] = None


class FreeSpaceHint(BaseModel):
    """Precomputed free-space polygon: vertex 0 is the camera, the rest are ray endpoints"""
    points: List[Tuple[float, float]]
    hits: List[bool]

    @model_validator(mode="after")
    def check_lengths(self) -> "FreeSpaceHint":
        if len(self.points) < 1:
            raise ValueError("free-space polygon needs the camera vertex")
        if len(self.hits) != len(self.points) - 1:
            raise ValueError("one hit flag per ray endpoint")
        return self


class FrameRecord(BaseModel):
    frame_id: str
    timestamp: float
    pose: Pose
    image: Optional[str] = None
    depth: Optional[str] = None
    freespace: Optional[FreeSpaceHint] = None
    feature: str

    @model_validator(mode="after")
    def check_geometry_source(self) -> "FrameRecord":
        if self.depth is None and self.freespace is None:
            raise ValueError("frame needs a depth ref or a freespace polygon")
        return self


class DetectionRecord(BaseModel):
    """Detection as stored in detections.jsonl; the embedding may be inline or a feature ref"""
    bbox2d: Optional[Tuple[int, int, int, int]] = None
    mask: Optional[RoomMask] = None
    label: str
    known_category: bool = True
    embedding: Optional[List[float]] = None
    embedding_ref: Optional[str] = None
    description: Optional[str] = None
    depth_samples: List[Tuple[float, float, float]] = Field(default_factory=list)

    @model_validator(mode="after")
    def check_embedding_source(self) -> "DetectionRecord":
        if self.embedding is None and self.embedding_ref is None:
            raise ValueError("detection needs an embedding or embedding_ref")
        return self


class KeyframeDetections(BaseModel):
    keyframe_id: str
    detections: List[DetectionRecord] = Field(default_factory=list)


def split_ref(ref: str) -> Tuple[str, int]:
    """'features/global.ikbf#12' -> ('features/global.ikbf', 12)"""
    path, _, row = ref.partition("#")
    return path, int(row or 0)


class RecordedSequence:
    """A sequence directory: meta.json, frames.jsonl, detections.jsonl, features/"""

    def __init__(self, root: Path, meta: SequenceMeta, frames: List[FrameRecord], detections: Dict[str, KeyframeDetections]):
        self.root = root
        self.meta = meta
        self.frames = frames
        self._detections = detections

    def resolve_vector(self, ref: str) -> np.ndarray:
        path, row = split_ref(ref)
        rows = read_features(self.root / path)
        if not 0 <= row < rows.shape[0]:
            raise FeatureError(f"{ref}: row out of range ({rows.shape[0]} rows)")
        return rows[row]

    def feature(self, frame: FrameRecord) -> np.ndarray:
        return self.resolve_vector(frame.feature)

    def depth_image(self, frame: FrameRecord) -> np.ndarray:
        return np.asarray(iio.imread(self.root / frame.depth), dtype=np.float64) * self.meta.depth_scale

    def image_bytes(self, frame: FrameRecord) -> Optional[bytes]:
        if frame.image is None:
            return None
        path = self.root / frame.image
        return path.read_bytes() if path.is_file() else None

    def detections(self, frame_id: str) -> List[Detection]:
        """Detections of one keyframe with embeddings resolved and unit-normalized"""
        record = self._detections.get(frame_id)
        if record is None:
            return []
        resolved = []
        for det in record.detections:
            vector = np.asarray(det.embedding if det.embedding is not None else self.resolve_vector(det.embedding_ref))
            norm = float(np.linalg.norm(vector))
            if norm == 0:
                logger.debug(f"Keyframe {frame_id}: dropping '{det.label}' with a zero embedding")
                continue
            resolved.append(
                Detection(
                    bbox2d=det.bbox2d,
                    mask=det.mask,
                    label=det.label,
                    known_category=det.known_category,
                    embedding=tuple(float(v) for v in vector / norm),
                    description=det.description,
                    depth_samples=tuple(tuple(s) for s in det.depth_samples),
                )
            )
        return resolved


def _read_jsonl(path: Path, model):
    records = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                records.append(model.model_validate(json.loads(line)))
            except (json.JSONDecodeError, ValidationError) as e:
                raise SequenceFormatError(f"{path}:{line_no}: {str(e).splitlines()[0]}") from e
    return records


def load_sequence(directory: str) -> RecordedSequence:
    """
    Read and validate a sequence directory

    Raises:
        SequenceFormatError: missing files, empty frames.jsonl, or schema violations
    """
    root = Path(directory)
    meta_path = root / "meta.json"
    frames_path = root / "frames.jsonl"
    if not meta_path.is_file():
        raise SequenceFormatError(f"{meta_path}: missing")
    if not frames_path.is_file():
        raise SequenceFormatError(f"{frames_path}: missing")
    try:
        meta = SequenceMeta.model_validate(json.loads(meta_path.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, ValidationError) as e:
        raise SequenceFormatError(f"{meta_path}: {str(e).splitlines()[0]}") from e

    frames = _read_jsonl(frames_path, FrameRecord)
    if not frames:
        raise SequenceFormatError(f"{frames_path}: no frames")
    seen = set()
    for frame in frames:
        if frame.frame_id in seen:
            raise SequenceFormatError(f"{frames_path}: duplicate frame_id {frame.frame_id}")
        seen.add(frame.frame_id)

    detections: Dict[str, KeyframeDetections] = {}
    detections_path = root / "detections.jsonl"
    if detections_path.is_file():
        for record in _read_jsonl(detections_path, KeyframeDetections):
            detections[record.keyframe_id] = record
    logger.info(f"Loaded sequence {root} with {len(frames)} frames and {len(detections)} detection records")
    return RecordedSequence(root, meta, frames, detections)


def write_sequence(
    directory: str,
    meta: SequenceMeta,
    frames: Sequence[FrameRecord],
    detections: Sequence[KeyframeDetections],
) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    (root / "meta.json").write_text(meta.model_dump_json(indent=2) + "\n", encoding="utf-8")
    with open(root / "frames.jsonl", "w", encoding="utf-8", newline="\n") as handle:
        for frame in frames:
            handle.write(frame.model_dump_json(exclude_none=True) + "\n")
    with open(root / "detections.jsonl", "w", encoding="utf-8", newline="\n") as handle:
        for record in detections:
            handle.write(record.model_dump_json(exclude_none=True) + "\n")
    return root
