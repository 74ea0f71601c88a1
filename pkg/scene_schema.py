import math
from enum import Enum
from functools import lru_cache
from typing import Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.spatial.transform import Rotation

from utils.rle import decode_mask, encode_mask

Vec2 = Tuple[float, float]
Vec3 = Tuple[float, float, float]

UNASSIGNED = "unassigned"
RoomRef = Union[int, Literal["unassigned"]]


class Relation(str, Enum):
    ON = "on"
    IN = "in"
    NEAR = "near"
    NEXT_TO = "next_to"
    ABOVE = "above"
    BELOW = "below"


SYMMETRIC_RELATIONS = frozenset({Relation.NEAR, Relation.NEXT_TO})


class EdgeSource(str, Enum):
    GEOMETRIC = "geometric"
    MODEL = "model"


class FrozenModel(BaseModel):
    model_config = ConfigDict(frozen=True)


class Box3D(FrozenModel):
    """Axis-aligned box in world meters"""
    lo: Vec3
    hi: Vec3

    @model_validator(mode="after")
    def check_order(self) -> "Box3D":
        if any(a > b for a, b in zip(self.lo, self.hi)):
            raise ValueError(f"box lower corner {self.lo} exceeds upper corner {self.hi}")
        return self

    def contains(self, point: Vec3, tol: float = 1e-9) -> bool:
        return all(lo - tol <= p <= hi + tol for p, lo, hi in zip(point, self.lo, self.hi))

    def union(self, other: "Box3D") -> "Box3D":
        return Box3D(
            lo=tuple(float(min(a, b)) for a, b in zip(self.lo, other.lo)),
            hi=tuple(float(max(a, b)) for a, b in zip(self.hi, other.hi)),
        )

    @property
    def size(self) -> Vec3:
        return tuple(h - l for l, h in zip(self.lo, self.hi))


class Pose(FrozenModel):
    """Camera pose in the world frame, quaternion as (x, y, z, w)"""
    timestamp: float
    position: Vec3
    orientation: Tuple[float, float, float, float]

    @field_validator("orientation")
    @classmethod
    def validate_unit_quaternion(cls, v: Tuple[float, float, float, float]):
        norm = math.sqrt(sum(c * c for c in v))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"quaternion norm {norm:.8f} is not 1")
        return v

    def rotation(self) -> Rotation:
        return Rotation.from_quat(self.orientation)

    def forward_xy(self) -> Vec2:
        """Horizontal viewing direction (camera +z axis projected to the floor)"""
        forward = self.rotation().apply([0.0, 0.0, 1.0])
        norm = math.hypot(forward[0], forward[1])
        if norm < 1e-9:
            return (1.0, 0.0)
        return (float(forward[0] / norm), float(forward[1] / norm))


class Intrinsics(FrozenModel):
    fx: float = Field(gt=0)
    fy: float = Field(gt=0)
    cx: float
    cy: float
    width: int = Field(gt=0)
    height: int = Field(gt=0)

    @property
    def horizontal_fov(self) -> float:
        return 2.0 * math.atan(self.width / (2.0 * self.fx))


class FloorNode(FrozenModel):
    id: int
    index: int = Field(ge=1)
    z_min: float
    z_max: float

    @model_validator(mode="after")
    def check_band(self) -> "FloorNode":
        if not self.z_min < self.z_max:
            raise ValueError(f"floor band [{self.z_min}, {self.z_max}] is empty")
        return self

    def contains_z(self, z: float, margin: float = 0.0) -> bool:
        return self.z_min - margin <= z <= self.z_max + margin


@lru_cache(maxsize=512)
def _decode_cached(runs: Tuple[int, ...], shape: Tuple[int, int]) -> np.ndarray:
    array = decode_mask(runs, shape)
    array.setflags(write=False)
    return array


class RoomMask(FrozenModel):
    """
    Run-length encoded room footprint on a floor grid

    Cell (r, c) covers x in [ox + c*res, ox + (c+1)*res), y in [oy + r*res, oy + (r+1)*res).
    """
    origin: Vec2
    resolution: float = Field(gt=0)
    shape: Tuple[int, int]
    runs: Tuple[int, ...]

    @classmethod
    def from_array(cls, array: np.ndarray, origin: Vec2, resolution: float) -> "RoomMask":
        return cls(
            origin=(float(origin[0]), float(origin[1])),
            resolution=float(resolution),
            shape=(int(array.shape[0]), int(array.shape[1])),
            runs=encode_mask(array),
        )

    def to_array(self) -> np.ndarray:
        return _decode_cached(self.runs, self.shape)

    def cell_of(self, x: float, y: float) -> Tuple[int, int]:
        col = int(math.floor((x - self.origin[0]) / self.resolution))
        row = int(math.floor((y - self.origin[1]) / self.resolution))
        return row, col

    def contains(self, x: float, y: float) -> bool:
        row, col = self.cell_of(x, y)
        if not (0 <= row < self.shape[0] and 0 <= col < self.shape[1]):
            return False
        return bool(self.to_array()[row, col])

    @property
    def cell_count(self) -> int:
        return int(sum(self.runs[1::2]))

    @property
    def area_m2(self) -> float:
        return self.cell_count * self.resolution ** 2


class RoomNode(FrozenModel):
    id: int
    floor_id: int
    mask: RoomMask
    label: str = ""
    summary: str = ""
    best_view_keyframe: Optional[str] = None
    area_ids: Tuple[int, ...] = ()


class AreaNode(FrozenModel):
    id: int
    room_id: int
    label: str = ""
    summary: str = ""
    object_ids: Tuple[int, ...]
    centroid: Vec2


class BestViewRef(FrozenModel):
    """Pixel box (x0, y0, x1, y1) of an object in its most central keyframe"""
    keyframe_id: str
    bbox2d: Tuple[int, int, int, int]
    center_offset: float = Field(ge=0.0, le=math.sqrt(2.0) + 1e-9)

    @classmethod
    def from_bbox(cls, keyframe_id: str, bbox2d: Tuple[int, int, int, int], width: int, height: int) -> "BestViewRef":
        x0, y0, x1, y1 = bbox2d
        half_w, half_h = width / 2.0, height / 2.0
        dx = ((x0 + x1) / 2.0 - half_w) / half_w
        dy = ((y0 + y1) / 2.0 - half_h) / half_h
        offset = min(math.hypot(dx, dy), math.sqrt(2.0))
        return cls(keyframe_id=keyframe_id, bbox2d=tuple(int(v) for v in bbox2d), center_offset=offset)


class ObjectNode(FrozenModel):
    """L3 entity; holds metadata only, never per-point geometry"""
    id: int = 0
    label: str
    is_open_vocab: bool = False
    embedding: Tuple[float, ...]
    description: str = ""
    centroid: Vec3
    bbox3d: Box3D
    room_id: RoomRef = UNASSIGNED
    area_id: Optional[int] = None
    floor_id: int
    best_view: Optional[BestViewRef] = None
    observation_count: int = 1

    @property
    def text(self) -> str:
        return f"{self.description} {self.label}".strip()


class SpatialEdge(FrozenModel):
    src_object_id: int
    dst_object_id: int
    relation: Relation
    confidence: float = Field(ge=0.0, le=1.0)
    source: EdgeSource = EdgeSource.GEOMETRIC

    @model_validator(mode="after")
    def check_distinct(self) -> "SpatialEdge":
        if self.src_object_id == self.dst_object_id:
            raise ValueError("edge endpoints must differ")
        return self

    @property
    def key(self) -> Tuple[int, int, Relation]:
        return (self.src_object_id, self.dst_object_id, self.relation)


class KeyframeEntry(FrozenModel):
    keyframe_id: str
    image_path: Optional[str] = None
    content_hash: str
    pose: Pose
    timestamp: float
    width: int
    height: int
    floor_id: Optional[int] = None


class Detection(FrozenModel):
    """One precomputed perception result inside a keyframe"""
    bbox2d: Optional[Tuple[int, int, int, int]] = None
    mask: Optional[RoomMask] = None
    label: str
    known_category: bool = True
    embedding: Tuple[float, ...]
    description: Optional[str] = None
    depth_samples: Tuple[Tuple[float, float, float], ...] = ()

    @model_validator(mode="after")
    def check_region(self) -> "Detection":
        if self.bbox2d is None and self.mask is None:
            raise ValueError("detection needs a bbox2d or a mask")
        return self

    def pixel_box(self) -> Tuple[int, int, int, int]:
        if self.bbox2d is not None:
            return self.bbox2d
        rows, cols = np.nonzero(self.mask.to_array())
        return (int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1)


class ObservationFrame(FrozenModel):
    keyframe_id: str
    floor_id: int
    pose: Pose
    intrinsics: Intrinsics
    detections: Tuple[Detection, ...] = ()
    image_path: Optional[str] = None

    @model_validator(mode="after")
    def check_pixels_in_bounds(self) -> "ObservationFrame":
        width, height = self.intrinsics.width, self.intrinsics.height
        for index, det in enumerate(self.detections):
            if det.bbox2d is not None:
                x0, y0, x1, y1 = det.bbox2d
                if not (0 <= x0 <= x1 <= width and 0 <= y0 <= y1 <= height):
                    raise ValueError(f"detection {index} bbox {det.bbox2d} outside {width}x{height}")
            for u, v, _ in det.depth_samples:
                if not (0 <= u <= width and 0 <= v <= height):
                    raise ValueError(f"detection {index} depth sample ({u}, {v}) outside image")
        return self


class UpdateReport(BaseModel):
    """One event-triggered reorganization, appended to updates.jsonl"""
    update_index: int
    floor_id: int
    reason: str
    timestamp: float
    revision: int
    rooms_matched: int = 0
    rooms_created: int = 0
    rooms_retired: int = 0
    objects_moved: int = 0
    areas_built: int = 0
    best_views_selected: int = 0
