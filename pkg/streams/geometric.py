import logging
import math
import threading
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError
from scipy import ndimage
from skimage.draw import line as draw_line
from skimage.segmentation import watershed

from config import GridConfig, PipelineConfig
from errors import FeatureError, IntrinsicsMismatchError, SequenceFormatError, UnknownNodeError
from graph.scene_graph import FLOOR_LEVEL, make_id
from scene_schema import FloorNode, Intrinsics, ObservationFrame, Pose, RoomMask
from streams.sequence import FrameRecord, RecordedSequence
from utils.geometry import unproject

logger = logging.getLogger(__name__)

UNKNOWN, FREE, OCCUPIED = 0, 1, 2


class OccupancyGrid:
    """
    2D occupancy raster of one floor

    Cell (r, c) covers x in [ox + c*res, ox + (c+1)*res) and y in [oy + r*res, oy + (r+1)*res).
    The grid grows by padding; the origin only ever moves by whole cells.
    """

    def __init__(self, floor_id: int, resolution: float, origin: Tuple[float, float] = (0.0, 0.0), shape: Tuple[int, int] = (1, 1)):
        if resolution <= 0:
            raise ValueError("resolution must be positive")
        self.floor_id = floor_id
        self.resolution = resolution
        self.origin = (float(origin[0]), float(origin[1]))
        self.cells = np.zeros(shape, dtype=np.uint8)

    @classmethod
    def around(cls, floor_id: int, resolution: float, x: float, y: float, half_cells: int = 32) -> "OccupancyGrid":
        ox = (math.floor(x / resolution) - half_cells) * resolution
        oy = (math.floor(y / resolution) - half_cells) * resolution
        return cls(floor_id, resolution, (ox, oy), (2 * half_cells, 2 * half_cells))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.cells.shape

    def world_to_cell(self, x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        col = np.floor((np.asarray(x) - self.origin[0]) / self.resolution + 1e-9).astype(np.int64)
        row = np.floor((np.asarray(y) - self.origin[1]) / self.resolution + 1e-9).astype(np.int64)
        return row, col

    def cell_center(self, row: int, col: int) -> Tuple[float, float]:
        return (self.origin[0] + (col + 0.5) * self.resolution, self.origin[1] + (row + 0.5) * self.resolution)

    def ensure_contains(self, xs: np.ndarray, ys: np.ndarray, margin: int = 4) -> None:
        rows, cols = self.world_to_cell(xs, ys)
        if rows.size == 0:
            return
        pad_top = max(0, margin - int(rows.min()))
        pad_left = max(0, margin - int(cols.min()))
        pad_bottom = max(0, int(rows.max()) + margin + 1 - self.cells.shape[0])
        pad_right = max(0, int(cols.max()) + margin + 1 - self.cells.shape[1])
        if pad_top or pad_left or pad_bottom or pad_right:
            # grow in steps of 32 cells to keep reallocations rare
            pad = [max(p, 32) if p else 0 for p in (pad_top, pad_bottom, pad_left, pad_right)]
            self.cells = np.pad(self.cells, ((pad[0], pad[1]), (pad[2], pad[3])), constant_values=UNKNOWN)
            self.origin = (self.origin[0] - pad[2] * self.resolution, self.origin[1] - pad[0] * self.resolution)

    def free_mask(self) -> np.ndarray:
        return self.cells == FREE

    def state_at(self, x: float, y: float) -> int:
        row, col = self.world_to_cell(x, y)
        if 0 <= row < self.cells.shape[0] and 0 <= col < self.cells.shape[1]:
            return int(self.cells[row, col])
        return UNKNOWN

    def frozen_copy(self) -> "OccupancyGrid":
        twin = OccupancyGrid(self.floor_id, self.resolution, self.origin, (1, 1))
        twin.cells = self.cells.copy()
        twin.cells.setflags(write=False)
        return twin

    def mask_from_array(self, mask: np.ndarray) -> RoomMask:
        """Crop a grid-shaped boolean mask to its bounding box"""
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
        origin = (self.origin[0] + c0 * self.resolution, self.origin[1] + r0 * self.resolution)
        return RoomMask.from_array(mask[r0:r1, c0:c1], origin, self.resolution)

    def paint(self, mask: RoomMask) -> np.ndarray:
        """Rasterize a room mask onto this grid's extent"""
        canvas = np.zeros(self.cells.shape, dtype=bool)
        r0 = round((mask.origin[1] - self.origin[1]) / self.resolution)
        c0 = round((mask.origin[0] - self.origin[0]) / self.resolution)
        src = mask.to_array()
        rr0, cc0 = max(r0, 0), max(c0, 0)
        rr1 = min(r0 + src.shape[0], canvas.shape[0])
        cc1 = min(c0 + src.shape[1], canvas.shape[1])
        if rr1 > rr0 and cc1 > cc0:
            canvas[rr0:rr1, cc0:cc1] = src[rr0 - r0:rr1 - r0, cc0 - c0:cc1 - c0]
        return canvas


def depth_rays(
    depth: np.ndarray,
    pose: Pose,
    intrinsics: Intrinsics,
    max_range: float,
    band_fraction: float = 0.1,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    One horizontal ray per image column from the median depth of the central band

    Returns:
        (endpoints (N, 2) world xy, hit flags (N,))
    """
    if depth.shape != (intrinsics.height, intrinsics.width):
        raise IntrinsicsMismatchError(
            f"depth frame is {depth.shape[1]}x{depth.shape[0]}, intrinsics say {intrinsics.width}x{intrinsics.height}"
        )
    half = max(1, int(round(intrinsics.height * band_fraction / 2)))
    center = int(round(intrinsics.cy))
    band = depth[max(0, center - half):min(depth.shape[0], center + half + 1)].astype(np.float64)
    band = np.where(np.isfinite(band) & (band > 0), band, np.nan)
    valid_cols = ~np.all(np.isnan(band), axis=0)
    if not valid_cols.any():
        return np.zeros((0, 2)), np.zeros(0, dtype=bool)
    cols = np.flatnonzero(valid_cols)
    medians = np.nanmedian(band[:, cols], axis=0)
    hits = medians < max_range
    ranges = np.minimum(medians, max_range)
    points = unproject(cols + 0.5, np.full(cols.shape, intrinsics.cy), ranges, intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy)
    world = pose.rotation().apply(points) + np.asarray(pose.position)
    return world[:, :2], hits


def integrate_frame(
    grid: OccupancyGrid,
    camera_xy: Tuple[float, float],
    endpoints: np.ndarray,
    hits: np.ndarray,
) -> OccupancyGrid:
    """
    Ray-carve free space from the camera to each endpoint, then mark hit endpoints occupied

    Carving never clears OCCUPIED cells, so integrating the same frame twice leaves the grid unchanged.
    """
    endpoints = np.asarray(endpoints, dtype=np.float64).reshape(-1, 2)
    hits = np.asarray(hits, dtype=bool).reshape(-1)
    if endpoints.shape[0] == 0:
        return grid
    cam = np.asarray(camera_xy, dtype=np.float64)
    direction = endpoints - cam
    length = np.linalg.norm(direction, axis=1, keepdims=True)
    unit = np.divide(direction, length, out=np.zeros_like(direction), where=length > 0)
    # hit endpoints sit on the wall surface; step half a cell into the wall
    targets = endpoints + np.where(hits[:, None], unit * (grid.resolution / 2.0), 0.0)

    grid.ensure_contains(np.append(targets[:, 0], cam[0]), np.append(targets[:, 1], cam[1]))
    cam_row, cam_col = grid.world_to_cell(cam[0], cam[1])
    rows, cols = grid.world_to_cell(targets[:, 0], targets[:, 1])
    cells = grid.cells
    for row, col, hit in zip(rows, cols, hits):
        rr, cc = draw_line(int(cam_row), int(cam_col), int(row), int(col))
        if hit:
            rr, cc = rr[:-1], cc[:-1]
        along = cells[rr, cc]
        cells[rr[along != OCCUPIED], cc[along != OCCUPIED]] = FREE
    cells[rows[hits], cols[hits]] = OCCUPIED
    cells[int(cam_row), int(cam_col)] = FREE
    return grid


def segment_rooms(grid: OccupancyGrid, cfg: GridConfig) -> List[RoomMask]:
    """
    Partition the free space of a grid into rooms

    Doorways are cut by erasing free cells closer than door_half_width to an obstacle; the
    remaining components seed a watershed on the negated distance field, and rooms below
    min_room_area merge into the neighbor sharing the longest boundary. A doorway of
    width w keeps every cell within w/2 + resolution of a jamb, so the 0.6 m default cuts
    doors up to 1.0 m wide.

    Returns:
        Disjoint room masks covering every free cell, ordered by their first cell in
        row-major order; empty when the grid has too little free space
    """
    free = grid.free_mask()
    if int(free.sum()) < cfg.min_free_cells:
        return []
    distance = ndimage.distance_transform_edt(free) * grid.resolution
    core = free & (distance >= cfg.door_half_width_m)
    seeds, n_seeds = ndimage.label(core)
    if n_seeds == 0:
        seeds, n_seeds = ndimage.label(free)
    labels = watershed(-distance, markers=seeds, mask=free)

    orphans = free & (labels == 0)
    if orphans.any():
        extra, _ = ndimage.label(orphans)
        labels = np.where(extra > 0, extra + labels.max(), labels)

    min_cells = cfg.min_room_area_m2 / grid.resolution ** 2
    labels = _merge_small_regions(labels, min_cells)

    masks = []
    order = _labels_in_scan_order(labels)
    for label in order:
        masks.append(grid.mask_from_array(labels == label))
    return masks


def _labels_in_scan_order(labels: np.ndarray) -> List[int]:
    flat = labels.ravel()
    present, first = np.unique(flat, return_index=True)
    keep = present > 0
    return [int(label) for _, label in sorted(zip(first[keep], present[keep]))]


def _shared_boundaries(labels: np.ndarray, label: int) -> Dict[int, int]:
    counts: Dict[int, int] = {}
    pairs = (
        (labels[:, :-1], labels[:, 1:]),
        (labels[:, 1:], labels[:, :-1]),
        (labels[:-1, :], labels[1:, :]),
        (labels[1:, :], labels[:-1, :]),
    )
    for here, there in pairs:
        touching = (here == label) & (there != label) & (there > 0)
        for other, count in zip(*np.unique(there[touching], return_counts=True)):
            counts[int(other)] = counts.get(int(other), 0) + int(count)
    return counts


def _merge_small_regions(labels: np.ndarray, min_cells: float) -> np.ndarray:
    labels = labels.copy()
    isolated = set()
    while True:
        present, sizes = np.unique(labels[labels > 0], return_counts=True)
        small = [(int(size), int(label)) for label, size in zip(present, sizes) if size < min_cells and int(label) not in isolated]
        if not small or len(present) < 2:
            return labels
        _, label = min(small)
        neighbors = _shared_boundaries(labels, label)
        if not neighbors:
            isolated.add(label)
            continue
        target = min(neighbors, key=lambda other: (-neighbors[other], other))
        labels[labels == label] = target


@dataclass(frozen=True)
class FloorDecision:
    floor: FloorNode
    created: bool
    changed: bool
    previous: Optional[FloorNode]


class FloorTracker:
    """
    Resolves the floor of each pose from its z trace

    Floor ids are deterministic (the n-th discovered floor gets the n-th floor id), so the
    producer can name floors before the writer materializes them in the graph.
    """

    def __init__(self, cfg: GridConfig):
        self.cfg = cfg
        self.floors: List[FloorNode] = []
        self.current: Optional[FloorNode] = None
        self._dwell: List[float] = []

    def _band_for(self, z: float) -> Tuple[float, float]:
        z_min, z_max = z - self.cfg.floor_gap_m / 2.0, z + self.cfg.floor_gap_m / 2.0
        for floor in self.floors:
            if floor.z_max <= z:
                z_min = max(z_min, floor.z_max)
            elif floor.z_min >= z:
                z_max = min(z_max, floor.z_min)
        return z_min, z_max

    def _create(self, z: float) -> FloorNode:
        z_min, z_max = self._band_for(z)
        index = len(self.floors) + 1
        floor = FloorNode(id=make_id(FLOOR_LEVEL, index), index=index, z_min=z_min, z_max=z_max)
        self.floors.append(floor)
        logger.info(f"Floor {index} discovered at z={z:.2f} with band [{z_min:.2f}, {z_max:.2f}]")
        return floor

    def observe(self, pose: Pose) -> FloorDecision:
        z = float(pose.position[2])
        previous = self.current
        if self.current is None:
            self.current = self._create(z)
            return FloorDecision(self.current, True, True, previous)

        if self.current.contains_z(z, self.cfg.hysteresis_m):
            self._dwell.clear()
            return FloorDecision(self.current, False, False, previous)

        for floor in self.floors:
            if floor.id != self.current.id and floor.contains_z(z, self.cfg.hysteresis_m):
                self._dwell.clear()
                self.current = floor
                logger.info(f"Returned to floor {floor.index}")
                return FloorDecision(floor, False, True, previous)

        center = (self.current.z_min + self.current.z_max) / 2.0
        if abs(z - center) > self.cfg.floor_gap_m:
            self._dwell.append(z)
            if len(self._dwell) >= self.cfg.dwell_frames:
                level = float(np.median(self._dwell))
                self._dwell.clear()
                self.current = self._create(level)
                return FloorDecision(self.current, True, True, previous)
        else:
            self._dwell.clear()
        return FloorDecision(self.current, False, False, previous)


def detect_floor_transition(poses: Sequence[Pose], cfg: GridConfig) -> List[FloorNode]:
    """Replay a pose history and return the floor of every pose"""
    tracker = FloorTracker(cfg)
    return [tracker.observe(pose).floor for pose in poses]


class KeyframeGate:
    """Admit a frame when its global feature drifts below tau_sim cosine from the last admitted one"""

    def __init__(self, tau_sim: float):
        self.tau_sim = tau_sim
        self.last_feature: Optional[np.ndarray] = None
        self.last_keyframe_id: Optional[str] = None

    def gate(self, feature: np.ndarray, keyframe_id: str) -> bool:
        vector = np.asarray(feature, dtype=np.float64)
        norm = float(np.linalg.norm(vector))
        if norm == 0.0:
            raise FeatureError(f"frame {keyframe_id} has a zero global feature")
        vector = vector / norm
        if self.last_feature is not None and float(np.dot(vector, self.last_feature)) >= self.tau_sim:
            return False
        self.last_feature = vector
        self.last_keyframe_id = keyframe_id
        return True


@dataclass(frozen=True)
class Segmentation:
    revision: int
    masks: Tuple[RoomMask, ...]
    grid: Optional[OccupancyGrid]


class RoomMaskRegistry:
    """Latest published room segmentation per floor, shared between the two streams"""

    def __init__(self):
        self._lock = threading.Lock()
        self._latest: Dict[int, Segmentation] = {}

    def register_floor(self, floor_id: int) -> None:
        with self._lock:
            self._latest.setdefault(floor_id, Segmentation(0, (), None))

    def publish(self, floor_id: int, masks: Sequence[RoomMask], grid: OccupancyGrid) -> int:
        with self._lock:
            previous = self._latest.get(floor_id, Segmentation(0, (), None))
            current = Segmentation(previous.revision + 1, tuple(masks), grid)
            self._latest[floor_id] = current
            return current.revision

    def latest(self, floor_id: int) -> Segmentation:
        with self._lock:
            if floor_id not in self._latest:
                raise UnknownNodeError(floor_id)
            return self._latest[floor_id]

    def latest_room_mask(self, floor_id: int) -> Tuple[int, Tuple[RoomMask, ...]]:
        segmentation = self.latest(floor_id)
        return segmentation.revision, segmentation.masks

    def floors(self) -> List[int]:
        with self._lock:
            return sorted(self._latest)


# ---------------------------------------------------------------------------
# Producer side of the semantic queue
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FloorItem:
    floor: FloorNode


@dataclass(frozen=True)
class KeyframeItem:
    frame: ObservationFrame
    image_bytes: Optional[bytes]
    frame_index: int


@dataclass(frozen=True)
class TriggerCheck:
    """Everything the supervisor needs to judge one check interval, captured on the producer side"""
    frame_index: int
    timestamp: float
    floor_id: int
    floor_path: Tuple[int, ...]
    poses: Tuple[Pose, ...]
    segmentations: Dict[int, Segmentation]


@dataclass(frozen=True)
class EndOfStream:
    frame_index: int
    timestamp: float
    segmentations: Dict[int, Segmentation]


class GeometricStream:
    """
    Full-rate consumer of a recorded sequence and producer of the semantic queue

    Args:
        sequence: Recorded sequence to replay
        grid_cfg: Occupancy, floor and gating thresholds
        pipeline_cfg: Segmentation and trigger-check cadence
        registry: Shared latest-mask registry
        emit: Callback receiving FloorItem, KeyframeItem, TriggerCheck and EndOfStream items
    """

    def __init__(
        self,
        sequence: RecordedSequence,
        grid_cfg: GridConfig,
        pipeline_cfg: PipelineConfig,
        registry: RoomMaskRegistry,
        emit: Callable[[object], None],
    ):
        self.sequence = sequence
        self.grid_cfg = grid_cfg
        self.pipeline_cfg = pipeline_cfg
        self.registry = registry
        self.emit = emit
        self.tracker = FloorTracker(grid_cfg)
        self.gate = KeyframeGate(grid_cfg.tau_sim)
        self.grids: Dict[int, OccupancyGrid] = {}
        self._poses: List[Pose] = []
        self._floor_path: List[int] = []
        self._since_check = 0
        self._last_index = -1

    def segment_floor(self, floor_id: int) -> Segmentation:
        grid = self.grids[floor_id]
        masks = segment_rooms(grid, self.grid_cfg)
        copy = grid.frozen_copy()
        revision = self.registry.publish(floor_id, masks, copy)
        logger.debug(f"Floor {floor_id}: segmentation revision {revision} with {len(masks)} rooms")
        return Segmentation(revision, tuple(masks), copy)

    def _integrate(self, frame: FrameRecord, grid: OccupancyGrid) -> None:
        if frame.freespace is not None:
            points = np.asarray(frame.freespace.points, dtype=np.float64)
            integrate_frame(grid, tuple(points[0]), points[1:], np.asarray(frame.freespace.hits, dtype=bool))
            return
        depth = self.sequence.depth_image(frame)
        endpoints, hits = depth_rays(
            depth, frame.pose, self.sequence.meta.intrinsics, self.grid_cfg.max_range_m, self.grid_cfg.depth_band_fraction
        )
        integrate_frame(grid, (frame.pose.position[0], frame.pose.position[1]), endpoints, hits)

    def _check(self, index: int, timestamp: float, floors: Sequence[int]) -> None:
        segmentations = {floor_id: self.segment_floor(floor_id) for floor_id in floors}
        self.emit(
            TriggerCheck(
                frame_index=index,
                timestamp=timestamp,
                floor_id=self.tracker.current.id,
                floor_path=tuple(self._floor_path),
                poses=tuple(self._poses),
                segmentations=segmentations,
            )
        )
        self._poses = []
        self._floor_path = []
        self._since_check = 0

    def process(self, index: int, frame: FrameRecord) -> None:
        decision = self.tracker.observe(frame.pose)
        floor = decision.floor
        if decision.created:
            self.registry.register_floor(floor.id)
            x, y = frame.pose.position[0], frame.pose.position[1]
            self.grids[floor.id] = OccupancyGrid.around(floor.id, self.grid_cfg.resolution_m, x, y)
            self.emit(FloorItem(floor))
        self._poses.append(frame.pose)
        self._floor_path.append(floor.id)
        self._last_index = index

        self._integrate(frame, self.grids[floor.id])

        if self.gate.gate(self.sequence.feature(frame), frame.frame_id):
            try:
                observation = ObservationFrame(
                    keyframe_id=frame.frame_id,
                    floor_id=floor.id,
                    pose=frame.pose,
                    intrinsics=self.sequence.meta.intrinsics,
                    detections=tuple(self.sequence.detections(frame.frame_id)),
                    image_path=frame.image,
                )
            except ValidationError as e:
                raise SequenceFormatError(f"frame {frame.frame_id}: {str(e).splitlines()[0]}") from e
            self.emit(KeyframeItem(observation, self.sequence.image_bytes(frame), index))

        self._since_check += 1
        if decision.changed and decision.previous is not None:
            self._check(index, frame.pose.timestamp, (decision.previous.id, floor.id))
        elif self._since_check >= self.pipeline_cfg.check_every:
            self._check(index, frame.pose.timestamp, (floor.id,))
        elif (index + 1) % self.pipeline_cfg.segment_every == 0:
            self.segment_floor(floor.id)

    def run(self) -> None:
        for index, frame in enumerate(self.sequence.frames):
            self.process(index, frame)
        self.finish()

    def finish(self) -> None:
        if self._poses and self.tracker.current is not None:
            self._check(self._last_index, self._poses[-1].timestamp, (self.tracker.current.id,))
        timestamp = self.sequence.frames[-1].pose.timestamp if self.sequence.frames else 0.0
        segmentations = {floor_id: self.segment_floor(floor_id) for floor_id in sorted(self.grids)}
        self.emit(EndOfStream(self._last_index, timestamp, segmentations))
