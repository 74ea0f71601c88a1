import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import imageio.v3 as iio
import numpy as np
from scipy.spatial.transform import Rotation
from skimage.draw import rectangle

from config import TrajectoryConfig
from scene_schema import Intrinsics, Pose
from streams.sequence import (
    DetectionRecord,
    FrameRecord,
    FreeSpaceHint,
    KeyframeDetections,
    RecordedSequence,
    SequenceMeta,
    load_sequence,
    write_features,
    write_sequence,
)
from supervisor.bev import FREE_COLOR, room_color
from synthetic.prng import keyed_stream
from synthetic.world import DoorSpec, RoomSpec, WorldSpec, wall_boxes
from utils.geometry import camera_quaternion

logger = logging.getLogger(__name__)

EYE_HEIGHT_M = 1.2
DOOR_APPROACH_M = 0.5
FEATURE_DIM = 128
CELL_WEIGHT = 0.7
YAW_SECTORS = 8
DETECTION_NOISE = 0.2
MAX_DEPTH_SPREAD_M = 0.15

GLOBAL_FEATURES = "features/global.ikbf"
DETECTION_FEATURES = "features/detections.ikbf"

COLOR_RGB: Dict[str, Tuple[int, int, int]] = {
    "red": (200, 40, 40),
    "blue": (40, 70, 200),
    "green": (40, 160, 60),
    "white": (250, 250, 250),
    "black": (20, 20, 20),
    "brown": (120, 80, 40),
    "gray": (130, 130, 130),
    "yellow": (230, 210, 40),
}


@dataclass(frozen=True)
class Waypoint:
    x: float
    y: float
    z: float
    yaw: float
    floor_index: int
    room_id: Optional[int]
    observe: bool = True


@dataclass
class SimulatedSequence:
    """A written sequence directory plus the identity of every emitted detection"""
    sequence: RecordedSequence
    waypoints: List[Waypoint]
    detections: Dict[str, List[int]]

    @property
    def root(self) -> Path:
        return self.sequence.root


# ---------------------------------------------------------------------------
# Trajectory
# ---------------------------------------------------------------------------

class TrajectoryPlanner:
    """
    Room-covering camera path through a world

    Each room gets a spin at its centre and, optionally, a lap of its inset corners looking
    back at the centre; rooms are chained through their doors. Floors are joined by a
    stair ramp and a landing with observation switched off.
    """

    def __init__(self, world: WorldSpec, cfg: TrajectoryConfig):
        self.world = world
        self.cfg = cfg
        self.points: List[Waypoint] = []

    def _room_at(self, floor_index: int, x: float, y: float) -> Optional[int]:
        for room in self.world.rooms_on_floor(floor_index):
            if room.contains(x, y):
                return room.id
        return None

    def add(self, x: float, y: float, z: float, yaw: float, floor_index: int, observe: bool = True) -> None:
        yaw = math.atan2(math.sin(yaw), math.cos(yaw))
        self.points.append(
            Waypoint(
                x=round(x, 6),
                y=round(y, 6),
                z=round(z, 6),
                yaw=round(yaw, 9),
                floor_index=floor_index,
                room_id=self._room_at(floor_index, x, y),
                observe=observe,
            )
        )

    @property
    def here(self) -> Waypoint:
        return self.points[-1]

    def walk_to(self, x: float, y: float) -> None:
        start = self.here
        dx, dy = x - start.x, y - start.y
        distance = math.hypot(dx, dy)
        if distance < 1e-9:
            return
        yaw = math.atan2(dy, dx)
        steps = max(1, math.ceil(distance / self.cfg.step_m - 1e-9))
        for k in range(1, steps + 1):
            self.add(start.x + dx * k / steps, start.y + dy * k / steps, start.z, yaw, start.floor_index)

    def look(self, yaw: float) -> None:
        here = self.here
        self.add(here.x, here.y, here.z, yaw, here.floor_index)

    def tour_room(self, room: RoomSpec) -> None:
        cx, cy = room.center
        self.walk_to(cx, cy)
        heading = self.here.yaw
        for k in range(1, self.cfg.spin_steps + 1):
            self.look(heading + 2.0 * math.pi * k / self.cfg.spin_steps)
        if self.cfg.corner_views:
            inset = self.cfg.corner_inset_m
            corners = (
                (room.lo[0] + inset, room.lo[1] + inset),
                (room.hi[0] - inset, room.lo[1] + inset),
                (room.hi[0] - inset, room.hi[1] - inset),
                (room.lo[0] + inset, room.hi[1] - inset),
            )
            for x, y in corners:
                self.walk_to(x, y)
                facing = math.atan2(cy - y, cx - x)
                for offset in (-0.5, 0.0, 0.5):
                    self.look(facing + offset)
            self.walk_to(cx, cy)

    def pass_door(self, door: DoorSpec, forward: bool) -> None:
        _, yc = door.center
        near, far = door.x_lo - DOOR_APPROACH_M, door.x_hi + DOOR_APPROACH_M
        if not forward:
            near, far = far, near
        self.walk_to(near, yc)
        self.walk_to(door.center[0], yc)
        self.walk_to(far, yc)

    def _door(self, floor_index: int, a: int, b: int) -> DoorSpec:
        for door in self.world.doors_on_floor(floor_index):
            if set(door.rooms) == {a, b}:
                return door
        raise KeyError((a, b))

    def tour_floor(self, rooms: Sequence[RoomSpec]) -> None:
        for position, room in enumerate(rooms):
            if position > 0:
                previous = rooms[position - 1]
                door = self._door(room.floor_index, previous.id, room.id)
                self.pass_door(door, forward=previous.lo[0] < room.lo[0])
            self.tour_room(room)

    def climb(self, floor_index: int) -> None:
        start = self.here
        target = self.world.floor(floor_index).z_base + EYE_HEIGHT_M
        for k in range(1, self.cfg.stair_frames + 1):
            z = start.z + (target - start.z) * k / self.cfg.stair_frames
            self.add(start.x, start.y, z, start.yaw, floor_index, observe=False)
        for _ in range(self.cfg.landing_frames):
            self.add(start.x, start.y, target, start.yaw, floor_index, observe=False)

    def plan(self) -> List[Waypoint]:
        self.points = []
        order: List[RoomSpec] = []
        for floor in self.world.floors:
            order = sorted(self.world.rooms_on_floor(floor.index), key=lambda r: r.lo[0])
            if floor.index % 2 == 0:
                order.reverse()
            if not self.points:
                cx, cy = order[0].center
                self.add(cx, cy, floor.z_base + EYE_HEIGHT_M, 0.0, floor.index)
            else:
                self.climb(floor.index)
            self.tour_floor(order)
        for _ in range(self.cfg.revisits):
            order = list(reversed(order))
            self.tour_floor(order)
        return self.points


def plan_trajectory(world: WorldSpec, cfg: TrajectoryConfig) -> List[Waypoint]:
    return TrajectoryPlanner(world, cfg).plan()


# ---------------------------------------------------------------------------
# Sensing
# ---------------------------------------------------------------------------

def _slabs(origin: np.ndarray, directions: np.ndarray, boxes: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Entry and exit parameters of every (direction, box) pair"""
    directions = np.where(np.abs(directions) < 1e-12, 1e-12, directions)
    inverse = 1.0 / directions
    t1 = (boxes[None, :, 0:2] - origin) * inverse[:, None, :]
    t2 = (boxes[None, :, 2:4] - origin) * inverse[:, None, :]
    return np.minimum(t1, t2).max(axis=2), np.maximum(t1, t2).min(axis=2)


def cast_rays(
    origin: Sequence[float],
    angles: np.ndarray,
    boxes: np.ndarray,
    max_range: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    First wall hit along each horizontal ray

    Returns:
        (endpoints (N, 2), hit flags (N,)); rays that reach max_range stop there unflagged
    """
    origin = np.asarray(origin, dtype=np.float64)
    directions = np.column_stack([np.cos(angles), np.sin(angles)])
    enter, leave = _slabs(origin, directions, boxes)
    valid = (enter >= 0.0) & (enter <= leave)
    distance = np.where(valid, enter, np.inf).min(axis=1)
    hits = distance < max_range
    ranges = np.minimum(distance, max_range)
    return origin + directions * ranges[:, None], hits


def segment_blocked(origin: Sequence[float], targets: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """True where the straight segment origin -> target crosses a wall slab"""
    origin = np.asarray(origin, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
    if targets.shape[0] == 0 or boxes.shape[0] == 0:
        return np.zeros(targets.shape[0], dtype=bool)
    enter, leave = _slabs(origin, targets - origin, boxes)
    return ((enter <= leave) & (leave > 0.0) & (enter < 1.0)).any(axis=1)


def make_intrinsics(cfg: TrajectoryConfig) -> Intrinsics:
    return Intrinsics(
        fx=cfg.fx,
        fy=cfg.fx,
        cx=cfg.image_width / 2.0,
        cy=cfg.image_height / 2.0,
        width=cfg.image_width,
        height=cfg.image_height,
    )


def freespace_polygon(
    point: Waypoint,
    intrinsics: Intrinsics,
    cfg: TrajectoryConfig,
    boxes: np.ndarray,
) -> FreeSpaceHint:
    camera = (point.x, point.y)
    if not point.observe:
        return FreeSpaceHint(points=[camera], hits=[])
    half = intrinsics.horizontal_fov / 2.0
    angles = point.yaw + np.linspace(-half, half, cfg.rays)
    endpoints, hits = cast_rays(camera, angles, boxes, cfg.max_range_m)
    points = [camera] + [(round(float(x), 6), round(float(y), 6)) for x, y in endpoints]
    return FreeSpaceHint(points=points, hits=[bool(h) for h in hits])


def global_feature(seed: int, point: Waypoint) -> np.ndarray:
    """
    Place descriptor: room + heading sector + 1 m cell, so the keyframe gate fires on turns,
    cell changes and above all on room transitions
    """
    if not point.observe:
        return keyed_stream(seed, "stairs").unit_vector(FEATURE_DIM)
    place = f"room-{point.room_id}" if point.room_id is not None else f"passage-{point.floor_index}"
    sector = int(math.floor((point.yaw % (2.0 * math.pi)) / (2.0 * math.pi / YAW_SECTORS) + 0.5)) % YAW_SECTORS
    cell = f"cell-{point.floor_index}-{math.floor(point.x)}-{math.floor(point.y)}"
    vector = (
        keyed_stream(seed, place).unit_vector(FEATURE_DIM)
        + keyed_stream(seed, f"sector-{sector}").unit_vector(FEATURE_DIM)
        + CELL_WEIGHT * keyed_stream(seed, cell).unit_vector(FEATURE_DIM)
    )
    return vector / np.linalg.norm(vector)


def _corners(center: np.ndarray, size: Sequence[float]) -> np.ndarray:
    half = np.asarray(size, dtype=np.float64) / 2.0
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
    return center + signs * half


def detection_lattice(
    center_cam: np.ndarray,
    corners_cam: np.ndarray,
    intrinsics: Intrinsics,
) -> Tuple[List[Tuple[float, float, float]], Tuple[int, int, int, int]]:
    """
    3x3x3 depth samples spanning the projected box and depth extent around the centre

    The median sample is the projected centre itself, so back-projection recovers it.
    """
    width, height = intrinsics.width, intrinsics.height
    front = corners_cam[corners_cam[:, 2] > 1e-3]
    us = intrinsics.fx * front[:, 0] / front[:, 2] + intrinsics.cx
    vs = intrinsics.fy * front[:, 1] / front[:, 2] + intrinsics.cy
    depth = float(center_cam[2])
    uc = intrinsics.fx * center_cam[0] / depth + intrinsics.cx
    vc = intrinsics.fy * center_cam[1] / depth + intrinsics.cy
    u_lo, u_hi = float(np.clip(us.min(), 0, width)), float(np.clip(us.max(), 0, width))
    v_lo, v_hi = float(np.clip(vs.min(), 0, height)), float(np.clip(vs.max(), 0, height))
    spread = min((corners_cam[:, 2].max() - corners_cam[:, 2].min()) / 2.0, MAX_DEPTH_SPREAD_M)
    samples = [
        (round(float(u), 6), round(float(v), 6), round(float(d), 6))
        for u in (u_lo, uc, u_hi)
        for v in (v_lo, vc, v_hi)
        for d in (depth - spread, depth, depth + spread)
    ]
    x0, y0 = int(math.floor(u_lo)), int(math.floor(v_lo))
    x1, y1 = min(width, max(int(math.ceil(u_hi)), x0 + 1)), min(height, max(int(math.ceil(v_hi)), y0 + 1))
    return samples, (min(x0, x1 - 1), min(y0, y1 - 1), x1, y1)


@dataclass
class _FloorScene:
    ids: np.ndarray
    centers: np.ndarray
    boxes: np.ndarray


class Sensor:
    """Visibility-culled, jittered detections and rendered frames for one world"""

    def __init__(self, world: WorldSpec, cfg: TrajectoryConfig, embedding_dim: int):
        self.world = world
        self.cfg = cfg
        self.embedding_dim = embedding_dim
        self.intrinsics = make_intrinsics(cfg)
        self.floors: Dict[int, _FloorScene] = {}
        for floor in world.floors:
            objects = world.objects_on_floor(floor.index)
            self.floors[floor.index] = _FloorScene(
                ids=np.array([o.id for o in objects], dtype=np.int64),
                centers=np.array([o.center for o in objects], dtype=np.float64).reshape(-1, 3),
                boxes=wall_boxes(world, floor.index),
            )
        self._instances: Dict[int, np.ndarray] = {}

    def instance_vector(self, object_id: int) -> np.ndarray:
        vector = self._instances.get(object_id)
        if vector is None:
            vector = keyed_stream(self.world.seed, f"instance-{object_id}").unit_vector(self.embedding_dim)
            self._instances[object_id] = vector
        return vector

    def visible(self, point: Waypoint, rotation: Rotation) -> List[int]:
        """Ids of objects whose centre projects into the image in front of the camera, walls permitting"""
        scene = self.floors[point.floor_index]
        if scene.ids.size == 0:
            return []
        position = np.array([point.x, point.y, point.z])
        cam = rotation.inv().apply(scene.centers - position)
        depth = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.intrinsics.fx * cam[:, 0] / depth + self.intrinsics.cx
            v = self.intrinsics.fy * cam[:, 1] / depth + self.intrinsics.cy
        keep = (
            (depth >= self.cfg.min_depth_m)
            & (depth <= self.cfg.max_range_m)
            & (u >= 0) & (u <= self.intrinsics.width)
            & (v >= 0) & (v <= self.intrinsics.height)
        )
        candidates = np.flatnonzero(keep)
        blocked = segment_blocked((point.x, point.y), scene.centers[candidates, :2], scene.boxes)
        return [int(scene.ids[i]) for i, b in zip(candidates, blocked) if not b]

    def observe(
        self,
        frame_index: int,
        point: Waypoint,
    ) -> Tuple[List[Tuple[int, DetectionRecord, np.ndarray, float]], Rotation]:
        """
        Detections of one frame as (object id, record, embedding, depth), nearest last

        The embedding_ref of each record is filled in by the caller once rows are numbered.
        """
        rotation = Rotation.from_quat(camera_quaternion(point.yaw))
        if not point.observe:
            return [], rotation
        rng = keyed_stream(self.world.seed, f"frame-{frame_index}")
        position = np.array([point.x, point.y, point.z])
        inverse = rotation.inv()
        sigma_axis = self.cfg.jitter_sigma_m / math.sqrt(3.0)
        found = []
        for object_id in self.visible(point, rotation):
            obj = self.world.object(object_id)
            center = np.asarray(obj.center, dtype=np.float64)
            if sigma_axis > 0:
                center = center + np.array([rng.gauss(0.0, sigma_axis) for _ in range(3)])
            center_cam = inverse.apply(center - position)
            if center_cam[2] < self.cfg.min_depth_m:
                continue
            corners_cam = inverse.apply(_corners(center, obj.size) - position)
            samples, bbox2d = detection_lattice(center_cam, corners_cam, self.intrinsics)
            noise = rng.normal_vector(self.embedding_dim, DETECTION_NOISE / math.sqrt(self.embedding_dim))
            record = DetectionRecord(
                bbox2d=bbox2d,
                label=obj.label,
                known_category=obj.known_category,
                embedding_ref="pending",
                description=obj.description,
                depth_samples=samples,
            )
            found.append((object_id, record, self.instance_vector(object_id) + noise, float(center_cam[2])))
        found.sort(key=lambda item: -item[3])
        return found, rotation

    def render(self, point: Waypoint, found: Sequence[Tuple[int, DetectionRecord, np.ndarray, float]]) -> np.ndarray:
        """Flat-shaded frame: room-tinted background, one filled box per detection, far to near"""
        height, width = self.intrinsics.height, self.intrinsics.width
        background = room_color(point.room_id) if point.room_id is not None else FREE_COLOR
        canvas = np.empty((height, width, 3), dtype=np.uint8)
        canvas[:] = background
        for object_id, record, _, _ in found:
            x0, y0, x1, y1 = record.bbox2d
            if x1 <= x0 or y1 <= y0:
                continue
            rr, cc = rectangle(start=(y0, x0), end=(y1 - 1, x1 - 1), shape=canvas.shape[:2])
            canvas[rr, cc] = COLOR_RGB.get(self.world.object(object_id).color, FREE_COLOR)
        return canvas


def generate_sequence(
    world: WorldSpec,
    cfg: TrajectoryConfig,
    directory: str,
    embedding_dim: int = 512,
) -> SimulatedSequence:
    """
    Drive a camera through the world and write a sequence directory

    Writes meta.json, frames.jsonl, detections.jsonl, the global and detection feature
    files and (optionally) one PNG per observing frame, then reads the directory back
    through the sequence loader so only valid sequences are returned.

    Args:
        world: Generated world
        cfg: Trajectory and sensor parameters
        directory: Output directory (created)
        embedding_dim: Dimension of the detection embeddings

    Returns:
        SimulatedSequence with the loaded sequence and the detection identity map
    """
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    waypoints = plan_trajectory(world, cfg)
    sensor = Sensor(world, cfg, embedding_dim)
    intrinsics = sensor.intrinsics

    frames: List[FrameRecord] = []
    keyframes: List[KeyframeDetections] = []
    global_rows: List[np.ndarray] = []
    detection_rows: List[np.ndarray] = []
    identities: Dict[str, List[int]] = {}
    for index, point in enumerate(waypoints):
        frame_id = f"{index:06d}"
        timestamp = round(index * cfg.frame_dt_s, 6)
        found, _ = sensor.observe(index, point)
        records = []
        for object_id, record, vector, _ in found:
            records.append(record.model_copy(update={"embedding_ref": f"{DETECTION_FEATURES}#{len(detection_rows)}"}))
            detection_rows.append(vector)
        if records:
            keyframes.append(KeyframeDetections(keyframe_id=frame_id, detections=records))
            identities[frame_id] = [object_id for object_id, _, _, _ in found]

        image = None
        if cfg.write_images and point.observe:
            image = f"images/{frame_id}.png"
            (root / "images").mkdir(exist_ok=True)
            iio.imwrite(root / image, sensor.render(point, found), extension=".png")

        global_rows.append(global_feature(world.seed, point))
        frames.append(
            FrameRecord(
                frame_id=frame_id,
                timestamp=timestamp,
                pose=Pose(
                    timestamp=timestamp,
                    position=(point.x, point.y, point.z),
                    orientation=camera_quaternion(point.yaw),
                ),
                image=image,
                freespace=freespace_polygon(point, intrinsics, cfg, sensor.floors[point.floor_index].boxes),
                feature=f"{GLOBAL_FEATURES}#{index}",
            )
        )

    write_features(root / GLOBAL_FEATURES, np.vstack(global_rows))
    if detection_rows:
        write_features(root / DETECTION_FEATURES, np.vstack(detection_rows))
    write_sequence(str(root), SequenceMeta(intrinsics=intrinsics, seed=world.seed), frames, keyframes)
    logger.info(
        f"Sequence for seed {world.seed}: {len(frames)} frames, {len(detection_rows)} detections in "
        f"{len(keyframes)} frames, written to {root}"
    )
    return SimulatedSequence(sequence=load_sequence(str(root)), waypoints=waypoints, detections=identities)
