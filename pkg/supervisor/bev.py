import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import imageio.v3 as iio
import numpy as np
from skimage.draw import line as draw_line
from skimage.draw import polygon as draw_polygon

from graph.scene_graph import ID_STRIDE, GraphView
from streams.geometric import FREE, OCCUPIED, OccupancyGrid
from supervisor.triggers import TriggerState

logger = logging.getLogger(__name__)

Color = Tuple[int, int, int]

UNKNOWN_COLOR: Color = (128, 128, 128)
FREE_COLOR: Color = (235, 235, 235)
WALL_COLOR: Color = (40, 40, 40)
TRAJECTORY_COLOR: Color = (220, 20, 20)
WEDGE_COLOR: Color = (30, 80, 230)

# Fixed room palette, indexed by the room id's counter
ROOM_PALETTE: Tuple[Color, ...] = (
    (141, 211, 199), (255, 255, 179), (190, 186, 218), (251, 128, 114),
    (128, 177, 211), (253, 180, 98), (179, 222, 105), (252, 205, 229),
    (188, 128, 189), (204, 235, 197), (255, 237, 111), (217, 217, 217),
)

WEDGE_LENGTH_M = 1.0
WEDGE_HALF_ANGLE = math.radians(30.0)


@dataclass(frozen=True)
class BevImage:
    pixels: np.ndarray
    legend: Dict[int, Color]
    scale: float

    def to_png(self) -> bytes:
        return iio.imwrite("<bytes>", self.pixels, extension=".png")


def room_color(room_id: int) -> Color:
    return ROOM_PALETTE[(room_id % ID_STRIDE) % len(ROOM_PALETTE)]


def _blend(canvas: np.ndarray, rows: np.ndarray, cols: np.ndarray, color: Color, alpha: float) -> None:
    if alpha <= 0.0 or rows.size == 0:
        return
    inside = (rows >= 0) & (rows < canvas.shape[0]) & (cols >= 0) & (cols < canvas.shape[1])
    rows, cols = rows[inside], cols[inside]
    base = canvas[rows, cols].astype(np.float64)
    mixed = (1.0 - alpha) * base + alpha * np.asarray(color, dtype=np.float64)
    canvas[rows, cols] = np.rint(mixed).astype(np.uint8)


def render_bev(
    view: GraphView,
    state: TriggerState,
    floor_id: int,
    grid: OccupancyGrid,
    now: float,
    fade_s: float,
    scale: Optional[float] = None,
) -> BevImage:
    """
    Bird's-eye raster of one floor

    Rooms are tinted from a fixed palette keyed by id, the trajectory is a red polyline and
    every past update point is a blue wedge whose opacity equals its age weight.

    Args:
        view: Graph snapshot providing the floor's rooms
        state: Trigger state providing trajectory and update points
        floor_id: Floor to draw
        grid: Occupancy grid of that floor
        now: Timestamp used for wedge ageing
        fade_s: Wedge fade horizon
        scale: Meters per pixel; defaults to the grid resolution

    Returns:
        BevImage with RGB pixels, room legend and the effective scale
    """
    cells = grid.cells
    canvas = np.empty(cells.shape + (3,), dtype=np.uint8)
    canvas[...] = UNKNOWN_COLOR
    canvas[cells == FREE] = FREE_COLOR
    canvas[cells == OCCUPIED] = WALL_COLOR

    legend: Dict[int, Color] = {}
    for room in view.rooms_on_floor(floor_id):
        color = room_color(room.id)
        legend[room.id] = color
        rows, cols = np.nonzero(grid.paint(room.mask))
        _blend(canvas, rows, cols, color, 0.6)

    for point, weight in zip(state.last_update_poses, state.age_weights(now, fade_s)):
        if point.floor_id != floor_id or weight <= 0.0:
            continue
        x, y = point.xy
        fx, fy = point.pose.forward_xy()
        heading = math.atan2(fy, fx)
        corners_x = [x]
        corners_y = [y]
        for offset in (-WEDGE_HALF_ANGLE, WEDGE_HALF_ANGLE):
            corners_x.append(x + WEDGE_LENGTH_M * math.cos(heading + offset))
            corners_y.append(y + WEDGE_LENGTH_M * math.sin(heading + offset))
        r, c = grid.world_to_cell(np.array(corners_x), np.array(corners_y))
        rows, cols = draw_polygon(r, c, shape=canvas.shape[:2])
        _blend(canvas, rows, cols, WEDGE_COLOR, weight)

    trajectory = state.trajectory.get(floor_id, [])
    if trajectory:
        xs, ys = zip(*trajectory)
        rows, cols = grid.world_to_cell(np.array(xs), np.array(ys))
        for r0, c0, r1, c1 in zip(rows[:-1], cols[:-1], rows[1:], cols[1:]):
            rr, cc = draw_line(int(r0), int(c0), int(r1), int(c1))
            _blend(canvas, rr, cc, TRAJECTORY_COLOR, 1.0)
        _blend(canvas, rows[-1:], cols[-1:], TRAJECTORY_COLOR, 1.0)

    factor = 1
    if scale is not None and scale < grid.resolution:
        factor = max(1, int(round(grid.resolution / scale)))
    if factor > 1:
        canvas = np.repeat(np.repeat(canvas, factor, axis=0), factor, axis=1)
    # north up
    canvas = np.ascontiguousarray(canvas[::-1])
    return BevImage(pixels=canvas, legend=legend, scale=grid.resolution / factor)
