import math
from typing import List, Sequence, Tuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from scene_schema import Box3D, RoomMask


def iou_3d(a: Box3D, b: Box3D) -> float:
    lo = np.maximum(a.lo, b.lo)
    hi = np.minimum(a.hi, b.hi)
    inter = float(np.prod(np.clip(hi - lo, 0.0, None)))
    if inter <= 0.0:
        return 0.0
    vol_a = float(np.prod(np.subtract(a.hi, a.lo)))
    vol_b = float(np.prod(np.subtract(b.hi, b.lo)))
    union = vol_a + vol_b - inter
    return inter / union if union > 0 else 0.0


def horizontal_overlap(a: Box3D, b: Box3D) -> float:
    """Footprint intersection over the smaller footprint, in [0, 1]"""
    dx = min(a.hi[0], b.hi[0]) - max(a.lo[0], b.lo[0])
    dy = min(a.hi[1], b.hi[1]) - max(a.lo[1], b.lo[1])
    if dx <= 0 or dy <= 0:
        return 0.0
    area_a = (a.hi[0] - a.lo[0]) * (a.hi[1] - a.lo[1])
    area_b = (b.hi[0] - b.lo[0]) * (b.hi[1] - b.lo[1])
    smaller = min(area_a, area_b)
    if smaller <= 0:
        return 1.0
    return min(1.0, dx * dy / smaller)


def vertical_overlap(a: Box3D, b: Box3D) -> float:
    """Shared height over the shorter extent, in [0, 1]"""
    dz = min(a.hi[2], b.hi[2]) - max(a.lo[2], b.lo[2])
    shorter = min(a.hi[2] - a.lo[2], b.hi[2] - b.lo[2])
    if dz <= 0:
        return 0.0
    if shorter <= 0:
        return 1.0
    return min(1.0, dz / shorter)


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    va = np.asarray(a, dtype=np.float64)
    vb = np.asarray(b, dtype=np.float64)
    denom = np.linalg.norm(va) * np.linalg.norm(vb)
    if denom == 0:
        return 0.0
    return float(np.dot(va, vb) / denom)


def camera_quaternion(yaw: float) -> Tuple[float, float, float, float]:
    """
    Orientation of a level camera looking along world heading `yaw`

    Camera axes follow the pinhole convention: x right, y down, z forward.
    """
    forward = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    down = np.array([0.0, 0.0, -1.0])
    right = np.cross(down, forward)
    matrix = np.column_stack([right, down, forward])
    quat = Rotation.from_matrix(matrix).as_quat()
    quat = quat / np.linalg.norm(quat)
    return tuple(float(q) for q in quat)


def unproject(u: np.ndarray, v: np.ndarray, depth: np.ndarray, fx: float, fy: float, cx: float, cy: float) -> np.ndarray:
    """Pinhole back-projection to camera-frame points, shape (N, 3)"""
    x = (np.asarray(u, dtype=np.float64) - cx) / fx * depth
    y = (np.asarray(v, dtype=np.float64) - cy) / fy * depth
    return np.column_stack([x, y, np.asarray(depth, dtype=np.float64)])


def single_linkage(points: np.ndarray, radius: float) -> List[List[int]]:
    """
    Group points whose chained pairwise distance stays within radius

    Returns:
        Clusters as sorted index lists, ordered by their smallest index
    """
    n = len(points)
    if n == 0:
        return []
    pairs = np.array(sorted(cKDTree(points).query_pairs(radius)), dtype=np.int64).reshape(-1, 2)
    adjacency = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(adjacency, directed=False)
    clusters: dict = {}
    for index, label in enumerate(labels):
        clusters.setdefault(int(label), []).append(index)
    return sorted(clusters.values(), key=lambda members: members[0])


def _aligned(a: RoomMask, b: RoomMask) -> Tuple[np.ndarray, np.ndarray]:
    """Paint two masks of one floor grid (same resolution, origins a whole number of cells apart) on a shared canvas"""
    if abs(a.resolution - b.resolution) > 1e-12:
        raise ValueError("masks use different resolutions")
    res = a.resolution
    off_a = (round(a.origin[1] / res), round(a.origin[0] / res))
    off_b = (round(b.origin[1] / res), round(b.origin[0] / res))
    row0 = min(off_a[0], off_b[0])
    col0 = min(off_a[1], off_b[1])
    row1 = max(off_a[0] + a.shape[0], off_b[0] + b.shape[0])
    col1 = max(off_a[1] + a.shape[1], off_b[1] + b.shape[1])
    canvas_a = np.zeros((row1 - row0, col1 - col0), dtype=bool)
    canvas_b = np.zeros_like(canvas_a)
    ra, ca = off_a[0] - row0, off_a[1] - col0
    rb, cb = off_b[0] - row0, off_b[1] - col0
    canvas_a[ra:ra + a.shape[0], ca:ca + a.shape[1]] = a.to_array()
    canvas_b[rb:rb + b.shape[0], cb:cb + b.shape[1]] = b.to_array()
    return canvas_a, canvas_b


def mask_overlap(a: RoomMask, b: RoomMask) -> int:
    canvas_a, canvas_b = _aligned(a, b)
    return int(np.count_nonzero(canvas_a & canvas_b))


def mask_iou(a: RoomMask, b: RoomMask) -> float:
    canvas_a, canvas_b = _aligned(a, b)
    union = np.count_nonzero(canvas_a | canvas_b)
    if union == 0:
        return 0.0
    return np.count_nonzero(canvas_a & canvas_b) / union
