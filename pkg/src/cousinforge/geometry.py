"""Camera math, metric 3D lifting, oriented boxes, and overlap primitives.

Coordinate conventions used throughout the package:

  World frame (right-handed): x/y horizontal, z up, meters. Ground is
  near z = 0. Yaw is a rotation about world +z, radians.

  Camera frame (standard computer vision): x right, y down, z forward
  along the optical axis. A camera pose maps camera coordinates into
  world coordinates: p_world = R @ p_cam + t.

  Image frame: u right (column), v down (row), pixels. The depth map
  stores the camera-frame z coordinate ("z-depth") per pixel, not the
  ray range. Invalid depth is encoded as 0 or NaN.

  BEV (bird's-eye view): the xy ground-plane projection used for
  footprints, overlap, and collision tests.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateCloud,
    EmptyCloud,
    InvalidDepth,
    IoError,
    OutOfBounds,
)

TWO_PI = 2.0 * np.pi

DEPTH_MAGIC = b"UVDEPTH1"


def wrap_angle(theta: float) -> float:
    """Wrap an angle to the interval (-pi, pi]."""
    theta = float(theta) % TWO_PI
    if theta > np.pi:
        theta -= TWO_PI
    return theta


def wrap_half(theta: float) -> float:
    """Wrap an orientation (period pi) to the interval (-pi/2, pi/2]."""
    theta = float(theta) % np.pi
    if theta > np.pi / 2:
        theta -= np.pi
    return theta


@dataclass
class CameraFrame:
    """One posed pinhole camera with a dense metric depth map.

    `rotation` (3x3) and `translation` (3,) map camera coordinates to
    world coordinates. `depth` has shape (height, width) and is indexed
    depth[v, u]; entries that are 0, negative, or NaN mark holes.
    """

    frame_id: int
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    depth: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if self.rotation.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6 or abs(np.linalg.det(self.rotation) - 1.0) > 1e-6:
            raise ValueError("rotation must be orthonormal with det=+1 (within 1e-6)")
        if self.depth.shape != (self.height, self.width):
            raise ValueError(
                f"depth shape {self.depth.shape} does not match "
                f"(height, width)=({self.height}, {self.width})"
            )

    def __eq__(self, other):
        if not isinstance(other, CameraFrame):
            return NotImplemented
        return (
            self.frame_id == other.frame_id
            and self.width == other.width
            and self.height == other.height
            and (self.fx, self.fy, self.cx, self.cy)
            == (other.fx, other.fy, other.cx, other.cy)
            and np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
            and np.array_equal(self.depth, other.depth, equal_nan=True)
        )


@dataclass
class PointCloud:
    """Points in the world frame, meters, shape (n, 3). All finite."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.points.size and not np.isfinite(self.points).all():
            raise ValueError("point cloud contains non-finite coordinates")

    def __len__(self) -> int:
        return self.points.shape[0]

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        return np.array_equal(self.points, other.points)


@dataclass
class OrientedBox:
    """Box with horizontal yaw: center (3,), dims (3,) > 0, yaw in (-pi, pi].

    dims are the edge lengths along the box's own x/y axes and along z;
    yaw rotates the box frame about world +z.
    """

    center: np.ndarray
    dims: np.ndarray
    yaw: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.dims = np.asarray(self.dims, dtype=np.float64).reshape(3)
        self.yaw = float(self.yaw)
        if not (self.dims > 0).all():
            raise ValueError(f"box dims must be positive, got {self.dims}")

    @property
    def volume(self) -> float:
        return float(self.dims[0] * self.dims[1] * self.dims[2])

    def bev_corners(self) -> np.ndarray:
        """Footprint corners, counterclockwise, shape (4, 2)."""
        hx, hy = self.dims[0] / 2.0, self.dims[1] / 2.0
        local = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[:2]

    def bev_area(self) -> float:
        return float(self.dims[0] * self.dims[1])

    def z_interval(self) -> tuple[float, float]:
        h = self.dims[2] / 2.0
        return float(self.center[2] - h), float(self.center[2] + h)

    def __eq__(self, other):
        if not isinstance(other, OrientedBox):
            return NotImplemented
        return (
            np.array_equal(self.center, other.center)
            and np.array_equal(self.dims, other.dims)
            and self.yaw == other.yaw
        )


# ---------------------------------------------------------------------------
# Lifting


def lift_pixel(frame: CameraFrame, u: int, v: int) -> np.ndarray:
    """Lift one pixel with valid depth to a world-frame 3D point.

    Returns R @ (d * [(u-cx)/fx, (v-cy)/fy, 1]) + t where d = depth[v, u].

    Raises:
        OutOfBounds: pixel outside the image.
        InvalidDepth: depth at the pixel is missing (0/NaN) or negative.
    """
    if not (0 <= u < frame.width and 0 <= v < frame.height):
        raise OutOfBounds(f"pixel ({u}, {v}) outside {frame.width}x{frame.height} image")
    d = frame.depth[v, u]
    if not np.isfinite(d) or d <= 0:
        raise InvalidDepth(f"depth at ({u}, {v}) is {d}")
    ray = np.array([(u - frame.cx) / frame.fx, (v - frame.cy) / frame.fy, 1.0])
    return frame.rotation @ (d * ray) + frame.translation


def project_point(frame: CameraFrame, point: np.ndarray) -> tuple[float, float, float]:
    """Project a world point through the camera; returns (u, v, z-depth).

    Inverse of `lift_pixel` for points in front of the camera. Raises
    InvalidDepth when the point is at or behind the camera plane.
    """
    p_cam = frame.rotation.T @ (np.asarray(point, dtype=np.float64) - frame.translation)
    if p_cam[2] <= 0:
        raise InvalidDepth(f"point has non-positive camera depth {p_cam[2]}")
    u = frame.fx * p_cam[0] / p_cam[2] + frame.cx
    v = frame.fy * p_cam[1] / p_cam[2] + frame.cy
    return float(u), float(v), float(p_cam[2])


def lift_mask(frame: CameraFrame, mask: np.ndarray) -> PointCloud:
    """Lift every masked pixel with valid depth, row-major pixel order.

    Raises:
        ValueError: mask shape does not match the frame.
        EmptyCloud: no masked pixel has valid depth.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (frame.height, frame.width):
        raise ValueError(
            f"mask shape {mask.shape} does not match frame "
            f"({frame.height}, {frame.width})"
        )
    valid = mask & np.isfinite(frame.depth) & (frame.depth > 0)
    vs, us = np.nonzero(valid)  # np.nonzero scans row-major
    if vs.size == 0:
        raise EmptyCloud(f"no valid depth under mask in frame {frame.frame_id}")
    d = frame.depth[vs, us]
    rays = np.stack(
        [(us - frame.cx) / frame.fx, (vs - frame.cy) / frame.fy, np.ones_like(d)],
        axis=1,
    )
    pts = (d[:, None] * rays) @ frame.rotation.T + frame.translation
    return PointCloud(pts)


# ---------------------------------------------------------------------------
# Convex hulls and oriented-box fitting


def convex_hull_xy(points: np.ndarray) -> np.ndarray:
    """Strict convex hull of 2D points (monotone chain), CCW, shape (m, 2).

    The hull starts from the lexicographically smallest vertex and drops
    collinear boundary points, so the output is canonical for a given
    point set. Returns fewer than 3 vertices for degenerate input.
    """
    pts = np.unique(np.asarray(points, dtype=np.float64).reshape(-1, 2), axis=0)
    if len(pts) < 3:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    def chain(seq):
        out: list[np.ndarray] = []
        for p in seq:
            while len(out) >= 2 and cross(out[-2], out[-1], p) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = chain(pts)
    upper = chain(pts[::-1])
    hull = np.array(lower[:-1] + upper[:-1])
    return hull


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area of a polygon (positive when CCW)."""
    poly = np.asarray(poly, dtype=np.float64)
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return float(0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _extents_at_yaw(pts: np.ndarray, yaw: float) -> tuple[np.ndarray, np.ndarray]:
    c, s = np.cos(-yaw), np.sin(-yaw)
    xr = pts[:, 0] * c - pts[:, 1] * s
    yr = pts[:, 0] * s + pts[:, 1] * c
    lo = np.array([xr.min(), yr.min(), pts[:, 2].min()])
    hi = np.array([xr.max(), yr.max(), pts[:, 2].max()])
    return lo, hi


def fit_oriented_box(cloud: PointCloud) -> OrientedBox:
    """Fit the minimum-area oriented box to a cloud (rotating calipers).

    The yaw is the orientation of the minimum-area rectangle enclosing
    the xy projection (one rectangle edge is always collinear with a
    convex-hull edge). Because that rectangle is 90-degree symmetric,
    yaw is canonicalized to the axis of the longer horizontal extent
    and normalized to (-pi/2, pi/2]; exact-square footprints keep the
    caliper angle. dims hold the extents along the rectangle axes and
    along z; center is the extent midpoint. Heading disambiguation
    beyond the remaining 180-degree symmetry is left to the fusion
    stage.

    Raises:
        DegenerateCloud: fewer than 3 points or collinear xy projection.
    """
    pts = cloud.points
    if len(pts) < 3:
        raise DegenerateCloud(f"need >= 3 points, got {len(pts)}")
    hull = convex_hull_xy(pts[:, :2])
    if len(hull) < 3:
        raise DegenerateCloud("xy projection is collinear")

    edges = np.roll(hull, -1, axis=0) - hull
    angles = np.arctan2(edges[:, 1], edges[:, 0])
    best_area = np.inf
    best_yaw = 0.0
    for theta in angles:
        c, s = np.cos(-theta), np.sin(-theta)
        xr = hull[:, 0] * c - hull[:, 1] * s
        yr = hull[:, 0] * s + hull[:, 1] * c
        area = (xr.max() - xr.min()) * (yr.max() - yr.min())
        if area < best_area:
            best_area = area
            best_yaw = float(theta)

    yaw = wrap_half(best_yaw)
    lo, hi = _extents_at_yaw(pts, yaw)
    if hi[1] - lo[1] > hi[0] - lo[0]:
        yaw = wrap_half(yaw + np.pi / 2)
        lo, hi = _extents_at_yaw(pts, yaw)
    mid = (lo + hi) / 2.0
    cw, sw = np.cos(yaw), np.sin(yaw)
    center = np.array([mid[0] * cw - mid[1] * sw, mid[0] * sw + mid[1] * cw, mid[2]])
    dims = np.maximum(hi - lo, 1e-12)  # keep strictly positive for flat clouds
    return OrientedBox(center=center, dims=dims, yaw=yaw)


# ---------------------------------------------------------------------------
# Box overlap


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex polygon by a convex CCW polygon."""
    output = [tuple(p) for p in np.asarray(subject, dtype=np.float64)]
    clip = np.asarray(clip, dtype=np.float64)
    n = len(clip)
    for i in range(n):
        if not output:
            break
        a, b = clip[i], clip[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]

        def inside(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0]) >= 0.0

        def intersect(p, q):
            dx, dy = q[0] - p[0], q[1] - p[1]
            denom = ex * dy - ey * dx
            t = (ex * (a[1] - p[1]) - ey * (a[0] - p[0])) / denom
            return (p[0] + t * dx, p[1] + t * dy)

        current, output = output, []
        s = current[-1]
        for e in current:
            if inside(e):
                if not inside(s):
                    output.append(intersect(s, e))
                output.append(e)
            elif inside(s):
                output.append(intersect(s, e))
            s = e
    return np.array(output).reshape(-1, 2)


def bev_intersection_area(a: OrientedBox, b: OrientedBox) -> float:
    """Area of the footprint intersection of two yaw-rotated rectangles."""
    poly = clip_convex(a.bev_corners(), b.bev_corners())
    if len(poly) < 3:
        return 0.0
    return abs(polygon_area(poly))


def bev_iou(a: OrientedBox, b: OrientedBox) -> float:
    """Footprint IoU in the BEV plane."""
    inter = bev_intersection_area(a, b)
    union = a.bev_area() + b.bev_area() - inter
    return inter / union if union > 0 else 0.0


def iou_3d(a: OrientedBox, b: OrientedBox) -> float:
    """3D IoU of two boxes sharing the world-z axis.

    Intersection volume = BEV polygon intersection area x z-interval
    overlap; disjoint boxes score 0.
    """
    alo, ahi = a.z_interval()
    blo, bhi = b.z_interval()
    dz = min(ahi, bhi) - max(alo, blo)
    if dz <= 0:
        return 0.0
    inter = bev_intersection_area(a, b) * dz
    union = a.volume + b.volume - inter
    return inter / union if union > 0 else 0.0


def point_in_convex_polygon(point: np.ndarray, poly: np.ndarray, eps: float = 1e-12) -> bool:
    """Boundary-inclusive test against a convex CCW polygon."""
    poly = np.asarray(poly, dtype=np.float64)
    if len(poly) < 3:
        return False
    x, y = float(point[0]), float(point[1])
    nxt = np.roll(poly, -1, axis=0)
    cross = (nxt[:, 0] - poly[:, 0]) * (y - poly[:, 1]) - (nxt[:, 1] - poly[:, 1]) * (x - poly[:, 0])
    return bool((cross >= -eps).all())


# ---------------------------------------------------------------------------
# Voxel overlap


def voxel_keys(cloud: PointCloud, voxel: float) -> set[tuple[int, int, int]]:
    """Occupied voxel indices on a grid anchored at the world origin."""
    idx = np.floor(cloud.points / voxel).astype(np.int64)
    return set(map(tuple, idx))


def cloud_overlap(a: PointCloud, b: PointCloud, voxel: float = 0.10) -> float:
    """Voxel-set overlap |Va & Vb| / min(|Va|, |Vb|).

    Min-denominator normalization keeps partially observed instances
    fusable. Raises EmptyCloud if either cloud is empty.
    """
    if voxel <= 0:
        raise ValueError(f"voxel size must be positive, got {voxel}")
    if len(a) == 0 or len(b) == 0:
        raise EmptyCloud("cloud_overlap requires two non-empty clouds")
    va = voxel_keys(a, voxel)
    vb = voxel_keys(b, voxel)
    return len(va & vb) / min(len(va), len(vb))


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """One centroid per occupied voxel, ordered by voxel index."""
    if voxel <= 0:
        raise ValueError(f"voxel size must be positive, got {voxel}")
    if len(cloud) == 0:
        return PointCloud()
    idx = np.floor(cloud.points / voxel).astype(np.int64)
    order = np.lexsort((idx[:, 2], idx[:, 1], idx[:, 0]))
    idx_sorted = idx[order]
    pts_sorted = cloud.points[order]
    change = np.any(idx_sorted[1:] != idx_sorted[:-1], axis=1)
    starts = np.concatenate([[0], np.nonzero(change)[0] + 1])
    ends = np.concatenate([starts[1:], [len(pts_sorted)]])
    centroids = np.add.reduceat(pts_sorted, starts, axis=0) / (ends - starts)[:, None]
    return PointCloud(centroids)


# ---------------------------------------------------------------------------
# Depth map binary format


def write_depth(path, depth: np.ndarray) -> None:
    """Write a depth map: magic 'UVDEPTH1', u32 LE width/height, f32 LE row-major."""
    depth = np.asarray(depth, dtype=np.float32)
    if depth.ndim != 2:
        raise ValueError("depth must be 2D (height, width)")
    height, width = depth.shape
    try:
        with open(path, "wb") as fh:
            fh.write(DEPTH_MAGIC)
            fh.write(struct.pack("<II", width, height))
            fh.write(depth.astype("<f4").tobytes(order="C"))
    except OSError as exc:
        raise IoError(f"cannot write depth map {path}: {exc}") from exc


def read_depth(path) -> np.ndarray:
    """Read a depth map written by `write_depth`; returns (height, width) float32."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read depth map {path}: {exc}") from exc
    if len(data) < 16 or data[:8] != DEPTH_MAGIC:
        raise IoError(f"{path}: not a UVDEPTH1 depth map")
    width, height = struct.unpack("<II", data[8:16])
    expected = 16 + 4 * width * height
    if len(data) != expected:
        raise IoError(f"{path}: expected {expected} bytes for {width}x{height}, got {len(data)}")
    return np.frombuffer(data[16:], dtype="<f4").reshape(height, width).copy()
