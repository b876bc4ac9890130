"""Point-cloud acquisition pipeline.

Per-view rigid transform into the robot base frame, multi-view fusion,
axis-aligned workspace crop, farthest-point downsampling, and k-nearest
local grouping. All operations are pure functions over immutable inputs.

File formats
------------
Cloud files are line-delimited text, one point per line as ``x y z`` in
meters, with ``#``-prefixed comment lines allowed. Extrinsics files hold
12 whitespace-separated numbers: row-major rotation followed by the
translation vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyInputError,
    FileFormatError,
    FrameMismatchError,
    InsufficientPointsError,
    InvalidBoxError,
    InvalidExtrinsicsError,
    NumericError,
    ShapeError,
)

CAMERA_FRAME = "camera"
BASE_FRAME = "base"

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class PointCloud:
    """An ordered set of 3D points in meters, tagged with its frame."""

    points: np.ndarray
    frame_id: str = BASE_FRAME

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ShapeError(f"points must be (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise NumericError("point cloud contains non-finite coordinates")
        if self.frame_id not in (CAMERA_FRAME, BASE_FRAME):
            raise ShapeError(f"unknown frame id {self.frame_id!r}")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class CameraExtrinsics:
    """Camera pose in the base frame: orthonormal rotation plus translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ShapeError("extrinsics need a 3x3 rotation and a 3-vector")
        if np.max(np.abs(r.T @ r - np.eye(3))) > _ORTHO_TOL:
            raise InvalidExtrinsicsError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise InvalidExtrinsicsError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)


@dataclass(frozen=True)
class LocalGroup:
    """A local neighborhood: k member points around a sampled center."""

    center_index: int
    member_points: np.ndarray
    centroid: np.ndarray = field(default=None)

    def __post_init__(self):
        pts = np.asarray(self.member_points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ShapeError(f"member points must be (k, 3), got {pts.shape}")
        object.__setattr__(self, "member_points", pts)
        object.__setattr__(self, "centroid", pts.mean(axis=0))

    def __len__(self):
        return self.member_points.shape[0]


def transform_to_base(cloud: PointCloud, ext: CameraExtrinsics) -> PointCloud:
    """Rigidly transform a camera-frame cloud into the base frame.

    Each output point is R @ p + t, applied in row form as P @ R.T + t.
    Point order is preserved.
    """
    if cloud.frame_id != CAMERA_FRAME:
        raise FrameMismatchError("transform_to_base expects a camera-frame cloud")
    pts = cloud.points @ ext.rotation.T + ext.translation
    return PointCloud(pts, BASE_FRAME)


def fuse_views(clouds) -> PointCloud:
    """Concatenate any number of base-frame views in input order."""
    clouds = list(clouds)
    for c in clouds:
        if c.frame_id != BASE_FRAME:
            raise FrameMismatchError("fuse_views requires all clouds in the base frame")
    if not clouds:
        return PointCloud(np.zeros((0, 3)))
    pts = np.concatenate([c.points for c in clouds], axis=0)
    return PointCloud(pts, BASE_FRAME)


def crop_aabb(cloud: PointCloud, lo, hi) -> PointCloud:
    """Keep exactly the points inside the closed box [lo, hi].

    Boundary points are retained; relative order is preserved.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if lo.shape != (3,) or hi.shape != (3,):
        raise ShapeError("box corners must be 3-vectors")
    if np.any(lo > hi):
        raise InvalidBoxError(f"box has lo > hi: {lo} vs {hi}")
    pts = cloud.points
    mask = np.all((pts >= lo) & (pts <= hi), axis=1)
    return PointCloud(pts[mask], cloud.frame_id)


def fps_start_index(n_points: int, seed: int) -> int:
    """Deterministic seeded start index used by fps_downsample."""
    return int(np.random.default_rng(seed).integers(n_points))


def fps_indices(points: np.ndarray, n: int, seed: int) -> np.ndarray:
    """Greedy farthest-point selection over the rows of ``points``.

    The first index is the seeded start; every following pick maximizes the
    minimum Euclidean distance to the already selected set, ties broken by
    lowest index. Returns all indices unchanged when n >= len(points).
    """
    m = points.shape[0]
    if m == 0:
        raise EmptyInputError("cannot sample from an empty cloud")
    if n < 1:
        raise ShapeError(f"sample count must be >= 1, got {n}")
    if m <= n:
        return np.arange(m)
    selected = np.empty(n, dtype=np.int64)
    selected[0] = fps_start_index(m, seed)
    # min squared distance from each point to the selected set
    d2 = np.sum((points - points[selected[0]]) ** 2, axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(d2))  # argmax takes the lowest index on ties
        selected[i] = nxt
        d2 = np.minimum(d2, np.sum((points - points[nxt]) ** 2, axis=1))
    return selected


def fps_downsample(cloud: PointCloud, n: int, seed: int) -> PointCloud:
    """Farthest-point downsample to at most n points (see fps_indices)."""
    idx = fps_indices(cloud.points, n, seed)
    return PointCloud(cloud.points[idx], cloud.frame_id)


def knn_groups(cloud: PointCloud, centers: int, k: int, seed: int):
    """Sample local point groups: FPS-selected centers, k nearest members each.

    Every group contains its center; the remaining members are the nearest
    points by Euclidean distance with ties broken by lowest index.
    ``center_index`` refers into the cloud passed here.
    """
    pts = cloud.points
    if pts.shape[0] < k:
        raise InsufficientPointsError(f"need at least k={k} points, have {pts.shape[0]}")
    if centers < 1:
        raise ShapeError(f"group count must be >= 1, got {centers}")
    center_idx = fps_indices(pts, centers, seed)
    groups = []
    for ci in center_idx:
        d2 = np.sum((pts - pts[ci]) ** 2, axis=1)
        order = np.argsort(d2, kind="stable")
        members = [int(ci)]
        for j in order:
            if len(members) == k:
                break
            if int(j) != int(ci):
                members.append(int(j))
        groups.append(LocalGroup(center_index=int(ci), member_points=pts[members]))
    return groups


def load_cloud(path, frame_id=BASE_FRAME) -> PointCloud:
    """Read an ``x y z`` text file, skipping blank and # comment lines."""
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            parts = stripped.split()
            if len(parts) != 3:
                raise FileFormatError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
            try:
                rows.append([float(v) for v in parts])
            except ValueError as exc:
                raise FileFormatError(f"{path}:{lineno}: {exc}") from exc
    return PointCloud(np.array(rows, dtype=np.float64).reshape(-1, 3), frame_id)


def save_cloud(path, cloud: PointCloud):
    with open(path, "w") as f:
        f.write(f"# {len(cloud)} points, frame={cloud.frame_id}\n")
        for x, y, z in cloud.points:
            f.write(f"{x:.9g} {y:.9g} {z:.9g}\n")


def load_extrinsics(path) -> CameraExtrinsics:
    """Read 12 numbers: row-major rotation then translation."""
    with open(path) as f:
        values = [float(v) for line in f for v in line.split() if not line.lstrip().startswith("#")]
    if len(values) != 12:
        raise FileFormatError(f"{path}: expected 12 numbers, got {len(values)}")
    r = np.array(values[:9], dtype=np.float64).reshape(3, 3)
    t = np.array(values[9:], dtype=np.float64)
    return CameraExtrinsics(r, t)
