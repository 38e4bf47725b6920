"""LiDAR-to-camera projection geometry.

Everything here is a pure function of numpy arrays. Conventions follow the
KITTI odometry calibration files: a point ``x`` in the LiDAR frame maps to a
homogeneous pixel ``y = P @ R_rect @ T @ x`` where ``T`` is the rigid
LiDAR-to-camera transform, ``R_rect`` the rectifying rotation of the
reference camera and ``P`` the 3x4 rectified projection matrix.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

MIN_DEPTH = 1e-6
DEFAULT_MAX_RANGE = 80.0
_ORTHO_TOL = 1e-9


def _check_rotation(r: np.ndarray, name: str) -> None:
    if r.shape != (3, 3):
        raise ValueError(f"{name} must be 3x3, got {r.shape}")
    if not np.allclose(r.T @ r, np.eye(3), atol=_ORTHO_TOL, rtol=0.0):
        raise ValueError(f"{name} is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
        raise ValueError(f"{name} has determinant != +1")


@dataclass(frozen=True)
class ExtrinsicTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64)
        trans = np.array(self.translation, dtype=np.float64).reshape(3)
        _check_rotation(rot, "rotation")
        rot.flags.writeable = False
        trans.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> ExtrinsicTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, mat: np.ndarray) -> ExtrinsicTransform:
        mat = np.asarray(mat, dtype=np.float64)
        return cls(mat[:3, :3], mat[:3, 3])

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous form."""
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out


@dataclass(frozen=True)
class CalibrationSet:
    """Full LiDAR-to-pixel transform chain plus the image size (width, height)."""

    extrinsic: ExtrinsicTransform
    rect_rotation: np.ndarray
    projection: np.ndarray
    image_size: tuple[int, int]

    def __post_init__(self):
        rect = np.array(self.rect_rotation, dtype=np.float64)
        proj = np.array(self.projection, dtype=np.float64)
        _check_rotation(rect, "rect_rotation")
        if proj.shape != (3, 4):
            raise ValueError(f"projection must be 3x4, got {proj.shape}")
        width, height = (int(s) for s in self.image_size)
        if proj[0, 0] <= 0 or proj[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < proj[0, 2] < width and 0 < proj[1, 2] < height):
            raise ValueError("principal point lies outside the image")
        rect.flags.writeable = False
        proj.flags.writeable = False
        object.__setattr__(self, "rect_rotation", rect)
        object.__setattr__(self, "projection", proj)
        object.__setattr__(self, "image_size", (width, height))

    @property
    def fu(self) -> float:
        return float(self.projection[0, 0])

    @property
    def fv(self) -> float:
        return float(self.projection[1, 1])

    @property
    def cu(self) -> float:
        return float(self.projection[0, 2])

    @property
    def cv(self) -> float:
        return float(self.projection[1, 2])

    @property
    def skew(self) -> float:
        return float(self.projection[0, 1])

    def lidar_to_pixel(self) -> np.ndarray:
        """3x4 matrix taking homogeneous LiDAR points to homogeneous pixels."""
        rect = np.eye(4)
        rect[:3, :3] = self.rect_rotation
        return self.projection @ rect @ self.extrinsic.matrix()

    def replace(self, **changes) -> CalibrationSet:
        fields = {
            "extrinsic": self.extrinsic,
            "rect_rotation": self.rect_rotation,
            "projection": self.projection,
            "image_size": self.image_size,
        }
        fields.update(changes)
        return CalibrationSet(**fields)


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    intensity: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if self.intensity is not None:
            inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if len(inten) != len(pts):
                raise ValueError("intensity length does not match point count")
            object.__setattr__(self, "intensity", inten)

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class Projection:
    """Points that survived projection, as parallel arrays."""

    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    index: np.ndarray
    n_nonfinite: int = 0

    def __len__(self) -> int:
        return len(self.u)

    def __iter__(self):
        return iter(zip(self.u, self.v, self.depth, self.index))


@dataclass
class DepthMap:
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values)
        if vals.ndim != 2:
            raise ValueError("depth map must be 2-D")
        if vals.size and (vals.min() < 0 or vals.max() > 1):
            raise ValueError("depth map values must lie in [0, 1]")
        self.values = vals

    @property
    def occupied(self) -> np.ndarray:
        return self.values > 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_to_rotation(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Rotation ``R_x(roll) @ R_y(pitch) @ R_z(yaw)``; angles in radians."""
    return rot_x(roll) @ rot_y(pitch) @ rot_z(yaw)


def project(cloud: PointCloud | np.ndarray, calib: CalibrationSet) -> Projection:
    """Project LiDAR points to pixel coordinates.

    Points behind the camera (depth <= 1e-6 m), outside the image or with
    non-finite coordinates are dropped; the non-finite ones are counted.
    ``depth`` is the homogeneous scale of the projected pixel.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    pts = pts.reshape(-1, 3)
    finite = np.isfinite(pts).all(axis=1)
    n_bad = int((~finite).sum())
    if n_bad:
        log.debug("skipping %d non-finite points", n_bad)
    idx = np.flatnonzero(finite)
    p = pts[idx]

    cam = p @ calib.extrinsic.rotation.T + calib.extrinsic.translation
    rect = cam @ calib.rect_rotation.T
    proj = calib.projection
    y = rect @ proj[:, :3].T + proj[:, 3]

    depth = y[:, 2]
    front = depth > MIN_DEPTH
    y, depth, idx = y[front], depth[front], idx[front]
    u = y[:, 0] / depth
    v = y[:, 1] / depth
    width, height = calib.image_size
    inside = (u >= 0) & (u < width) & (v >= 0) & (v < height)
    return Projection(u[inside], v[inside], depth[inside], idx[inside], n_bad)


def unproject(u, v, depth, calib: CalibrationSet) -> np.ndarray:
    """Invert :func:`project` for known ``(u, v, depth)``; returns LiDAR-frame points."""
    u, v, depth = (np.atleast_1d(np.asarray(a, dtype=np.float64)) for a in (u, v, depth))
    y = np.stack([u * depth, v * depth, depth], axis=1)
    proj = calib.projection
    rect = np.linalg.solve(proj[:, :3], (y - proj[:, 3]).T).T
    cam = rect @ calib.rect_rotation
    return (cam - calib.extrinsic.translation) @ calib.extrinsic.rotation


def rasterize(projections: Projection, image_size: tuple[int, int],
              max_range: float = DEFAULT_MAX_RANGE) -> DepthMap:
    """Splat projected points into a normalized depth image, nearest point wins."""
    width, height = image_size
    out = np.zeros((height, width), dtype=np.float32)
    if len(projections) == 0:
        return DepthMap(out)
    cols = np.rint(projections.u).astype(np.int64)
    rows = np.rint(projections.v).astype(np.int64)
    # rounding can push u in [width-0.5, width) onto column `width`
    keep = (cols >= 0) & (cols < width) & (rows >= 0) & (rows < height)
    cols, rows = cols[keep], rows[keep]
    depth = np.asarray(projections.depth, dtype=np.float64)[keep]

    flat = rows * width + cols
    nearest = np.full(height * width, np.inf)
    np.minimum.at(nearest, flat, depth)
    hit = np.isfinite(nearest)
    vals = np.clip(nearest[hit] / max_range, 0.0, 1.0)
    out.reshape(-1)[hit] = vals.astype(np.float32)
    return DepthMap(out)


def depth_image(cloud: PointCloud, calib: CalibrationSet,
                max_range: float = DEFAULT_MAX_RANGE) -> DepthMap:
    return rasterize(project(cloud, calib), calib.image_size, max_range)
