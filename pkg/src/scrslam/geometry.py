"""Rigid-body math, pinhole camera model, point-set alignment, and trajectory metrics.

Conventions: poses are camera-to-world SE(3) transforms (``p_world = R @ p_cam + t``),
rotations are stored as 3x3 matrices, quaternions appear only at the trajectory-file
boundary and are scalar-last ``(qx, qy, qz, qw)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    BehindCameraError,
    DegenerateConfigurationError,
    EmptyAssociationError,
    InsufficientPointsError,
    InvalidObservationError,
)

_ORTHONORMAL_TOL = 1e-6


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Scalar-last quaternion (qx, qy, qz, qw) to a 3x3 rotation matrix.

    Scale-invariant form: any nonzero quaternion gives the rotation of its
    normalized self without an explicit normalization step.
    """
    q = np.asarray(q, dtype=np.float64)
    s = float(q @ q)
    if s == 0.0 or not np.isfinite(s):
        raise ValueError("quaternion has zero or non-finite norm")
    x, y, z, w = q
    k = 2.0 / s
    return np.array(
        [
            [1 - k * (y * y + z * z), k * (x * y - z * w), k * (x * z + y * w)],
            [k * (x * y + z * w), 1 - k * (x * x + z * z), k * (y * z - x * w)],
            [k * (x * z - y * w), k * (y * z + x * w), 1 - k * (x * x + y * y)],
        ]
    )


def rotation_to_quat(r: np.ndarray) -> np.ndarray:
    """3x3 rotation matrix to scalar-last unit quaternion, w >= 0."""
    r = np.asarray(r, dtype=np.float64)
    trace = r[0, 0] + r[1, 1] + r[2, 2]
    if trace > 0:
        s = math.sqrt(trace + 1.0) * 2.0
        w = 0.25 * s
        x = (r[2, 1] - r[1, 2]) / s
        y = (r[0, 2] - r[2, 0]) / s
        z = (r[1, 0] - r[0, 1]) / s
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        w = (r[2, 1] - r[1, 2]) / s
        x = 0.25 * s
        y = (r[0, 1] + r[1, 0]) / s
        z = (r[0, 2] + r[2, 0]) / s
    elif r[1, 1] > r[2, 2]:
        s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
        w = (r[0, 2] - r[2, 0]) / s
        x = (r[0, 1] + r[1, 0]) / s
        y = 0.25 * s
        z = (r[1, 2] + r[2, 1]) / s
    else:
        s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
        w = (r[1, 0] - r[0, 1]) / s
        x = (r[0, 2] + r[2, 0]) / s
        y = (r[1, 2] + r[2, 1]) / s
        z = 0.25 * s
    q = np.array([x, y, z, w])
    q /= np.linalg.norm(q)
    if q[3] < 0:
        q = -q
    return q


def rotation_angle_between(r_a: np.ndarray, r_b: np.ndarray) -> float:
    """Geodesic angle in radians between two rotation matrices.

    Uses ||Ra - Rb||_F = 2*sqrt(2)*sin(angle/2), which stays accurate for tiny
    angles where the trace/acos form loses ~8 digits.
    """
    d = np.linalg.norm(r_a - r_b) / (2.0 * math.sqrt(2.0))
    return 2.0 * math.asin(min(1.0, d))


@dataclass(frozen=True)
class Pose:
    """Rigid camera-to-world transform: rotation (3x3, det +1) and translation (m)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        r = np.ascontiguousarray(self.rotation, dtype=np.float64)
        t = np.ascontiguousarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(t)):
            raise ValueError("pose contains non-finite values")
        err = np.abs(r.T @ r - np.eye(3)).max()
        if err > _ORTHONORMAL_TOL:
            raise ValueError(f"rotation not orthonormal (|R^T R - I|_max = {err:.3e})")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation has negative determinant (reflection)")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_quat(quat: np.ndarray, translation: np.ndarray) -> "Pose":
        return Pose(quat_to_rotation(quat), np.asarray(translation, dtype=np.float64))

    def quat(self) -> np.ndarray:
        return rotation_to_quat(self.rotation)

    def compose(self, other: "Pose") -> "Pose":
        """self * other (apply ``other`` first)."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -(self.rotation.T @ self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points, shape (3,) or (N, 3)."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole model: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ValueError("principal point outside image bounds")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")


def unproject(keypoints: np.ndarray, depths: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """Lift pixel observations to 3D camera-frame points.

    keypoints: (..., 2) pixel coordinates, depths: (...,) meters along the optical
    axis. Raises InvalidObservationError for non-positive or non-finite depth.
    """
    keypoints = np.asarray(keypoints, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    if not np.all(np.isfinite(depths)) or np.any(depths <= 0):
        raise InvalidObservationError("depth must be finite and > 0")
    x = (keypoints[..., 0] - k.cx) / k.fx * depths
    y = (keypoints[..., 1] - k.cy) / k.fy * depths
    return np.stack([x, y, depths], axis=-1)


def project(points: np.ndarray, k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole projection of camera-frame points to (keypoints, depths).

    Raises BehindCameraError if any point has z <= 0.
    """
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("point behind camera (z <= 0)")
    u = points[..., 0] / z * k.fx + k.cx
    v = points[..., 1] / z * k.fy + k.cy
    return np.stack([u, v], axis=-1), z.copy()


def look_at(eye: np.ndarray, target: np.ndarray, up: np.ndarray = (0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose at ``eye`` with the optical axis toward ``target``.

    Camera convention: z forward, x right, y down relative to world ``up``.
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("eye and target coincide")
    z_axis = forward / norm
    up = np.asarray(up, dtype=np.float64)
    x_axis = np.cross(up, z_axis)
    x_norm = np.linalg.norm(x_axis)
    if x_norm < 1e-9:
        # Looking straight along `up`: pick an arbitrary perpendicular right axis.
        x_axis = np.cross(np.array([1.0, 0.0, 0.0]), z_axis)
        x_norm = np.linalg.norm(x_axis)
        if x_norm < 1e-9:
            x_axis = np.cross(np.array([0.0, 1.0, 0.0]), z_axis)
            x_norm = np.linalg.norm(x_axis)
    x_axis /= x_norm
    y_axis = np.cross(z_axis, x_axis)
    return Pose(np.stack([x_axis, y_axis, z_axis], axis=1), eye)


def kabsch_umeyama(local: np.ndarray, global_: np.ndarray) -> Pose:
    """Closed-form rigid transform minimizing sum ||global_i - (R local_i + t)||^2.

    Scale is fixed to 1. A reflection in the SVD solution is corrected by flipping
    the sign of the smallest singular vector so det(R) = +1.
    """
    local = np.asarray(local, dtype=np.float64)
    global_ = np.asarray(global_, dtype=np.float64)
    if local.shape != global_.shape or local.ndim != 2 or local.shape[1] != 3:
        raise ValueError("point sets must both have shape (N, 3)")
    n = local.shape[0]
    if n < 3:
        raise InsufficientPointsError(f"need at least 3 point pairs, got {n}")
    centroid_l = local.mean(axis=0)
    centroid_g = global_.mean(axis=0)
    h = (local - centroid_l).T @ (global_ - centroid_g)
    u, s, vt = np.linalg.svd(h)
    if not s[1] > 1e-9 * s[0]:
        raise DegenerateConfigurationError(
            "rank-deficient covariance (collinear or coincident points)")
    v = vt.T
    d = np.sign(np.linalg.det(v @ u.T))
    r = v @ np.diag([1.0, 1.0, d]) @ u.T
    t = centroid_g - r @ centroid_l
    return Pose(r, t)


def associate_timestamps(times_a: np.ndarray, times_b: np.ndarray,
                         tolerance: float) -> list[tuple[int, int]]:
    """Greedy one-to-one nearest-timestamp association within ``tolerance`` seconds.

    Candidate pairs are matched smallest time difference first; each index is used
    at most once. Returns (index_a, index_b) pairs sorted by index_a.
    """
    times_a = np.asarray(times_a, dtype=np.float64)
    times_b = np.asarray(times_b, dtype=np.float64)
    order_b = np.argsort(times_b, kind="stable")
    sorted_b = times_b[order_b]
    candidates = []
    for i, t in enumerate(times_a):
        pos = np.searchsorted(sorted_b, t)
        for j in (pos - 1, pos):
            if 0 <= j < len(sorted_b):
                diff = abs(sorted_b[j] - t)
                if diff <= tolerance:
                    candidates.append((diff, i, int(order_b[j])))
    candidates.sort()
    used_a: set[int] = set()
    used_b: set[int] = set()
    matches = []
    for _, i, j in candidates:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        matches.append((i, j))
    matches.sort()
    return matches


@dataclass
class AteResult:
    """Rigid-alignment trajectory error: RMSE plus per-pair residuals."""

    rmse: float
    errors: np.ndarray          # per matched pair, meters
    matched_times: np.ndarray   # timestamps of the estimated poses that matched
    alignment: Pose             # transform applied to the estimated positions
    n_matches: int = field(init=False)

    def __post_init__(self) -> None:
        self.n_matches = len(self.errors)


TrajectoryLike = Sequence[tuple[float, Pose]]


def ate_alignment(estimated: TrajectoryLike, ground_truth: TrajectoryLike,
                  tolerance: float = 0.02) -> AteResult:
    """Associate by timestamp, rigidly align (SE(3), no scale), return residual stats.

    Trajectories with degenerate translation geometry (stationary or collinear) fall
    back to a translation-only alignment.
    """
    est_times = np.array([t for t, _ in estimated])
    gt_times = np.array([t for t, _ in ground_truth])
    matches = associate_timestamps(est_times, gt_times, tolerance)
    if len(matches) < 2:
        raise EmptyAssociationError(
            f"only {len(matches)} timestamp pairs associated (need >= 2)")
    est_xyz = np.array([estimated[i][1].translation for i, _ in matches])
    gt_xyz = np.array([ground_truth[j][1].translation for _, j in matches])
    try:
        alignment = kabsch_umeyama(est_xyz, gt_xyz)
    except (DegenerateConfigurationError, InsufficientPointsError):
        alignment = Pose(np.eye(3), gt_xyz.mean(axis=0) - est_xyz.mean(axis=0))
    residuals = gt_xyz - alignment.apply(est_xyz)
    errors = np.linalg.norm(residuals, axis=1)
    rmse = float(np.sqrt(np.mean(errors**2)))
    return AteResult(rmse=rmse, errors=errors,
                     matched_times=est_times[[i for i, _ in matches]],
                     alignment=alignment)


def ate_rmse(estimated: TrajectoryLike, ground_truth: TrajectoryLike,
             tolerance: float = 0.02) -> float:
    return ate_alignment(estimated, ground_truth, tolerance).rmse


def write_trajectory(path, trajectory: Iterable[tuple[float, Pose]]) -> None:
    """Write `timestamp tx ty tz qx qy qz qw` lines (quaternion scalar-last)."""
    with open(path, "w") as f:
        f.write("# timestamp tx ty tz qx qy qz qw\n")
        for t, pose in trajectory:
            tx, ty, tz = pose.translation
            qx, qy, qz, qw = pose.quat()
            f.write(f"{t:.6f} {tx:.9f} {ty:.9f} {tz:.9f} "
                    f"{qx:.9f} {qy:.9f} {qz:.9f} {qw:.9f}\n")


def read_trajectory(path) -> list[tuple[float, Pose]]:
    """Read the trajectory text format; `#` lines are comments."""
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            vals = [float(p) for p in parts]
            out.append((vals[0], Pose.from_quat(np.array(vals[4:8]), np.array(vals[1:4]))))
    return out
