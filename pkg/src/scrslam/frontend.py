"""Synthetic feature-stream provider and the `FSTR` recorded-stream file format.

Stands in for a frozen CNN feature extractor: a seeded world of landmarks, each
with a canonical descriptor, is rendered along a trajectory into timestamped
frames of (descriptor, keypoint, depth) observations. With all noise sigmas at
zero the stream is a perfect SLAM problem: every observation is exactly
consistent with a static landmark under the ground-truth pose.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Optional, Sequence

import numpy as np

from .errors import SerializationError
from .geometry import CameraIntrinsics, Pose, look_at, project

STREAM_MAGIC = b"FSTR"
STREAM_VERSION = 1

TRAJECTORY_KINDS = ("orbit", "lawnmower", "loop_with_revisit")


def default_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


def default_bounds() -> tuple[np.ndarray, np.ndarray]:
    """Desk-scale landmark volume: a 5 m cube."""
    return np.array([-2.5, -2.5, -2.5]), np.array([2.5, 2.5, 2.5])


@dataclass(frozen=True)
class StreamConfig:
    fps: float = 30.0
    duration: float = 10.0
    landmark_count: int = 5000
    descriptor_dim: int = 128
    descriptor_noise_sigma: float = 0.002
    keypoint_noise_sigma: float = 0.5    # pixels
    depth_noise_sigma: float = 0.01      # meters
    dynamic_fraction: float = 0.0
    dynamic_amplitude: float = 0.5       # meters
    max_features_per_frame: int = 512    # extractor budget; uniform seeded subsample
    seed: int = 0

    def __post_init__(self) -> None:
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.landmark_count < 1:
            raise ValueError("landmark_count must be >= 1")
        if self.descriptor_dim < 1:
            raise ValueError("descriptor_dim must be >= 1")
        if self.max_features_per_frame < 1:
            raise ValueError("max_features_per_frame must be >= 1")
        for name in ("descriptor_noise_sigma", "keypoint_noise_sigma",
                     "depth_noise_sigma", "dynamic_amplitude"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.dynamic_fraction <= 1.0:
            raise ValueError("dynamic_fraction must be in [0, 1]")

    @property
    def frame_count(self) -> int:
        return int(round(self.duration * self.fps))


@dataclass
class FeatureFrame:
    """One frame of extracted features.

    ``ground_truth_pose`` and ``landmark_ids`` exist for evaluation only; the
    SLAM core never reads them, and landmark ids are not part of the file format.
    """

    timestamp: float
    descriptors: np.ndarray            # (N, D) float32
    keypoints: np.ndarray              # (N, 2) float64 pixels
    depths: np.ndarray                 # (N,) float64 meters
    ground_truth_pose: Optional[Pose] = None
    landmark_ids: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.depths)


@dataclass
class SyntheticScene:
    positions: np.ndarray              # (L, 3) at t=0
    descriptors: np.ndarray            # (L, D) float32, unit norm
    dynamic_mask: np.ndarray           # (L,) bool
    motion_freq: np.ndarray            # (L,) Hz
    motion_phase: np.ndarray           # (L,) rad
    motion_dir: np.ndarray             # (L, 3) unit vectors
    selection_priority: np.ndarray     # (L,) fixed ranks: frame budget keeps lowest
    amplitude: float
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    intrinsics: CameraIntrinsics

    def positions_at(self, time: float) -> np.ndarray:
        """Landmark positions at ``time``; displacement is zero at t=0."""
        if not self.dynamic_mask.any():
            return self.positions
        osc = np.sin(2 * np.pi * self.motion_freq * time + self.motion_phase) \
            - np.sin(self.motion_phase)
        disp = (self.amplitude * osc * self.dynamic_mask)[:, None] * self.motion_dir
        return self.positions + disp


def generate_scene(cfg: StreamConfig,
                   bounds: Optional[tuple[np.ndarray, np.ndarray]] = None,
                   intrinsics: Optional[CameraIntrinsics] = None) -> SyntheticScene:
    """Seeded landmark world: uniform positions, unit-Gaussian L2-normalized descriptors."""
    lo, hi = bounds if bounds is not None else default_bounds()
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(hi <= lo):
        raise ValueError("empty bounds: max must exceed min on every axis")
    rng = np.random.default_rng(cfg.seed)
    n = cfg.landmark_count
    positions = rng.uniform(lo, hi, size=(n, 3))
    desc = rng.standard_normal((n, cfg.descriptor_dim))
    desc /= np.linalg.norm(desc, axis=1, keepdims=True)
    dynamic_mask = np.zeros(n, dtype=bool)
    n_dyn = int(round(cfg.dynamic_fraction * n))
    if n_dyn:
        dynamic_mask[rng.choice(n, size=n_dyn, replace=False)] = True
    motion_freq = rng.uniform(0.1, 0.5, size=n)
    motion_phase = rng.uniform(0.0, 2 * np.pi, size=n)
    motion_dir = rng.standard_normal((n, 3))
    motion_dir /= np.linalg.norm(motion_dir, axis=1, keepdims=True)
    selection_priority = rng.permutation(n).astype(np.float64)
    return SyntheticScene(positions=positions, descriptors=desc.astype(np.float32),
                          dynamic_mask=dynamic_mask, motion_freq=motion_freq,
                          motion_phase=motion_phase, motion_dir=motion_dir,
                          selection_priority=selection_priority,
                          amplitude=cfg.dynamic_amplitude, bounds_min=lo, bounds_max=hi,
                          intrinsics=intrinsics or default_intrinsics())


def generate_trajectory(kind: str, cfg: StreamConfig,
                        center: Sequence[float] = (0.0, 0.0, 0.0),
                        radius: float = 2.0,
                        extent: float = 2.5,
                        standoff: float = 3.0,
                        rows: int = 5) -> list[tuple[float, Pose]]:
    """Smooth seeded-free camera path sampled at the stream frame rate.

    * ``orbit`` — one revolution on a circle of ``radius`` around ``center``,
      camera looking at the center.
    * ``lawnmower`` — serpentine sweep in the plane z = center_z - standoff,
      camera looking along +z, rows spanning ``extent`` in x and y.
    * ``loop_with_revisit`` — 1.25 orbit revolutions, so the final 20% of frames
      retrace the first visit.
    """
    n = cfg.frame_count
    if n < 2:
        raise ValueError("duration * fps must give at least 2 frames")
    center = np.asarray(center, dtype=np.float64)
    times = np.arange(n) / cfg.fps
    if kind in ("orbit", "loop_with_revisit"):
        turns = 1.0 if kind == "orbit" else 1.25
        angles = 2 * np.pi * turns * times / cfg.duration
        out = []
        for t, a in zip(times, angles):
            eye = center + radius * np.array([np.cos(a), np.sin(a), 0.0])
            out.append((float(t), look_at(eye, center)))
        return out
    if kind == "lawnmower":
        xs = np.linspace(center[0] - extent, center[0] + extent, 2)
        ys = np.linspace(center[1] - extent, center[1] + extent, rows)
        waypoints = []
        for i, y in enumerate(ys):
            row = [np.array([x, y, center[2] - standoff]) for x in xs]
            if i % 2 == 1:
                row.reverse()
            waypoints.extend(row)
        waypoints = np.array(waypoints)
        seg = np.linalg.norm(np.diff(waypoints, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        arc = cum[-1] * times / cfg.duration
        pos = np.stack([np.interp(arc, cum, waypoints[:, a]) for a in range(3)], axis=1)
        identity = Pose.identity()
        return [(float(t), Pose(identity.rotation, p)) for t, p in zip(times, pos)]
    raise ValueError(f"unknown trajectory kind {kind!r}; expected one of {TRAJECTORY_KINDS}")


def render_frame(scene: SyntheticScene, pose: Pose, time: float, cfg: StreamConfig,
                 rng: np.random.Generator) -> FeatureFrame:
    """Observe every in-frustum landmark from ``pose`` at ``time`` with noise.

    Visibility is decided on the true projection; noisy keypoints or depths that
    leave the valid domain afterwards are dropped.
    """
    k = scene.intrinsics
    world = scene.positions_at(time)
    cam = pose.inverse().apply(world)
    in_front = cam[:, 2] > 1e-9
    ids = np.nonzero(in_front)[0]
    if len(ids) == 0:
        return _empty_frame(time, cfg, pose)
    uv, depth = project(cam[ids], k)
    in_image = (uv[:, 0] >= 0) & (uv[:, 0] < k.width) \
        & (uv[:, 1] >= 0) & (uv[:, 1] < k.height)
    ids = ids[in_image]
    uv = uv[in_image]
    depth = depth[in_image]
    if len(ids) > cfg.max_features_per_frame:
        # Fixed per-landmark ranks keep the budgeted subset repeatable across
        # frames, like a real extractor re-detecting the same strong features.
        order = np.argsort(scene.selection_priority[ids], kind="stable")
        keep = np.sort(order[:cfg.max_features_per_frame])
        ids, uv, depth = ids[keep], uv[keep], depth[keep]
    m = len(ids)
    if m == 0:
        return _empty_frame(time, cfg, pose)
    if cfg.keypoint_noise_sigma > 0:
        uv = uv + rng.normal(0.0, cfg.keypoint_noise_sigma, size=(m, 2))
    if cfg.depth_noise_sigma > 0:
        depth = depth + rng.normal(0.0, cfg.depth_noise_sigma, size=m)
    desc = scene.descriptors[ids].astype(np.float64)
    if cfg.descriptor_noise_sigma > 0:
        desc = desc + rng.normal(0.0, cfg.descriptor_noise_sigma, size=desc.shape)
        desc /= np.linalg.norm(desc, axis=1, keepdims=True)
    valid = (depth > 0) & (uv[:, 0] >= 0) & (uv[:, 0] < k.width) \
        & (uv[:, 1] >= 0) & (uv[:, 1] < k.height)
    return FeatureFrame(timestamp=float(time),
                        descriptors=desc[valid].astype(np.float32),
                        keypoints=uv[valid], depths=depth[valid],
                        ground_truth_pose=pose, landmark_ids=ids[valid])


def _empty_frame(time: float, cfg: StreamConfig, pose: Pose) -> FeatureFrame:
    return FeatureFrame(timestamp=float(time),
                        descriptors=np.zeros((0, cfg.descriptor_dim), dtype=np.float32),
                        keypoints=np.zeros((0, 2)), depths=np.zeros(0),
                        ground_truth_pose=pose, landmark_ids=np.zeros(0, dtype=np.int64))


def generate_stream(cfg: StreamConfig, kind: str = "orbit",
                    bounds: Optional[tuple[np.ndarray, np.ndarray]] = None,
                    intrinsics: Optional[CameraIntrinsics] = None,
                    **trajectory_kwargs
                    ) -> tuple[SyntheticScene, list[tuple[float, Pose]], list[FeatureFrame]]:
    """Scene + trajectory + rendered frames, all derived from ``cfg.seed``."""
    scene = generate_scene(cfg, bounds, intrinsics)
    lo, hi = scene.bounds_min, scene.bounds_max
    trajectory_kwargs.setdefault("center", (lo + hi) / 2.0)
    trajectory = generate_trajectory(kind, cfg, **trajectory_kwargs)
    rng = np.random.default_rng((cfg.seed, 1))
    frames = [render_frame(scene, pose, t, cfg, rng) for t, pose in trajectory]
    return scene, trajectory, frames


# --- FSTR stream file format ------------------------------------------------
#
# header:  magic 'FSTR' | version u32 | descriptor_dim u32
#          | fx fy cx cy f32 + 2 reserved f32 | width u32 | height u32
#          | frame_count u64
# frame:   timestamp f64 | pose flag u8 [| tx ty tz qx qy qz qw f32]
#          | feature_count u32 | features (u, v, depth, descriptor[D]) f32 rows
# All little-endian. Observations are quantized to float32 by the format.

_STREAM_HEADER = struct.Struct("<4sII6f2IQ")
_FRAME_HEADER = struct.Struct("<dB")
_POSE_STRUCT = struct.Struct("<7f")
_COUNT_STRUCT = struct.Struct("<I")


def write_stream(path, frames: Sequence[FeatureFrame], intrinsics: CameraIntrinsics) -> None:
    dim = frames[0].descriptors.shape[1] if frames else 0
    with open(path, "wb") as f:
        f.write(_STREAM_HEADER.pack(
            STREAM_MAGIC, STREAM_VERSION, dim,
            intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy, 0.0, 0.0,
            intrinsics.width, intrinsics.height, len(frames)))
        for frame in frames:
            if frame.descriptors.shape[1] != dim:
                raise ValueError("descriptor dimension differs between frames")
            has_pose = frame.ground_truth_pose is not None
            f.write(_FRAME_HEADER.pack(frame.timestamp, 1 if has_pose else 0))
            if has_pose:
                pose = frame.ground_truth_pose
                f.write(_POSE_STRUCT.pack(*pose.translation, *pose.quat()))
            n = len(frame)
            f.write(_COUNT_STRUCT.pack(n))
            packed = np.empty((n, 3 + dim), dtype="<f4")
            packed[:, 0] = frame.keypoints[:, 0]
            packed[:, 1] = frame.keypoints[:, 1]
            packed[:, 2] = frame.depths
            packed[:, 3:] = frame.descriptors
            f.write(packed.tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise SerializationError(f"truncated stream: wanted {n} bytes, got {len(data)}")
    return data


def read_stream(path) -> tuple[list[FeatureFrame], CameraIntrinsics]:
    with open(path, "rb") as f:
        header = _read_exact(f, _STREAM_HEADER.size)
        (magic, version, dim, fx, fy, cx, cy, _, _,
         width, height, frame_count) = _STREAM_HEADER.unpack(header)
        if magic != STREAM_MAGIC:
            raise SerializationError(f"bad magic {magic!r}")
        if version != STREAM_VERSION:
            raise SerializationError(f"unsupported stream version {version}")
        intrinsics = CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy,
                                      width=width, height=height)
        frames = []
        for _ in range(frame_count):
            timestamp, pose_flag = _FRAME_HEADER.unpack(_read_exact(f, _FRAME_HEADER.size))
            pose = None
            if pose_flag:
                vals = _POSE_STRUCT.unpack(_read_exact(f, _POSE_STRUCT.size))
                pose = Pose.from_quat(np.array(vals[3:7]), np.array(vals[0:3]))
            (n,) = _COUNT_STRUCT.unpack(_read_exact(f, _COUNT_STRUCT.size))
            raw = np.frombuffer(_read_exact(f, 4 * n * (3 + dim)),
                                dtype="<f4").reshape(n, 3 + dim)
            frames.append(FeatureFrame(
                timestamp=timestamp,
                descriptors=raw[:, 3:].astype(np.float32),
                keypoints=raw[:, 0:2].astype(np.float64),
                depths=raw[:, 2].astype(np.float64),
                ground_truth_pose=pose))
        if f.read(1):
            raise SerializationError("trailing bytes after final frame")
    return frames, intrinsics
