"""The online SLAM loop.

Alternates between map optimization cycles and frame ingestion. Every incoming
frame is relocalized against the current map; frames become keyframes on a time
interval or when their inlier ratio drops. Each cycle samples an optimization
window (newest keyframes + the latest frame + inlier-ratio-weighted older
keyframes), relocalizes the window against the current map, then trains the map
on feature mini-batches drawn from the window with poses held fixed.

There are no frame-to-frame constraints anywhere: frames interact only through
the shared implicit map. In real-time mode a producer thread paces frames at
the stream rate into a depth-1 latest-wins slot and frames that arrive while
the loop is busy are skipped.
"""

from __future__ import annotations

import threading
import time as time_mod
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import BootstrapFailureError
from .frontend import FeatureFrame
from .geometry import CameraIntrinsics, Pose, unproject
from .network import AdamOptimizer, ScrNetwork
from .relocalizer import RansacConfig, RelocResult, predict_global, ransac_align, relocalize


@dataclass(frozen=True)
class SlamConfig:
    keyframe_interval: float = 0.5          # seconds between time-rule promotions
    keyframe_lambda_threshold: float = 0.5  # promote (and flag risk) below this ratio
    newest_window: int = 5                  # W_L
    global_window: int = 10                 # W_G
    alpha: float = 1.0                      # window-sampling exploration weight
    beta: float = 1.0                       # feature-sampling exploration weight
    batch_size: int = 1024
    batches_per_cycle: int = 2
    learning_rate: float = 5e-4
    bootstrap_frames: int = 1
    bootstrap_cycle_budget: int = 900
    bootstrap_lr_scale: float = 4.0     # hotter optimizer while the map is empty
    bootstrap_min_ratio: float = 0.9    # anchor quality before normal operation
    keyframe_cap: Optional[int] = None
    injected_cycle_delay: float = 0.0       # fault-injection knob, seconds per cycle
    seed: int = 0
    # Budgeted relocalization keeps the per-cycle cost flat; the second refine
    # pass re-classifies inliers once and measurably tightens exported poses.
    ransac: RansacConfig = field(default_factory=lambda: RansacConfig(
        max_features=256, refine_iterations=2))

    def __post_init__(self) -> None:
        if self.newest_window < 1:
            raise ValueError("newest_window must be >= 1")
        if self.global_window < 0:
            raise ValueError("global_window must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.batches_per_cycle < 0:
            raise ValueError("batches_per_cycle must be >= 0")
        if not 0.0 < self.keyframe_lambda_threshold < 1.0:
            raise ValueError("keyframe_lambda_threshold must be in (0, 1)")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.keyframe_interval <= 0:
            raise ValueError("keyframe_interval must be positive")
        if self.bootstrap_frames < 1:
            raise ValueError("bootstrap_frames must be >= 1")


@dataclass
class Keyframe:
    id: int
    timestamp: float
    descriptors: np.ndarray     # (N, D)
    local_points: np.ndarray    # (N, 3) camera-frame
    pose: Pose
    inlier_ratio: float


@dataclass
class WindowMember:
    """One frame participating in an optimization cycle."""

    descriptors: np.ndarray
    local_points: np.ndarray
    pose: Pose
    inlier_ratio: float
    keyframe: Optional[Keyframe] = None   # None for a non-promoted latest frame


@dataclass
class IngestReport:
    timestamp: float
    pose: Pose
    inlier_ratio: float
    promoted: bool
    lost: bool


@dataclass
class CycleReport:
    window_size: int
    batch_losses: list[float]            # mean squared residual per batch
    window_inlier_ratios: list[float]
    duration_s: float

    @property
    def loss(self) -> float:
        return float(np.mean(self.batch_losses)) if self.batch_losses else float("nan")


@dataclass
class SchedulerStats:
    frames_received: int = 0
    frames_processed: int = 0
    frames_skipped: int = 0
    wall_time_s: float = 0.0
    stream_fps: float = 0.0
    reloc_latencies_ms: list[float] = field(default_factory=list)
    cycle_latencies_ms: list[float] = field(default_factory=list)

    @property
    def equivalent_fps(self) -> float:
        return self.frames_received / self.wall_time_s if self.wall_time_s > 0 else 0.0

    @property
    def rt_factor(self) -> float:
        if self.stream_fps <= 0:
            return 0.0
        return min(1.0, self.equivalent_fps / self.stream_fps)

    def summary(self) -> dict:
        def pct(values, q):
            return float(np.percentile(values, q)) if values else 0.0
        return {
            "frames_received": self.frames_received,
            "frames_processed": self.frames_processed,
            "frames_skipped": self.frames_skipped,
            "wall_time_s": self.wall_time_s,
            "stream_fps": self.stream_fps,
            "equivalent_fps": self.equivalent_fps,
            "rt_factor": self.rt_factor,
            "relocalize_ms": {"median": pct(self.reloc_latencies_ms, 50),
                              "p95": pct(self.reloc_latencies_ms, 95),
                              "count": len(self.reloc_latencies_ms)},
            "cycle_ms": {"median": pct(self.cycle_latencies_ms, 50),
                         "p95": pct(self.cycle_latencies_ms, 95),
                         "count": len(self.cycle_latencies_ms)},
        }


def triplane_bounds_for_frame(frame: FeatureFrame, intrinsics: CameraIntrinsics,
                              half_width: float = 5.0
                              ) -> tuple[tuple[float, float, float], tuple[float, float, float]]:
    """Scene-bounds cube centered on a frame's observed points.

    The first frame is pinned at the identity, so the map's world frame is that
    camera's frame and the scene lies mostly in front of it. Centering the
    bounds cube on the first observations keeps the whole working volume
    representable by the triplane without adapting bounds online.
    """
    if len(frame) == 0:
        center = np.zeros(3)
    else:
        center = unproject(frame.keypoints, frame.depths, intrinsics).mean(axis=0)
    return (tuple(center - half_width), tuple(center + half_width))


class _LatestFrameSlot:
    """Depth-1 queue where a new frame overwrites (skips) an unconsumed one."""

    def __init__(self) -> None:
        self._cond = threading.Condition()
        self._frame: Optional[FeatureFrame] = None
        self._dropped = 0
        self._closed = False

    def put(self, frame: FeatureFrame) -> None:
        with self._cond:
            if self._frame is not None:
                self._dropped += 1
            self._frame = frame
            self._cond.notify()

    def take(self, timeout: float) -> Optional[FeatureFrame]:
        with self._cond:
            if self._frame is None and not self._closed:
                self._cond.wait(timeout)
            frame, self._frame = self._frame, None
            return frame

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    @property
    def closed(self) -> bool:
        with self._cond:
            return self._closed and self._frame is None

    @property
    def dropped(self) -> int:
        with self._cond:
            return self._dropped


class SlamSystem:
    """Owns the map network, the keyframe store, and the optimization loop."""

    def __init__(self, network: ScrNetwork, config: SlamConfig,
                 intrinsics: CameraIntrinsics):
        self.network = network
        self.config = config
        self.intrinsics = intrinsics
        self.optimizer = AdamOptimizer(learning_rate=config.learning_rate)
        self.keyframes: list[Keyframe] = []
        self.trajectory_log: list[IngestReport] = []
        self.cycle_reports: list[CycleReport] = []
        self.stats = SchedulerStats()
        self.bootstrapped = False
        self._rng = np.random.default_rng((config.seed, 0))
        self._latest: Optional[WindowMember] = None
        self._last_keyframe_time = -np.inf
        self._next_keyframe_id = 0
        self._export_cache: Optional[list[tuple[Keyframe, RelocResult, np.ndarray]]] = None

    # -- frame ingestion -------------------------------------------------

    def _frame_features(self, frame: FeatureFrame) -> tuple[np.ndarray, np.ndarray]:
        local = unproject(frame.keypoints, frame.depths, self.intrinsics) \
            if len(frame) else np.zeros((0, 3))
        return frame.descriptors, local

    def _add_keyframe(self, timestamp, descriptors, local_points, pose, lam) -> Keyframe:
        kf = Keyframe(id=self._next_keyframe_id, timestamp=timestamp,
                      descriptors=descriptors, local_points=local_points,
                      pose=pose, inlier_ratio=lam)
        self._next_keyframe_id += 1
        self.keyframes.append(kf)
        self._last_keyframe_time = timestamp
        cap = self.config.keyframe_cap
        if cap is not None and len(self.keyframes) > cap:
            protected = self.config.newest_window
            evictable = len(self.keyframes) - protected
            if evictable > 0:
                victim = int(self._rng.integers(0, evictable))
                self.keyframes.pop(victim)
        self._export_cache = None
        return kf

    def ingest_frame(self, frame: FeatureFrame) -> IngestReport:
        """Relocalize one incoming frame and apply the keyframe promotion rule."""
        if not self.bootstrapped:
            raise RuntimeError("ingest_frame called before bootstrap")
        descriptors, local = self._frame_features(frame)
        t0 = time_mod.perf_counter()
        res = relocalize(self.network, descriptors, local, self.config.ransac,
                         rng=self._rng)
        self.stats.reloc_latencies_ms.append((time_mod.perf_counter() - t0) * 1e3)
        lost = not res.success
        if lost:
            pose = self.trajectory_log[-1].pose if self.trajectory_log else Pose.identity()
            lam = 0.0
        else:
            pose = res.pose
            lam = res.inlier_ratio
        promoted = lost \
            or (frame.timestamp - self._last_keyframe_time) > self.config.keyframe_interval \
            or lam < self.config.keyframe_lambda_threshold
        if promoted:
            kf = self._add_keyframe(frame.timestamp, descriptors, local, pose, lam)
            self._latest = WindowMember(descriptors, local, pose, lam, keyframe=kf)
        else:
            self._latest = WindowMember(descriptors, local, pose, lam, keyframe=None)
        report = IngestReport(timestamp=frame.timestamp, pose=pose, inlier_ratio=lam,
                              promoted=promoted, lost=lost)
        self.trajectory_log.append(report)
        self.stats.frames_processed += 1
        return report

    # -- optimization cycle ----------------------------------------------

    def sample_window(self) -> list[WindowMember]:
        """Newest keyframes + latest frame + weighted sample of older keyframes.

        Older keyframes are drawn without replacement with probability
        proportional to 1/|store| + alpha * (1 - inlier_ratio).
        """
        newest = self.keyframes[-self.config.newest_window:]
        members = [WindowMember(kf.descriptors, kf.local_points, kf.pose,
                                kf.inlier_ratio, keyframe=kf) for kf in newest]
        newest_ids = {kf.id for kf in newest}
        if self._latest is not None:
            latest_kf = self._latest.keyframe
            if latest_kf is None or latest_kf.id not in newest_ids:
                members.append(self._latest)
        candidates = [kf for kf in self.keyframes[:-self.config.newest_window or None]
                      if kf.id not in newest_ids]
        n_draw = min(self.config.global_window, len(candidates))
        if n_draw > 0:
            weights = np.array([1.0 / len(self.keyframes)
                                + self.config.alpha * (1.0 - kf.inlier_ratio)
                                for kf in candidates])
            pool = list(range(len(candidates)))
            for _ in range(n_draw):
                w = weights[pool]
                probs = w / w.sum()
                pick = int(self._rng.choice(len(pool), p=probs))
                kf = candidates[pool.pop(pick)]
                members.append(WindowMember(kf.descriptors, kf.local_points, kf.pose,
                                            kf.inlier_ratio, keyframe=kf))
        return members

    def sample_features(self, window: Sequence[WindowMember], count: int,
                        rng: Optional[np.random.Generator] = None
                        ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Draw ``count`` features with replacement across the window.

        Per-feature weight is 1/total_features + beta * (1 - frame inlier ratio).
        Returns (descriptors, local points, window member index per sample).
        """
        rng = rng if rng is not None else self._rng
        sizes = np.array([len(m.descriptors) for m in window])
        total = int(sizes.sum())
        if total == 0:
            raise ValueError("optimization window contains no features")
        member_weight = np.array([1.0 / total + self.config.beta * (1.0 - m.inlier_ratio)
                                  for m in window])
        mass = member_weight * sizes
        probs = mass / mass.sum()
        member_idx = rng.choice(len(window), size=count, replace=True, p=probs)
        feature_idx = (rng.random(count) * sizes[member_idx]).astype(np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        flat = offsets[member_idx] + feature_idx
        all_desc = np.concatenate([m.descriptors for m in window])
        all_local = np.concatenate([m.local_points for m in window])
        return all_desc[flat], all_local[flat], member_idx

    def _relocalize_window(self, window: Sequence[WindowMember]) -> None:
        # A window relocalization only replaces a stored pose when it clears the
        # keyframe quality bar: accepting a barely-supported pose would feed the
        # mapper corrupted targets, and the attention weighting (1 - ratio) would
        # then concentrate training exactly on the poisoned frame.
        for member in window:
            res = relocalize(self.network, member.descriptors, member.local_points,
                             self.config.ransac, rng=self._rng)
            if res.success and res.inlier_ratio >= self.config.keyframe_lambda_threshold:
                member.pose = res.pose
                member.inlier_ratio = res.inlier_ratio
            else:
                member.inlier_ratio = 0.0   # pose kept, frame flagged for attention
            if member.keyframe is not None:
                member.keyframe.pose = member.pose
                member.keyframe.inlier_ratio = member.inlier_ratio

    def optimization_cycle(self) -> CycleReport:
        """Relocalize a sampled window against the map, then train on its features."""
        t0 = time_mod.perf_counter()
        window = self.sample_window()
        self._relocalize_window(window)
        batch_losses = []
        if self.config.batches_per_cycle > 0:
            targets = [m.pose.apply(m.local_points).astype(np.float32) for m in window]
            batch_losses = self._train_batches(window, targets)
        if self.config.injected_cycle_delay > 0:
            time_mod.sleep(self.config.injected_cycle_delay)
        duration = time_mod.perf_counter() - t0
        self.stats.cycle_latencies_ms.append(duration * 1e3)
        report = CycleReport(window_size=len(window), batch_losses=batch_losses,
                             window_inlier_ratios=[m.inlier_ratio for m in window],
                             duration_s=duration)
        self.cycle_reports.append(report)
        self._export_cache = None
        return report

    def _train_batches(self, window, targets) -> list[float]:
        sizes = np.array([len(m.descriptors) for m in window])
        total = int(sizes.sum())
        if total == 0:
            return []
        member_weight = np.array([1.0 / total + self.config.beta * (1.0 - m.inlier_ratio)
                                  for m in window])
        mass = member_weight * sizes
        probs = mass / mass.sum()
        b = self.config.batch_size
        dim = self.network.config.descriptor_dim
        losses = []
        for _ in range(self.config.batches_per_cycle):
            member_idx = self._rng.choice(len(window), size=b, replace=True, p=probs)
            feature_idx = (self._rng.random(b) * sizes[member_idx]).astype(np.int64)
            batch_desc = np.empty((b, dim), dtype=np.float32)
            batch_target = np.empty((b, 3), dtype=np.float32)
            for m, member in enumerate(window):
                sel = member_idx == m
                if sel.any():
                    rows = feature_idx[sel]
                    batch_desc[sel] = member.descriptors[rows]
                    batch_target[sel] = targets[m][rows]
            out, cache = self.network.forward(batch_desc, want_cache=True)
            diff = out - batch_target
            losses.append(float((diff**2).sum() / b))
            grads = self.network.backward(cache, 2.0 * diff)
            self.optimizer.step(self.network, grads)
        return losses

    # -- bootstrap ---------------------------------------------------------

    def bootstrap(self, first_frames: Sequence[FeatureFrame]) -> None:
        """Pin the first frame at the identity and train until it relocalizes.

        All bootstrap frames become identity-pose keyframes; the map is trained
        on them until frame 0 relocalizes with an inlier ratio above the
        keyframe threshold, or the cycle budget is exhausted.
        """
        if self.bootstrapped:
            raise RuntimeError("already bootstrapped")
        if not first_frames:
            raise BootstrapFailureError("no frames supplied to bootstrap")
        members = []
        for frame in first_frames:
            descriptors, local = self._frame_features(frame)
            if frame is first_frames[0] and len(descriptors) < self.config.ransac.min_inliers:
                raise BootstrapFailureError(
                    f"first frame has {len(descriptors)} features; "
                    f"need >= {self.config.ransac.min_inliers}")
            kf = self._add_keyframe(frame.timestamp, descriptors, local,
                                    Pose.identity(), 0.0)
            members.append(WindowMember(descriptors, local, kf.pose, 0.0, keyframe=kf))
        targets = [m.pose.apply(m.local_points).astype(np.float32) for m in members]
        anchor = members[0]
        # Phase 1 trains hot until the anchor frame relocalizes at all, phase 2
        # polishes at the base rate: Adam's equilibrium error scales with the
        # learning rate, and the anchor must be sharp before motion accumulates.
        required = max(self.config.bootstrap_min_ratio,
                       self.config.keyframe_lambda_threshold)
        base_lr = self.optimizer.learning_rate
        self.optimizer.learning_rate = base_lr * self.config.bootstrap_lr_scale
        phase2 = False
        try:
            for _ in range(self.config.bootstrap_cycle_budget):
                self._train_batches(members, targets)
                res = relocalize(self.network, anchor.descriptors, anchor.local_points,
                                 self.config.ransac, rng=self._rng)
                if not phase2 and res.success \
                        and res.inlier_ratio >= self.config.keyframe_lambda_threshold:
                    phase2 = True
                    self.optimizer.learning_rate = base_lr
                if res.success and res.inlier_ratio >= required:
                    break
            else:
                raise BootstrapFailureError(
                    f"first frame failed to relocalize with ratio >= {required} "
                    f"within {self.config.bootstrap_cycle_budget} bootstrap cycles")
        finally:
            self.optimizer.learning_rate = base_lr
        for frame, member in zip(first_frames, members):
            res = relocalize(self.network, member.descriptors, member.local_points,
                             self.config.ransac, rng=self._rng)
            lam = res.inlier_ratio if res.success else 0.0
            member.inlier_ratio = lam
            member.keyframe.inlier_ratio = lam
            self.trajectory_log.append(IngestReport(
                timestamp=frame.timestamp, pose=member.pose, inlier_ratio=lam,
                promoted=True, lost=False))
            self.stats.frames_processed += 1
        self._latest = members[-1]
        self.bootstrapped = True

    # -- run loops ---------------------------------------------------------

    def run(self, frames: Sequence[FeatureFrame], real_time: bool = False,
            stream_fps: Optional[float] = None) -> SchedulerStats:
        """Consume a stream: offline processes every frame, real-time may skip."""
        if stream_fps is None and len(frames) > 1:
            span = frames[-1].timestamp - frames[0].timestamp
            stream_fps = (len(frames) - 1) / span if span > 0 else 0.0
        self.stats.stream_fps = stream_fps or 0.0
        wall_start = time_mod.perf_counter()
        if real_time:
            self._run_realtime(frames)
        else:
            self._run_offline(frames)
        self.stats.wall_time_s = time_mod.perf_counter() - wall_start
        assert self.stats.frames_processed + self.stats.frames_skipped \
            == self.stats.frames_received
        return self.stats

    def _run_offline(self, frames: Sequence[FeatureFrame]) -> None:
        self.stats.frames_received += len(frames)
        n_boot = self.config.bootstrap_frames
        if not self.bootstrapped:
            self.bootstrap(frames[:n_boot])
            frames = frames[n_boot:]
        for frame in frames:
            self.ingest_frame(frame)
            self.optimization_cycle()

    def _run_realtime(self, frames: Sequence[FeatureFrame]) -> None:
        slot = _LatestFrameSlot()
        self.stats.frames_received += len(frames)

        def produce() -> None:
            start = time_mod.perf_counter()
            t0 = frames[0].timestamp if frames else 0.0
            for frame in frames:
                target = start + (frame.timestamp - t0)
                delay = target - time_mod.perf_counter()
                if delay > 0:
                    time_mod.sleep(delay)
                slot.put(frame)
            slot.close()

        producer = threading.Thread(target=produce, daemon=True)
        producer.start()
        pending_bootstrap: list[FeatureFrame] = []
        while True:
            frame = slot.take(timeout=0.01)
            if frame is not None:
                if not self.bootstrapped:
                    pending_bootstrap.append(frame)
                    if len(pending_bootstrap) >= self.config.bootstrap_frames:
                        self.bootstrap(pending_bootstrap)
                        pending_bootstrap = []
                else:
                    self.ingest_frame(frame)
                    self.optimization_cycle()
            elif self.bootstrapped and not slot.closed:
                self.optimization_cycle()
            elif slot.closed:
                break
        if pending_bootstrap and not self.bootstrapped:
            # Stream ended before enough frames arrived; bootstrap on what we have.
            self.bootstrap(pending_bootstrap)
        producer.join()
        self.stats.frames_skipped += slot.dropped

    # -- exports -------------------------------------------------------------

    def _export_pass(self) -> list[tuple[Keyframe, RelocResult, np.ndarray]]:
        """Relocalize every keyframe once more against the frozen map (seeded).

        Unlike the per-cycle budgeted relocalizations, the one-time export pass
        scores every stored feature: the final trajectory and geometry are worth
        the full precision.
        """
        if self._export_cache is not None:
            return self._export_cache
        rng = np.random.default_rng((self.config.seed, 1))
        cfg = replace(self.config.ransac, max_features=max(
            self.config.ransac.max_features, 4096))
        out = []
        for kf in self.keyframes:
            pred = predict_global(self.network, kf.descriptors) \
                if len(kf.descriptors) else np.zeros((0, 3), dtype=np.float32)
            res = ransac_align(pred, kf.local_points, cfg, rng)
            out.append((kf, res, pred))
        self._export_cache = out
        return out

    def export_trajectory(self) -> list[tuple[float, Pose, float]]:
        """Final keyframe trajectory: all keyframes retained, even low-ratio ones."""
        out = []
        for kf, res, _ in self._export_pass():
            pose = res.pose if res.success else kf.pose
            out.append((kf.timestamp, pose, res.inlier_ratio))
        return out

    def export_map_geometry(self) -> list[tuple[np.ndarray, int]]:
        """Predicted global coordinates of final-relocalization inliers per keyframe."""
        out = []
        for kf, res, pred in self._export_pass():
            if res.success and res.inlier_mask.any():
                out.append((pred[res.inlier_mask].astype(np.float64), kf.id))
        return out
