"""Pose estimation by RANSAC over rigid alignments of predicted scene coordinates.

Every camera pose in the system comes from here: the map predicts a global 3D
point per descriptor, triplets of (predicted global, observed local) pairs
propose pose hypotheses via the closed-form rigid fit, hypotheses are scored by
inlier ratio, and the winner is re-fit on its inliers. There is no motion model
and no pose prior; the inlier ratio doubles as the tracking-quality signal.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateConfigurationError
from .geometry import Pose, kabsch_umeyama
from .network import ScrNetwork

# Degenerate triplets are redrawn; bail out after this many draws per hypothesis
# so a fully collinear frame cannot loop forever.
_ATTEMPTS_PER_HYPOTHESIS = 10
# Triplets are drawn in fixed-size chunks so the attempt stream is identical for
# any hypothesis_count: raising H never changes the first hypotheses.
_DRAW_CHUNK = 64


@dataclass(frozen=True)
class RansacConfig:
    hypothesis_count: int = 64
    inlier_threshold: float = 0.10   # meters; residuals compared as r^2 < threshold^2
    min_inliers: int = 10
    rng_seed: int = 0
    max_features: int = 4096         # frames above this are seeded-subsampled
    refine_iterations: int = 1

    def __post_init__(self) -> None:
        if self.hypothesis_count < 1:
            raise ValueError("hypothesis_count must be >= 1")
        if self.inlier_threshold <= 0:
            raise ValueError("inlier_threshold must be positive")
        if self.min_inliers < 3:
            raise ValueError("min_inliers must be >= 3")
        if self.max_features < 3:
            raise ValueError("max_features must be >= 3")


@dataclass
class RelocResult:
    """Estimated pose with its inlier support.

    ``inlier_ratio`` and ``inlier_mask`` are always consistent with ``pose``:
    both are recomputed against the final (refined) pose before returning.
    When the frame was subsampled, the mask refers to ``sample_indices``.
    """

    pose: Pose
    inlier_ratio: float
    inlier_mask: np.ndarray
    success: bool
    sample_indices: Optional[np.ndarray] = None


def _failure(n_scored: int) -> RelocResult:
    return RelocResult(pose=Pose.identity(), inlier_ratio=0.0,
                       inlier_mask=np.zeros(n_scored, dtype=bool), success=False)


def predict_global(net: ScrNetwork, descriptors: np.ndarray) -> np.ndarray:
    """Batched map lookup: descriptors (N, D) to predicted global points (N, 3)."""
    outputs, _ = net.forward(descriptors, want_cache=False)
    return outputs


def _fit_triplets(local_t: np.ndarray, pred_t: np.ndarray
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched 3-point rigid fits: (K, 3, 3) triplet pairs -> rotations,
    translations, and a validity mask (degenerate triplets flagged False)."""
    ca = local_t.mean(axis=1)
    cb = pred_t.mean(axis=1)
    h = np.matmul((local_t - ca[:, None, :]).transpose(0, 2, 1),
                  pred_t - cb[:, None, :])
    u, s, vt = np.linalg.svd(h)
    valid = s[:, 1] > 1e-9 * s[:, 0]
    v = vt.transpose(0, 2, 1)
    d = np.sign(np.linalg.det(np.matmul(v, u.transpose(0, 2, 1))))
    d[d == 0] = 1.0
    v = v.copy()
    v[:, :, 2] *= d[:, None]
    rs = np.matmul(v, u.transpose(0, 2, 1))
    ts = cb - np.einsum("kij,kj->ki", rs, ca)
    return rs, ts, valid


def ransac_align(predicted_global: np.ndarray, local_points: np.ndarray,
                 cfg: RansacConfig, rng: Optional[np.random.Generator] = None
                 ) -> RelocResult:
    """Robust rigid fit of local observations onto predicted global coordinates.

    Samples up to ``hypothesis_count`` triplets (degenerate draws are redrawn and
    do not count), keeps the hypothesis with the largest inlier ratio, re-fits it
    on its inliers, and re-scores against the refined pose.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    pred = np.asarray(predicted_global, dtype=np.float64)
    local = np.asarray(local_points, dtype=np.float64)
    n = len(pred)
    if n != len(local):
        raise ValueError("predicted and local point counts differ")
    if n < max(3, cfg.min_inliers):
        return _failure(n)

    tau_sq = cfg.inlier_threshold**2
    rs_parts, ts_parts = [], []
    n_valid = 0
    attempts_left = _ATTEMPTS_PER_HYPOTHESIS * cfg.hypothesis_count
    while n_valid < cfg.hypothesis_count and attempts_left > 0:
        # Uniform 3-subsets: the three smallest of a row of n uniforms.
        triplets = np.argpartition(rng.random((_DRAW_CHUNK, n)), 3, axis=1)[:, :3]
        triplets = triplets[:min(_DRAW_CHUNK, attempts_left)]
        attempts_left -= len(triplets)
        rs_c, ts_c, valid = _fit_triplets(local[triplets], pred[triplets])
        rs_parts.append(rs_c[valid])
        ts_parts.append(ts_c[valid])
        n_valid += int(valid.sum())
    if n_valid == 0:
        return _failure(n)

    rs = np.concatenate(rs_parts)[:cfg.hypothesis_count]   # (H, 3, 3)
    ts = np.concatenate(ts_parts)[:cfg.hypothesis_count]   # (H, 3)
    transformed = local @ rs.transpose(0, 2, 1) + ts[:, None, :]   # (H, N, 3)
    residual_sq = ((pred[None, :, :] - transformed)**2).sum(axis=2)
    counts = (residual_sq < tau_sq).sum(axis=1)
    best = int(np.argmax(counts))         # first maximum: monotone in H
    pose = Pose(rs[best], ts[best])
    mask = residual_sq[best] < tau_sq

    for _ in range(cfg.refine_iterations):
        if mask.sum() < 3:
            break
        try:
            pose = kabsch_umeyama(local[mask], pred[mask])
        except DegenerateConfigurationError:
            break
        mask = ((pred - pose.apply(local))**2).sum(axis=1) < tau_sq

    # Final score against the returned pose, whatever the last refit did.
    mask = ((pred - pose.apply(local))**2).sum(axis=1) < tau_sq
    inliers = int(mask.sum())
    return RelocResult(pose=pose, inlier_ratio=inliers / n, inlier_mask=mask,
                       success=inliers >= cfg.min_inliers)


def relocalize(net: ScrNetwork, descriptors: np.ndarray, local_points: np.ndarray,
               cfg: RansacConfig, rng: Optional[np.random.Generator] = None
               ) -> RelocResult:
    """Predict global coordinates for a frame's descriptors, then RANSAC the pose."""
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    descriptors = np.asarray(descriptors)
    local_points = np.asarray(local_points, dtype=np.float64)
    n = len(descriptors)
    if n != len(local_points):
        raise ValueError("descriptor and local point counts differ")
    if n < max(3, cfg.min_inliers):
        return _failure(n)
    sample_indices = None
    if n > cfg.max_features:
        sample_indices = np.sort(rng.choice(n, size=cfg.max_features, replace=False))
        descriptors = descriptors[sample_indices]
        local_points = local_points[sample_indices]
    pred = predict_global(net, descriptors)
    result = ransac_align(pred, local_points, cfg, rng)
    result.sample_indices = sample_indices
    return result
