"""Frame-to-frame coarse pose estimation.

RANSAC over 3D-3D correspondences with a closed-form rigid least-squares fit
(centroid subtraction, SVD of the cross-covariance, reflection correction).
When the previous frame is unavailable or fails, memory frames are scanned in
pool order for a usable reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geometry import Pose
from .synth import Correspondences, InsufficientCovisibility


class DegenerateConfiguration(ValueError):
    """Correspondences are collinear (rank-deficient cross-covariance)."""


class CoarseFailure(RuntimeError):
    """No acceptable pose hypothesis for this correspondence set."""


class TrackingLost(RuntimeError):
    """No usable reference frame; the caller skips the frame and retries."""


@dataclass(frozen=True)
class RansacParams:
    max_iters: int = 200
    inlier_threshold: float = 0.005  # meters
    seed: int = 0
    confidence: float = 0.99

    def __post_init__(self):
        if self.inlier_threshold <= 0:
            raise ValueError("inlier threshold must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


MIN_SAMPLE = 3


def fit_rigid_transform(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Least-squares rigid transform mapping ``src`` points onto ``dst``.

    Minimizes sum ||R q + t - p||^2 over proper rotations (det +1 enforced by
    flipping the smallest singular direction when the SVD yields a
    reflection).  Raises :class:`DegenerateConfiguration` for collinear input.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if len(src) < MIN_SAMPLE or len(src) != len(dst):
        raise DegenerateConfiguration("need >= 3 paired points")
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, S, Vt = np.linalg.svd(H)
    if S[1] <= max(S[0] * 1e-9, 1e-15):
        raise DegenerateConfiguration("points are (near-)collinear")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = cd - R @ cs
    return Pose(R, t)


def ransac_pose(corr: Correspondences, params: RansacParams) -> tuple[Pose, np.ndarray]:
    """Max-inlier rigid pose from noisy correspondences.

    The returned pose maps the p_j side onto the p_i side.  Hypotheses come
    from seeded minimal samples with the standard 99%-confidence adaptive
    stop; ties in inlier count keep the earliest hypothesis.  The winning
    inlier set is refit (repeatedly, until the inlier set is stable) so that
    every returned inlier has residual below the threshold.
    """
    dst, srcp = corr.p_i, corr.p_j
    n = len(dst)
    if n < MIN_SAMPLE:
        raise CoarseFailure(f"{n} correspondences < minimal sample {MIN_SAMPLE}")
    rng = np.random.default_rng(params.seed)
    thr = params.inlier_threshold
    best_count = -1
    best_inliers: np.ndarray | None = None
    needed = params.max_iters
    it = 0
    while it < min(needed, params.max_iters):
        it += 1
        sample = rng.choice(n, size=MIN_SAMPLE, replace=False)
        try:
            pose = fit_rigid_transform(srcp[sample], dst[sample])
        except DegenerateConfiguration:
            continue
        resid = np.linalg.norm(pose.apply(srcp) - dst, axis=1)
        inl = resid < thr
        count = int(inl.sum())
        if count > best_count:
            best_count = count
            best_inliers = inl
            w = max(count / n, 1e-9)
            denom = math.log(max(1.0 - w ** MIN_SAMPLE, 1e-12))
            needed = int(math.ceil(math.log(1.0 - params.confidence) / denom)) \
                if denom < 0 else params.max_iters
    if best_inliers is None or best_count < MIN_SAMPLE:
        raise CoarseFailure("no hypothesis reached 3 inliers")
    inl = best_inliers
    pose = None
    for _ in range(10):
        try:
            pose = fit_rigid_transform(srcp[inl], dst[inl])
        except DegenerateConfiguration:
            break
        resid = np.linalg.norm(pose.apply(srcp) - dst, axis=1)
        new_inl = resid < thr
        if int(new_inl.sum()) < MIN_SAMPLE or np.array_equal(new_inl, inl):
            inl = new_inl if int(new_inl.sum()) >= MIN_SAMPLE else inl
            break
        inl = new_inl
    if pose is None:
        raise CoarseFailure("inlier refit degenerated")
    return pose, np.nonzero(inl)[0]


Matcher = Callable[[object, object], Correspondences]


def coarse_init(frame_t, prev, pool, matcher: Matcher, params: RansacParams,
                min_fallback_corr: int = 10):
    """Coarse pose of the current frame from the previous frame or, failing
    that, from the first memory frame with more than ``min_fallback_corr``
    correspondences.

    ``prev`` is (frame, pose) of the last tracked frame or None.  The matcher
    returns correspondences with p_i in the first argument's camera frame.
    Returns (pose, reference frame id); raises :class:`TrackingLost` when no
    reference works.
    """
    candidates = []
    if prev is not None:
        candidates.append(prev)
    for mf in pool.frames:
        if prev is not None and mf.frame.id == prev[0].id:
            continue
        candidates.append((mf.frame, mf.pose))
    for k, (ref_frame, ref_pose) in enumerate(candidates):
        is_fallback = not (prev is not None and k == 0)
        try:
            corr = matcher(frame_t, ref_frame)
        except InsufficientCovisibility:
            continue
        if is_fallback and len(corr) <= min_fallback_corr:
            continue
        try:
            rel, _ = ransac_pose(corr, params)
        except CoarseFailure:
            continue
        return rel @ ref_pose, ref_frame.id
    raise TrackingLost(f"no reference frame for frame {frame_t.id}")
