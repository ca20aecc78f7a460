"""Keyframe memory pool.

Keeps the most informative historical observations: admission requires
viewpoint novelty under the quotient geodesic (in-plane camera rotation is
free), subset selection picks the K most overlapping visible frames for the
pose graph, and the once-only ``nof_updated`` flag arbitrates between the
online pose-graph optimizer and the field trainer.

The pool is the single structure shared between the tracking worker and the
training worker; all mutation goes through :meth:`MemoryPool.maybe_add` and
:meth:`MemoryPool.commit_poses` under an internal lock, and the trainer reads
through :meth:`MemoryPool.snapshot`.
"""

from __future__ import annotations

import json
import logging
import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .geometry import Frame, Pose, geodesic_ignore_inplane

log = logging.getLogger(__name__)


@dataclass
class MemoryFrame:
    frame: Frame
    pose: Pose
    nof_updated: bool = False
    points_cam: np.ndarray = field(default=None, repr=False)
    normals_cam: np.ndarray = field(default=None, repr=False)

    def object_points(self) -> np.ndarray:
        """Cached cloud expressed in the object frame under the current pose."""
        return self.pose.inverse().apply(self.points_cam)

    def object_normals(self) -> np.ndarray:
        return self.normals_cam @ self.pose.rotation


class MemoryPool:
    """Ordered keyframe set; frame 0 anchors the canonical coordinate system
    and its pose stays the identity forever."""

    def __init__(self, theta_add: float = math.radians(10.0), max_points: int = 4096):
        self.theta_add = theta_add
        self.max_points = max_points
        self.frames: list[MemoryFrame] = []
        self._by_id: dict[int, MemoryFrame] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.frames)

    def __contains__(self, frame_id: int) -> bool:
        return frame_id in self._by_id

    def get(self, frame_id: int) -> MemoryFrame:
        return self._by_id[frame_id]

    def maybe_add(self, frame: Frame, pose: Pose) -> bool:
        """Admit the frame iff its viewpoint is at least ``theta_add`` away
        (quotient geodesic) from every stored frame.  An empty pool always
        admits (the canonical frame)."""
        with self._lock:
            if self.frames:
                dmin = min(geodesic_ignore_inplane(pose, mf.pose) for mf in self.frames)
                if dmin < self.theta_add:
                    return False
            if not self.frames:
                pose = Pose.identity()
            pts, nrm = frame.object_points_cam(max_points=self.max_points,
                                               with_normals=True)
            mf = MemoryFrame(frame, pose, False, pts, nrm)
            self.frames.append(mf)
            self._by_id[frame.id] = mf
            return True

    def select_subset(self, pose_guess: Pose, frame_t: Frame, k: int) -> list[MemoryFrame]:
        """K memory frames with the largest viewing overlap for the pose graph.

        A frame qualifies if > 0.1 of its (subsampled) cloud is visible in the
        new view: normal facing the camera and projecting inside the image
        with positive depth.  Among qualifying frames the K nearest by quotient
        geodesic win, ties to the older frame.  If nothing qualifies the K
        nearest frames are returned so tracking never stalls.
        """
        with self._lock:
            frames = list(self.frames)
        if len(frames) <= k:
            return frames
        intr = frame_t.intrinsics
        scored = []
        for order, mf in enumerate(frames):
            p_new = pose_guess.apply(mf.object_points())
            n_new = pose_guess.rotate(mf.object_normals())
            z = p_new[:, 2]
            ok = z > 1e-9
            facing = np.einsum("ij,ij->i", n_new, p_new) < 0.0
            zz = np.where(ok, z, 1.0)
            u = intr.fx * p_new[:, 0] / zz + intr.cx
            v = intr.fy * p_new[:, 1] / zz + intr.cy
            inside = ok & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
            ratio = float((facing & inside).mean()) if len(p_new) else 0.0
            dist = geodesic_ignore_inplane(pose_guess, mf.pose)
            scored.append((ratio, dist, order, mf))
        visible = [s for s in scored if s[0] > 0.1]
        pool = visible if visible else scored
        pool.sort(key=lambda s: (s[1], s[3].frame.id))
        return [s[3] for s in pool[:k]]

    def commit_poses(self, updates: dict[int, Pose], source: str) -> None:
        """Apply pose updates.

        ``source='posegraph'`` respects the flag protocol (frames already
        refined by the field are immutable to the graph); ``source='nof'``
        overwrites unconditionally and latches ``nof_updated``.  Frame 0 is
        never modified.
        """
        if source not in ("posegraph", "nof"):
            raise ValueError(f"unknown update source '{source}'")
        with self._lock:
            anchor_id = self.frames[0].frame.id if self.frames else None
            for fid, pose in updates.items():
                mf = self._by_id.get(fid)
                if mf is None:
                    raise KeyError(f"frame {fid} is not in the pool")
                if fid == anchor_id:
                    log.debug("ignoring %s update for anchor frame %d", source, fid)
                    continue
                if source == "posegraph":
                    if not mf.nof_updated:
                        mf.pose = pose
                else:
                    mf.pose = pose
                    mf.nof_updated = True

    def snapshot(self) -> list[MemoryFrame]:
        """Consistent copy of (frame, pose, flag) for the training worker."""
        with self._lock:
            return [MemoryFrame(mf.frame, mf.pose, mf.nof_updated,
                                mf.points_cam, mf.normals_cam)
                    for mf in self.frames]

    def poses_by_id(self) -> dict[int, Pose]:
        with self._lock:
            return {mf.frame.id: mf.pose for mf in self.frames}

    def to_json(self) -> str:
        with self._lock:
            payload = [{
                "frame_id": mf.frame.id,
                "pose": [round(x, 17) for x in mf.pose.as_matrix().reshape(-1).tolist()],
                "nof_updated": mf.nof_updated,
            } for mf in self.frames]
        return json.dumps(payload, indent=2)
