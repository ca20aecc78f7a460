"""Online pose graph optimization.

Joint Gauss-Newton refinement of the current frame and the selected memory
frames with iterative Huber reweighting.  Three residual families:

* feature terms: 3D distance between matched points expressed in the shared
  object frame, one set per node pair;
* point-to-plane terms: per-pixel signed distance to the tangent plane of the
  re-projectively associated point in the other frame, refreshed every
  iteration, with 1 cm / 20 degree rejection;
* an SDF unary on the current frame: signed distance of its backprojected
  masked pixels to the (frozen) neural field, enabled once the field is ready.

Poses update multiplicatively on the left, ``pose <- exp(delta) @ pose`` with
twists ordered (rotation, translation).  The anchor node(s) are excluded from
the state.  A step that would increase the total robust loss is halved and
ultimately rejected, so the loss trace is non-increasing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Frame, Pose, backproject, huber, huber_weight, se3_exp, skew
from .synth import Correspondences


@dataclass
class GraphNode:
    frame: Frame
    pose: Pose
    fixed: bool = False


@dataclass
class FeatureEdge:
    """Unordered node pair with cached correspondences (p_i in node i's
    camera frame).  Both ordered directions of the pairwise sum contribute the
    same value and gradient, so the edge is evaluated once and counted twice.
    """

    i: int
    j: int
    corr: Correspondences


@dataclass
class SdfHandle:
    """Frozen signed-distance lookup used by the unary term.

    ``sdf(points)`` returns metric signed distances for object-frame points,
    ``grad(points)`` the corresponding spatial gradients.
    """

    sdf: object
    grad: object


@dataclass
class PoseGraph:
    nodes: list[GraphNode]
    feature_edges: list[FeatureEdge]
    current_index: int = 0
    sdf: SdfHandle | None = None
    w_f: float = 1.0
    w_p: float = 1.0
    w_s: float = 1.0


@dataclass
class OptimConfig:
    gn_iters: int = 7
    pp_dist_reject: float = 0.01          # meters
    pp_normal_reject: float = math.radians(20.0)
    huber_delta: float = 0.005            # meters
    damping_floor: float = 1e-8
    damping_max: float = 1e-2
    pp_max_pixels: int = 1024
    sdf_max_pixels: int = 4096
    backoff_max: int = 8

    def __post_init__(self):
        if min(self.gn_iters, self.pp_dist_reject, self.huber_delta,
               self.damping_floor) <= 0:
            raise ValueError("optimizer configuration values must be positive")


# ---------------------------------------------------------------------------
# residual families


def _skew_batch(p: np.ndarray) -> np.ndarray:
    S = np.zeros((len(p), 3, 3))
    S[:, 0, 1], S[:, 0, 2] = -p[:, 2], p[:, 1]
    S[:, 1, 0], S[:, 1, 2] = p[:, 2], -p[:, 0]
    S[:, 2, 0], S[:, 2, 1] = -p[:, 1], p[:, 0]
    return S


def feature_residuals(corr: Correspondences, pose_i: Pose, pose_j: Pose):
    """Residuals r = xi_i^-1 p_m - xi_j^-1 p_n and Jacobians w.r.t. both
    twists.  Returns (r (n,3), J_i (n,3,6), J_j (n,3,6))."""
    p_m, p_n = corr.p_i, corr.p_j
    r = pose_i.inverse().apply(p_m) - pose_j.inverse().apply(p_n)
    n = len(p_m)
    Ri_t, Rj_t = pose_i.rotation.T, pose_j.rotation.T
    J_i = np.empty((n, 3, 6))
    J_j = np.empty((n, 3, 6))
    J_i[:, :, :3] = np.einsum("ab,nbc->nac", Ri_t, _skew_batch(p_m))
    J_j[:, :, :3] = -np.einsum("ab,nbc->nac", Rj_t, _skew_batch(p_n))
    J_i[:, :, 3:] = -Ri_t
    J_j[:, :, 3:] = Rj_t
    return r, J_i, J_j


def associate_point_plane(frame_i: Frame, frame_j: Frame, pose_i: Pose, pose_j: Pose,
                          cfg: OptimConfig):
    """Re-projective association of frame i pixels into frame j.

    Returns fixed per-pair data (a_i points, n_i normals in frame i; q points
    in frame j) after the 1 cm distance and 20 degree normal-angle rejection.
    """
    sel = frame_i.mask & (frame_i.depth > 0) & frame_i.normals_valid
    vs, us = np.nonzero(sel)
    if len(vs) == 0:
        return None
    if len(vs) > cfg.pp_max_pixels:
        stride = int(math.ceil(len(vs) / cfg.pp_max_pixels))
        vs, us = vs[::stride], us[::stride]
    a = backproject(np.stack([us, vs], 1).astype(float), frame_i.depth[vs, us],
                    frame_i.intrinsics)
    n_i = frame_i.normals[vs, us]
    T = pose_j @ pose_i.inverse()
    p = T.apply(a)
    ok = p[:, 2] > 1e-9
    intr_j = frame_j.intrinsics
    z = np.where(ok, p[:, 2], 1.0)
    u2 = np.rint(intr_j.fx * p[:, 0] / z + intr_j.cx).astype(int)
    v2 = np.rint(intr_j.fy * p[:, 1] / z + intr_j.cy).astype(int)
    ok &= (u2 >= 0) & (u2 < intr_j.width) & (v2 >= 0) & (v2 < intr_j.height)
    u2c, v2c = np.clip(u2, 0, intr_j.width - 1), np.clip(v2, 0, intr_j.height - 1)
    d_j = frame_j.depth[v2c, u2c]
    ok &= (d_j > 0) & frame_j.mask[v2c, u2c] & frame_j.normals_valid[v2c, u2c]
    if not ok.any():
        return None
    a, n_i, u2, v2 = a[ok], n_i[ok], u2c[ok], v2c[ok]
    q = backproject(np.stack([u2, v2], 1).astype(float), frame_j.depth[v2, u2],
                    frame_j.intrinsics)
    b = T.inverse().apply(q)
    keep = np.linalg.norm(b - a, axis=1) <= cfg.pp_dist_reject
    n_j_in_i = (frame_j.normals[v2, u2]) @ (pose_i.rotation @ pose_j.rotation.T).T
    cosang = np.clip(np.einsum("ij,ij->i", n_i, n_j_in_i), -1.0, 1.0)
    keep &= np.arccos(cosang) <= cfg.pp_normal_reject
    if not keep.any():
        return None
    return a[keep], n_i[keep], q[keep]


def point_plane_residuals(assoc, pose_i: Pose, pose_j: Pose):
    """Scalar residuals n_i . (T_ij^-1 q - a) and Jacobians for a fixed
    association.  Returns (r (m,), J_i (m,6), J_j (m,6))."""
    a, n, q = assoc
    T_inv = pose_i @ pose_j.inverse()
    b = T_inv.apply(q)
    r = np.einsum("ij,ij->i", n, b - a)
    m = len(a)
    J_i = np.zeros((m, 6))
    J_j = np.zeros((m, 6))
    # row identity u^T [x]x = (u x x)^T turns the skews into cross products
    J_i[:, :3] = -np.cross(n, b)
    J_i[:, 3:] = n
    A = T_inv.rotation
    nA = n @ A
    J_j[:, :3] = np.cross(nA, q)
    J_j[:, 3:] = -nA
    return r, J_i, J_j


def sdf_unary_residuals(frame: Frame, pose: Pose, sdf: SdfHandle, cfg: OptimConfig):
    """Signed distance of the frame's masked depth points to the implicit
    surface, with the chain-rule Jacobian through the field's spatial
    gradient.  Returns (r (k,), J (k,6)) or None if no valid pixels."""
    sel = frame.mask & (frame.depth > 0)
    vs, us = np.nonzero(sel)
    if len(vs) == 0:
        return None
    if len(vs) > cfg.sdf_max_pixels:
        stride = int(math.ceil(len(vs) / cfg.sdf_max_pixels))
        vs, us = vs[::stride], us[::stride]
    x = backproject(np.stack([us, vs], 1).astype(float), frame.depth[vs, us],
                    frame.intrinsics)
    y = pose.inverse().apply(x)
    r = np.asarray(sdf.sdf(y), dtype=float)
    G = np.asarray(sdf.grad(y), dtype=float)
    # dy/dw = R^T [x]x and dy/dv = -R^T; chain through the field gradient G
    GR = G @ pose.rotation.T  # rows G_k^T R^T
    J = np.zeros((len(x), 6))
    J[:, :3] = np.cross(GR, x)
    J[:, 3:] = -GR
    return r, J


# ---------------------------------------------------------------------------
# total loss and Gauss-Newton driver


def _graph_losses(graph: PoseGraph, poses: list[Pose], cfg: OptimConfig):
    delta = cfg.huber_delta
    L = {"feature": 0.0, "point_plane": 0.0, "sdf": 0.0}
    for e in graph.feature_edges:
        if len(e.corr) == 0:
            continue
        r, _, _ = feature_residuals(e.corr, poses[e.i], poses[e.j])
        # ordered pairwise sum counts each edge in both directions
        L["feature"] += 2.0 * graph.w_f * float(huber(np.linalg.norm(r, axis=1),
                                                      delta).sum())
    n = len(graph.nodes)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            assoc = associate_point_plane(graph.nodes[i].frame, graph.nodes[j].frame,
                                          poses[i], poses[j], cfg)
            if assoc is None:
                continue
            r, _, _ = point_plane_residuals(assoc, poses[i], poses[j])
            L["point_plane"] += graph.w_p * float(huber(r, delta).sum())
    if graph.sdf is not None and graph.w_s > 0:
        t = graph.current_index
        out = sdf_unary_residuals(graph.nodes[t].frame, poses[t], graph.sdf, cfg)
        if out is not None:
            L["sdf"] += graph.w_s * float(huber(out[0], delta).sum())
    L["total"] = L["feature"] + L["point_plane"] + L["sdf"]
    return L


def total_loss(graph: PoseGraph, poses: list[Pose] | None = None,
               cfg: OptimConfig | None = None) -> float:
    cfg = cfg or OptimConfig()
    poses = poses if poses is not None else [nd.pose for nd in graph.nodes]
    return _graph_losses(graph, poses, cfg)["total"]


def optimize(graph: PoseGraph, cfg: OptimConfig | None = None):
    """Run the configured number of damped Gauss-Newton iterations.

    Returns (poses, info): the updated pose list (anchors bit-unchanged) and a
    diagnostics dict with per-iteration losses per family and a ``degraded``
    flag set when the normal equations could not be solved even at maximum
    damping.
    """
    cfg = cfg or OptimConfig()
    poses = [nd.pose for nd in graph.nodes]
    free = [k for k, nd in enumerate(graph.nodes) if not nd.fixed]
    info = {"iterations": [], "degraded": False}
    if not free:
        info["iterations"].append(_graph_losses(graph, poses, cfg))
        return poses, info
    col = {k: 6 * c for c, k in enumerate(free)}
    dim = 6 * len(free)
    delta_h = cfg.huber_delta
    prev_loss = _graph_losses(graph, poses, cfg)
    info["iterations"].append(prev_loss)

    for _ in range(cfg.gn_iters):
        H = np.zeros((dim, dim))
        g = np.zeros(dim)

        def add_block(Ji, Jj, r, w, ci, cj):
            # accumulates J^T W J and J^T W r for one residual family chunk
            if Ji is not None:
                Hw = np.einsum("n...i,n,n...j->ij", Ji, w, Ji)
                H[ci:ci + 6, ci:ci + 6] += Hw
                g[ci:ci + 6] += np.einsum("n...i,n,n...->i", Ji, w, r)
            if Jj is not None:
                H[cj:cj + 6, cj:cj + 6] += np.einsum("n...i,n,n...j->ij", Jj, w, Jj)
                g[cj:cj + 6] += np.einsum("n...i,n,n...->i", Jj, w, r)
            if Ji is not None and Jj is not None:
                Hij = np.einsum("n...i,n,n...j->ij", Ji, w, Jj)
                H[ci:ci + 6, cj:cj + 6] += Hij
                H[cj:cj + 6, ci:ci + 6] += Hij.T

        for e in graph.feature_edges:
            if len(e.corr) == 0:
                continue
            fi, fj = not graph.nodes[e.i].fixed, not graph.nodes[e.j].fixed
            if not (fi or fj):
                continue
            r, Ji, Jj = feature_residuals(e.corr, poses[e.i], poses[e.j])
            w = 2.0 * graph.w_f * huber_weight(np.linalg.norm(r, axis=1), delta_h)
            add_block(Ji if fi else None, Jj if fj else None, r, w,
                      col.get(e.i, 0), col.get(e.j, 0))

        n = len(graph.nodes)
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                fi, fj = not graph.nodes[i].fixed, not graph.nodes[j].fixed
                if not (fi or fj):
                    continue
                assoc = associate_point_plane(graph.nodes[i].frame,
                                              graph.nodes[j].frame,
                                              poses[i], poses[j], cfg)
                if assoc is None:
                    continue
                r, Ji, Jj = point_plane_residuals(assoc, poses[i], poses[j])
                w = graph.w_p * huber_weight(r, delta_h)
                add_block(Ji if fi else None, Jj if fj else None, r, w,
                          col.get(i, 0), col.get(j, 0))

        if graph.sdf is not None and graph.w_s > 0 and not graph.nodes[graph.current_index].fixed:
            t = graph.current_index
            out = sdf_unary_residuals(graph.nodes[t].frame, poses[t], graph.sdf, cfg)
            if out is not None:
                r, J = out
                w = graph.w_s * huber_weight(r, delta_h)
                add_block(J, None, r, w, col[t], 0)

        mu = cfg.damping_floor
        delta = None
        while mu <= cfg.damping_max:
            try:
                delta = np.linalg.solve(H + mu * np.eye(dim), -g)
            except np.linalg.LinAlgError:
                delta = None
            if delta is not None and np.all(np.isfinite(delta)):
                break
            delta = None
            mu *= 10.0
        if delta is None:
            info["degraded"] = True
            break

        accepted = False
        step = delta
        for _ in range(cfg.backoff_max + 1):
            cand = list(poses)
            for k in free:
                cand[k] = se3_exp(step[col[k]:col[k] + 6]) @ poses[k]
            cand_loss = _graph_losses(graph, cand, cfg)
            if cand_loss["total"] <= prev_loss["total"] + 1e-15:
                poses = cand
                prev_loss = cand_loss
                accepted = True
                break
            step = 0.5 * step
        info["iterations"].append(prev_loss)
        if not accepted:
            break

    return poses, info
