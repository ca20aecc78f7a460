"""Synthetic RGBD scene generation.

Produces ground-truth sequences (primitive shapes, procedural texture,
trajectories, ray-cast rendering with controlled corruption) plus a
correspondence oracle that stands in for a learned feature matcher: it samples
covisible surface points using ground truth and perturbs them with calibrated
noise and outliers.

Rendering casts rays against the analytic primitives (exact first hit);
triangle meshes produced by :func:`make_mesh` are used for evaluation, not for
rendering.  All randomness is seeded through the scene spec so identical seeds
give bit-identical frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Frame, Intrinsics, Pose, project, so3_exp


class SceneSpecError(ValueError):
    """Invalid scene specification (non-positive dimensions, bad rates)."""


class InsufficientCovisibility(RuntimeError):
    """Fewer than the minimum number of covisible surface points."""


# ---------------------------------------------------------------------------
# primitives


@dataclass(frozen=True)
class Box:
    size: tuple[float, float, float]
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def validate(self):
        if min(self.size) <= 0:
            raise SceneSpecError("box dimensions must be positive")


@dataclass(frozen=True)
class Sphere:
    radius: float
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def validate(self):
        if self.radius <= 0:
            raise SceneSpecError("sphere radius must be positive")


@dataclass(frozen=True)
class Cylinder:
    """Axis-aligned cylinder, axis along +y through ``center``."""

    radius: float
    height: float
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def validate(self):
        if self.radius <= 0 or self.height <= 0:
            raise SceneSpecError("cylinder dimensions must be positive")


Shape = Box | Sphere | Cylinder


@dataclass(frozen=True)
class CheckerTexture:
    period: float = 0.02
    color_a: tuple[float, float, float] = (0.85, 0.25, 0.2)
    color_b: tuple[float, float, float] = (0.95, 0.9, 0.85)


@dataclass(frozen=True)
class SolidTexture:
    color: tuple[float, float, float] = (0.6, 0.6, 0.65)


@dataclass(frozen=True)
class NoiseSpec:
    depth_sigma: float = 0.0
    depth_dropout: float = 0.0
    mask_fn_rate: float = 0.0
    mask_fp_rate: float = 0.0

    def validate(self):
        for r in (self.depth_dropout, self.mask_fn_rate, self.mask_fp_rate):
            if not 0.0 <= r <= 1.0:
                raise SceneSpecError("noise rates must lie in [0, 1]")
        if self.depth_sigma < 0:
            raise SceneSpecError("depth sigma must be non-negative")


@dataclass(frozen=True)
class OccluderSpec:
    """Moving occluder active on frames [start, end].

    ``sphere`` sweeps a sphere linearly from p0 to p1 (camera coordinates)
    over the active range; ``blackout`` replaces the whole image with a flat
    foreground surface at ``depth``.  Occluded pixels keep the occluder's
    depth but are marked background, reproducing segmentation behaviour under
    external occlusion.
    """

    kind: str = "sphere"  # "sphere" | "blackout"
    start: int = 0
    end: int = 0
    radius: float = 0.05
    p0: tuple[float, float, float] = (-0.2, 0.0, 0.4)
    p1: tuple[float, float, float] = (0.2, 0.0, 0.4)
    depth: float = 0.3

    def active(self, frame_id: int) -> bool:
        return self.start <= frame_id <= self.end


@dataclass
class SceneSpec:
    shapes: list[Shape]
    texture: CheckerTexture | SolidTexture = field(default_factory=CheckerTexture)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    occluder: OccluderSpec | None = None
    seed: int = 0
    tessellation: int = 48

    def __post_init__(self):
        if not self.shapes:
            raise SceneSpecError("scene needs at least one shape")
        for s in self.shapes:
            s.validate()
        self.noise.validate()

    @property
    def textured(self) -> bool:
        return isinstance(self.texture, CheckerTexture)

    def object_center(self) -> np.ndarray:
        return np.mean([np.asarray(s.center, dtype=float) for s in self.shapes], axis=0)


# ---------------------------------------------------------------------------
# analytic ray casting (object frame)

_INF = np.inf


def _raycast_box(box: Box, o: np.ndarray, d: np.ndarray):
    half = 0.5 * np.asarray(box.size, dtype=float)
    c = np.asarray(box.center, dtype=float)
    lo, hi = c - half, c + half
    safe_d = np.where(np.abs(d) < 1e-300, 1e-300, d)
    t1 = (lo - o) / safe_d
    t2 = (hi - o) / safe_d
    tmin = np.minimum(t1, t2).max(axis=-1)
    tmax = np.maximum(t1, t2).min(axis=-1)
    hit = (tmax >= np.maximum(tmin, 1e-9)) & (tmin > 1e-9)
    t = np.where(hit, tmin, _INF)
    p = o + np.where(hit, tmin, 0.0)[..., None] * d
    rel = (p - c) / half
    axis = np.argmax(np.abs(rel), axis=-1)
    n = np.zeros_like(p)
    idx = np.arange(n.shape[0])
    n[idx, axis] = np.sign(rel[idx, axis])
    return t, n


def _raycast_sphere(sph: Sphere, o: np.ndarray, d: np.ndarray):
    c = np.asarray(sph.center, dtype=float)
    oc = o - c
    a = np.einsum("ij,ij->i", d, d)
    b = 2.0 * np.einsum("ij,ij->i", oc, d)
    cc = np.einsum("ij,ij->i", oc, oc) - sph.radius ** 2
    disc = b * b - 4 * a * cc
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t = (-b - sq) / (2 * a)
    hit &= t > 1e-9
    t = np.where(hit, t, _INF)
    p = o + np.where(hit, t, 0.0)[..., None] * d
    n = (p - c) / sph.radius
    return t, n


def _raycast_cylinder(cyl: Cylinder, o: np.ndarray, d: np.ndarray):
    c = np.asarray(cyl.center, dtype=float)
    oc = o - c
    hh = 0.5 * cyl.height
    # side surface: quadratic in the xz components
    a = d[:, 0] ** 2 + d[:, 2] ** 2
    b = 2 * (oc[:, 0] * d[:, 0] + oc[:, 2] * d[:, 2])
    k = oc[:, 0] ** 2 + oc[:, 2] ** 2 - cyl.radius ** 2
    disc = b * b - 4 * a * k
    ok = (disc >= 0) & (a > 1e-300)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t_side = np.where(ok, (-b - sq) / (2 * np.where(ok, a, 1.0)), _INF)
    y_side = oc[:, 1] + np.where(ok, t_side, 0.0) * d[:, 1]
    t_side = np.where(ok & (t_side > 1e-9) & (np.abs(y_side) <= hh), t_side, _INF)
    # caps
    cap_ok = np.abs(d[:, 1]) > 1e-12
    dy = np.where(cap_ok, d[:, 1], 1.0)
    t_best = t_side
    n = np.zeros_like(o)
    for cap_y, cap_n in ((hh, 1.0), (-hh, -1.0)):
        t_cap = np.where(cap_ok, (cap_y - oc[:, 1]) / dy, _INF)
        t_fin = np.where(cap_ok, t_cap, 0.0)
        px = oc[:, 0] + t_fin * d[:, 0]
        pz = oc[:, 2] + t_fin * d[:, 2]
        good = cap_ok & (t_cap > 1e-9) & (px ** 2 + pz ** 2 <= cyl.radius ** 2) \
            & (t_cap < t_best)
        n[good] = [0.0, cap_n, 0.0]
        t_best = np.where(good, t_cap, t_best)
    side_wins = np.isfinite(t_side) & (t_side <= t_best)
    t_fin = np.where(np.isfinite(t_best), t_best, 0.0)
    p = o + t_fin[..., None] * d
    n_side = np.stack([p[:, 0] - c[0], np.zeros(len(o)), p[:, 2] - c[2]], axis=1)
    norm = np.maximum(np.linalg.norm(n_side, axis=1, keepdims=True), 1e-300)
    n[side_wins] = (n_side / norm)[side_wins]
    return t_best, n


def raycast_shapes(shapes: list[Shape], origins: np.ndarray, dirs: np.ndarray):
    """First-hit ray cast against a union of primitives.

    Returns (t, normals): t is inf where the ray misses; normals are outward
    unit vectors at the hit, in the same frame as the rays.
    """
    o = np.asarray(origins, dtype=float).reshape(-1, 3)
    d = np.asarray(dirs, dtype=float).reshape(-1, 3)
    best_t = np.full(len(o), _INF)
    best_n = np.zeros_like(o)
    for s in shapes:
        if isinstance(s, Box):
            t, n = _raycast_box(s, o, d)
        elif isinstance(s, Sphere):
            t, n = _raycast_sphere(s, o, d)
        elif isinstance(s, Cylinder):
            t, n = _raycast_cylinder(s, o, d)
        else:
            raise SceneSpecError(f"unknown shape {type(s).__name__}")
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_n[closer] = n[closer]
    return best_t, best_n


# ---------------------------------------------------------------------------
# triangle meshes


@dataclass
class TriMesh:
    vertices: np.ndarray  # (n, 3) float, meters
    triangles: np.ndarray  # (m, 3) int
    colors: np.ndarray | None = None  # (n, 3) in [0, 1]
    normals: np.ndarray | None = None  # (n, 3), optional per-vertex

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and self.triangles.max() >= len(self.vertices):
            raise SceneSpecError("triangle index out of range")

    @property
    def empty(self) -> bool:
        return len(self.triangles) == 0

    def face_areas(self) -> np.ndarray:
        v = self.vertices
        a = v[self.triangles[:, 1]] - v[self.triangles[:, 0]]
        b = v[self.triangles[:, 2]] - v[self.triangles[:, 0]]
        return 0.5 * np.linalg.norm(np.cross(a, b), axis=1)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def volume(self) -> float:
        """Signed volume via the divergence theorem (positive if outward)."""
        v = self.vertices
        t = self.triangles
        return float(np.einsum("ij,ij->i", v[t[:, 0]],
                               np.cross(v[t[:, 1]], v[t[:, 2]])).sum() / 6.0)

    def drop_degenerate(self, min_area: float = 1e-12) -> "TriMesh":
        keep = self.face_areas() > min_area
        return TriMesh(self.vertices, self.triangles[keep], self.colors, self.normals)


def _box_mesh(box: Box) -> TriMesh:
    hx, hy, hz = 0.5 * np.asarray(box.size, dtype=float)
    c = np.asarray(box.center, dtype=float)
    v = np.array([[sx, sy, sz] for sx in (-hx, hx) for sy in (-hy, hy) for sz in (-hz, hz)])
    v = v + c
    # index = 4*x + 2*y + z with bits 0 = minus, 1 = plus
    faces = [
        (0, 1, 3, 2, [-1, 0, 0]), (4, 6, 7, 5, [1, 0, 0]),
        (0, 4, 5, 1, [0, -1, 0]), (2, 3, 7, 6, [0, 1, 0]),
        (0, 2, 6, 4, [0, 0, -1]), (1, 5, 7, 3, [0, 0, 1]),
    ]
    tris = []
    for a, b, cc, d, n in faces:
        # orient each quad so its normal points outward
        p = v[[a, b, cc]]
        if np.dot(np.cross(p[1] - p[0], p[2] - p[0]), n) < 0:
            a, b, cc, d = a, d, cc, b
        tris.append([a, b, cc])
        tris.append([a, cc, d])
    return TriMesh(v, np.array(tris))


def _sphere_mesh(sph: Sphere, n: int) -> TriMesh:
    n_lon = max(8, n)
    n_lat = max(4, n // 2)
    c = np.asarray(sph.center, dtype=float)
    verts = [c + [0, sph.radius, 0]]
    for i in range(1, n_lat):
        phi = math.pi * i / n_lat
        y = math.cos(phi) * sph.radius
        r = math.sin(phi) * sph.radius
        for j in range(n_lon):
            th = 2 * math.pi * j / n_lon
            verts.append(c + np.array([r * math.cos(th), y, r * math.sin(th)]))
    verts.append(c + [0, -sph.radius, 0])
    verts = np.array(verts)
    tris = []
    top, bottom = 0, len(verts) - 1

    def ring(i, j):
        return 1 + (i - 1) * n_lon + (j % n_lon)

    for j in range(n_lon):
        tris.append([top, ring(1, j + 1), ring(1, j)])
        tris.append([bottom, ring(n_lat - 1, j), ring(n_lat - 1, j + 1)])
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b = ring(i, j), ring(i, j + 1)
            cc, d = ring(i + 1, j), ring(i + 1, j + 1)
            tris.append([a, b, d])
            tris.append([a, d, cc])
    mesh = TriMesh(verts, np.array(tris))
    if mesh.volume() < 0:
        mesh.triangles = mesh.triangles[:, ::-1]
    return mesh


def _cylinder_mesh(cyl: Cylinder, n: int) -> TriMesh:
    n = max(8, n)
    c = np.asarray(cyl.center, dtype=float)
    hh = 0.5 * cyl.height
    ring_top, ring_bot = [], []
    for j in range(n):
        th = 2 * math.pi * j / n
        x, z = cyl.radius * math.cos(th), cyl.radius * math.sin(th)
        ring_top.append(c + np.array([x, hh, z]))
        ring_bot.append(c + np.array([x, -hh, z]))
    verts = np.array(ring_top + ring_bot + [c + [0, hh, 0], c + [0, -hh, 0]])
    top_c, bot_c = 2 * n, 2 * n + 1
    tris = []
    for j in range(n):
        a, b = j, (j + 1) % n
        a2, b2 = n + j, n + (j + 1) % n
        tris.append([a, b, b2])
        tris.append([a, b2, a2])
        tris.append([top_c, b, a])
        tris.append([bot_c, a2, b2])
    mesh = TriMesh(verts, np.array(tris))
    if mesh.volume() < 0:
        mesh.triangles = mesh.triangles[:, ::-1]
    return mesh


def make_mesh(spec: SceneSpec) -> TriMesh:
    """Watertight triangle mesh of the scene's primitive union.

    A union is emitted as concatenated primitive meshes (primitives are
    expected to be disjoint or touching; boolean CSG is out of scope).
    """
    parts = []
    for s in spec.shapes:
        if isinstance(s, Box):
            parts.append(_box_mesh(s))
        elif isinstance(s, Sphere):
            parts.append(_sphere_mesh(s, spec.tessellation))
        elif isinstance(s, Cylinder):
            parts.append(_cylinder_mesh(s, spec.tessellation))
        else:
            raise SceneSpecError(f"unknown shape {type(s).__name__}")
    if len(parts) == 1:
        mesh = parts[0]
    else:
        verts = np.concatenate([p.vertices for p in parts])
        offs = np.cumsum([0] + [len(p.vertices) for p in parts[:-1]])
        tris = np.concatenate([p.triangles + o for p, o in zip(parts, offs)])
        mesh = TriMesh(verts, tris)
    mesh = mesh.drop_degenerate()
    mesh.colors = texture_color(spec, mesh.vertices)
    return mesh


def raycast_mesh(mesh: TriMesh, origins: np.ndarray, dirs: np.ndarray,
                 chunk: int = 4_000_000) -> np.ndarray:
    """First-hit parameter t per ray against mesh triangles (inf on miss).

    Vectorized Moller-Trumbore, chunked so rays x triangles stays bounded.
    """
    o = np.asarray(origins, dtype=float).reshape(-1, 3)
    d = np.asarray(dirs, dtype=float).reshape(-1, 3)
    v0 = mesh.vertices[mesh.triangles[:, 0]]
    e1 = mesh.vertices[mesh.triangles[:, 1]] - v0
    e2 = mesh.vertices[mesh.triangles[:, 2]] - v0
    n_rays, n_tris = len(o), len(v0)
    best = np.full(n_rays, _INF)
    rows = max(1, chunk // max(n_tris, 1))
    for s in range(0, n_rays, rows):
        sl = slice(s, min(s + rows, n_rays))
        oo, dd = o[sl][:, None, :], d[sl][:, None, :]
        pvec = np.cross(dd, e2[None, :, :])
        det = np.einsum("rtk,tk->rt", pvec, e1)
        inv = np.where(np.abs(det) > 1e-14, 1.0 / np.where(det == 0, 1, det), 0.0)
        tvec = oo - v0[None, :, :]
        u = np.einsum("rtk,rtk->rt", tvec, pvec) * inv
        qvec = np.cross(tvec, e1[None, :, :])
        v = np.einsum("rk,rtk->rt", d[sl], qvec) * inv
        t = np.einsum("tk,rtk->rt", e2, qvec) * inv
        ok = (np.abs(det) > 1e-14) & (u >= -1e-12) & (v >= -1e-12) \
            & (u + v <= 1 + 1e-12) & (t > 1e-9)
        t = np.where(ok, t, _INF)
        best[sl] = t.min(axis=1)
    return best


# ---------------------------------------------------------------------------
# texture, shading, rendering

_LIGHT_DIR = np.array([0.35, 0.45, 0.82])
_LIGHT_DIR = _LIGHT_DIR / np.linalg.norm(_LIGHT_DIR)


def texture_color(spec: SceneSpec, points_obj: np.ndarray) -> np.ndarray:
    """Procedural albedo at object-frame surface points."""
    pts = np.asarray(points_obj, dtype=float).reshape(-1, 3)
    if isinstance(spec.texture, SolidTexture):
        return np.tile(np.asarray(spec.texture.color, float), (len(pts), 1))
    tx = spec.texture
    # quarter-period offset keeps primitive faces off cell boundaries
    cells = np.floor(pts / tx.period + 0.25).astype(np.int64).sum(axis=1)
    colors = np.where((cells % 2 == 0)[:, None],
                      np.asarray(tx.color_a, float), np.asarray(tx.color_b, float))
    return colors


def _shade(albedo: np.ndarray, normals_cam: np.ndarray) -> np.ndarray:
    diff = np.maximum(0.0, -normals_cam @ _LIGHT_DIR)
    return np.clip(albedo * (0.4 + 0.6 * diff[:, None]), 0.0, 1.0)


def _pixel_ray_dirs(intr: Intrinsics) -> np.ndarray:
    """Per-pixel ray directions with unit z, so t equals depth."""
    u = np.arange(intr.width, dtype=float)[None, :]
    v = np.arange(intr.height, dtype=float)[:, None]
    x = np.broadcast_to((u - intr.cx) / intr.fx, (intr.height, intr.width))
    y = np.broadcast_to((v - intr.cy) / intr.fy, (intr.height, intr.width))
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def _corrupt_mask(mask: np.ndarray, rate: float, flip_to: bool, candidates: np.ndarray,
                  rng: np.random.Generator, n_object: int) -> np.ndarray:
    """Flip ~rate * n_object pixels in spatially correlated blobs."""
    target = int(round(rate * n_object))
    if target <= 0 or not candidates.any():
        return mask
    h, w = mask.shape
    vs, us = np.nonzero(candidates)
    flipped = 0
    out = mask.copy()
    vgrid, ugrid = np.mgrid[0:h, 0:w]
    for _ in range(10 * target):
        if flipped >= target:
            break
        k = rng.integers(len(vs))
        r = rng.integers(1, 4)
        blob = (vgrid - vs[k]) ** 2 + (ugrid - us[k]) ** 2 <= r * r
        sel = blob & candidates & (out != flip_to)
        flipped += int(sel.sum())
        out[sel] = flip_to
    return out


def render_frame(spec: SceneSpec, pose: Pose, intr: Intrinsics, frame_id: int,
                 corrupt: bool = True) -> Frame:
    """Ray-cast one RGBD frame of the posed scene.

    With ``corrupt`` the configured occluder, depth noise/dropout and
    correlated mask flips are applied; corruption randomness derives from
    (spec.seed, frame_id) only.
    """
    dirs_cam = _pixel_ray_dirs(intr).reshape(-1, 3)
    inv = pose.inverse()
    o_obj = np.broadcast_to(inv.translation, dirs_cam.shape)
    d_obj = dirs_cam @ inv.rotation.T
    t, n_obj = raycast_shapes(spec.shapes, o_obj, d_obj)
    hit = np.isfinite(t)
    depth = np.where(hit, t, 0.0)
    mask = hit.copy()
    rgb = np.zeros((len(dirs_cam), 3))
    if hit.any():
        p_obj = inv.translation + t[hit, None] * d_obj[hit]
        n_cam = n_obj[hit] @ pose.rotation.T
        rgb[hit] = _shade(texture_color(spec, p_obj), n_cam)

    if corrupt:
        rng = np.random.default_rng([spec.seed, frame_id])
        occ = spec.occluder
        if occ is not None and occ.active(frame_id):
            if occ.kind == "blackout":
                depth = np.full_like(depth, occ.depth)
                mask[:] = False
                rgb[:] = 0.25
            else:
                span = max(occ.end - occ.start, 1)
                a = (frame_id - occ.start) / span
                c = (1 - a) * np.asarray(occ.p0, float) + a * np.asarray(occ.p1, float)
                t_occ, n_occ = raycast_shapes([Sphere(occ.radius, tuple(c))],
                                              np.zeros_like(dirs_cam), dirs_cam)
                front = np.isfinite(t_occ) & ((t_occ < t) | ~hit)
                depth[front] = t_occ[front]
                mask[front] = False
                shade = _shade(np.tile([0.3, 0.3, 0.32], (int(front.sum()), 1)),
                               n_occ[front])
                rgb[front] = shade
        noise = spec.noise
        valid = depth > 0
        if noise.depth_sigma > 0:
            depth[valid] += rng.normal(0.0, noise.depth_sigma, int(valid.sum()))
            depth[valid] = np.maximum(depth[valid], 1e-4)
        if noise.depth_dropout > 0:
            drop = valid & (rng.random(len(depth)) < noise.depth_dropout)
            depth[drop] = 0.0
        h, w = intr.height, intr.width
        mask2 = mask.reshape(h, w)
        n_object = int(mask2.sum())
        if n_object and noise.mask_fn_rate > 0:
            mask2 = _corrupt_mask(mask2, noise.mask_fn_rate, False, mask2.copy(),
                                  rng, n_object)
        if n_object and noise.mask_fp_rate > 0:
            from scipy.ndimage import binary_dilation
            ring = binary_dilation(mask.reshape(h, w), iterations=5) & ~mask.reshape(h, w)
            mask2 = _corrupt_mask(mask2, noise.mask_fp_rate, True, ring, rng, n_object)
        mask = mask2.reshape(-1)

    h, w = intr.height, intr.width
    return Frame.create(frame_id, rgb.reshape(h, w, 3), depth.reshape(h, w),
                        mask.reshape(h, w), intr)


# ---------------------------------------------------------------------------
# trajectories


def _about_center(R: np.ndarray, center: np.ndarray) -> Pose:
    return Pose(R, center - R @ center)


def make_trajectory(kind: str, n_frames: int, center=(0.0, 0.0, 0.6), seed: int = 0,
                    max_step: float = math.radians(4.0),
                    jump_angle: float = math.radians(25.0),
                    jump_trans: float = 0.05, jump_rate: float = 0.08) -> list[Pose]:
    """Ground-truth pose sequence; the first pose is always the identity.

    Kinds: ``orbit`` (full 360 degree spin about the object's y axis),
    ``tumble`` (smooth random rotation from an integrated bounded angular
    velocity), ``shake`` (small jitter with abrupt jumps).
    All rotations pivot about ``center`` so the object stays in view.
    """
    if n_frames < 1:
        raise SceneSpecError("trajectory needs at least one frame")
    c = np.asarray(center, dtype=float)
    poses = [Pose.identity()]
    if kind == "orbit":
        for k in range(1, n_frames):
            ang = 2.0 * math.pi * k / n_frames
            poses.append(_about_center(so3_exp([0.0, ang, 0.0]), c))
    elif kind == "tumble":
        rng = np.random.default_rng(seed)
        omega = rng.normal(0.0, max_step / 3.0, 3)
        R = np.eye(3)
        for _ in range(1, n_frames):
            omega = omega + rng.normal(0.0, max_step / 6.0, 3)
            speed = np.linalg.norm(omega)
            if speed > max_step:
                omega *= max_step / speed
            R = R @ so3_exp(omega)
            poses.append(_about_center(R, c))
    elif kind == "shake":
        rng = np.random.default_rng(seed)
        R = np.eye(3)
        t_off = np.zeros(3)
        for _ in range(1, n_frames):
            if rng.random() < jump_rate:
                axis = rng.normal(size=3)
                axis /= np.linalg.norm(axis)
                R = R @ so3_exp(axis * jump_angle * rng.uniform(0.5, 1.0))
                t_off = rng.uniform(-jump_trans, jump_trans, 3)
            else:
                R = R @ so3_exp(rng.normal(0.0, max_step / 8.0, 3))
            p = _about_center(R, c)
            poses.append(Pose(p.rotation, p.translation + t_off))
    else:
        raise SceneSpecError(f"unknown trajectory kind '{kind}'")
    return poses


# ---------------------------------------------------------------------------
# correspondence oracle


@dataclass(frozen=True)
class OracleParams:
    """Noise model of the stand-in feature matcher.

    ``sigma`` is the RMS magnitude of each endpoint's 3D perturbation (the
    per-axis deviation is sigma/sqrt(3)); ``outlier_fraction`` of the returned
    pairs is replaced by uniform draws from the covisible depth range.  With
    ``texture_dependent`` the oracle refuses untextured scenes, reproducing
    matcher failure on blank surfaces.
    """

    n_points: int = 200
    sigma: float = 0.002
    outlier_fraction: float = 0.2
    texture_dependent: bool = False
    seed: int = 0
    min_covisible: int = 3


@dataclass
class Correspondences:
    """3D-3D matches: p_i in frame i camera coords, p_j in frame j coords."""

    p_i: np.ndarray
    p_j: np.ndarray
    inlier: np.ndarray

    def __len__(self) -> int:
        return len(self.p_i)

    def swapped(self) -> "Correspondences":
        return Correspondences(self.p_j, self.p_i, self.inlier)


class CorrespondenceOracle:
    """Ground-truth-backed matcher substitute.

    Holds a fixed bank of surface samples; per frame pair it intersects the
    two visibility sets, perturbs the covisible points in each camera frame
    and injects outliers.  Per-pair randomness is derived from
    (params.seed, i, j) so repeated queries are identical.
    """

    def __init__(self, spec: SceneSpec, n_base: int = 4096):
        self.spec = spec
        rng = np.random.default_rng([spec.seed, 977])
        self.points, self.normals = surface_samples(spec.shapes, n_base, rng)
        self._vis_cache: dict[int, np.ndarray] = {}

    def _visible(self, frame_id: int, pose: Pose, intr: Intrinsics) -> np.ndarray:
        cached = self._vis_cache.get(frame_id)
        if cached is not None:
            return cached
        p_cam = pose.apply(self.points)
        n_cam = self.normals @ pose.rotation.T
        ok = p_cam[:, 2] > 1e-6
        facing = np.einsum("ij,ij->i", n_cam, p_cam) < 0
        ok &= facing
        u = intr.fx * p_cam[:, 0] / np.where(ok, p_cam[:, 2], 1.0) + intr.cx
        v = intr.fy * p_cam[:, 1] / np.where(ok, p_cam[:, 2], 1.0) + intr.cy
        ok &= (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
        # occlusion: the ray toward the point must hit the surface at the point
        inv = pose.inverse()
        d_obj = p_cam @ inv.rotation.T
        o_obj = np.broadcast_to(inv.translation, d_obj.shape)
        t, _ = raycast_shapes(self.spec.shapes, o_obj, d_obj)
        ok &= np.abs(t - 1.0) < 1e-4
        self._vis_cache[frame_id] = ok
        return ok

    def correspondences(self, frame_i: Frame, pose_i: Pose, frame_j: Frame,
                        pose_j: Pose, params: OracleParams) -> Correspondences:
        if params.texture_dependent and not self.spec.textured:
            raise InsufficientCovisibility("matcher found no texture to match")
        covis = (self._visible(frame_i.id, pose_i, frame_i.intrinsics)
                 & self._visible(frame_j.id, pose_j, frame_j.intrinsics))
        idx = np.nonzero(covis)[0]
        if len(idx) < params.min_covisible:
            raise InsufficientCovisibility(
                f"only {len(idx)} covisible points between frames "
                f"{frame_i.id} and {frame_j.id}")
        rng = np.random.default_rng([params.seed, frame_i.id, frame_j.id])
        n = min(params.n_points, len(idx))
        pick = rng.choice(idx, size=n, replace=False)
        pts = self.points[pick]
        p_i = pose_i.apply(pts)
        p_j = pose_j.apply(pts)
        if params.sigma > 0:
            s = params.sigma / math.sqrt(3.0)
            p_i = p_i + rng.normal(0.0, s, p_i.shape)
            p_j = p_j + rng.normal(0.0, s, p_j.shape)
        inlier = np.ones(n, dtype=bool)
        n_out = int(round(params.outlier_fraction * n))
        if n_out > 0:
            which = rng.permutation(n)[:n_out]
            inlier[which] = False
            for pts_cam, pose in ((p_i, pose_i), (p_j, pose_j)):
                all_cam = pose.apply(self.points[idx])
                lo, hi = all_cam.min(axis=0), all_cam.max(axis=0)
                pts_cam[which] = rng.uniform(lo, hi, (n_out, 3))
        return Correspondences(p_i, p_j, inlier)


def surface_samples(shapes: list[Shape], n: int, rng: np.random.Generator):
    """Area-uniform surface samples (points, outward normals) on a union."""
    areas = []
    for s in shapes:
        if isinstance(s, Box):
            w, h, d = s.size
            areas.append(2.0 * (w * h + h * d + w * d))
        elif isinstance(s, Sphere):
            areas.append(4.0 * math.pi * s.radius ** 2)
        else:
            areas.append(2.0 * math.pi * s.radius * (s.height + s.radius))
    areas = np.asarray(areas)
    counts = np.maximum(1, np.round(n * areas / areas.sum()).astype(int))
    pts_all, nrm_all = [], []
    for s, k in zip(shapes, counts):
        if isinstance(s, Box):
            p, m = _sample_box(s, k, rng)
        elif isinstance(s, Sphere):
            p, m = _sample_sphere(s, k, rng)
        else:
            p, m = _sample_cylinder(s, k, rng)
        pts_all.append(p)
        nrm_all.append(m)
    return np.concatenate(pts_all), np.concatenate(nrm_all)


def _sample_box(box: Box, n: int, rng):
    w, h, d = box.size
    face_areas = np.array([h * d, h * d, w * d, w * d, w * h, w * h])
    probs = face_areas / face_areas.sum()
    faces = rng.choice(6, size=n, p=probs)
    uv = rng.uniform(-0.5, 0.5, (n, 2))
    pts = np.zeros((n, 3))
    nrm = np.zeros((n, 3))
    half = 0.5 * np.asarray(box.size)
    for f in range(6):
        sel = faces == f
        axis, sign = f // 2, 1.0 if f % 2 else -1.0
        others = [a for a in range(3) if a != axis]
        pts[sel, axis] = sign * half[axis]
        pts[sel, others[0]] = uv[sel, 0] * box.size[others[0]]
        pts[sel, others[1]] = uv[sel, 1] * box.size[others[1]]
        nrm[sel, axis] = sign
    return pts + np.asarray(box.center), nrm


def _sample_sphere(sph: Sphere, n: int, rng):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.asarray(sph.center) + sph.radius * v, v


def _sample_cylinder(cyl: Cylinder, n: int, rng):
    side = 2 * math.pi * cyl.radius * cyl.height
    cap = math.pi * cyl.radius ** 2
    p_side = side / (side + 2 * cap)
    pts = np.zeros((n, 3))
    nrm = np.zeros((n, 3))
    on_side = rng.random(n) < p_side
    th = rng.uniform(0, 2 * math.pi, n)
    k = int(on_side.sum())
    pts[on_side, 0] = cyl.radius * np.cos(th[on_side])
    pts[on_side, 2] = cyl.radius * np.sin(th[on_side])
    pts[on_side, 1] = rng.uniform(-0.5, 0.5, k) * cyl.height
    nrm[on_side, 0] = np.cos(th[on_side])
    nrm[on_side, 2] = np.sin(th[on_side])
    caps = ~on_side
    kc = int(caps.sum())
    r = cyl.radius * np.sqrt(rng.random(kc))
    up = rng.random(kc) < 0.5
    pts[caps, 0] = r * np.cos(th[caps])
    pts[caps, 2] = r * np.sin(th[caps])
    pts[caps, 1] = np.where(up, 0.5, -0.5) * cyl.height
    nrm[caps, 1] = np.where(up, 1.0, -1.0)
    return pts + np.asarray(cyl.center), nrm
