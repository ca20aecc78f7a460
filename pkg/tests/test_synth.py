import math

import numpy as np
import pytest

from sdftrack.geometry import Intrinsics, Pose, so3_exp
from sdftrack.synth import (
    Box,
    CheckerTexture,
    CorrespondenceOracle,
    Cylinder,
    InsufficientCovisibility,
    NoiseSpec,
    OccluderSpec,
    OracleParams,
    SceneSpec,
    SceneSpecError,
    SolidTexture,
    Sphere,
    make_mesh,
    make_trajectory,
    raycast_mesh,
    raycast_shapes,
    render_frame,
    surface_samples,
)

INTR = Intrinsics(fx=200.0, fy=200.0, cx=64.0, cy=48.0, width=128, height=96)


def box_spec(noise=NoiseSpec(), occluder=None, texture=None, seed=0):
    return SceneSpec(shapes=[Box((0.12, 0.09, 0.07), center=(0.0, 0.0, 0.5))],
                     texture=texture or CheckerTexture(period=0.02),
                     noise=noise, occluder=occluder, seed=seed)


class TestMeshes:
    def test_unit_box_minimal_tessellation(self):
        spec = SceneSpec(shapes=[Box((1.0, 1.0, 1.0))])
        mesh = make_mesh(spec)
        assert len(mesh.triangles) == 12
        assert mesh.volume() == pytest.approx(1.0, abs=1e-9)

    def test_sphere_area_converges(self):
        spec = SceneSpec(shapes=[Sphere(0.5)], tessellation=64)
        mesh = make_mesh(spec)
        assert mesh.area() == pytest.approx(4 * math.pi * 0.25, rel=0.01)

    def test_cylinder_side_vertices_on_radius(self):
        cyl = Cylinder(radius=0.3, height=0.5)
        spec = SceneSpec(shapes=[cyl], tessellation=32)
        mesh = make_mesh(spec)
        r = np.hypot(mesh.vertices[:, 0], mesh.vertices[:, 2])
        side = r > 1e-9
        np.testing.assert_allclose(r[side], 0.3, atol=1e-12)

    def test_union_concatenates(self):
        spec = SceneSpec(shapes=[Box((0.1, 0.1, 0.1), center=(-0.2, 0, 0)),
                                 Sphere(0.05, center=(0.2, 0, 0))])
        mesh = make_mesh(spec)
        assert not mesh.empty
        assert (mesh.face_areas() > 1e-12).all()

    def test_bad_dimensions(self):
        with pytest.raises(SceneSpecError):
            SceneSpec(shapes=[Box((0.0, 1.0, 1.0))])
        with pytest.raises(SceneSpecError):
            SceneSpec(shapes=[Sphere(-0.1)])
        with pytest.raises(SceneSpecError):
            SceneSpec(shapes=[Box((1, 1, 1))], noise=NoiseSpec(depth_dropout=1.5))


class TestRaycast:
    def test_box_face_depth(self):
        spec = box_spec()
        t, n = raycast_shapes(spec.shapes, np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]]))
        assert t[0] == pytest.approx(0.5 - 0.035, abs=1e-12)
        np.testing.assert_allclose(n[0], [0, 0, -1])

    def test_sphere_hit_and_miss(self):
        sph = Sphere(0.1, center=(0.0, 0.0, 1.0))
        t, n = raycast_shapes([sph], np.zeros((2, 3)),
                              np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]))
        assert t[0] == pytest.approx(0.9)
        assert np.isinf(t[1])

    def test_mesh_raycast_matches_analytic_box(self):
        spec = box_spec()
        mesh = make_mesh(spec)
        rng = np.random.default_rng(3)
        dirs = rng.normal(size=(200, 3))
        dirs[:, 2] = np.abs(dirs[:, 2]) + 0.5
        t_ana, _ = raycast_shapes(spec.shapes, np.zeros((200, 3)), dirs)
        t_mesh = raycast_mesh(mesh, np.zeros((200, 3)), dirs)
        hit = np.isfinite(t_ana)
        assert (np.isfinite(t_mesh) == hit).all()
        np.testing.assert_allclose(t_mesh[hit], t_ana[hit], atol=1e-9)

    def test_cylinder_cap_and_side(self):
        cyl = Cylinder(radius=0.2, height=0.4, center=(0.0, 0.0, 1.0))
        # straight down the axis from above: hits the top cap
        t, n = raycast_shapes([cyl], np.array([[0.0, 1.0, 1.0]]),
                              np.array([[0.0, -1.0, 0.0]]))
        assert t[0] == pytest.approx(0.8)
        np.testing.assert_allclose(n[0], [0, 1, 0])
        # from the side
        t, n = raycast_shapes([cyl], np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]]))
        assert t[0] == pytest.approx(0.8)
        np.testing.assert_allclose(n[0], [0, 0, -1], atol=1e-12)


class TestRenderFrame:
    def test_object_behind_camera_empty_mask(self):
        spec = SceneSpec(shapes=[Box((0.1, 0.1, 0.1), center=(0.0, 0.0, -0.5))])
        f = render_frame(spec, Pose.identity(), INTR, 0)
        assert not f.mask.any()

    def test_frontoparallel_face_exact_depth(self):
        spec = SceneSpec(shapes=[Box((0.2, 0.2, 0.2), center=(0.0, 0.0, 1.1))])
        f = render_frame(spec, Pose.identity(), INTR, 0, corrupt=False)
        assert f.mask.any()
        np.testing.assert_allclose(f.depth[f.mask], 1.0, atol=1e-9)

    def test_depth_matches_analytic_intersection(self):
        spec = box_spec()
        pose = Pose(so3_exp([0.3, 0.5, 0.1]), np.array([0.01, -0.01, 0.0]))
        f = render_frame(spec, pose, INTR, 0, corrupt=False)
        vs, us = np.nonzero(f.mask)
        dirs = np.stack([(us - INTR.cx) / INTR.fx, (vs - INTR.cy) / INTR.fy,
                         np.ones(len(us))], axis=1)
        inv = pose.inverse()
        t, _ = raycast_shapes(spec.shapes, np.broadcast_to(inv.translation, dirs.shape),
                              dirs @ inv.rotation.T)
        np.testing.assert_allclose(f.depth[vs, us], t, atol=1e-6)

    def test_determinism(self):
        spec = box_spec(noise=NoiseSpec(depth_sigma=0.002, depth_dropout=0.05,
                                        mask_fn_rate=0.05, mask_fp_rate=0.02))
        f1 = render_frame(spec, Pose.identity(), INTR, 3)
        f2 = render_frame(spec, Pose.identity(), INTR, 3)
        assert np.array_equal(f1.depth, f2.depth)
        assert np.array_equal(f1.mask, f2.mask)
        assert np.array_equal(f1.rgb, f2.rgb)

    def test_mask_false_negative_rate(self):
        spec = box_spec(noise=NoiseSpec(mask_fn_rate=0.1))
        fracs = []
        for k in range(10):
            clean = render_frame(spec, Pose.identity(), INTR, k, corrupt=False)
            noisy = render_frame(spec, Pose.identity(), INTR, k)
            flipped = clean.mask & ~noisy.mask
            fracs.append(flipped.sum() / clean.mask.sum())
        assert abs(np.mean(fracs) - 0.1) <= 0.02

    def test_blackout_occluder(self):
        occ = OccluderSpec(kind="blackout", start=2, end=4, depth=0.3)
        spec = box_spec(occluder=occ)
        f = render_frame(spec, Pose.identity(), INTR, 3)
        assert not f.mask.any()
        np.testing.assert_allclose(f.depth, 0.3)
        f5 = render_frame(spec, Pose.identity(), INTR, 5)
        assert f5.mask.any()

    def test_sphere_occluder_marks_background(self):
        occ = OccluderSpec(kind="sphere", start=0, end=10, radius=0.08,
                           p0=(0.0, 0.0, 0.3), p1=(0.0, 0.0, 0.3))
        spec = box_spec(occluder=occ)
        clean = render_frame(spec, Pose.identity(), INTR, 5, corrupt=False)
        f = render_frame(spec, Pose.identity(), INTR, 5)
        lost = clean.mask & ~f.mask
        assert lost.any()
        # occluder pixels keep a (nearer) depth reading
        assert (f.depth[lost] < clean.depth[lost]).all()


class TestTrajectory:
    def test_orbit_relative_rotation(self):
        poses = make_trajectory("orbit", 4, center=(0, 0, 0.6))
        for k in range(3):
            rel = poses[k + 1] @ poses[k].inverse()
            expected = so3_exp([0.0, math.pi / 2, 0.0])
            np.testing.assert_allclose(rel.rotation, expected, atol=1e-12)

    def test_first_pose_identity(self):
        for kind in ("orbit", "tumble", "shake"):
            poses = make_trajectory(kind, 5, seed=2)
            np.testing.assert_array_equal(poses[0].rotation, np.eye(3))
            np.testing.assert_array_equal(poses[0].translation, np.zeros(3))

    def test_tumble_speed_bounded(self):
        max_step = math.radians(3.0)
        poses = make_trajectory("tumble", 1000, seed=5, max_step=max_step)
        for a, b in zip(poses[:-1], poses[1:]):
            rel = b @ a.inverse()
            ang = math.acos(min(1.0, max(-1.0, (np.trace(rel.rotation) - 1) / 2)))
            assert ang <= max_step + 1e-9

    def test_bad_kind(self):
        with pytest.raises(SceneSpecError):
            make_trajectory("spiral", 10)


class TestOracle:
    def make(self, **kw):
        spec = box_spec(**kw)
        poses = make_trajectory("orbit", 12, center=(0, 0, 0.5))
        frames = [render_frame(spec, p, INTR, i, corrupt=False)
                  for i, p in enumerate(poses)]
        return spec, poses, frames

    def test_identical_frames_zero_noise(self):
        spec, poses, frames = self.make()
        oracle = CorrespondenceOracle(spec)
        params = OracleParams(n_points=50, sigma=0.0, outlier_fraction=0.0)
        corr = oracle.correspondences(frames[0], poses[0], frames[0], poses[0], params)
        np.testing.assert_allclose(corr.p_i, corr.p_j, atol=1e-12)

    def test_outlier_count_exact(self):
        spec, poses, frames = self.make()
        oracle = CorrespondenceOracle(spec)
        params = OracleParams(n_points=100, sigma=0.0, outlier_fraction=0.3)
        corr = oracle.correspondences(frames[0], poses[0], frames[1], poses[1], params)
        assert len(corr) == 100
        assert int(corr.inlier.sum()) == 70

    def test_inlier_residual_chi_square_bound(self):
        spec, poses, frames = self.make()
        oracle = CorrespondenceOracle(spec)
        sigma = 0.002
        params = OracleParams(n_points=400, sigma=sigma, outlier_fraction=0.0, seed=11)
        total, within = 0, 0
        for k in range(5):
            corr = oracle.correspondences(frames[k], poses[k], frames[k + 1],
                                          poses[k + 1], params)
            a = poses[k].inverse().apply(corr.p_i)
            b = poses[k + 1].inverse().apply(corr.p_j)
            r = np.linalg.norm(a - b, axis=1)
            total += len(r)
            within += int((r <= 3 * sigma).sum())
        assert within / total >= 0.99

    def test_untextured_failure_mode(self):
        spec, poses, frames = self.make(texture=SolidTexture())
        oracle = CorrespondenceOracle(spec)
        params = OracleParams(texture_dependent=True)
        with pytest.raises(InsufficientCovisibility):
            oracle.correspondences(frames[0], poses[0], frames[1], poses[1], params)

    def test_insufficient_covisibility(self):
        spec, poses, frames = self.make()
        oracle = CorrespondenceOracle(spec)
        params = OracleParams(n_points=50)
        # opposite sides of the orbit share no visible surface on a box
        with pytest.raises(InsufficientCovisibility):
            oracle.correspondences(frames[0], poses[0], frames[6], poses[6], params)

    def test_deterministic_per_pair(self):
        spec, poses, frames = self.make()
        oracle = CorrespondenceOracle(spec)
        params = OracleParams(n_points=64, sigma=0.002, outlier_fraction=0.2, seed=3)
        c1 = oracle.correspondences(frames[0], poses[0], frames[1], poses[1], params)
        c2 = oracle.correspondences(frames[0], poses[0], frames[1], poses[1], params)
        assert np.array_equal(c1.p_i, c2.p_i) and np.array_equal(c1.p_j, c2.p_j)


class TestSurfaceSamples:
    def test_samples_lie_on_surfaces(self):
        shapes = [Box((0.2, 0.1, 0.3)), Sphere(0.15, center=(1, 0, 0)),
                  Cylinder(0.1, 0.2, center=(-1, 0, 0))]
        pts, nrm = surface_samples(shapes, 3000, np.random.default_rng(0))
        np.testing.assert_allclose(np.linalg.norm(nrm, axis=1), 1.0, atol=1e-9)
        sph = pts[np.abs(np.linalg.norm(pts - [1, 0, 0], axis=1) - 0.15) < 1e-9]
        assert len(sph) > 100
