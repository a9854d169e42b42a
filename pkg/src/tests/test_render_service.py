import unittest

import numpy as np
from pydantic import ValidationError

from src.services.datagen_service import CameraGridConfig
from src.services.model_service import Mesh, ShapeCoefficients, make_toy_model, synthesize_shape
from src.services.render_service import (
    MAX_DEPTH,
    Camera,
    DepthImage,
    NormalMap,
    decode_normals,
    depth_to_normals,
    encode_normals,
    hemisphere_cameras,
    project_points,
    project_vertex,
    render_depth,
    render_views,
)
from src.tests.fixtures import overlapping_planes, plane_mesh, uv_sphere


def _interior(normal_map: NormalMap) -> np.ndarray:
    normals, mask = decode_normals(normal_map)
    return normals[mask]


class TestCameras(unittest.TestCase):
    def test_rig_has_twelve_cameras_on_the_hemisphere(self):
        cameras = hemisphere_cameras(radius=600, focal=220, res=128)
        self.assertEqual(len(cameras), 12)
        for camera in cameras:
            self.assertAlmostEqual(np.linalg.norm(camera.position), 600.0, delta=1e-6)
            self.assertGreater(camera.position[2], 0.0)

    def test_rig_order_is_pitch_major(self):
        cameras = hemisphere_cameras()
        self.assertEqual([(c.pitch, c.yaw) for c in cameras[:4]], [(-30.0, -60.0), (-30.0, -20.0),
                                                                    (-30.0, 20.0), (-30.0, 60.0)])

    def test_rotation_is_orthonormal_and_looks_at_target(self):
        for camera in hemisphere_cameras():
            R = camera.rotation
            np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
            target = camera.to_camera(np.zeros((1, 3)))[0]
            np.testing.assert_allclose(target[:2], 0.0, atol=1e-9)
            self.assertAlmostEqual(target[2], camera.radius, delta=1e-9)

    def test_invalid_camera(self):
        with self.assertRaises(ValueError):
            Camera(yaw=0, pitch=90, radius=600, focal=220, cx=64, cy=64, width=128, height=128)
        with self.assertRaises(ValueError):
            Camera.frontal(radius=-1, focal=220, res=128)

    def test_far_plane_must_fit_sixteen_bits(self):
        self.assertEqual(Camera.frontal(radius=600, focal=220, res=128, far=MAX_DEPTH).far, MAX_DEPTH)
        with self.assertRaises(ValueError):
            Camera.frontal(radius=600, focal=220, res=128, far=70000.0)
        with self.assertRaises(ValidationError):
            CameraGridConfig(far=70000.0)


class TestProjection(unittest.TestCase):
    def setUp(self):
        self.camera = Camera.frontal(radius=500, focal=200, res=128)

    def test_optical_axis(self):
        u, v, z, in_front = project_vertex(self.camera, (0.0, 0.0, 100.0))
        self.assertEqual((u, v), (64.0, 64.0))
        self.assertAlmostEqual(z, 400.0)
        self.assertTrue(in_front)

    def test_forty_five_degree_ray(self):
        # camera x is world x for a frontal camera; depth 400 -> offset 400
        u, v, _, _ = project_vertex(self.camera, (400.0, 0.0, 100.0))
        self.assertAlmostEqual(u, 64.0 + 200.0)
        self.assertAlmostEqual(v, 64.0)

    def test_doubling_focal_doubles_offsets(self):
        wide = Camera.frontal(radius=500, focal=400, res=128)
        point = (30.0, -20.0, 50.0)
        a = project_vertex(self.camera, point)
        b = project_vertex(wide, point)
        self.assertAlmostEqual(b.u - 64, 2 * (a.u - 64))
        self.assertAlmostEqual(b.v - 64, 2 * (a.v - 64))

    def test_behind_camera_is_flagged(self):
        projection = project_vertex(self.camera, (0.0, 0.0, 600.0))
        self.assertFalse(projection.in_front)
        u, _, _ = project_points(self.camera, np.array([[0.0, 0.0, 600.0]]))
        self.assertTrue(np.isnan(u[0]))


class TestRenderDepth(unittest.TestCase):
    def test_fronto_parallel_plane(self):
        camera = Camera.frontal(radius=800.4, focal=100, res=64)
        depth = render_depth(plane_mesh(half=100), camera)
        fg = depth.pixels[depth.pixels > 0]
        self.assertGreater(fg.size, 100)
        self.assertTrue(np.all(fg == 800))

    def test_background_is_zero(self):
        camera = Camera.frontal(radius=800, focal=100, res=64)
        depth = render_depth(plane_mesh(half=50), camera)
        self.assertEqual(depth.pixels.dtype, np.uint16)
        self.assertEqual(depth.pixels[0, 0], 0)
        self.assertEqual(depth.pixels[32, 32], 800)

    def test_empty_projection(self):
        camera = Camera.frontal(radius=800, focal=100, res=32)
        mesh = plane_mesh(half=50, z=900.0)  # behind the camera
        self.assertFalse(np.any(render_depth(mesh, camera).pixels))

    def test_nearest_surface_wins(self):
        camera = Camera.frontal(radius=1000, focal=100, res=64)
        depth = render_depth(overlapping_planes(near_z=50.0, far_z=-50.0), camera)
        fg = depth.pixels[depth.pixels > 0]
        self.assertTrue(np.all(fg == 950))

    def test_translation_along_the_axis(self):
        camera = Camera.frontal(radius=900.3, focal=150, res=64)
        mesh = plane_mesh(half=120, n=10)
        shifted = Mesh(mesh.vertices - np.tile([0.0, 0.0, 10.0], len(mesh.points())), mesh.triangles)
        a = render_depth(mesh, camera).pixels.astype(np.int64)
        b = render_depth(shifted, camera).pixels.astype(np.int64)
        both = (a > 0) & (b > 0)
        self.assertGreater(both.sum(), 100)
        self.assertTrue(np.all(np.abs(b[both] - a[both] - 10) <= 1))

    def test_sphere_matches_ray_intersection(self):
        r, d, f, res = 300.0, 1200.0, 120.0, 80
        camera = Camera.frontal(radius=d, focal=f, res=res)
        depth = render_depth(uv_sphere(r), camera).pixels.astype(np.float64)

        cols, rows = np.meshgrid(np.arange(res) + 0.5, np.arange(res) + 0.5)
        dx, dy = (cols - res / 2) / f, (rows - res / 2) / f
        norm2 = dx * dx + dy * dy + 1.0
        disc = d * d - norm2 * (d * d - r * r)
        hit = disc > 0
        t = np.where(hit, (d - np.sqrt(np.maximum(disc, 0))) / norm2, 0.0)
        rho = np.hypot(t * dx, t * dy)
        interior = hit & (rho < 0.85 * r)
        self.assertGreater(interior.sum(), 500)
        self.assertTrue(np.all(depth[interior] > 0))
        self.assertLessEqual(np.abs(depth[interior] - t[interior]).max(), 1.0)

    def test_far_clip(self):
        camera = Camera(yaw=0, pitch=0, radius=800, focal=100, cx=32, cy=32, width=64, height=64, far=700)
        self.assertFalse(np.any(render_depth(plane_mesh(half=50), camera).pixels))

    def test_deterministic(self):
        model = make_toy_model(4, v_rings=12)
        mesh = synthesize_shape(model, ShapeCoefficients.zeros(model))
        camera = hemisphere_cameras()[5]
        np.testing.assert_array_equal(render_depth(mesh, camera).pixels, render_depth(mesh, camera).pixels)

    def test_mirror_yaw_pair(self):
        model = make_toy_model(0, v_rings=24, k_id=0, k_exp=0)
        mesh = synthesize_shape(model, ShapeCoefficients.zeros(model))
        cameras = {c.yaw: c for c in hemisphere_cameras() if c.pitch == 0}
        left = render_depth(mesh, cameras[-20.0]).pixels.astype(np.int64)
        right = render_depth(mesh, cameras[20.0]).pixels.astype(np.int64)
        mirrored = right[:, ::-1]
        # quads split along mirrored diagonals, so depths may round apart by one
        self.assertGreater(np.mean((left > 0) == (mirrored > 0)), 0.99)
        both = (left > 0) & (mirrored > 0)
        self.assertGreater(np.mean(left[both] == mirrored[both]), 0.9)
        self.assertLessEqual(np.abs(left[both] - mirrored[both]).max(), 1)


class TestNormals(unittest.TestCase):
    def test_fronto_parallel_plane(self):
        camera = Camera.frontal(radius=800, focal=100, res=64)
        depth = render_depth(plane_mesh(half=150), camera)
        normals = _interior(depth_to_normals(depth, *camera.intrinsics))
        self.assertGreater(len(normals), 100)
        np.testing.assert_allclose(normals, np.tile([0.0, 0.0, -1.0], (len(normals), 1)), atol=0.02)

    def test_tilted_plane(self):
        camera = Camera.frontal(radius=1500, focal=50, res=64)
        depth = render_depth(plane_mesh(half=400, n=16, tilt_deg=45.0), camera)
        normals = _interior(depth_to_normals(depth, *camera.intrinsics))
        self.assertGreater(len(normals), 50)
        h = np.sqrt(0.5)
        np.testing.assert_allclose(normals, np.tile([-h, 0.0, -h], (len(normals), 1)), atol=0.03)

    def test_sphere_normals(self):
        r, d, f, res = 300.0, 1200.0, 120.0, 80
        camera = Camera.frontal(radius=d, focal=f, res=res)
        depth = render_depth(uv_sphere(r), camera)
        normals, mask = decode_normals(depth_to_normals(depth, *camera.intrinsics))

        cols, rows = np.meshgrid(np.arange(res) + 0.5, np.arange(res) + 0.5)
        ray = np.stack([(cols - res / 2) / f, (rows - res / 2) / f, np.ones_like(cols)], axis=-1)
        norm2 = np.sum(ray * ray, axis=-1)
        disc = np.maximum(d * d - norm2 * (d * d - r * r), 0.0)
        t = (d - np.sqrt(disc)) / norm2
        analytic = (t[..., None] * ray - np.array([0.0, 0.0, d])) / r
        rho = np.hypot(t * ray[..., 0], t * ray[..., 1])
        interior = mask & (rho < 0.85 * r)
        self.assertGreater(interior.sum(), 500)

        measured = normals[interior] / np.linalg.norm(normals[interior], axis=1, keepdims=True)
        cosines = np.clip(np.sum(measured * analytic[interior], axis=1), -1.0, 1.0)
        self.assertLess(np.degrees(np.arccos(cosines)).mean(), 3.0)

    def test_decoded_normals_are_unit_and_camera_facing(self):
        model = make_toy_model(1, v_rings=24)
        mesh = synthesize_shape(model, ShapeCoefficients.zeros(model))
        for depth, normal_map in render_views(mesh, hemisphere_cameras()):
            fg = _interior(normal_map)
            self.assertGreater(len(fg), 0)
            np.testing.assert_allclose(np.linalg.norm(fg, axis=1), 1.0, atol=0.02)
            # one quantisation step above zero at most
            self.assertTrue(np.all(fg[:, 2] <= 1.0 / 127.5))
            background = depth.pixels == 0
            self.assertFalse(np.any(normal_map.pixels[background]))

    def test_border_and_background_neighbours_are_blank(self):
        pixels = np.zeros((5, 5), dtype=np.uint16)
        pixels[1:4, 1:4] = 500
        normal_map = depth_to_normals(DepthImage(pixels), 100.0, 2.5, 2.5)
        _, mask = decode_normals(normal_map)
        expected = np.zeros((5, 5), dtype=bool)
        expected[2, 2] = True
        np.testing.assert_array_equal(mask, expected)

    def test_encoding_of_background(self):
        normals = np.zeros((2, 2, 3))
        normals[..., 2] = -1.0
        valid = np.array([[True, False], [False, True]])
        encoded = encode_normals(normals, valid)
        self.assertEqual(tuple(encoded.pixels[0, 1]), (0, 0, 0))
        self.assertEqual(tuple(encoded.pixels[0, 0]), (128, 128, 0))


if __name__ == "__main__":
    unittest.main()
