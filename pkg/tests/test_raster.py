import tempfile
import unittest
from pathlib import Path

import numpy as np

from pica import diffcore as dc
from pica.diffcore import Tape, Tensor, backward
from pica.geometry import MeshTopology, make_grid_topology
from pica.raster import (
    Camera,
    _cover,
    depth_to_normals,
    interpolate_depth,
    look_at,
    project,
    rasterize,
    save_gbuffer_images,
    scan_convert,
    screen_inputs,
    unproject,
    view_direction,
)


def front_camera(size=32, focal=50.0, distance=500.0):
    return look_at((0.0, 0.0, distance), (0.0, 0.0, 0.0), focal, size, size)


def square(topo, half=100.0, z=0.0):
    uv = topo.vertex_uvs
    return np.stack([(uv[:, 0] - 0.5) * 2 * half, (0.5 - uv[:, 1]) * 2 * half, np.full(len(uv), z)], axis=1)


def brute_force_cover(xy, triangles, width, height):
    """(triangle, pixel) pairs whose pixel centre lies strictly inside"""
    cx, cy = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    cx, cy = cx.ravel(), cy.ravel()
    pairs = set()
    for t, (a, b, c) in enumerate(xy[triangles]):
        w = []
        for p, q in ((b, c), (c, a), (a, b)):
            w.append((q[0] - p[0]) * (cy - p[1]) - (q[1] - p[1]) * (cx - p[0]))
        w = np.stack(w)
        inside = np.all(w > 0, axis=0) | np.all(w < 0, axis=0)
        pairs.update((t, int(p)) for p in np.nonzero(inside)[0])
    return pairs


class TestCamera(unittest.TestCase):
    """Pinhole model, look-at construction and projection"""

    def test_look_at_axes(self):
        cam = front_camera()
        np.testing.assert_allclose(cam.R, [[1, 0, 0], [0, -1, 0], [0, 0, -1]], atol=1e-12)
        np.testing.assert_allclose(cam.center, [0.0, 0.0, 500.0])

    def test_project_centre_and_offsets(self):
        cam = front_camera()
        sx, sy, z = project(cam, np.array([[0.0, 0.0, 0.0], [10.0, 10.0, 0.0]]))
        np.testing.assert_allclose(sx, [16.0, 17.0])
        # world up is screen up: y grows downward on screen
        np.testing.assert_allclose(sy, [16.0, 15.0])
        np.testing.assert_allclose(z, [500.0, 500.0])

    def test_doubling_focal_doubles_offset(self):
        a = project(front_camera(focal=50.0), np.array([[20.0, 0.0, 0.0]]))[0] - 16.0
        b = project(front_camera(focal=100.0), np.array([[20.0, 0.0, 0.0]]))[0] - 16.0
        np.testing.assert_allclose(b, 2 * a)

    def test_unproject_inverts_project(self):
        cam = look_at((120.0, 40.0, 400.0), (0.0, 0.0, 20.0), 60.0, 48, 40)
        pts = np.random.default_rng(0).uniform(-50, 50, (20, 3))
        sx, sy, z = project(cam, pts)
        np.testing.assert_allclose(unproject(cam, sx, sy, z), pts, atol=1e-9)

    def test_points_behind_near_plane(self):
        sx, sy, z = project(front_camera(), np.array([[0.0, 0.0, 600.0], [0.0, 0.0, 499.5]]))
        self.assertTrue(np.isnan(sx).all())
        self.assertTrue(np.isnan(sy).all())

    def test_view_direction(self):
        np.testing.assert_allclose(view_direction(front_camera()), [0.0, 0.0, -1.0], atol=1e-12)
        cam = Camera(np.eye(3), np.eye(3), np.zeros(3), 8, 8)
        with self.assertRaises(ValueError):
            view_direction(cam)

    def test_invalid_cameras(self):
        with self.assertRaises(ValueError):
            Camera(np.eye(3), 2 * np.eye(3), np.ones(3), 8, 8)
        with self.assertRaises(ValueError):
            Camera(np.diag([0.0, 1.0, 1.0]), np.eye(3), np.ones(3), 8, 8)
        with self.assertRaises(ValueError):
            look_at((0, 0, 0), (0, 0, 0), 10.0, 8, 8)

    def test_dict_round_trip(self):
        cam = front_camera()
        back = Camera.from_dict(cam.to_dict())
        np.testing.assert_array_equal(back.R, cam.R)
        self.assertEqual((back.width, back.height), (32, 32))


class TestScanConversion(unittest.TestCase):
    """Pixel-centre coverage and the top-left ownership rule"""

    def test_random_triangles_match_oracle(self):
        """Coverage equals the brute-force point-in-triangle test"""
        rng = np.random.default_rng(7)
        xy = rng.uniform(-4.0, 36.0, (3000, 2))
        triangles = np.arange(3000).reshape(1000, 3)
        tris, pixels, bary, skipped = _cover(xy, triangles, 32, 32)
        self.assertEqual(skipped, 0)
        self.assertEqual(set(zip(tris.tolist(), pixels.tolist())), brute_force_cover(xy, triangles, 32, 32))
        np.testing.assert_allclose(bary.sum(axis=1), 1.0, atol=1e-9)
        self.assertGreaterEqual(bary.min(), -1e-6)

    def test_shared_edges_write_once(self):
        """Edges through pixel centres belong to exactly one triangle"""
        xy = np.array([[0, 0], [4.5, 0], [9, 0], [0, 9], [4.5, 9], [9, 9]], dtype=float)
        fixtures = {
            "ccw": np.array([[0, 1, 4], [0, 4, 3], [1, 2, 5], [1, 5, 4]]),
            "mixed winding": np.array([[0, 4, 1], [0, 4, 3], [1, 5, 2], [1, 5, 4]]),
        }
        for name, triangles in fixtures.items():
            with self.subTest(fixture=name):
                _, pixels, _, _ = _cover(xy, triangles, 9, 9)
                counts = np.bincount(pixels, minlength=81)
                np.testing.assert_array_equal(counts, np.ones(81, dtype=int))

    def test_diagonal_split(self):
        xy = np.array([[0, 0], [8, 0], [8, 8], [0, 8]], dtype=float)
        _, pixels, _, _ = _cover(xy, np.array([[0, 1, 2], [0, 2, 3]]), 8, 8)
        np.testing.assert_array_equal(np.bincount(pixels, minlength=64), np.ones(64, dtype=int))

    def test_zero_area_skipped(self):
        xy = np.array([[1, 1], [5, 5], [9, 9]], dtype=float)
        tri_id, _, skipped = scan_convert(xy, np.array([[0, 1, 2]]), 10, 10)
        self.assertEqual(skipped, 1)
        self.assertTrue(np.all(tri_id == -1))


class TestRasterize(unittest.TestCase):
    """G-buffer contents from a perspective camera"""

    def setUp(self):
        self.cam = front_camera()
        self.topo = make_grid_topology(3, 3)
        self.vertices = square(self.topo)

    def test_coverage_and_barycentrics(self):
        gb = rasterize(self.vertices, self.topo, self.cam)
        cov = gb.coverage
        # 200 mm at 500 mm with f = 50 spans 20 pixels
        self.assertEqual(gb.n_covered, 400)
        np.testing.assert_allclose(gb.bary[cov].sum(axis=1), 1.0, atol=1e-5)
        self.assertGreaterEqual(gb.bary[cov].min(), -1e-6)
        self.assertTrue(np.all(np.isinf(gb.depth[~cov])))
        np.testing.assert_allclose(gb.depth[cov], 500.0)
        np.testing.assert_array_equal(gb.pixel_index, np.flatnonzero(cov))

    def test_attributes_are_perspective_correct(self):
        """Interpolated positions project back onto their pixel centres"""
        cam = look_at((150.0, 60.0, 380.0), (0.0, 0.0, 0.0), 40.0, 32, 32)
        tilted = self.vertices.copy()
        tilted[:, 2] = 0.4 * tilted[:, 0]
        gb = rasterize(tilted, self.topo, cam)
        rows, cols = np.nonzero(gb.coverage)
        self.assertGreater(len(rows), 50)
        sx, sy, z = project(cam, gb.xyz[rows, cols])
        np.testing.assert_allclose(sx, cols + 0.5, atol=1e-6)
        np.testing.assert_allclose(sy, rows + 0.5, atol=1e-6)
        np.testing.assert_allclose(z, gb.depth[rows, cols], rtol=1e-9)
        # uv is linear on the square
        np.testing.assert_allclose(gb.xyz[rows, cols, 0], (gb.uv[rows, cols, 0] - 0.5) * 200.0, atol=1e-6)

    def test_nearest_surface_wins(self):
        near = square(self.topo, half=50.0, z=100.0)
        merged = MeshTopology(
            np.concatenate([self.topo.vertex_uvs, self.topo.vertex_uvs]),
            np.concatenate([self.topo.triangles, self.topo.triangles + 9]),
        )
        gb = rasterize(np.concatenate([self.vertices, near]), merged, self.cam)
        self.assertAlmostEqual(gb.depth[16, 16], 400.0)
        self.assertGreaterEqual(gb.triangle_id[16, 16], self.topo.triangle_count)
        self.assertAlmostEqual(gb.depth[8, 8], 500.0)

    def test_mesh_behind_camera_is_empty(self):
        behind = square(self.topo, z=800.0)
        with self.assertLogs("pica.raster", level="WARNING"):
            gb = rasterize(behind, self.topo, self.cam)
        self.assertEqual(gb.n_covered, 0)

    def test_rejects_bad_vertices(self):
        with self.assertRaises(ValueError):
            rasterize(np.zeros((4, 3)), self.topo, self.cam)
        bad = self.vertices.copy()
        bad[0, 0] = np.nan
        with self.assertRaises(ValueError):
            rasterize(bad, self.topo, self.cam)

    def test_interpolated_depth_matches_and_differentiates(self):
        gb = rasterize(self.vertices, self.topo, self.cam)
        with dc.precision(np.float64):
            v = Tensor(self.vertices, requires_grad=True)
            with Tape() as tape:
                depth = interpolate_depth(v, self.topo, self.cam, gb)
                loss = dc.sum(depth)
            grads = backward(tape, loss)
        np.testing.assert_allclose(depth.data[gb.coverage], gb.depth[gb.coverage])
        np.testing.assert_array_equal(depth.data[~gb.coverage], 0.0)
        g = grads[v]
        # moving the plane toward the camera (+z) reduces depth
        self.assertTrue(np.all(g[:, 2] <= 1e-12))
        np.testing.assert_allclose(g[:, :2], 0.0, atol=1e-9)
        self.assertAlmostEqual(float(g[:, 2].sum()), -400.0, places=6)

    def test_screen_inputs(self):
        gb = rasterize(self.vertices, self.topo, self.cam)
        E = Tensor(np.ones((8, 8, 4)))
        pixels = screen_inputs(gb, E)
        self.assertEqual(pixels.z.shape, (400, 4))
        self.assertEqual(pixels.uv.shape, (400, 2))
        self.assertEqual((pixels.height, pixels.width), (32, 32))

    def test_gbuffer_images(self):
        gb = rasterize(self.vertices, self.topo, self.cam)
        with tempfile.TemporaryDirectory() as tmp:
            save_gbuffer_images(gb, tmp, prefix="g")
            names = sorted(p.name for p in Path(tmp).iterdir())
        self.assertEqual(names, ["g_coverage.png", "g_depth.png", "g_triangle_id.png"])


class TestNormals(unittest.TestCase):

    def test_fronto_parallel_plane(self):
        cam = front_camera(size=8)
        normals, keep = depth_to_normals(np.full((8, 8), 500.0), cam)
        self.assertTrue(keep[1:-1, 1:-1].all())
        self.assertFalse(keep[0].any() or keep[-1].any() or keep[:, 0].any() or keep[:, -1].any())
        np.testing.assert_allclose(normals.data[keep], np.tile([0.0, 0.0, -1.0], (int(keep.sum()), 1)), atol=1e-6)
        np.testing.assert_array_equal(normals.data[~keep], 0.0)

    def test_plane_tilted_45_degrees(self):
        """z = 500 ± x in camera space gives n_x / n_z = ∓1 with n_z < 0"""
        cam = front_camera(size=8)
        cols = np.arange(8) + 0.5
        a = (cols - cam.K[0, 2]) / cam.K[0, 0]
        for slope, ratio in ((1.0, -1.0), (-1.0, 1.0)):
            with self.subTest(slope=slope):
                # ray (a, b, 1) meets the plane at depth 500 / (1 - slope·a)
                depth = np.tile(500.0 / (1.0 - slope * a), (8, 1))
                normals, keep = depth_to_normals(depth, cam)
                n = normals.data[keep].astype(np.float64)
                self.assertTrue(keep.any())
                self.assertTrue(np.all(n[:, 2] < 0))
                np.testing.assert_allclose(n[:, 0] / n[:, 2], ratio, atol=1e-4)
                np.testing.assert_allclose(n[:, 1], 0.0, atol=1e-4)

    def test_invalid_depth_excludes_neighbours(self):
        depth = np.full((8, 8), 500.0)
        depth[3, 3] = np.inf
        _, keep = depth_to_normals(depth, front_camera(size=8))
        for r, c in [(3, 3), (2, 3), (4, 3), (3, 2), (3, 4)]:
            with self.subTest(pixel=(r, c)):
                self.assertFalse(keep[r, c])
        self.assertTrue(keep[5, 5])


if __name__ == "__main__":
    unittest.main()
