import tempfile
import unittest
from pathlib import Path

import numpy as np

from pica import diffcore as dc
from pica.diffcore import Tape, Tensor, backward
from pica.geometry import (
    MeshTopology,
    cotangent_laplacian,
    detail_vertex_mask,
    ema_update,
    grad_xy,
    make_grid_topology,
    mesh_to_position_map,
    neutral_target,
    read_obj,
    sample_position_map,
    write_obj,
)


def plane(uvs, tilt=(0.3, -0.2)):
    """points on a tilted plane, linear in uv"""
    x = uvs[:, 0] * 100.0
    y = uvs[:, 1] * 80.0
    return np.stack([x, y, tilt[0] * x + tilt[1] * y + 5.0], axis=1)


class TestTopology(unittest.TestCase):
    """Grid construction and validation"""

    def test_grid_counts(self):
        topo = make_grid_topology(4, 5, 0.1)
        self.assertEqual(topo.vertex_count, 20)
        self.assertEqual(topo.triangle_count, 2 * 3 * 4)
        self.assertAlmostEqual(topo.vertex_uvs.min(), 0.1)
        self.assertAlmostEqual(topo.vertex_uvs.max(), 0.9)

    def test_grid_edges(self):
        """Each cell adds one diagonal to the grid lines"""
        topo = make_grid_topology(3, 3)
        self.assertEqual(len(topo.edges()), 12 + 4)

    def test_consistent_winding(self):
        topo = make_grid_topology(4, 4)
        uv = topo.vertex_uvs[topo.triangles]
        signed = np.cross(uv[:, 1] - uv[:, 0], uv[:, 2] - uv[:, 0])
        self.assertTrue(np.all(signed > 0) or np.all(signed < 0))

    def test_random_points_land_in_exactly_one_triangle(self):
        """The grid tiles its uv square with no gaps and no overlaps"""
        for rows, cols, margin in ((7, 9, 0.05), (3, 3, 0.0), (17, 17, 0.02)):
            with self.subTest(grid=(rows, cols)):
                topo = make_grid_topology(rows, cols, margin)
                points = np.random.default_rng(rows).uniform(margin, 1.0 - margin, (1000, 2))
                tri = topo.vertex_uvs[topo.triangles]
                a, e0, e1 = tri[:, 0], tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
                det = e0[:, 0] * e1[:, 1] - e0[:, 1] * e1[:, 0]
                d = points[:, None, :] - a[None]
                s = (d[..., 0] * e1[:, 1] - d[..., 1] * e1[:, 0]) / det
                t = (e0[:, 0] * d[..., 1] - e0[:, 1] * d[..., 0]) / det
                inside = (s >= 0) & (t >= 0) & (s + t <= 1)
                np.testing.assert_array_equal(inside.sum(axis=1), 1)

    def test_invalid_topologies(self):
        cases = {
            "index out of range": ([[0, 0], [1, 0], [0, 1]], [[0, 1, 3]]),
            "repeated vertex": ([[0, 0], [1, 0], [0, 1]], [[0, 1, 1]]),
            "uv outside unit square": ([[0, 0], [1.5, 0], [0, 1]], [[0, 1, 2]]),
            "bad uv shape": ([[0, 0, 0]], [[0, 0, 0]]),
        }
        for name, (uvs, tris) in cases.items():
            with self.subTest(case=name):
                with self.assertRaises(ValueError):
                    MeshTopology(np.array(uvs, dtype=float), np.array(tris))
        with self.assertRaises(ValueError):
            make_grid_topology(1, 4)

    def test_detail_mask(self):
        topo = make_grid_topology(11, 11)
        mask = detail_vertex_mask(topo, (0.5, 0.5), 0.11)
        # centre plus its four axis neighbours
        self.assertEqual(int(mask.sum()), 5)


class TestPositionMaps(unittest.TestCase):
    """Sampling vertices from maps and rasterizing meshes into maps"""

    def test_sample_constant_map(self):
        topo = make_grid_topology(3, 3, 0.1)
        G = Tensor(np.tile([1.0, 2.0, 3.0], (8, 8, 1)))
        out = sample_position_map(G, topo).data
        np.testing.assert_allclose(out, np.tile([1.0, 2.0, 3.0], (9, 1)), rtol=1e-6)

    def test_round_trip_interior_vertices(self):
        """Sampling the rasterized map recovers a linear mesh"""
        R = 32
        topo = make_grid_topology(9, 9, 0.5 / R)
        positions = plane(topo.vertex_uvs)
        with dc.precision(np.float64):
            G = mesh_to_position_map(positions, topo, R)
            back = sample_position_map(Tensor(G), topo).data
        interior = np.all((topo.vertex_uvs > 0.1) & (topo.vertex_uvs < 0.9), axis=1)
        err = np.linalg.norm(back[interior] - positions[interior], axis=1)
        self.assertLess(err.max() / np.linalg.norm(positions[interior], axis=1).min(), 1e-3)

    def test_uncovered_texels_copy_nearest(self):
        R = 16
        topo = make_grid_topology(3, 3, 0.25)
        G = mesh_to_position_map(plane(topo.vertex_uvs), topo, R)
        self.assertEqual(G.shape, (R, R, 3))
        self.assertTrue(np.all(np.isfinite(G)))
        np.testing.assert_allclose(G[0, 0], G[4, 4])

    def test_wrong_vertex_count(self):
        topo = make_grid_topology(3, 3)
        with self.assertRaises(ValueError):
            mesh_to_position_map(np.zeros((8, 3)), topo, 8)

    def test_empty_mesh_rejected(self):
        topo = MeshTopology(np.array([[0.5, 0.5], [0.5, 0.5], [0.6, 0.5]]), np.array([[0, 1, 2]]))
        with self.assertLogs("pica.geometry", level="WARNING"):
            with self.assertRaises(ValueError):
                mesh_to_position_map(np.zeros((3, 3)), topo, 8)


class TestLaplacian(unittest.TestCase):
    """Cotangent Laplacian over the neutral mesh"""

    def setUp(self):
        self.topo = make_grid_topology(6, 6, 0.05)
        self.neutral = plane(self.topo.vertex_uvs)
        self.L = cotangent_laplacian(self.topo, self.neutral)

    def test_symmetric_with_zero_row_sums(self):
        dense = self.L.toarray()
        np.testing.assert_allclose(dense, dense.T, atol=1e-12)
        np.testing.assert_allclose(dense.sum(axis=1), 0.0, atol=1e-9)
        self.assertTrue(np.all(np.diag(dense) > 0))

    def test_linear_function_is_harmonic(self):
        """L of a planar embedding vanishes at interior vertices"""
        out = self.L @ self.neutral
        uv = self.topo.vertex_uvs
        interior = np.all((uv > 0.06) & (uv < 0.94), axis=1)
        self.assertTrue(interior.any())
        self.assertLess(np.abs(out[interior]).max(), 1e-5)

    def test_right_isoceles_weights(self):
        """On a square grid the cot weights of the axis edges are 1 (two 45° angles)"""
        topo = make_grid_topology(3, 3)
        flat = np.concatenate([topo.vertex_uvs, np.zeros((9, 1))], axis=1)
        L = cotangent_laplacian(topo, flat).toarray()
        # centre vertex: four axis edges of weight 1, diagonals of weight 0
        self.assertAlmostEqual(L[4, 4], 4.0)
        self.assertAlmostEqual(L[4, 1], -1.0)

    def test_positive_semidefinite(self):
        rng = np.random.default_rng(8)
        bumpy = self.neutral + np.concatenate([np.zeros((36, 2)), rng.uniform(-3, 3, (36, 1))], axis=1)
        for name, positions in (("tilted plane", self.neutral), ("bumpy", bumpy)):
            with self.subTest(mesh=name):
                dense = cotangent_laplacian(self.topo, positions).toarray()
                eigenvalues = np.linalg.eigvalsh(0.5 * (dense + dense.T))
                self.assertGreaterEqual(eigenvalues.min(), -1e-8 * eigenvalues.max())
                # constants are in the null space
                self.assertLess(abs(eigenvalues.min()), 1e-8 * eigenvalues.max())

    def test_degenerate_triangles_are_clamped(self):
        collapsed = self.neutral.copy()
        collapsed[7] = collapsed[8]
        with self.assertLogs("pica.geometry", level="WARNING"):
            L = cotangent_laplacian(self.topo, collapsed)
        self.assertTrue(np.all(np.isfinite(L.data)))
        self.assertLessEqual(np.abs(L.data).max(), 1e5)


class TestGradientsAndTargets(unittest.TestCase):

    def test_grad_xy_of_ramp(self):
        ramp = np.zeros((4, 5, 3))
        ramp[..., 0] = np.arange(5)[None, :] * 2.0
        ramp[..., 1] = np.arange(4)[:, None] * 3.0
        with dc.precision(np.float64):
            dx, dy = grad_xy(Tensor(ramp))
        np.testing.assert_allclose(dx.data[:, :-1, 0], 2.0)
        np.testing.assert_allclose(dx.data[:, -1], 0.0)
        np.testing.assert_allclose(dy.data[:-1, :, 1], 3.0)
        np.testing.assert_allclose(dy.data[-1], 0.0)

    def test_grad_xy_is_linear(self):
        rng = np.random.default_rng(6)
        A, B = rng.standard_normal((2, 5, 4, 3))
        with dc.precision(np.float64):
            combined = grad_xy(Tensor(2.0 * A - 0.5 * B))
            parts_a = grad_xy(Tensor(A))
            parts_b = grad_xy(Tensor(B))
        for axis in range(2):
            with self.subTest(axis="xy"[axis]):
                np.testing.assert_allclose(
                    combined[axis].data, 2.0 * parts_a[axis].data - 0.5 * parts_b[axis].data, atol=1e-12
                )

    def test_grad_xy_is_differentiable(self):
        with dc.precision(np.float64):
            G = Tensor(np.random.default_rng(0).standard_normal((3, 3, 3)), requires_grad=True)
            with Tape() as tape:
                dx, dy = grad_xy(G)
                loss = dc.sum(dx) + dc.sum(dy)
            grads = backward(tape, loss)
        # telescoping sums: +1 on the far edge, −1 on the near edge
        self.assertEqual(grads[G][0, 0, 0], -2.0)
        self.assertEqual(grads[G][2, 2, 0], 2.0)
        self.assertEqual(grads[G][1, 1, 0], 0.0)

    def test_ema_update(self):
        target = neutral_target(np.zeros((2, 3)), rate=0.5)
        batch = np.stack([np.ones((2, 3)), 3.0 * np.ones((2, 3))])
        updated = ema_update(target, batch)
        np.testing.assert_allclose(updated.v_mu, 1.0)
        np.testing.assert_allclose(target.v_mu, 0.0)
        with self.assertRaises(ValueError):
            ema_update(target, np.ones((3, 3)))


class TestObj(unittest.TestCase):

    def test_write_then_read(self):
        topo = make_grid_topology(3, 4, 0.1)
        positions = plane(topo.vertex_uvs)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "mesh.obj"
            write_obj(path, positions, topo)
            text = path.read_text()
            back, back_topo = read_obj(path)
        self.assertIn("f 1/1 ", text)
        np.testing.assert_allclose(back, positions, atol=1e-5)
        np.testing.assert_array_equal(back_topo.triangles, topo.triangles)


if __name__ == "__main__":
    unittest.main()
