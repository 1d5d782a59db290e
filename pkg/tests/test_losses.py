import unittest

import numpy as np

from pica import diffcore as dc
from pica.config import LossWeights
from pica.diffcore import Tape, Tensor, backward
from pica.geometry import cotangent_laplacian, make_grid_topology, sample_position_map
from pica.losses import (
    breakdown,
    depth_loss,
    image_loss,
    kl_loss,
    laplacian_weights,
    mesh_loss,
    mesh_mask,
    normal_loss,
    smoothness_loss,
    total_loss,
)
from pica.raster import look_at


def flat_posmap(R, z=50.0):
    centres = (np.arange(R) + 0.5) / R
    u, v = np.meshgrid(centres, centres)
    return np.stack([(u - 0.5) * 200.0, (0.5 - v) * 200.0, np.full_like(u, z)], axis=2)


class TestMasks(unittest.TestCase):

    def test_detail_weights(self):
        topo = make_grid_topology(11, 11)
        W_L = laplacian_weights(topo, (0.5, 0.5), 0.11)
        self.assertEqual(int((W_L == 1.25).sum()), 5)
        self.assertEqual(int((W_L == 0.25).sum()), 116)
        W_M = mesh_mask(topo, (0.5, 0.5), 0.11)
        self.assertEqual(int(W_M.sum()), 116)
        self.assertFalse(W_M[60])


class TestImageAndDepth(unittest.TestCase):
    """Screen-space terms"""

    def setUp(self):
        self.coverage = np.zeros((6, 6), dtype=bool)
        self.coverage[1:4, 1:5] = True

    def test_image_loss_counts_covered_pixels_only(self):
        I = np.full((3, 6, 6), 0.5)
        target = np.zeros((3, 6, 6))
        loss, covered = image_loss(Tensor(I), target, self.coverage)
        self.assertTrue(covered)
        self.assertAlmostEqual(loss.item(), 0.25, places=6)
        I[:, 0, 0] = 9.0
        again, _ = image_loss(Tensor(I), target, self.coverage)
        self.assertAlmostEqual(again.item(), 0.25, places=6)

    def test_image_loss_without_coverage(self):
        loss, covered = image_loss(Tensor(np.ones((3, 6, 6))), np.zeros((3, 6, 6)), np.zeros((6, 6), dtype=bool))
        self.assertFalse(covered)
        self.assertEqual(loss.item(), 0.0)
        with self.assertRaises(dc.ShapeError):
            image_loss(Tensor(np.ones((3, 6, 6))), np.zeros((3, 5, 6)), self.coverage)

    def test_depth_loss_gates_outliers(self):
        D = np.full((6, 6), 500.0)
        D[2, 2] = np.nan
        D[2, 3] = 0.0
        D_hat = np.full((6, 6), 503.0)
        D_hat[3, 4] = 560.0
        loss, W_D = depth_loss(D, Tensor(D_hat), self.coverage, gate_mm=10.0)
        # 12 covered pixels minus the NaN, the zero and the outlier
        self.assertEqual(int(W_D.sum()), 9)
        self.assertFalse(W_D[3, 4])
        self.assertAlmostEqual(loss.item(), 3.0, places=4)

    def test_depth_loss_gradient_is_sign(self):
        D = np.full((6, 6), 500.0)
        D_hat = Tensor(np.full((6, 6), 497.0), requires_grad=True)
        with Tape() as tape:
            loss, W_D = depth_loss(D, D_hat, self.coverage)
        grads = backward(tape, loss)
        np.testing.assert_allclose(grads[D_hat][self.coverage], -1.0 / 12, rtol=1e-5)
        np.testing.assert_array_equal(grads[D_hat][~self.coverage], 0.0)

    def test_depth_loss_empty_mask(self):
        loss, W_D = depth_loss(np.full((6, 6), np.nan), Tensor(np.ones((6, 6))), self.coverage)
        self.assertEqual(loss.item(), 0.0)
        self.assertFalse(W_D.any())


class TestNormalLoss(unittest.TestCase):

    def setUp(self):
        self.camera = look_at((0.0, 0.0, 500.0), (0.0, 0.0, 0.0), 20.0, 12, 12)
        self.W_D = np.ones((12, 12), dtype=bool)

    def test_identical_depth_gives_zero(self):
        D = np.full((12, 12), 500.0)
        loss = normal_loss(D, Tensor(D), self.W_D, self.camera)
        self.assertAlmostEqual(loss.item(), 0.0, places=6)

    def test_tilted_prediction_is_penalised(self):
        D = np.full((12, 12), 500.0)
        tilted = 500.0 + np.arange(12)[None, :] * 20.0 + np.zeros((12, 1))
        loss = normal_loss(D, Tensor(tilted), self.W_D, self.camera)
        self.assertGreater(loss.item(), 1e-3)

    def test_nothing_valid(self):
        D = np.full((12, 12), 500.0)
        loss = normal_loss(D, Tensor(D), np.zeros((12, 12), dtype=bool), self.camera)
        self.assertEqual(loss.item(), 0.0)


class TestGeometryTerms(unittest.TestCase):
    """Coarse-mesh supervision and smoothness regularisation"""

    def setUp(self):
        self.R = 8
        self.topo_coarse = make_grid_topology(5, 5, 0.5 / self.R)
        self.topo_dense = make_grid_topology(7, 7, 0.5 / self.R)
        self.M_t = flat_posmap(self.R)

    def test_mesh_loss_offset(self):
        G = Tensor(self.M_t + np.array([2.0, 0.0, 0.0]))
        W_M = np.ones(25, dtype=bool)
        self.assertAlmostEqual(mesh_loss(G, self.M_t, self.topo_coarse, W_M).item(), 4.0, places=3)

    def test_mesh_loss_ignores_masked_vertices(self):
        shifted = self.M_t.copy()
        shifted[..., 2] += 1000.0
        W_M = np.zeros(25, dtype=bool)
        self.assertEqual(mesh_loss(Tensor(shifted), self.M_t, self.topo_coarse, W_M).item(), 0.0)

    def test_smoothness_of_ramp(self):
        G = np.zeros((self.R, self.R, 3))
        G[..., 0] = np.arange(self.R)[None, :]
        L = cotangent_laplacian(self.topo_dense, sample_position_map(Tensor(flat_posmap(self.R)), self.topo_dense).data)
        W_L = np.ones(49)
        V_mu = np.zeros((49, 3))
        loss = smoothness_loss(Tensor(G), self.topo_dense, L, W_L, V_mu, lambda_g=1.0, lambda_l=0.0)
        expected = (self.R - 1) / (3.0 * self.R)
        self.assertAlmostEqual(loss.item(), expected, places=5)

    def test_laplacian_term_ignores_translation(self):
        """A rigid shift away from V_mu is not penalised"""
        neutral = sample_position_map(Tensor(self.M_t), self.topo_dense).data.astype(np.float64)
        L = cotangent_laplacian(self.topo_dense, neutral)
        shifted = Tensor(self.M_t + np.array([5.0, -3.0, 7.0]))
        loss = smoothness_loss(shifted, self.topo_dense, L, np.ones(49), neutral, lambda_g=0.0, lambda_l=1.0)
        self.assertLess(loss.item(), 1e-4)
        bumped = self.M_t.copy()
        bumped[4, 4, 2] += 10.0
        loss = smoothness_loss(Tensor(bumped), self.topo_dense, L, np.ones(49), neutral, lambda_g=0.0, lambda_l=1.0)
        self.assertGreater(loss.item(), 1e-3)


class TestKlAndTotal(unittest.TestCase):

    def test_kl_values(self):
        zeros = Tensor(np.zeros((4, 8, 8)))
        self.assertAlmostEqual(kl_loss(zeros, zeros).item(), 0.0, places=6)
        mu = np.zeros((4, 8, 8))
        mu[0, 0, 0] = 1.0
        self.assertAlmostEqual(kl_loss(Tensor(mu), zeros).item(), 0.5, places=6)
        batch = kl_loss([Tensor(mu), zeros], [zeros, zeros])
        self.assertAlmostEqual(batch.item(), 0.25, places=6)

    def test_kl_gradient(self):
        mu = Tensor(np.random.default_rng(1).standard_normal((2, 3)), requires_grad=True)
        logvar = Tensor(np.zeros((2, 3)), requires_grad=True)
        with Tape() as tape:
            loss = kl_loss(mu, logvar)
        grads = backward(tape, loss)
        np.testing.assert_allclose(grads[mu], mu.data, rtol=1e-5)
        np.testing.assert_allclose(grads[logvar], 0.0, atol=1e-6)

    def test_kl_validation(self):
        with self.assertRaises(ValueError):
            kl_loss([], [])
        with self.assertRaises(dc.ShapeError):
            kl_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_total_weights(self):
        weights = LossWeights()
        total = total_loss({"image": Tensor(1.0), "depth": 1.0, "kl": Tensor(2.0)}, weights)
        self.assertAlmostEqual(total.item(), 2.0 + 10.0 + 0.002, places=5)
        with self.assertRaises(ValueError):
            total_loss({"albedo": 1.0}, weights)
        with self.assertRaises(ValueError):
            LossWeights(lambda_i=-1.0)

    def test_breakdown(self):
        parts = breakdown({"image": Tensor(0.5), "mesh": 2})
        self.assertEqual(parts, {"image": 0.5, "mesh": 2.0})


if __name__ == "__main__":
    unittest.main()
