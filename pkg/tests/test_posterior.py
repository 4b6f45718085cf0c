from dataclasses import replace

import numpy as np
import pytest
from scipy.special import logsumexp

from activesense.array_model import ArrayGeometry, BeamformerPair, simulate_measurement
from activesense.dual import haar_frame
from activesense.posterior import (
    init_posterior,
    mmse_estimate,
    noise_covariance,
    observation_operator,
    predictive_moments,
    update,
)
from conftest import crandn, random_scene


def batch_posterior(state0, stages, geom):
    """Closed-form posterior from all stages at once (information form)."""
    g_count = len(state0.grid)
    L = state0.n_targets
    lw = np.empty(g_count)
    means = np.empty((g_count, L), complex)
    covs = np.empty((g_count, L, L), complex)
    ys = np.concatenate([s.y.reshape(-1, order="F") for s in stages])
    for g, phi in enumerate(state0.grid.points):
        cs = [observation_operator(phi, BeamformerPair(s.v, s.w), geom) for s in stages]
        ns = [noise_covariance(s.w, s.v.shape[1]) for s in stages]
        c = np.vstack(cs)
        n = np.zeros((c.shape[0], c.shape[0]), complex)
        o = 0
        for blk in ns:
            n[o : o + blk.shape[0], o : o + blk.shape[0]] = blk
            o += blk.shape[0]
        ninv = np.linalg.inv(n)
        info = np.eye(L) + c.conj().T @ ninv @ c
        cov = np.linalg.inv(info)
        means[g] = cov @ (c.conj().T @ ninv @ ys)
        covs[g] = cov
        sy = c @ c.conj().T + n
        _, logdet = np.linalg.slogdet(sy)
        quad = np.real(ys.conj() @ np.linalg.solve(sy, ys))
        lw[g] = state0.grid.log_weights[g] - ys.size * np.log(np.pi) - logdet - quad
    return lw - logsumexp(lw), means, covs


def random_pair(rng, geom, m_tx, m_rx, power=2.0):
    return BeamformerPair(np.sqrt(power / m_tx) * haar_frame(rng, geom.n_tx, m_tx), haar_frame(rng, geom.n_rx, m_rx))


class TestInit:
    def test_uniform_weights_and_unit_covariance(self):
        st = init_posterior((-np.pi / 3, np.pi / 3), 4, 1)
        np.testing.assert_allclose(st.grid.weights, 0.25)
        np.testing.assert_allclose(st.grid.points[:, 0], np.linspace(-np.pi / 3, np.pi / 3, 4))
        assert np.all(st.means == 0)
        np.testing.assert_array_equal(st.covs, np.ones((4, 1, 1)))

    def test_two_target_product_grid(self):
        st = init_posterior((0, 1), 3, 2)
        assert st.grid.points.shape == (9, 2)
        np.testing.assert_allclose(st.grid.weights, 1 / 9)
        np.testing.assert_allclose(st.entropy(), np.log(9))
        np.testing.assert_array_equal(st.covs[5], np.eye(2))

    @pytest.mark.parametrize("k,L", [(1, 1), (0, 1), (4, 3)])
    def test_rejects_bad_sizes(self, k, L):
        with pytest.raises(ValueError):
            init_posterior((0, 1), k, L)

    def test_grid_cap(self):
        with pytest.raises(ValueError):
            init_posterior((0, 1), 2048, 2)


class TestPredictive:
    def test_monte_carlo_moments(self, rng):
        geom = ArrayGeometry(3, 4)
        st = init_posterior((-1, 1), 4, 2)
        g = 6
        st.means[g] = [0.5 - 0.2j, -1 + 1j]
        a = crandn(rng, 2, 2) * 0.5
        st.covs[g] = a @ a.conj().T + 0.1 * np.eye(2)
        pair = random_pair(rng, geom, 2, 3)
        mu_y, s_ay, s_y = predictive_moments(st, g, pair, geom)

        n = 200_000
        chol = np.linalg.cholesky(st.covs[g])
        alpha = st.means[g] + (crandn(rng, n, 2) * np.sqrt(0.5)) @ chol.T
        c = observation_operator(st.grid.points[g], pair, geom)
        nz = (crandn(rng, n, geom.n_rx, 2) * np.sqrt(0.5))
        noise = np.einsum("ab,nbt->nta", pair.w.conj().T, nz).reshape(n, -1)
        y = alpha @ c.T + noise
        emp_mean = y.mean(0)
        d = y - emp_mean
        emp_cov = d.T @ d.conj() / n
        emp_cross = (alpha - alpha.mean(0)).T @ d.conj() / n
        scale = np.sqrt(np.abs(np.diag(s_y)).max())
        tol = 6 * scale**2 / np.sqrt(n)
        assert np.abs(emp_mean - mu_y).max() < 6 * scale / np.sqrt(n)
        assert np.abs(emp_cov - s_y).max() < tol
        assert np.abs(emp_cross - s_ay).max() < tol

    def test_index_out_of_range(self, rng):
        geom = ArrayGeometry(2, 2)
        st = init_posterior((-1, 1), 4, 1)
        with pytest.raises(IndexError):
            predictive_moments(st, 4, random_pair(rng, geom, 1, 1), geom)


class TestUpdate:
    @pytest.mark.parametrize("L", [1, 2])
    def test_sequential_matches_batch(self, rng, L):
        geom = ArrayGeometry(3, 4)
        for _ in range(3):
            st0 = init_posterior((-np.pi / 3, np.pi / 3), 4 if L == 2 else 16, L)
            scene = random_scene(rng, L)
            st = st0
            for _ in range(4):
                pair = random_pair(rng, geom, int(rng.integers(1, 3)), int(rng.integers(1, 4)))
                st = update(st, pair, simulate_measurement(scene, geom, pair, rng), geom)
            lw, means, covs = batch_posterior(st0, st.history, geom)
            np.testing.assert_allclose(st.grid.log_weights, lw, atol=1e-8)
            np.testing.assert_allclose(st.means, means, atol=1e-8)
            np.testing.assert_allclose(st.covs, covs, atol=1e-8)

    def test_brute_force_bayes_sixteen_points(self, rng):
        geom = ArrayGeometry(2, 3)
        st0 = init_posterior((-1, 1), 16, 1)
        scene = random_scene(rng, 1)
        pair = random_pair(rng, geom, 1, 2)
        y = simulate_measurement(scene, geom, pair, rng)
        st = update(st0, pair, y, geom)
        # independent per-point evaluation of the Gaussian marginal likelihood
        ll = []
        for phi in st0.grid.points:
            c = observation_operator(phi, pair, geom)
            sy = c @ c.conj().T + noise_covariance(pair.w, 1)
            r = y.reshape(-1, order="F")
            ll.append(-np.real(r.conj() @ np.linalg.solve(sy, r)) - np.log(np.linalg.det(sy).real))
        p = np.exp(np.array(ll) - logsumexp(ll))
        np.testing.assert_allclose(st.grid.weights, p, atol=1e-12)
        assert st.stage == 1

    def test_zero_transmit_is_uninformative(self, rng):
        geom = ArrayGeometry(2, 3)
        st0 = init_posterior((-1, 1), 8, 1)
        pair = BeamformerPair(np.zeros((2, 1)), haar_frame(rng, 3, 2))
        st = update(st0, pair, crandn(rng, 2, 1), geom)
        np.testing.assert_allclose(st.grid.log_weights, st0.grid.log_weights, atol=1e-14)
        np.testing.assert_allclose(st.covs, st0.covs, atol=1e-14)
        np.testing.assert_allclose(st.means, 0, atol=1e-14)

    def test_weights_normalized_and_covs_psd(self, rng):
        geom = ArrayGeometry(4, 4)
        st = init_posterior((-1, 1), 64, 1)
        scene = random_scene(rng, 1)
        for _ in range(6):
            pair = random_pair(rng, geom, 2, 2, power=1e4)
            st = update(st, pair, simulate_measurement(scene, geom, pair, rng), geom)
        assert abs(logsumexp(st.grid.log_weights)) < 1e-12
        assert np.linalg.eigvalsh(st.covs).min() >= 0
        np.testing.assert_allclose(st.covs, np.conj(np.swapaxes(st.covs, 1, 2)), atol=1e-15)

    def test_concentrates_near_truth(self):
        rng = np.random.default_rng(3)
        geom = ArrayGeometry(4, 4)
        st = init_posterior((-np.pi / 3, np.pi / 3), 256, 1)
        scene = random_scene(rng, 1, -0.8, 0.8)
        for _ in range(8):
            pair = random_pair(rng, geom, 4, 4, power=10.0)
            st = update(st, pair, simulate_measurement(scene, geom, pair, rng), geom)
        est = mmse_estimate(st)
        assert abs(est[0] - scene.angles[0]) < 0.02

    def test_bad_measurement_shape(self, rng):
        geom = ArrayGeometry(2, 2)
        st = init_posterior((-1, 1), 4, 1)
        with pytest.raises(ValueError):
            update(st, random_pair(rng, geom, 1, 2), np.zeros((1, 1)), geom)


class TestEstimate:
    def test_point_mass(self):
        st = init_posterior((-1, 1), 5, 1)
        lw = np.full(5, -np.inf)
        lw[3] = 0
        st.means[3] = 2 - 1j
        st = replace(st, grid=replace(st.grid, log_weights=lw))
        np.testing.assert_allclose(mmse_estimate(st), [0.5, 2, -1])

    def test_two_targets_uniform_prior_sorted(self):
        st = init_posterior((-1, 1), 3, 2)
        est = mmse_estimate(st)
        # sorted tuples of a uniform 3x3 grid: E[min] = -4/9, E[max] = 4/9
        np.testing.assert_allclose(est[:2], [-4 / 9, 4 / 9])
        np.testing.assert_allclose(mmse_estimate(st, sort_labels=False)[:2], [0, 0], atol=1e-15)
