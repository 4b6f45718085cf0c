import numpy as np
import pytest

from activesense.array_model import (
    ArrayGeometry,
    BeamformerPair,
    SceneParams,
    param_index,
    response_hessian,
    response_jacobian,
    simulate_measurement,
    steering_derivative,
    steering_vector,
    target_response,
)
from conftest import crandn, random_scene

FD_STEP = 1e-6


class TestSteering:
    def test_broadside_all_ones(self):
        np.testing.assert_allclose(steering_vector(4, 0.0), np.ones(4))

    def test_endfire_alternates(self):
        np.testing.assert_allclose(steering_vector(2, np.pi / 2), [1, -1], atol=1e-15)

    def test_thirty_degrees(self):
        np.testing.assert_allclose(steering_vector(3, np.pi / 6), [1, 1j, -1], atol=1e-15)

    def test_derivative_examples(self):
        np.testing.assert_allclose(steering_derivative(3, 0.0), [0, 1j * np.pi, 2j * np.pi])
        np.testing.assert_allclose(steering_derivative(5, np.pi / 2), np.zeros(5), atol=1e-15)
        expected = [0, 1j * np.pi * np.sqrt(3) / 2 * np.exp(1j * np.pi / 2)]
        np.testing.assert_allclose(steering_derivative(2, np.pi / 6), expected, atol=1e-15)

    def test_derivative_matches_finite_difference(self, rng):
        for phi in rng.uniform(-1.4, 1.4, 20):
            fd = (steering_vector(6, phi + FD_STEP) - steering_vector(6, phi - FD_STEP)) / (2 * FD_STEP)
            np.testing.assert_allclose(steering_derivative(6, phi), fd, rtol=1e-6, atol=1e-7)

    def test_batched_shape(self):
        assert steering_vector(5, np.zeros((3, 2))).shape == (3, 2, 5)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            steering_vector(3, np.nan)


class TestTargetResponse:
    def test_single_broadside_target(self):
        geom = ArrayGeometry(3, 4)
        np.testing.assert_allclose(target_response(SceneParams([0.0], [1.0]), geom), np.ones((4, 3)))

    def test_zero_coefficient(self):
        geom = ArrayGeometry(3, 4)
        assert not np.any(target_response(SceneParams([0.4], [0.0]), geom))

    def test_sum_of_rank_one_terms(self, rng):
        geom = ArrayGeometry(3, 5)
        scene = random_scene(rng, 2)
        expected = sum(
            a * np.outer(steering_vector(5, p), np.conj(steering_vector(3, p)))
            for p, a in zip(scene.angles, scene.coeffs)
        )
        np.testing.assert_allclose(target_response(scene, geom), expected, atol=1e-13)

    def test_linear_in_each_coefficient(self, rng):
        geom = ArrayGeometry(2, 3)
        scene = random_scene(rng, 2)
        c = 2.5 - 1.5j
        for i in range(2):
            zeroed = scene.coeffs.copy()
            zeroed[i] = 0
            scaled = scene.coeffs.copy()
            scaled[i] *= c
            h0 = target_response(SceneParams(scene.angles, zeroed), geom)
            h1 = target_response(scene, geom) - h0
            hc = target_response(SceneParams(scene.angles, scaled), geom) - h0
            np.testing.assert_allclose(hc, c * h1, atol=1e-13)

    def test_real_vector_layout(self):
        s = SceneParams([0.1, 0.2], [1 + 2j, 3 - 4j])
        np.testing.assert_array_equal(s.as_real_vector(), [0.1, 0.2, 1, 3, 2, -4])
        back = SceneParams.from_real_vector(s.as_real_vector())
        np.testing.assert_array_equal(back.coeffs, s.coeffs)


def _fd_jacobian(scene, geom, i):
    theta = scene.as_real_vector()
    e = np.zeros_like(theta)
    e[i] = FD_STEP
    hp = target_response(SceneParams.from_real_vector(theta + e), geom)
    hm = target_response(SceneParams.from_real_vector(theta - e), geom)
    return (hp - hm) / (2 * FD_STEP)


class TestJacobian:
    def test_re_alpha_at_broadside(self):
        geom = ArrayGeometry(3, 2)
        scene = SceneParams([0.0], [0.7 + 0.2j])
        np.testing.assert_allclose(response_jacobian(scene, geom, 1), np.ones((2, 3)))

    def test_single_antenna_angle_derivative_vanishes(self):
        geom = ArrayGeometry(1, 1)
        assert not np.any(response_jacobian(SceneParams([0.3], [1 + 1j]), geom, 0))

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            response_jacobian(SceneParams([0.3], [1.0]), ArrayGeometry(2, 2), 3)

    def test_finite_difference_100_scenes(self, rng):
        for _ in range(100):
            geom = ArrayGeometry(int(rng.integers(1, 5)), int(rng.integers(1, 5)))
            scene = random_scene(rng, int(rng.integers(1, 3)))
            for i in range(3 * scene.n_targets):
                jac = response_jacobian(scene, geom, i)
                fd = _fd_jacobian(scene, geom, i)
                scale = max(np.abs(jac).max(), 1.0)
                assert np.abs(jac - fd).max() <= 1e-5 * scale


class TestHessian:
    def test_coefficient_pairs_vanish(self, rng):
        geom = ArrayGeometry(3, 3)
        scene = random_scene(rng, 2)
        assert not np.any(response_hessian(scene, geom, 2, 2))  # (Re a1, Re a1)
        assert not np.any(response_hessian(scene, geom, 2, 1))  # (Re a1, phi2)
        assert not np.any(response_hessian(scene, geom, 2, 5))  # (Re a1, Im a2)

    def test_exactly_symmetric(self, rng):
        geom = ArrayGeometry(3, 4)
        scene = random_scene(rng, 2)
        for i in range(6):
            for j in range(6):
                np.testing.assert_array_equal(
                    response_hessian(scene, geom, i, j), response_hessian(scene, geom, j, i)
                )

    def test_finite_difference_of_jacobian(self, rng):
        geom = ArrayGeometry(3, 4)
        for _ in range(20):
            scene = random_scene(rng, 2)
            theta = scene.as_real_vector()
            for i in range(6):
                for j in range(6):
                    e = np.zeros(6)
                    e[j] = FD_STEP
                    jp = response_jacobian(SceneParams.from_real_vector(theta + e), geom, i)
                    jm = response_jacobian(SceneParams.from_real_vector(theta - e), geom, i)
                    fd = (jp - jm) / (2 * FD_STEP)
                    hess = response_hessian(scene, geom, i, j)
                    assert np.abs(hess - fd).max() <= 1e-5 * max(np.abs(hess).max(), 1.0)

    def test_param_index(self):
        assert param_index(0, 2) == ("phi", 0)
        assert param_index(3, 2) == ("re", 1)
        assert param_index(4, 2) == ("im", 0)


class TestMeasurement:
    def test_mean_and_noise_covariance(self, rng):
        geom = ArrayGeometry(3, 4)
        scene = random_scene(rng, 1)
        pair = BeamformerPair(crandn(rng, 3, 2), crandn(rng, 4, 2))
        n = 100_000
        ys = np.stack([simulate_measurement(scene, geom, pair, rng) for _ in range(2000)])
        # large-sample checks drawn in one batch through the noise argument
        z = (rng.standard_normal((n, 4, 2)) + 1j * rng.standard_normal((n, 4, 2))) * np.sqrt(0.5)
        wh = np.conj(pair.w.T)
        noise = np.einsum("ab,nbt->nat", wh, z)
        vec = noise.transpose(0, 2, 1).reshape(n, -1)  # column-major vec
        cov = vec.T @ np.conj(vec) / n
        expected = np.kron(np.eye(2), wh @ pair.w)
        se = np.sqrt(np.abs(np.diag(expected))[:, None] * np.abs(np.diag(expected))[None, :] / n)
        assert np.all(np.abs(cov - expected) <= 5 * se)
        mean = ys.mean(axis=0)
        truth = wh @ target_response(scene, geom) @ pair.v
        sd = np.sqrt(np.real(np.diag(wh @ pair.w)))[:, None] / np.sqrt(ys.shape[0])
        assert np.all(np.abs(mean - truth) <= 3 * np.sqrt(2) * sd)

    def test_library_noise_has_unit_variance_entries(self):
        geom = ArrayGeometry(1, 2)
        pair = BeamformerPair(np.zeros((1, 1)), np.eye(2))
        rng = np.random.default_rng(7)
        ys = np.stack([simulate_measurement(SceneParams([0.2], [1.0]), geom, pair, rng) for _ in range(100_000)])
        re_var = ys.real.var(axis=0)
        np.testing.assert_allclose(re_var, 0.5, atol=4 * 0.5 * np.sqrt(2 / 100_000))
        np.testing.assert_allclose(np.mean(np.abs(ys) ** 2, axis=0), 1.0, atol=0.02)

    def test_zero_transmit_gives_pure_noise(self, rng):
        geom = ArrayGeometry(2, 3)
        scene = SceneParams([0.0], [5.0])
        pair = BeamformerPair(np.zeros((2, 1)), np.eye(3)[:, :2])
        z = crandn(rng, 3, 1)
        np.testing.assert_allclose(simulate_measurement(scene, geom, pair, noise=z), z[:2])

    def test_seed_reproducible(self):
        geom = ArrayGeometry(2, 3)
        scene = SceneParams([0.3], [1 - 1j])
        pair = BeamformerPair(np.ones((2, 1)), np.eye(3)[:, :1])
        a = simulate_measurement(scene, geom, pair, np.random.default_rng(5))
        b = simulate_measurement(scene, geom, pair, np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError):
            simulate_measurement(SceneParams([0.1], [1]), ArrayGeometry(2, 3), BeamformerPair(np.ones((3, 1)), np.ones((3, 1))), rng)
