from dataclasses import replace

import numpy as np
import pytest

from activesense.array_model import ArrayGeometry, BeamformerPair, SceneParams, simulate_measurement
from activesense.dual import haar_frame
from activesense.posterior import PosteriorState, init_posterior, update


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def random_scene(rng, n_targets, lo=-1.0, hi=1.0):
    return SceneParams(rng.uniform(lo, hi, n_targets), crandn(rng, n_targets))


def point_posterior(angles, coeffs) -> PosteriorState:
    """Posterior with all mass on one grid point and zero coefficient covariance."""
    angles = np.atleast_1d(np.asarray(angles, dtype=float))
    st = init_posterior((-1.5, 1.5), 2, angles.size)
    g = len(st.grid)
    lw = np.full(g, -np.inf)
    lw[0] = 0.0
    pts = np.tile(angles, (g, 1))
    means = np.tile(np.asarray(coeffs, dtype=complex), (g, 1))
    covs = np.zeros_like(st.covs)
    return replace(st, grid=replace(st.grid, points=pts, log_weights=lw, cache={}), means=means, covs=covs)


def random_posterior(rng, geom, n_targets=1, k=16, stages=2, power=3.0) -> PosteriorState:
    """Posterior after a few random-beam measurements of a random scene."""
    st = init_posterior((-np.pi / 3, np.pi / 3), k, n_targets)
    scene = random_scene(rng, n_targets)
    for _ in range(stages):
        pair = BeamformerPair(
            np.sqrt(power) * haar_frame(rng, geom.n_tx, 1),
            haar_frame(rng, geom.n_rx, min(2, geom.n_rx)),
        )
        st = update(st, pair, simulate_measurement(scene, geom, pair, rng), geom)
    return st


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def random_problem(rng, kind, n_targets=1, geom=None, k=32, stages=None, q=None):
    """A random dual sub-problem: posterior, fixed beamformer, weights and sizes."""
    from activesense.bfim import WeightMatrix
    from activesense.dual import build_problem

    geom = geom or ArrayGeometry(int(rng.integers(2, 5)), int(rng.integers(2, 5)))
    power = float(10 ** rng.uniform(0, 1.5))
    st = random_posterior(rng, geom, n_targets, k=k, stages=int(rng.integers(0, 4)) if stages is None else stages, power=power)
    m_tx = int(rng.integers(1, geom.n_tx + 1))
    m_rx = int(rng.integers(1, geom.n_rx + 1))
    if q is None:
        qq = rng.uniform(size=3 * n_targets) * (rng.uniform(size=3 * n_targets) < 0.5)
        qq[:n_targets] += 0.2
        q = WeightMatrix(qq / qq.sum())
    if kind.side == "rx":
        fixed = np.sqrt(power / m_tx) * haar_frame(rng, geom.n_tx, m_tx)
    else:
        fixed = haar_frame(rng, geom.n_rx, m_rx)
    prob = build_problem(kind, fixed, st, geom, q, power, m_tx, m_rx)
    return prob, dict(state=st, geom=geom, power=power, m_tx=m_tx, m_rx=m_rx, q=q, fixed=fixed)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
