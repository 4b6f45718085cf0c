"""Grid-Gaussian posterior over target angles and fading coefficients.

Angles live on a Cartesian grid; conditioned on a grid point the coefficient
vector is complex Gaussian, tracked exactly by a Kalman recursion because the
measurement is linear in ``alpha`` once the angles are fixed. Grid weights are
updated in the log domain from the Gaussian predictive likelihood.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .array_model import ArrayGeometry, BeamformerPair, steering_vector

logger = logging.getLogger(__name__)

GRID_CAP = 2**20


@dataclass(frozen=True)
class AngleGrid:
    """Cartesian angle grid with normalized log weights.

    Attributes:
        points: ``(K**L, L)`` angle tuples, last axis varies fastest.
        log_weights: ``(K**L,)`` log probabilities.
        lower: Lower end of the angle range.
        upper: Upper end of the angle range.
        k: Points per angle axis.
    """

    points: np.ndarray
    log_weights: np.ndarray
    lower: float
    upper: float
    k: int
    cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def axis(self) -> np.ndarray:
        return np.linspace(self.lower, self.upper, self.k)


@dataclass(frozen=True)
class ConditionalGaussian:
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True)
class Stage:
    """One past measurement and the beamformers that produced it."""

    v: np.ndarray
    w: np.ndarray
    y: np.ndarray


@dataclass(frozen=True)
class PosteriorState:
    """Posterior after ``len(history)`` stages.

    ``means`` is ``(G, L)`` complex and ``covs`` is ``(G, L, L)`` complex
    Hermitian; both are indexed like ``grid.points``.
    """

    grid: AngleGrid
    means: np.ndarray
    covs: np.ndarray
    history: tuple[Stage, ...] = ()
    diagnostics: dict = field(default_factory=dict, compare=False)

    @property
    def n_targets(self) -> int:
        return self.grid.points.shape[1]

    @property
    def stage(self) -> int:
        return len(self.history)

    def conditional(self, g: int) -> ConditionalGaussian:
        return ConditionalGaussian(self.means[g], self.covs[g])

    @property
    def conditionals(self) -> list[ConditionalGaussian]:
        return [self.conditional(g) for g in range(len(self.grid))]

    def entropy(self) -> float:
        lw = self.grid.log_weights
        p = np.exp(lw)
        mask = p > 0
        return float(-np.sum(p[mask] * lw[mask]))


def init_posterior(
    angle_range: tuple[float, float],
    k: int,
    n_targets: int,
    cap: int = GRID_CAP,
) -> PosteriorState:
    """Uniform grid prior with ``alpha | phi ~ CN(0, I)`` at every point."""
    lo, hi = map(float, angle_range)
    if k < 2:
        raise ValueError(f"K must be >= 2, got {k}")
    if n_targets not in (1, 2):
        raise ValueError(f"only L in (1, 2) is supported, got {n_targets}")
    if not hi > lo:
        raise ValueError(f"empty angle range [{lo}, {hi}]")
    size = k**n_targets
    if size > cap:
        raise ValueError(f"grid size K^L = {size} exceeds cap {cap}")
    axis = np.linspace(lo, hi, k)
    points = np.array(list(itertools.product(axis, repeat=n_targets)), dtype=float)
    log_w = np.full(size, -n_targets * np.log(k))
    grid = AngleGrid(points, log_w, lo, hi, k)
    means = np.zeros((size, n_targets), dtype=complex)
    covs = np.broadcast_to(np.eye(n_targets, dtype=complex), (size, n_targets, n_targets)).copy()
    return PosteriorState(grid, means, covs)


def observation_operator(
    angles: np.ndarray, pair: BeamformerPair, geom: ArrayGeometry
) -> np.ndarray:
    """Linear map from ``alpha`` to ``vec(W^H H V)`` (column-major).

    ``angles`` may be one L-tuple, giving ``(M_R*M_T, L)``, or a batch
    ``(G, L)``, giving ``(G, M_R*M_T, L)``.
    """
    angles = np.asarray(angles, dtype=float)
    single = angles.ndim == 1
    batch = angles[None] if single else angles
    ar = steering_vector(geom.n_rx, batch)  # (G, L, N_R)
    at = steering_vector(geom.n_tx, batch)
    b_r = ar @ np.conj(pair.w)  # W^H a_R -> (G, L, M_R)
    b_t = np.conj(at) @ pair.v  # V^T conj(a_T) -> (G, L, M_T)
    g, n = batch.shape
    c = np.einsum("gjt,gjr->gtrj", b_t, b_r).reshape(g, -1, n)
    return c[0] if single else c


def noise_covariance(w: np.ndarray, m_t: int) -> np.ndarray:
    """Covariance of ``vec(W^H Z)``: ``I_{M_T} kron W^H W``."""
    return np.kron(np.eye(m_t), np.conj(w.T) @ w)


@dataclass(frozen=True)
class Predictive:
    """Per-grid predictive moments of ``vec(Y)``."""

    c: np.ndarray  # (G, m, L)
    mean_y: np.ndarray  # (G, m)
    cross: np.ndarray  # (G, L, m)
    cov_y: np.ndarray  # (G, m, m)
    regularized: bool = False


def _herm(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.conj(np.swapaxes(a, -1, -2)))


def predictive(state: PosteriorState, pair: BeamformerPair, geom: ArrayGeometry) -> Predictive:
    """Predictive moments of ``vec(Y)`` at every grid point."""
    c = observation_operator(state.grid.points, pair, geom)
    ch = np.conj(np.swapaxes(c, -1, -2))
    mean_y = np.einsum("gml,gl->gm", c, state.means)
    cross = state.covs @ ch
    cov_y = _herm(c @ cross + noise_covariance(pair.w, pair.v.shape[1]))
    regularized = False
    try:
        np.linalg.cholesky(cov_y)
    except np.linalg.LinAlgError:
        m = cov_y.shape[-1]
        eps = 1e-12 * np.trace(cov_y, axis1=-2, axis2=-1).real / m
        cov_y = cov_y + eps[:, None, None] * np.eye(m)
        regularized = True
        logger.warning("predictive covariance near singular; added diagonal loading")
    return Predictive(c, mean_y, cross, cov_y, regularized)


def predictive_moments(
    state: PosteriorState, g: int, pair: BeamformerPair, geom: ArrayGeometry
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(mu_y, Sigma_alpha_y, Sigma_y)`` at grid index ``g``."""
    if not 0 <= g < len(state.grid):
        raise IndexError(f"grid index {g} out of range")
    sub = replace(
        state,
        grid=replace(
            state.grid,
            points=state.grid.points[g : g + 1],
            log_weights=state.grid.log_weights[g : g + 1],
            cache={},
        ),
        means=state.means[g : g + 1],
        covs=state.covs[g : g + 1],
    )
    p = predictive(sub, pair, geom)
    return p.mean_y[0], p.cross[0], p.cov_y[0]


def _vec(y: np.ndarray) -> np.ndarray:
    return np.asarray(y, dtype=complex).reshape(-1, order="F")


def log_likelihoods(pred: Predictive, y: np.ndarray) -> np.ndarray:
    """``log CN(vec(Y); mu_y, Sigma_y)`` at every grid point."""
    r = _vec(y)[None, :] - pred.mean_y
    m = r.shape[-1]
    chol = np.linalg.cholesky(pred.cov_y)
    logdet = 2.0 * np.sum(np.log(np.real(np.diagonal(chol, axis1=-2, axis2=-1))), axis=-1)
    sol = np.linalg.solve(chol, r[..., None])[..., 0]
    quad = np.sum(np.abs(sol) ** 2, axis=-1)
    return -m * np.log(np.pi) - logdet - quad


def bayes_weight_update(
    state: PosteriorState,
    pair: BeamformerPair,
    y: np.ndarray,
    geom: ArrayGeometry,
    pred: Predictive | None = None,
) -> PosteriorState:
    """Multiply grid weights by the predictive likelihood of ``Y`` and renormalize."""
    pred = predictive(state, pair, geom) if pred is None else pred
    ll = log_likelihoods(pred, y)
    lw = state.grid.log_weights + ll
    total = logsumexp(lw)
    diag = dict(state.diagnostics)
    if not np.isfinite(total):
        logger.warning("all grid likelihoods underflowed; resetting weights to uniform")
        lw = np.full_like(lw, -np.log(lw.size))
        diag["weight_reset"] = True
    else:
        lw = lw - total
    diag["regularized"] = pred.regularized
    return replace(state, grid=replace(state.grid, log_weights=lw), diagnostics=diag)


def kalman_update(
    state: PosteriorState,
    pair: BeamformerPair,
    y: np.ndarray,
    geom: ArrayGeometry,
    pred: Predictive | None = None,
) -> PosteriorState:
    """Condition every grid point's ``alpha`` Gaussian on ``Y``; append history."""
    pred = predictive(state, pair, geom) if pred is None else pred
    y = np.asarray(y, dtype=complex)
    if y.shape != (pair.w.shape[1], pair.v.shape[1]):
        raise ValueError(f"Y shape {y.shape} != (M_R, M_T) = {(pair.w.shape[1], pair.v.shape[1])}")
    # gain K = Sigma_ay Sigma_y^{-1}, via solve on the Hermitian system
    gain = np.conj(np.swapaxes(np.linalg.solve(pred.cov_y, np.conj(np.swapaxes(pred.cross, -1, -2))), -1, -2))
    innov = _vec(y)[None, :] - pred.mean_y
    means = state.means + np.einsum("glm,gm->gl", gain, innov)
    # Joseph form: (I - KC) S (I - KC)^H + K N K^H
    n = state.n_targets
    ikc = np.eye(n) - gain @ pred.c
    noise = noise_covariance(pair.w, pair.v.shape[1])
    gh = np.conj(np.swapaxes(gain, -1, -2))
    covs = ikc @ state.covs @ np.conj(np.swapaxes(ikc, -1, -2)) + gain @ noise @ gh
    covs = _clip_psd(_herm(covs))
    hist = state.history + (Stage(pair.v.copy(), pair.w.copy(), y.copy()),)
    return replace(state, means=means, covs=covs, history=hist)


def _clip_psd(a: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(a)
    if np.all(vals >= 0):
        return a
    vals = np.clip(vals, 0.0, None)
    return _herm((vecs * vals[..., None, :]) @ np.conj(np.swapaxes(vecs, -1, -2)))


def update(
    state: PosteriorState, pair: BeamformerPair, y: np.ndarray, geom: ArrayGeometry
) -> PosteriorState:
    """Weight update followed by the Kalman update, sharing one predictive pass."""
    pred = predictive(state, pair, geom)
    state = bayes_weight_update(state, pair, y, geom, pred)
    return kalman_update(state, pair, y, geom, pred)


def posterior_second_moments(state: PosteriorState, g: int) -> dict[str, np.ndarray]:
    """``E[a a^H]``, ``E[a]`` and ``E[a a^T]`` of ``alpha`` at grid point ``g``.

    The pseudo-moment uses a zero pseudo-covariance (circular model).
    """
    mu = state.means[g]
    return {
        "second": state.covs[g] + np.outer(mu, np.conj(mu)),
        "mean": mu.copy(),
        "pseudo": np.outer(mu, mu),
    }


def mmse_estimate(state: PosteriorState, sort_labels: bool = True) -> np.ndarray:
    """Posterior mean of ``theta = [phi, Re alpha, Im alpha]``.

    With two targets the Cartesian grid is symmetric under label swap, so the
    plain posterior mean of each angle coincides. ``sort_labels`` orders each
    grid tuple (and its coefficient mean) by angle before averaging, which
    estimates the ordered pair instead. For one target it has no effect.
    """
    w = state.grid.weights
    pts = state.grid.points
    means = state.means
    if sort_labels and pts.shape[1] > 1:
        order = np.argsort(pts, axis=1, kind="stable")
        pts = np.take_along_axis(pts, order, axis=1)
        means = np.take_along_axis(means, order, axis=1)
    phi = w @ pts
    alpha = w @ means
    return np.concatenate([phi, alpha.real, alpha.imag])
