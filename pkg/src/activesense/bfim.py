"""Bayesian Fisher information over the grid-Gaussian posterior.

Every derivative of ``H`` is ``c_i(alpha) B_i(phi)`` where ``B_i`` depends on
the angles only and ``c_i`` is ``alpha_j``, ``1`` or ``1j``. Writing
``c = T [alpha; 1]``, the moments ``E[c_i conj(c_j) | phi]`` factor as
``(T F)(T F)^H`` with ``F`` a square root of ``E[[alpha; 1][alpha; 1]^H]``.
All expectations below reduce to Gram matrices of factor-weighted bases, so
no sampling over ``alpha`` is ever needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .array_model import ArrayGeometry, response_bases
from .posterior import PosteriorState

ALPHA_PRIOR_INFO = 2.0


class NonIdentifiable(np.linalg.LinAlgError):
    """The information matrix is singular or too badly conditioned."""

    def __init__(self, message: str, min_eig: float):
        super().__init__(message)
        self.min_eig = min_eig


@dataclass(frozen=True)
class WeightMatrix:
    """Diagonal weights of the error criterion, one per entry of theta."""

    q: np.ndarray

    def __post_init__(self) -> None:
        q = np.asarray(self.q, dtype=float)
        if q.ndim != 1 or q.size % 3:
            raise ValueError("q must be a vector of length 3L")
        if np.any(q < 0) or abs(q.sum() - 1.0) > 1e-12:
            raise ValueError(f"q must be nonnegative and sum to 1, got {q}")
        object.__setattr__(self, "q", q)

    @classmethod
    def angles_only(cls, n_targets: int) -> "WeightMatrix":
        """Equal weight on each angle, zero on the coefficients."""
        q = np.zeros(3 * n_targets)
        q[:n_targets] = 1.0 / n_targets
        return cls(q)

    @property
    def sqrt(self) -> np.ndarray:
        return np.diag(np.sqrt(self.q))


@dataclass(frozen=True)
class Bfim:
    data_part: np.ndarray
    prior_part: np.ndarray
    clipped_mass: float = 0.0

    @property
    def total(self) -> np.ndarray:
        return self.data_part + self.prior_part


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def rx_projector(w: np.ndarray) -> np.ndarray:
    """Orthogonal projector ``W (W^H W)^{-1} W^H`` onto the range of ``W``."""
    q = orthonormal_basis(w)
    return q @ np.conj(q.T)


def orthonormal_basis(w: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """``W (W^H W)^{-1/2}``: orthonormal columns spanning ``range(W)``."""
    w = np.atleast_2d(np.asarray(w, dtype=complex))
    if w.shape[0] < w.shape[1]:
        raise np.linalg.LinAlgError("W has more columns than rows")
    gram = np.conj(w.T) @ w
    vals, vecs = np.linalg.eigh(gram)
    if vals.size == 0 or vals[-1] <= 0 or vals[0] <= rtol * vals[-1]:
        raise np.linalg.LinAlgError("W is rank deficient")
    inv_sqrt = (vecs / np.sqrt(vals)) @ np.conj(vecs.T)
    return w @ inv_sqrt


def whitening(w: np.ndarray) -> np.ndarray:
    """``(W^H W)^{-1/2}``."""
    gram = np.conj(w.T) @ w
    vals, vecs = np.linalg.eigh(gram)
    return (vecs / np.sqrt(vals)) @ np.conj(vecs.T)


def grid_bases(state: PosteriorState, geom: ArrayGeometry) -> dict[str, np.ndarray]:
    """Cached ``A``, ``D``, ``E`` bases at every grid point, shape ``(G, L, N_R, N_T)``."""
    cache = state.grid.cache
    key = ("bases", geom.n_tx, geom.n_rx)
    if key not in cache:
        cache[key] = response_bases(state.grid.points, geom)
    return cache[key]


def coefficient_map(n_targets: int) -> np.ndarray:
    """``T`` with ``c = T [alpha; 1]`` for the 3L derivative coefficients."""
    n = n_targets
    t = np.zeros((3 * n, n + 1), dtype=complex)
    t[:n, :n] = np.eye(n)
    t[n : 2 * n, n] = 1.0
    t[2 * n :, n] = 1j
    return t


def moment_factor(state: PosteriorState) -> np.ndarray:
    """Weighted factor ``sqrt(pi_g) T F_g`` of shape ``(G, 3L, L+1)``.

    ``F_g F_g^H = [[Sigma + mu mu^H, mu], [mu^H, 1]]`` at grid point ``g``.
    """
    n = state.n_targets
    g = len(state.grid)
    vals, vecs = np.linalg.eigh(state.covs)
    root = vecs * np.sqrt(np.clip(vals, 0.0, None))[:, None, :]
    f = np.zeros((g, n + 1, n + 1), dtype=complex)
    f[:, :n, :n] = root
    f[:, :n, n] = state.means
    f[:, n, n] = 1.0
    tf = coefficient_map(n)[None] @ f
    return np.sqrt(state.grid.weights)[:, None, None] * tf


def expand_bases(bases: dict[str, np.ndarray]) -> np.ndarray:
    """Stack ``B_i`` for all 3L parameters: ``(G, 3L, N_R, N_T)``."""
    return np.concatenate([bases["D"], bases["A"], bases["A"]], axis=1)


@dataclass
class SensingTensor:
    """``S[i, m, j, n] = E[(X_i X_j^H)_{mn}]`` for a fixed beamformer.

    For the receive side ``X_i = Hdot_i V`` (N_R rows); for the transmit
    side ``X_i = Hdot_i^H Wo`` with ``Wo`` orthonormal (N_T rows).
    """

    side: str
    s: np.ndarray  # (3L, N, 3L, N)
    extras: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.s.shape[1]

    def fim(self, r: np.ndarray) -> np.ndarray:
        """``2 Re tr(R S_ij)``: the data FIM for covariance/projector ``R``."""
        return _sym(2.0 * np.real(np.einsum("imjn,nm->ij", self.s, r)))

    def fim_lowrank(self, u: np.ndarray, scale: float) -> np.ndarray:
        """:meth:`fim` for ``R = scale * U U^H`` without forming R."""
        p = np.einsum("imjn,nk->imjk", self.s, u)
        return _sym(2.0 * scale * np.real(np.einsum("mk,imjk->ij", np.conj(u), p)))

    def direction(self, a: np.ndarray) -> np.ndarray:
        """``sum_ij A_ij S_ij`` (Hermitian) for symmetric real ``A``."""
        d = np.einsum("ij,imjn->mn", a, self.s)
        return 0.5 * (d + np.conj(d.T))


def sensing_tensor(
    state: PosteriorState, geom: ArrayGeometry, side: str, fixed: np.ndarray
) -> SensingTensor:
    """Build the receive (``fixed=V``) or transmit (``fixed=W``) tensor."""
    tf = moment_factor(state)
    b = expand_bases(grid_bases(state, geom))
    fixed = np.atleast_2d(np.asarray(fixed, dtype=complex))
    if side == "rx":
        x = b @ fixed  # (G, 3L, N_R, M_T)
        coef = tf
    elif side == "tx":
        wo = orthonormal_basis(fixed)
        x = np.conj(np.swapaxes(b, -1, -2)) @ wo  # (G, 3L, N_T, M_R)
        coef = np.conj(tf)
    else:
        raise ValueError(f"side must be 'rx' or 'tx', got {side!r}")
    g, p, n, m = x.shape
    z = np.einsum("gik,ginm->ingkm", coef, x).reshape(p * n, -1)
    s = (z @ np.conj(z.T)).reshape(p, n, p, n)
    return SensingTensor(side, s)


def _projected_fim(tf: np.ndarray, proj: np.ndarray) -> np.ndarray:
    """``2 Re sum_g Mom_ij <P_i, P_j>`` from projected bases ``(G, 3L, a, b)``."""
    g, p = proj.shape[:2]
    z = np.einsum("gik,giab->igkab", tf, proj).reshape(p, -1)
    return _sym(2.0 * np.real(z @ np.conj(z.T)))


def _project(bases: np.ndarray, wo: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.conj(wo.T) @ bases @ v


def data_fim(
    state: PosteriorState,
    v: np.ndarray,
    r_w: np.ndarray | None,
    geom: ArrayGeometry,
    w: np.ndarray | None = None,
) -> np.ndarray:
    """Expected data information ``2 Re tr(R_W E[Hdot_i R_V Hdot_j^H])``.

    Pass either the projector ``r_w`` or the receive matrix ``w`` (cheaper:
    the bases are projected to the M_R x M_T measurement space first).
    """
    v = np.atleast_2d(np.asarray(v, dtype=complex))
    if w is not None:
        wo = orthonormal_basis(w)
    else:
        vals, vecs = np.linalg.eigh(0.5 * (r_w + np.conj(r_w.T)))
        wo = vecs * np.sqrt(np.clip(vals, 0.0, None))
    b = expand_bases(grid_bases(state, geom))
    return _projected_fim(moment_factor(state), _project(b, wo, v))


def prior_fim(
    state: PosteriorState,
    geom: ArrayGeometry,
    alpha_prior_info: float = ALPHA_PRIOR_INFO,
    psd: bool = True,
) -> tuple[np.ndarray, float]:
    """Information carried by the posterior given the measurement history.

    Returns ``(J_P, clipped_mass)``. Over each past stage it sums the expected
    second-derivative terms of the log-likelihood (curvature of H weighted by
    the residual) and the expected Gram term, then adds the CN(0, I)
    coefficient prior (``alpha_prior_info`` on each real coefficient
    coordinate, zero on the angles). With ``psd`` the symmetrized result is
    clipped to the PSD cone and the removed negative eigenvalue mass is
    returned; otherwise the raw matrix and 0.
    """
    n = state.n_targets
    j = np.zeros((3 * n, 3 * n))
    j[n:, n:] = alpha_prior_info * np.eye(2 * n)
    if state.history:
        bases = grid_bases(state, geom)
        b_all = expand_bases(bases)
        tf = moment_factor(state)
        pi = state.grid.weights
        mu = state.means  # (G, L)
        second = state.covs + mu[:, :, None] * np.conj(mu[:, None, :])  # E[a a^H]
        for st in state.history:
            if not np.any(st.v):
                continue
            wo = orthonormal_basis(st.w)
            y_w = whitening(st.w) @ st.y
            j += _projected_fim(tf, _project(b_all, wo, st.v))
            pa = _project(bases["A"], wo, st.v)  # (G, L, M_R, M_T)
            pd = _project(bases["D"], wo, st.v)
            pe = _project(bases["E"], wo, st.v)
            ey = np.einsum("gaxy,xy->ga", pe, np.conj(y_w))
            dy = np.einsum("gaxy,xy->ga", pd, np.conj(y_w))
            ea = np.einsum("gaxy,gbxy->gab", pe, np.conj(pa))
            da = np.einsum("gaxy,gbxy->gab", pd, np.conj(pa))
            # angle-angle curvature: E[alpha_a <P_E, Y - P_H>]
            val = mu * ey - np.einsum("gab,gab->ga", second, ea)
            # angle-coefficient curvature: E[<P_D, Y - P_H>]
            u = dy - np.einsum("gb,gab->ga", np.conj(mu), da)
            val = pi @ val
            u = pi @ u
            idx = np.arange(n)
            j[idx, idx] -= 2.0 * np.real(val)
            cr = -2.0 * np.real(u)
            ci = -2.0 * np.real(1j * u)
            j[idx, n + idx] += cr
            j[n + idx, idx] += cr
            j[idx, 2 * n + idx] += ci
            j[2 * n + idx, idx] += ci
    j = _sym(j)
    if not psd:
        return j, 0.0
    vals, vecs = np.linalg.eigh(j)
    neg = vals < 0
    clipped = float(-vals[neg].sum())
    if clipped > 0:
        j = _sym((vecs * np.clip(vals, 0.0, None)) @ vecs.T)
    return j, clipped


def bfim(
    state: PosteriorState,
    geom: ArrayGeometry,
    v: np.ndarray,
    w: np.ndarray,
    prior: tuple[np.ndarray, float] | None = None,
) -> Bfim:
    """Total information for the pair ``(V, W)`` at the current stage."""
    jp, clipped = prior_fim(state, geom) if prior is None else prior
    jd = data_fim(state, v, None, geom, w=w)
    return Bfim(jd, jp, clipped)


def check_identifiable(j: np.ndarray, max_cond: float = 1e12) -> np.ndarray:
    vals = np.linalg.eigvalsh(j)
    lo, hi = vals[0], vals[-1]
    if hi <= 0 or lo <= hi / max_cond:
        raise NonIdentifiable(
            f"information matrix not invertible (min eig {lo:.3e}, max eig {hi:.3e})", float(lo)
        )
    return vals


def bcrb_value(q: WeightMatrix | np.ndarray, j: Bfim | np.ndarray, max_cond: float = 1e12) -> float:
    """``tr(Q J^{-1})`` through a symmetric positive-definite solve."""
    qv = q.q if isinstance(q, WeightMatrix) else np.asarray(q, dtype=float)
    jm = j.total if isinstance(j, Bfim) else np.asarray(j, dtype=float)
    jm = _sym(jm)
    check_identifiable(jm, max_cond)
    sq = np.sqrt(qv)
    x = linalg.solve(jm, np.diag(sq), assume_a="pos")
    return float(np.sum(sq * np.diag(x)))
