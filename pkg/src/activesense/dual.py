"""Beamformer design by maximizing the Lagrangian dual of the BCRB problem.

For a fixed beamformer on one side, the design on the other side enters the
Bayesian information only through a covariance ``R`` that ranges over a set
whose extreme points are scaled rank-``r`` projectors ``s U U^H``. The dual

    f(Lam) = 2 tr(Lam Q^1/2) - tr(Lam^T J_P Lam) - 2 s * sum_{i<=r} mu_i(D(Lam Lam^T))

is concave in the real matrix ``Lam``; ``D`` is the direction matrix. At a
maximizer with a strict gap ``mu_r > mu_{r+1}``, the top-``r`` eigenvectors
of ``D`` give a globally optimal beamformer.

Ascent uses the step ``J(R(Lam))^{-1} Q^1/2 - Lam``: the gradient
``2 Q^1/2 - 2 J Lam`` preconditioned by ``J^{-1}/2``. A full step is the
fixed-point update ``Lam <- J^{-1} Q^1/2``. When the optimum sits on a
coalescence of eigenvalues, where the dual is not differentiable, the
relaxed primal over the convex hull of the feasible covariances is solved
by projected gradient instead and its duality gap certifies the value.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .array_model import ArrayGeometry
from .bfim import (
    NonIdentifiable,
    SensingTensor,
    WeightMatrix,
    bcrb_value,
    data_fim,
    orthonormal_basis,
    prior_fim,
    sensing_tensor,
)
from .posterior import PosteriorState

logger = logging.getLogger(__name__)


class NonConverged(RuntimeError):
    """Dual ascent hit its iteration budget before the tolerance."""

    def __init__(self, message: str, best: "DualSolution | None" = None, context: dict | None = None):
        super().__init__(message)
        self.best = best
        self.context = dict(context or {})


class ProblemKind(enum.Enum):
    RX_COMBINER = "rx"
    TX_EXPLOIT = "tx_exploit"
    TX_EXPLORE = "tx_explore"

    @property
    def side(self) -> str:
        return "rx" if self is ProblemKind.RX_COMBINER else "tx"

    def split(self, m_tx: int, m_rx: int) -> int:
        if self is ProblemKind.RX_COMBINER:
            return m_rx
        if self is ProblemKind.TX_EXPLOIT:
            return 1
        return m_tx

    def scale(self, power: float, m_tx: int) -> float:
        """Eigenvalue of the extreme-point covariances ``s U U^H``."""
        if self is ProblemKind.RX_COMBINER:
            return 1.0
        if self is ProblemKind.TX_EXPLOIT:
            return float(power)
        return float(power) / m_tx


@dataclass(frozen=True)
class DirectionMatrix:
    """Hermitian direction matrix with its spectrum in descending order."""

    m: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "DirectionMatrix":
        m = 0.5 * (m + np.conj(m.T))
        vals, vecs = np.linalg.eigh(m)
        return cls(m, vals[::-1].copy(), vecs[:, ::-1].copy())

    def eigengap(self, r: int) -> float:
        if r >= self.eigvals.size:
            return float("inf")
        return float(self.eigvals[r - 1] - self.eigvals[r])


@dataclass(frozen=True)
class DualOptions:
    tol_g: float = 1e-7
    max_iters: int = 2000
    armijo: float = 1e-4
    backtrack: float = 0.5
    damping: float = 1.0
    min_step: float = 1e-10
    cert_tol: float = 1e-8
    tie_tol: float = 1e-6
    gap_tol: float = 1e-7
    primal_max_iters: int = 3000
    stall_window: int = 25


@dataclass
class DualSolution:
    """Result of one dual solve.

    ``duality_gap`` is ``tr(Q J(R)^{-1}) - f(Lam)`` for the covariance ``R``
    read off the final iterate, and ``smooth`` says whether the ascent met the
    gradient tolerance (as opposed to finishing through the relaxed primal).
    """

    kind: ProblemKind
    lambda_star: np.ndarray
    direction: DirectionMatrix
    objective: float
    grad_norm: float
    eigengap: float
    certificate_ok: bool
    kkt_residual: float
    split: int
    scale: float
    duality_gap: float
    smooth: bool
    iterations: int
    history: list[float] = field(default_factory=list, repr=False)
    relaxed_cov: np.ndarray | None = field(default=None, repr=False)

    def log_line(self) -> str:
        return (
            f"kind={self.kind.value} iters={self.iterations} grad_norm={self.grad_norm:.3e} "
            f"eigengap={self.eigengap:.3e} certificate={int(self.certificate_ok)} "
            f"duality_gap={self.duality_gap:.3e} smooth={int(self.smooth)}"
        )


def ky_fan_value(m: np.ndarray, k: int) -> float:
    """Sum of the ``k`` largest eigenvalues of Hermitian ``m``."""
    vals = np.linalg.eigvalsh(0.5 * (m + np.conj(m.T)))
    if not 0 <= k <= vals.size:
        raise ValueError(f"k={k} outside [0, {vals.size}]")
    return float(vals[::-1][:k].sum())


class DualProblem:
    """Precomputed pieces of one sub-problem: tensor, prior information, weights."""

    def __init__(
        self,
        kind: ProblemKind,
        tensor: SensingTensor,
        j_prior: np.ndarray,
        q: WeightMatrix,
        split: int,
        scale: float,
    ):
        if split > tensor.dim:
            raise ValueError(f"split {split} exceeds matrix dimension {tensor.dim}")
        self.kind = kind
        self.tensor = tensor
        self.j_prior = j_prior
        self.q = q
        self.q_half = q.sqrt
        self.split = split
        self.scale = scale

    @property
    def dim(self) -> int:
        return self.tensor.dim

    def direction(self, lam: np.ndarray) -> DirectionMatrix:
        return DirectionMatrix.from_matrix(self.tensor.direction(lam @ lam.T))

    def objective(self, lam: np.ndarray, dm: DirectionMatrix | None = None) -> float:
        dm = self.direction(lam) if dm is None else dm
        top = float(np.sum(dm.eigvals[: self.split]))
        return float(
            2.0 * np.trace(lam @ self.q_half) - np.trace(lam.T @ self.j_prior @ lam) - 2.0 * self.scale * top
        )

    def info(self, u: np.ndarray) -> np.ndarray:
        """Total information for the covariance ``scale * U U^H``."""
        return self.j_prior + self.tensor.fim_lowrank(u, self.scale)

    def info_cov(self, r: np.ndarray) -> np.ndarray:
        return self.j_prior + self.tensor.fim(r)

    def gradient(self, lam: np.ndarray, dm: DirectionMatrix | None = None) -> tuple[np.ndarray, np.ndarray]:
        dm = self.direction(lam) if dm is None else dm
        j = self.info(dm.eigvecs[:, : self.split])
        return 2.0 * self.q_half - 2.0 * j @ lam, j

    def hessian(self, lam: np.ndarray, dm: DirectionMatrix, j: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Hessian of the dual in the entries ``Lam[:, cols]`` (column-major).

        Includes the eigenvector-rotation curvature of the top-``r`` sum,
        ``-4 s sum_{i<=r<j} |u_j^H dD u_i|^2 / (mu_i - mu_j)``.
        """
        p = lam.shape[0]
        a = cols.size
        h = -2.0 * np.kron(np.eye(a), j)
        r = self.split
        mu = dm.eigvals
        if r >= mu.size:
            return h
        s4 = self.tensor.s
        t1 = np.einsum("pmjn,jc->cpmn", s4, lam[:, cols])
        d1 = t1 + np.conj(np.swapaxes(t1, -1, -2))  # (a, p, N, N)
        u = dm.eigvecs[:, :r]
        up = dm.eigvecs[:, r:]
        c = np.conj(up.T)[None, None] @ d1 @ u[None, None]  # (a, p, N-r, r)
        gap = mu[:r][None, :] - mu[r:][:, None]
        with np.errstate(divide="ignore"):
            wt = 1.0 / np.sqrt(np.maximum(gap, 1e-300))
        c = (c * wt).reshape(a * p, -1)
        h -= 4.0 * self.scale * np.real(np.conj(c) @ c.T)
        return 0.5 * (h + h.T)

    def primal_value(self, r_or_u: np.ndarray, lowrank: bool = True) -> float:
        j = self.info(r_or_u) if lowrank else self.info_cov(r_or_u)
        return bcrb_value(self.q, j)

    def recover(self, j: np.ndarray) -> np.ndarray:
        """``J^{-1} Q^1/2``."""
        return linalg.solve(j, self.q_half, assume_a="pos")

    def project(self, x: np.ndarray) -> np.ndarray:
        """Nearest point of ``{0 <= R <= s I, tr R = r s}`` in Frobenius norm."""
        vals, vecs = np.linalg.eigh(0.5 * (x + np.conj(x.T)))
        y = _capped_simplex(vals, self.scale, self.split * self.scale)
        return (vecs * y) @ np.conj(vecs.T)


def _capped_simplex(x: np.ndarray, cap: float, total: float) -> np.ndarray:
    """Project ``x`` onto ``{0 <= y <= cap, sum y = total}`` by bisection on the shift."""
    lo = np.min(x) - cap - 1.0
    hi = np.max(x) + 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        s = np.clip(x - mid, 0.0, cap).sum()
        if s > total:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, abs(mid)):
            break
    y = np.clip(x - 0.5 * (lo + hi), 0.0, cap)
    # remove the residual trace error on the free coordinates
    free = (y > 0) & (y < cap)
    if np.any(free):
        y[free] += (total - y.sum()) / free.sum()
    return y


def build_problem(
    kind: ProblemKind,
    fixed: np.ndarray,
    state: PosteriorState,
    geom: ArrayGeometry,
    q: WeightMatrix,
    power: float,
    m_tx: int,
    m_rx: int,
    j_prior: np.ndarray | None = None,
) -> DualProblem:
    """Set up a sub-problem given the other side's beamformer ``fixed``."""
    if j_prior is None:
        j_prior = prior_fim(state, geom)[0]
    tensor = sensing_tensor(state, geom, kind.side, fixed)
    return DualProblem(kind, tensor, j_prior, q, kind.split(m_tx, m_rx), kind.scale(power, m_tx))


def direction_matrix_rx(lam: np.ndarray, v: np.ndarray, state: PosteriorState, geom: ArrayGeometry) -> DirectionMatrix:
    """Receive direction matrix ``sum_m E[G_m Lam Lam^T G_m^H]``, ``G_m = [Hdot_i v_m]``."""
    t = sensing_tensor(state, geom, "rx", v)
    return DirectionMatrix.from_matrix(t.direction(lam @ lam.T))


def direction_matrix_tx(lam: np.ndarray, w: np.ndarray, state: PosteriorState, geom: ArrayGeometry) -> DirectionMatrix:
    """Transmit direction matrix built from ``Hdot_i^H`` and the receive subspace of ``w``.

    ``w`` is orthonormalized first; the receive projector is what enters the
    information, so this matches ``sum_m w_m w_m^H`` only for orthonormal ``w``.
    """
    w = np.atleast_2d(np.asarray(w, dtype=complex))
    if not np.any(w):
        n = geom.n_tx
        return DirectionMatrix(np.zeros((n, n), complex), np.zeros(n), np.eye(n, dtype=complex))
    t = sensing_tensor(state, geom, "tx", w)
    return DirectionMatrix.from_matrix(t.direction(lam @ lam.T))


def dual_objective(problem: DualProblem, lam: np.ndarray) -> float:
    return problem.objective(np.asarray(lam, dtype=float))


def dual_gradient(problem: DualProblem, lam: np.ndarray, gap_tol: float = 1e-6) -> tuple[np.ndarray, bool]:
    """Gradient ``2 Q^1/2 - 2 J(R(Lam)) Lam`` and whether it is a true gradient.

    With a tied spectrum at the split the same formula gives a supergradient
    for the eigenvector basis returned by the eigensolver; the flag is False.
    """
    lam = np.asarray(lam, dtype=float)
    dm = problem.direction(lam)
    g, _ = problem.gradient(lam, dm)
    gap = dm.eigengap(problem.split)
    smooth = gap > gap_tol * max(abs(dm.eigvals[0]), 1e-300)
    return g, bool(smooth)


def _solve_pd(j: np.ndarray, b: np.ndarray) -> np.ndarray | None:
    try:
        c = linalg.cho_factor(j)
    except linalg.LinAlgError:
        return None
    return linalg.cho_solve(c, b)


def _init_lambda(problem: DualProblem) -> np.ndarray:
    """Start from the recovery formula at the barycenter covariance ``(r s / N) I``."""
    n = problem.dim
    r0 = (problem.split * problem.scale / n) * np.eye(n)
    j0 = problem.info_cov(r0)
    lam = _solve_pd(j0, problem.q_half)
    if lam is None:
        lam = np.linalg.lstsq(j0, problem.q_half, rcond=None)[0]
    return lam


def _relaxed_primal(
    problem: DualProblem, r0: np.ndarray, opts: DualOptions
) -> tuple[np.ndarray, np.ndarray, float, float, int]:
    """Projected gradient on ``tr(Q J(R)^{-1})`` over the convex covariance set.

    Returns ``(R, Lam(R), primal value, duality gap, iterations)``. The
    gradient is ``-2 D(Lam Lam^T)`` and the Frank-Wolfe gap equals the
    primal-dual gap of ``(R, Lam(R))``.
    """

    def evaluate(r):
        j = problem.info_cov(r)
        lam = _solve_pd(j, problem.q_half)
        if lam is None:
            return None
        val = float(np.sum(np.diag(problem.q_half @ lam)))
        dmat = problem.tensor.direction(lam @ lam.T)
        return val, lam, dmat

    r = problem.project(r0)
    ev = evaluate(r)
    if ev is None:
        r = problem.project((problem.split * problem.scale / problem.dim) * np.eye(problem.dim))
        ev = evaluate(r)
    val, lam, dmat = ev
    step = None
    gap = np.inf
    r_prev = g_prev = None
    it = 0
    for it in range(1, opts.primal_max_iters + 1):
        vals = np.linalg.eigvalsh(dmat)[::-1]
        ky = problem.scale * float(np.sum(vals[: problem.split]))
        lin = float(np.real(np.vdot(r, dmat)))
        gap = 2.0 * (ky - lin)
        if gap <= opts.gap_tol * (1.0 + abs(val)):
            break
        grad = -2.0 * dmat
        if step is None:
            step = 1.0 / max(np.linalg.norm(grad), 1e-300) * np.linalg.norm(r)
        elif r_prev is not None:
            s_vec = r - r_prev
            y_vec = grad - g_prev
            sy = float(np.real(np.vdot(s_vec, y_vec)))
            if sy > 0:
                step = float(np.real(np.vdot(s_vec, s_vec))) / sy
        accepted = False
        for _ in range(60):
            r_new = problem.project(r - step * grad)
            ev_new = evaluate(r_new)
            if ev_new is not None:
                decrease = float(np.real(np.vdot(grad, r_new - r)))
                if ev_new[0] <= val + opts.armijo * decrease:
                    accepted = True
                    break
            step *= opts.backtrack
        if not accepted:
            break
        r_prev, g_prev = r, grad
        r = r_new
        val, lam, dmat = ev_new
    return r, lam, val, gap, it


def solve_dual(problem: DualProblem, options: DualOptions | None = None, rng: np.random.Generator | None = None) -> DualSolution:
    """Maximize the dual; see the module docstring for the method."""
    opts = options or DualOptions()
    lam = _init_lambda(problem)
    cols = np.flatnonzero(problem.q.q > 0)
    dm = problem.direction(lam)
    f = problem.objective(lam, dm)
    hist = [f]
    smooth = False
    fails = 0
    best_recent = f
    it = 0
    g = None
    for it in range(1, opts.max_iters + 1):
        g, j = problem.gradient(lam, dm)
        gnorm = float(np.linalg.norm(g))
        if gnorm <= opts.tol_g * (1.0 + abs(f)):
            smooth = True
            break
        directions = []
        try:
            hess = problem.hessian(lam, dm, j, cols)
            gv = g[:, cols].reshape(-1, order="F")
            nd = -np.linalg.solve(hess, gv)
            if np.all(np.isfinite(nd)):
                d = np.zeros_like(lam)
                d[:, cols] = nd.reshape(-1, cols.size, order="F")
                directions.append(d)
        except np.linalg.LinAlgError:
            pass
        step_dir = _solve_pd(j, g)
        if step_dir is not None:
            directions.append(0.5 * step_dir)
        directions.append(g)
        accepted = False
        for d in directions:
            slope = float(np.sum(g * d))
            if slope <= 0:
                continue
            gamma = opts.damping if d is not g else 1.0 / max(np.linalg.norm(j, 2), 1e-300)
            while gamma >= opts.min_step:
                cand = lam + gamma * d
                dm_c = problem.direction(cand)
                f_c = problem.objective(cand, dm_c)
                if f_c >= f + opts.armijo * gamma * slope:
                    accepted = True
                    break
                gamma *= opts.backtrack
            if accepted:
                break
        if not accepted:
            break
        lam, dm, f = cand, dm_c, f_c
        hist.append(f)
        if it % opts.stall_window == 0:
            if f - best_recent <= 1e-12 * (1.0 + abs(f)):
                break
            best_recent = f
    return _finish(problem, lam, dm, f, hist, smooth, it, opts, rng)


def _finish(problem, lam, dm, f, hist, smooth, iters, opts, rng) -> DualSolution:
    u = dm.eigvecs[:, : problem.split]
    j = problem.info(u)
    g = 2.0 * problem.q_half - 2.0 * j @ lam
    relaxed = None
    try:
        primal = bcrb_value(problem.q, j)
    except NonIdentifiable:
        primal = np.inf
    gap = primal - f
    if not smooth:
        # nonsmooth optimum: certify the value through the relaxed primal
        r0 = problem.scale * (u @ np.conj(u.T))
        r, lam_p, val_p, gap_p, it_p = _relaxed_primal(problem, r0, opts)
        iters += it_p
        relaxed = r
        dm_p = problem.direction(lam_p)
        f_p = problem.objective(lam_p, dm_p)
        if f_p >= f:
            lam, dm, f = lam_p, dm_p, f_p
            hist.append(f)
            u = dm.eigvecs[:, : problem.split]
            j = problem.info(u)
            g = 2.0 * problem.q_half - 2.0 * j @ lam
        gap = val_p - f
        if gap > opts.gap_tol * (1.0 + abs(f)):
            sol = _package(problem, lam, dm, f, g, j, False, gap, iters, hist, relaxed, opts)
            raise NonConverged(
                f"dual solve did not converge: duality gap {gap:.3e} after {iters} iterations",
                best=sol,
                context={"kind": problem.kind.value},
            )
    sol = _package(problem, lam, dm, f, g, j, smooth, gap, iters, hist, relaxed, opts)
    logger.debug(sol.log_line())
    return sol


def _package(problem, lam, dm, f, g, j, smooth, gap, iters, hist, relaxed, opts) -> DualSolution:
    eigengap = dm.eigengap(problem.split)
    step = _solve_pd(j, g)
    kkt = float(np.max(np.linalg.norm(0.5 * step, axis=0))) if step is not None else float("inf")
    cert = bool(smooth and eigengap > opts.cert_tol * max(abs(dm.eigvals[0]), 1e-300))
    return DualSolution(
        kind=problem.kind,
        lambda_star=lam,
        direction=dm,
        objective=float(f),
        grad_norm=float(np.linalg.norm(g)),
        eigengap=eigengap,
        certificate_ok=cert,
        kkt_residual=kkt,
        split=problem.split,
        scale=problem.scale,
        duality_gap=float(gap),
        smooth=smooth,
        iterations=iters,
        history=hist,
        relaxed_cov=relaxed,
    )


def _random_frame(rng: np.random.Generator, basis: np.ndarray, k: int) -> np.ndarray:
    """``k`` random orthonormal vectors in the span of ``basis`` (orthonormal columns)."""
    z = rng.standard_normal((basis.shape[1], k)) + 1j * rng.standard_normal((basis.shape[1], k))
    qm, rm = np.linalg.qr(z)
    qm = qm * (np.diagonal(rm) / np.abs(np.diagonal(rm)))
    return basis @ qm


def extract_frame(
    solution: DualSolution, rng: np.random.Generator | None = None, tie_tol: float = 1e-6
) -> np.ndarray:
    """Top-``r`` eigenvectors, randomized inside a tied cluster when uncertified."""
    dm = solution.direction
    r = solution.split
    u = dm.eigvecs[:, :r].copy()
    if solution.certificate_ok or r >= dm.eigvals.size:
        return u
    mu = dm.eigvals
    tol = tie_tol * max(abs(mu[0]), 1e-300)
    cluster = np.flatnonzero(np.abs(mu - mu[r - 1]) <= tol)
    above = np.flatnonzero(mu > mu[r - 1] + tol)
    need = r - above.size
    if rng is None or need <= 0 or cluster.size <= need:
        return u
    fill = _random_frame(rng, dm.eigvecs[:, cluster], need)
    return np.concatenate([dm.eigvecs[:, above], fill], axis=1)


def extract_beamformers(
    kind: ProblemKind,
    solution: DualSolution,
    power: float,
    m_tx: int,
    m_rx: int,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Beamformer matrix for the solved side.

    Receive: the top ``M_R`` unit eigenvectors. Transmit exploit: one column
    ``sqrt(P) v_1`` (covariance ``P v_1 v_1^H``). Transmit explore:
    ``sqrt(P / M_T) [v_1 .. v_MT]``.
    """
    u = extract_frame(solution, rng)
    if kind is ProblemKind.RX_COMBINER:
        return u[:, :m_rx]
    if kind is ProblemKind.TX_EXPLOIT:
        return np.sqrt(power) * u[:, :1]
    return np.sqrt(power / m_tx) * u[:, :m_tx]


def haar_frame(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    """``n x k`` matrix with Haar-distributed orthonormal columns."""
    z = (rng.standard_normal((n, k)) + 1j * rng.standard_normal((n, k))) * np.sqrt(0.5)
    qm, rm = np.linalg.qr(z)
    d = np.diagonal(rm)
    return qm * (d / np.abs(d))


@dataclass
class AlternatingResult:
    v: np.ndarray
    w: np.ndarray
    betas: list[float]
    solutions: list[DualSolution]
    certificates: list[bool]
    clipped_mass: float = 0.0


def alternating_optimize(
    state: PosteriorState,
    geom: ArrayGeometry,
    q: WeightMatrix,
    power: float,
    m_tx: int,
    m_rx: int,
    i_max: int,
    explore: bool,
    rng: np.random.Generator,
    options: DualOptions | None = None,
    prior: tuple[np.ndarray, float] | None = None,
) -> AlternatingResult:
    """Alternate receive and transmit dual solves from a random transmit start.

    A sub-solve result replaces the incumbent only if it does not raise the
    bound, so the recorded bound sequence never increases.
    """
    if i_max < 1:
        raise ValueError("i_max must be >= 1")
    jp, clipped = prior_fim(state, geom) if prior is None else prior
    v = np.sqrt(power / m_tx) * haar_frame(rng, geom.n_tx, m_tx)
    w = None
    beta_cur = np.inf
    betas: list[float] = []
    sols: list[DualSolution] = []
    certs: list[bool] = []
    tx_kind = ProblemKind.TX_EXPLORE if explore else ProblemKind.TX_EXPLOIT

    def value(v_, w_):
        return bcrb_value(q, jp + data_fim(state, v_, None, geom, w=w_))

    for it in range(i_max):
        for kind in (ProblemKind.RX_COMBINER, tx_kind):
            fixed = v if kind is ProblemKind.RX_COMBINER else w
            prob = build_problem(kind, fixed, state, geom, q, power, m_tx, m_rx, j_prior=jp)
            try:
                sol = solve_dual(prob, options, rng)
            except NonConverged as exc:
                exc.context["iteration"] = it
                raise
            sols.append(sol)
            certs.append(sol.certificate_ok)
            new = extract_beamformers(kind, sol, power, m_tx, m_rx, rng)
            cand = (v, new) if kind is ProblemKind.RX_COMBINER else (new, w)
            b = value(*cand)
            if w is None or b <= beta_cur:
                v, w = cand
                beta_cur = b
        betas.append(float(beta_cur))
    return AlternatingResult(v, w, betas, sols, certs, clipped)
