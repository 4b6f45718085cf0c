"""Multi-stage sensing strategies: BCRB-optimal design and two baselines.

All strategies share the posterior update and the final MMSE estimate; they
differ only in how each stage's beamformers are chosen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .array_model import (
    ArrayGeometry,
    BeamformerPair,
    SceneParams,
    complex_normal,
    simulate_measurement,
    target_response,
)
from .bfim import NonIdentifiable, WeightMatrix, bcrb_value, data_fim, prior_fim
from .dual import DualOptions, NonConverged, alternating_optimize, haar_frame
from .posterior import PosteriorState, init_posterior, mmse_estimate, update

STRATEGIES = ("proposed", "random", "steering")


@dataclass(frozen=True)
class SensingConfig:
    """System dimensions and schedule for one sensing episode."""

    n_tx: int
    n_rx: int
    m_tx: int
    m_rx: int
    stages: int
    t_explore: int = 0
    i_max: int = 1
    power: float = 1.0
    grid_k: int = 1024
    angle_range: tuple[float, float] = (-math.pi / 3, math.pi / 3)
    n_targets: int = 1
    q: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "angle_range", tuple(float(a) for a in self.angle_range))
        if self.q is not None:
            object.__setattr__(self, "q", tuple(float(x) for x in self.q))
        if min(self.n_tx, self.n_rx, self.m_tx, self.m_rx) < 1:
            raise ValueError("antenna and beamformer counts must be >= 1")
        if self.m_tx > self.n_tx or self.m_rx > self.n_rx:
            raise ValueError("need m_tx <= n_tx and m_rx <= n_rx")
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if not 0 <= self.t_explore <= self.stages:
            raise ValueError(f"t_explore must lie in [0, {self.stages}]")
        if self.i_max < 1:
            raise ValueError("i_max must be >= 1")
        if not self.power > 0:
            raise ValueError("power must be positive")
        if self.q is not None and len(self.q) != 3 * self.n_targets:
            raise ValueError("q must have 3L entries")

    @property
    def geometry(self) -> ArrayGeometry:
        return ArrayGeometry(self.n_tx, self.n_rx)

    @property
    def weights(self) -> WeightMatrix:
        if self.q is None:
            return WeightMatrix.angles_only(self.n_targets)
        return WeightMatrix(np.asarray(self.q))


@dataclass
class StageRecord:
    """What happened in one stage.

    ``bcrb`` is the bound for the beamformers actually used, evaluated on the
    posterior the design saw. ``log_weights_before`` / ``log_weights_after``
    are kept only when a trace is requested.
    """

    stage: int
    strategy: str
    v: np.ndarray
    w: np.ndarray
    y: np.ndarray
    bcrb: float
    certificates: tuple[bool, ...] = ()
    fallback: bool = False
    explore: bool = False
    entropy: float = float("nan")
    betas: tuple[float, ...] = ()
    log_weights_before: np.ndarray | None = field(default=None, repr=False)
    log_weights_after: np.ndarray | None = field(default=None, repr=False)


@dataclass(frozen=True)
class Design:
    v: np.ndarray
    w: np.ndarray
    bcrb: float | None = None
    certificates: tuple[bool, ...] = ()
    fallback: bool = False
    explore: bool = False
    betas: tuple[float, ...] = ()


Chooser = Callable[[PosteriorState, int, np.random.Generator], Design]


def stage_rng(seed: int, stage: int, purpose: int = 0) -> np.random.Generator:
    """Independent generator for a given stage and purpose."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(purpose, stage)))


def _bound(state: PosteriorState, geom: ArrayGeometry, q: WeightMatrix, v: np.ndarray, w: np.ndarray) -> float:
    jp, _ = prior_fim(state, geom)
    try:
        return bcrb_value(q, jp + data_fim(state, v, None, geom, w=w))
    except NonIdentifiable:
        return float("inf")


def _episode(
    name: str,
    scene: SceneParams,
    config: SensingConfig,
    choose: Chooser,
    rng: np.random.Generator,
    noise: np.ndarray | None,
    keep_posterior: bool,
) -> tuple[np.ndarray, list[StageRecord]]:
    geom = config.geometry
    if scene.n_targets != config.n_targets:
        raise ValueError("scene and config disagree on the number of targets")
    seed = int(rng.integers(2**63))
    state = init_posterior(config.angle_range, config.grid_k, config.n_targets)
    q = config.weights
    records: list[StageRecord] = []
    for k in range(1, config.stages + 1):
        design = choose(state, k, stage_rng(seed, k))
        pair = BeamformerPair(design.v, design.w)
        pair.check(geom, config.power)
        bound = design.bcrb if design.bcrb is not None else _bound(state, geom, q, pair.v, pair.w)
        # full-width draw so designs with fewer columns see the same leading noise
        z = noise[k - 1] if noise is not None else complex_normal(stage_rng(seed, k, 1), (geom.n_rx, config.m_tx))
        y = simulate_measurement(scene, geom, pair, noise=z)
        before = state.grid.log_weights.copy() if keep_posterior else None
        state = update(state, pair, y, geom)
        records.append(
            StageRecord(
                stage=k,
                strategy=name,
                v=pair.v,
                w=pair.w,
                y=y,
                bcrb=float(bound),
                certificates=design.certificates,
                fallback=design.fallback,
                explore=design.explore,
                entropy=state.entropy(),
                betas=design.betas,
                log_weights_before=before,
                log_weights_after=state.grid.log_weights.copy() if keep_posterior else None,
            )
        )
    return mmse_estimate(state), records


def run_proposed(
    scene: SceneParams,
    config: SensingConfig,
    rng: np.random.Generator,
    noise: np.ndarray | None = None,
    keep_posterior: bool = False,
    options: DualOptions | None = None,
) -> tuple[np.ndarray, list[StageRecord]]:
    """BCRB-optimal design at every stage, exploring for the first ``t_explore`` stages."""
    geom = config.geometry
    q = config.weights

    def choose(state: PosteriorState, k: int, srng: np.random.Generator) -> Design:
        explore = k <= config.t_explore
        try:
            res = alternating_optimize(
                state, geom, q, config.power, config.m_tx, config.m_rx, config.i_max, explore, srng, options
            )
        except NonConverged as exc:
            exc.context["stage"] = k
            raise
        return Design(res.v, res.w, res.betas[-1], tuple(res.certificates), False, explore, tuple(res.betas))

    return _episode("proposed", scene, config, choose, rng, noise, keep_posterior)


def random_orthogonal_pair(config: SensingConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Haar-random orthonormal columns; transmit scaled to total power P."""
    v = math.sqrt(config.power / config.m_tx) * haar_frame(rng, config.n_tx, config.m_tx)
    w = haar_frame(rng, config.n_rx, config.m_rx)
    return v, w


def run_random_orthogonal(
    scene: SceneParams,
    config: SensingConfig,
    rng: np.random.Generator,
    noise: np.ndarray | None = None,
    keep_posterior: bool = False,
) -> tuple[np.ndarray, list[StageRecord]]:
    """Fresh random orthogonal beamformers at every stage."""

    def choose(state: PosteriorState, k: int, srng: np.random.Generator) -> Design:
        v, w = random_orthogonal_pair(config, srng)
        return Design(v, w)

    return _episode("random", scene, config, choose, rng, noise, keep_posterior)


def steering_pair(
    h: np.ndarray, power: float, m_rx: int, atol: float = 1e-9
) -> tuple[np.ndarray, np.ndarray] | None:
    """Top-``M_R`` left and top right singular vectors of ``h``; None if ``h`` is ~0."""
    if np.linalg.norm(h) <= atol:
        return None
    u, _, vh = np.linalg.svd(h)
    w = u[:, :m_rx]
    v = math.sqrt(power) * np.conj(vh[:1, :]).T
    return v, w


def run_steering_mmse(
    scene: SceneParams,
    config: SensingConfig,
    rng: np.random.Generator,
    noise: np.ndarray | None = None,
    keep_posterior: bool = False,
) -> tuple[np.ndarray, list[StageRecord]]:
    """Beamform toward the current MMSE estimate of the channel."""
    geom = config.geometry

    def choose(state: PosteriorState, k: int, srng: np.random.Generator) -> Design:
        est = SceneParams.from_real_vector(mmse_estimate(state))
        pair = steering_pair(target_response(est, geom), config.power, config.m_rx)
        if pair is None:
            v, w = random_orthogonal_pair(config, srng)
            return Design(v, w, fallback=True)
        return Design(*pair)

    return _episode("steering", scene, config, choose, rng, noise, keep_posterior)


RUNNERS = {
    "proposed": run_proposed,
    "random": run_random_orthogonal,
    "steering": run_steering_mmse,
}
