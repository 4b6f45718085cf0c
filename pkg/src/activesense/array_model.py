"""Uniform linear array responses and the bistatic target response model.

A scene with ``L`` point targets maps to the channel

    H(theta) = sum_i alpha_i a_R(phi_i) a_T(phi_i)^H

with half-wavelength steering vectors ``a(phi)_n = exp(i pi n sin phi)``.
The real parameter vector is ``theta = [phi, Re alpha, Im alpha]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

Side = Literal["tx", "rx"]


@dataclass(frozen=True)
class ArrayGeometry:
    """Transmit and receive ULA sizes (half-wavelength spacing)."""

    n_tx: int
    n_rx: int

    def __post_init__(self) -> None:
        if int(self.n_tx) < 1 or int(self.n_rx) < 1:
            raise ValueError(f"array sizes must be >= 1, got n_tx={self.n_tx}, n_rx={self.n_rx}")

    def size(self, side: Side) -> int:
        if side == "tx":
            return self.n_tx
        if side == "rx":
            return self.n_rx
        raise ValueError(f"side must be 'tx' or 'rx', got {side!r}")


@dataclass(frozen=True)
class SceneParams:
    """Target angles (radians) and complex fading coefficients."""

    angles: np.ndarray
    coeffs: np.ndarray

    def __post_init__(self) -> None:
        angles = np.atleast_1d(np.asarray(self.angles, dtype=float))
        coeffs = np.atleast_1d(np.asarray(self.coeffs, dtype=complex))
        if angles.ndim != 1 or angles.shape != coeffs.shape:
            raise ValueError("angles and coeffs must be 1-D with equal length")
        if angles.size == 0:
            raise ValueError("scene needs at least one target")
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def n_targets(self) -> int:
        return self.angles.size

    def as_real_vector(self) -> np.ndarray:
        """Return ``theta = [phi, Re alpha, Im alpha]`` (length 3L)."""
        return np.concatenate([self.angles, self.coeffs.real, self.coeffs.imag])

    @classmethod
    def from_real_vector(cls, theta: np.ndarray) -> "SceneParams":
        theta = np.asarray(theta, dtype=float)
        if theta.ndim != 1 or theta.size % 3:
            raise ValueError("theta length must be a multiple of 3")
        n = theta.size // 3
        return cls(theta[:n], theta[n : 2 * n] + 1j * theta[2 * n :])


@dataclass(frozen=True)
class BeamformerPair:
    """Transmit matrix ``v`` (N_T x M_T) and receive matrix ``w`` (N_R x M_R)."""

    v: np.ndarray
    w: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        v = np.asarray(self.v, dtype=complex)
        w = np.asarray(self.w, dtype=complex)
        if v.ndim == 1:
            v = v[:, None]
        if w.ndim == 1:
            w = w[:, None]
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "w", w)

    @property
    def power(self) -> float:
        return float(np.real(np.vdot(self.v, self.v)))

    def check(self, geom: ArrayGeometry, power: float | None = None, slack: float = 1e-10) -> None:
        """Validate dimensions, power budget and receive rank."""
        if self.v.shape[0] != geom.n_tx:
            raise ValueError(f"V has {self.v.shape[0]} rows, expected N_T={geom.n_tx}")
        if self.w.shape[0] != geom.n_rx:
            raise ValueError(f"W has {self.w.shape[0]} rows, expected N_R={geom.n_rx}")
        if power is not None and self.power > power * (1.0 + slack):
            raise ValueError(f"tr(VV^H)={self.power:.6g} exceeds power budget {power:.6g}")
        if np.linalg.matrix_rank(self.w) < self.w.shape[1]:
            raise ValueError("W must have full column rank")


def param_index(i: int, n_targets: int) -> tuple[str, int]:
    """Map a 0-based index of theta to (``"phi"|"re"|"im"``, target)."""
    if not 0 <= i < 3 * n_targets:
        raise IndexError(f"parameter index {i} out of range for L={n_targets}")
    kind = ("phi", "re", "im")[i // n_targets]
    return kind, i % n_targets


def steering_vector(n: int, phi: float | np.ndarray) -> np.ndarray:
    """ULA steering vector(s), ``exp(i pi n sin phi)``.

    Scalar ``phi`` gives shape ``(n,)``; an array of angles gives ``phi.shape + (n,)``.
    """
    phi = np.asarray(phi, dtype=float)
    if not np.all(np.isfinite(phi)):
        raise ValueError("angle must be finite")
    idx = np.arange(n)
    return np.exp(1j * np.pi * np.multiply.outer(np.sin(phi), idx))


def steering_derivative(n: int, phi: float | np.ndarray) -> np.ndarray:
    """First derivative of :func:`steering_vector` with respect to ``phi``."""
    phi = np.asarray(phi, dtype=float)
    idx = np.arange(n)
    return 1j * np.pi * np.multiply.outer(np.cos(phi), idx) * steering_vector(n, phi)


def steering_second_derivative(n: int, phi: float | np.ndarray) -> np.ndarray:
    """Second derivative of :func:`steering_vector` with respect to ``phi``."""
    phi = np.asarray(phi, dtype=float)
    idx = np.arange(n)
    c = np.multiply.outer(np.cos(phi), idx)
    s = np.multiply.outer(np.sin(phi), idx)
    return (-(np.pi * c) ** 2 - 1j * np.pi * s) * steering_vector(n, phi)


def geometry_steering(geom: ArrayGeometry, side: Side, phi: float | np.ndarray) -> np.ndarray:
    return steering_vector(geom.size(side), phi)


def _outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a b^H`` batched over leading axes."""
    return a[..., :, None] * np.conj(b[..., None, :])


def response_bases(angles: np.ndarray, geom: ArrayGeometry) -> dict[str, np.ndarray]:
    """Per-target rank-one building blocks of H and its derivatives.

    Returns arrays of shape ``angles.shape + (N_R, N_T)``:

    ``A``: a_R a_T^H, ``D``: d/dphi of A, ``E``: d2/dphi2 of A.
    """
    angles = np.asarray(angles, dtype=float)
    ar = steering_vector(geom.n_rx, angles)
    at = steering_vector(geom.n_tx, angles)
    dar = steering_derivative(geom.n_rx, angles)
    dat = steering_derivative(geom.n_tx, angles)
    d2ar = steering_second_derivative(geom.n_rx, angles)
    d2at = steering_second_derivative(geom.n_tx, angles)
    return {
        "A": _outer(ar, at),
        "D": _outer(dar, at) + _outer(ar, dat),
        "E": _outer(d2ar, at) + 2.0 * _outer(dar, dat) + _outer(ar, d2at),
    }


def target_response(scene: SceneParams, geom: ArrayGeometry) -> np.ndarray:
    """Channel ``H = sum_i alpha_i a_R(phi_i) a_T(phi_i)^H`` (N_R x N_T)."""
    ar = steering_vector(geom.n_rx, scene.angles)  # (L, N_R)
    at = steering_vector(geom.n_tx, scene.angles)
    return (ar.T * scene.coeffs) @ np.conj(at)


def response_jacobian(scene: SceneParams, geom: ArrayGeometry, i: int) -> np.ndarray:
    """Derivative of H with respect to the 0-based parameter ``theta_i``."""
    kind, t = param_index(i, scene.n_targets)
    phi = scene.angles[t]
    ar = steering_vector(geom.n_rx, phi)
    at = steering_vector(geom.n_tx, phi)
    if kind == "phi":
        dar = steering_derivative(geom.n_rx, phi)
        dat = steering_derivative(geom.n_tx, phi)
        return scene.coeffs[t] * (_outer(dar, at) + _outer(ar, dat))
    base = _outer(ar, at)
    return base if kind == "re" else 1j * base


def response_hessian(scene: SceneParams, geom: ArrayGeometry, i: int, j: int) -> np.ndarray:
    """Second derivative of H with respect to ``theta_i`` and ``theta_j``."""
    ki, ti = param_index(i, scene.n_targets)
    kj, tj = param_index(j, scene.n_targets)
    zero = np.zeros((geom.n_rx, geom.n_tx), dtype=complex)
    if ti != tj:
        return zero
    pair = frozenset((ki, kj)) if ki != kj else ki
    if pair == "phi":
        return scene.coeffs[ti] * response_bases(scene.angles[ti], geom)["E"]
    if pair == frozenset(("phi", "re")):
        return response_bases(scene.angles[ti], geom)["D"]
    if pair == frozenset(("phi", "im")):
        return 1j * response_bases(scene.angles[ti], geom)["D"]
    return zero


def complex_normal(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Circular CN(0, 1) draws: variance 1/2 on each real component."""
    z = rng.standard_normal(shape + (2,))
    return (z[..., 0] + 1j * z[..., 1]) * np.sqrt(0.5)


def simulate_measurement(
    scene: SceneParams,
    geom: ArrayGeometry,
    pair: BeamformerPair,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """Draw ``Y = W^H H V + W^H Z`` (M_R x M_T).

    ``noise`` may supply Z directly (N_R x M_T, or wider; extra columns are
    ignored) so that several designs can share one noise realization.
    """
    v, w = pair.v, pair.w
    if v.shape[0] != geom.n_tx or w.shape[0] != geom.n_rx:
        raise ValueError(
            f"beamformer shapes {v.shape}, {w.shape} do not match geometry "
            f"(N_T={geom.n_tx}, N_R={geom.n_rx})"
        )
    m_t = v.shape[1]
    if noise is None:
        if rng is None:
            raise ValueError("need rng or noise")
        z = complex_normal(rng, (geom.n_rx, m_t))
    else:
        noise = np.asarray(noise)
        if noise.shape[0] != geom.n_rx or noise.shape[1] < m_t:
            raise ValueError(f"noise shape {noise.shape} incompatible with N_R={geom.n_rx}, M_T={m_t}")
        z = noise[:, :m_t]
    h = target_response(scene, geom)
    wh = np.conj(w.T)
    return wh @ h @ v + wh @ z
