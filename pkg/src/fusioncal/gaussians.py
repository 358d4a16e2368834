"""Gaussian algebra and linear-Gaussian state-space primitives.

Dynamics:    x_k = F @ x_{k-1} + w,  w ~ N(0, Q)
Measurement: z_k = H @ x_k + v,      v ~ N(0, R)

States are 4-d (position, velocity on a plane), measurements 2-d positions.
All densities are evaluated in the natural-log domain; covariances receive a
small trace-scaled diagonal jitter before factorization so that repeated
products and inversions stay positive definite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Relative jitter added to covariance diagonals before factorization.
JITTER_REL = 1e-9
# Absolute floor, only relevant for exactly-zero covariances.
JITTER_ABS = 1e-12

LOG_2PI = float(np.log(2.0 * np.pi))


class NumericalError(ValueError):
    """Raised when a covariance or weight computation degenerates."""


def regularize_cov(cov: np.ndarray) -> np.ndarray:
    """Return a symmetrized copy of cov with trace-scaled diagonal jitter."""
    cov = np.asarray(cov, dtype=np.float64)
    d = cov.shape[-1]
    sym = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    tr = np.trace(sym, axis1=-2, axis2=-1)
    eps = np.asarray(JITTER_REL * tr / d + JITTER_ABS)
    return sym + eps[..., None, None] * np.eye(d)


def _chol(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(regularize_cov(cov))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"covariance not positive definite: {exc}") from exc


@dataclass
class Gaussian:
    """A multivariate normal with mean vector and covariance matrix."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ValueError(f"cov shape {self.cov.shape} does not match mean dim {d}")
        if not np.allclose(self.cov, self.cov.T, atol=1e-9):
            raise ValueError("cov must be symmetric within 1e-9")
        self.cov = 0.5 * (self.cov + self.cov.T)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass
class MotionModel:
    """Constant-velocity transition with correlated process noise.

    F = [[I, dt*I], [0, I]],  Q = sigma2 * [[q1*I, q2*I], [q2*I, q3*I]]
    with 2x2 blocks.  Defaults reproduce a unit-step discrete
    white-noise-acceleration model (q3 = 1 makes Q singular PSD; the
    factorization jitter absorbs that).
    """

    dt: float = 1.0
    sigma2: float = 0.25
    q1: float = 0.25
    q2: float = 0.5
    q3: float = 1.0
    F: np.ndarray = field(init=False, repr=False)
    Q: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not (0.0 < self.q1 < self.q2 < self.q3 <= 1.0):
            raise ValueError("require 0 < q1 < q2 < q3 <= 1")
        if self.q1 * self.q3 < self.q2**2 - 1e-12:
            raise ValueError("q values give an indefinite Q")
        eye = np.eye(2)
        zero = np.zeros((2, 2))
        self.F = np.block([[eye, self.dt * eye], [zero, eye]])
        self.Q = self.sigma2 * np.block(
            [[self.q1 * eye, self.q2 * eye], [self.q2 * eye, self.q3 * eye]]
        )


@dataclass
class SensorModel:
    """Linear position sensor: H = [I 0], R = sigma_n^2 * I by default."""

    H: np.ndarray = field(default_factory=lambda: np.hstack([np.eye(2), np.zeros((2, 2))]))
    R: np.ndarray = field(default_factory=lambda: 100.0 * np.eye(2))

    def __post_init__(self) -> None:
        self.H = np.asarray(self.H, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        if self.H.shape != (2, 4):
            raise ValueError("H must be 2x4")
        if self.R.shape != (2, 2):
            raise ValueError("R must be 2x2")
        if np.linalg.eigvalsh(0.5 * (self.R + self.R.T)).min() <= 0:
            raise ValueError("R must be positive definite")
        # (H, F) observability for the constant-velocity F: rank of [H; HF; ...].
        F = MotionModel().F
        obs = np.vstack([self.H @ np.linalg.matrix_power(F, k) for k in range(4)])
        if np.linalg.matrix_rank(obs) < 4:
            raise ValueError("(H, F) must be an observable pair")

    @classmethod
    def position_sensor(cls, sigma_n: float) -> "SensorModel":
        return cls(R=float(sigma_n) ** 2 * np.eye(2))


@dataclass
class OffsetTransform:
    """A sensor's position offset; maps points between local frames.

    A point with coordinates x in the frame of a sensor at offset theta_from
    has coordinates x + theta_from - theta_to in the frame of a sensor at
    theta_to.  Translation only: velocities and covariances are untouched.
    """

    theta: np.ndarray

    def __post_init__(self) -> None:
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(2)


def gaussian_logpdf(x: np.ndarray, g: Gaussian) -> float:
    """Natural-log density of N(x; g.mean, g.cov)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape != g.mean.shape:
        raise ValueError(f"dimension mismatch: x {x.shape} vs mean {g.mean.shape}")
    chol = _chol(g.cov)
    diff = np.linalg.solve(chol, x - g.mean)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return float(-0.5 * (g.dim * LOG_2PI + logdet + diff @ diff))


def logpdf_batch(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Log-density of rows of x under a shared N(mean, cov); x is (n, d)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    chol = _chol(cov)
    diff = np.linalg.solve(chol, (x - mean).T).T
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (mean.shape[0] * LOG_2PI + logdet + np.einsum("nd,nd->n", diff, diff))


def kf_predict(track: Gaussian, m: MotionModel) -> Gaussian:
    """One prediction step: mean -> F mean, cov -> F cov F^T + Q."""
    if track.dim != 4:
        raise ValueError("kf_predict expects a 4-d track")
    return Gaussian(m.F @ track.mean, m.F @ track.cov @ m.F.T + m.Q)


def kf_update(
    track: Gaussian, z: np.ndarray, s: SensorModel
) -> tuple[Gaussian, np.ndarray, np.ndarray]:
    """Standard Kalman update.

    Returns (posterior, innovation_mean, innovation_cov) where
    innovation_cov = R + H cov H^T.
    """
    z = np.asarray(z, dtype=np.float64).reshape(2)
    if track.dim != 4:
        raise ValueError("kf_update expects a 4-d track")
    innov = z - s.H @ track.mean
    S = s.R + s.H @ track.cov @ s.H.T
    chol = _chol(S)
    # K = P H^T S^{-1} via two triangular solves
    PHt = track.cov @ s.H.T
    K = np.linalg.solve(chol.T, np.linalg.solve(chol, PHt.T)).T
    mean = track.mean + K @ innov
    eye = np.eye(4)
    # Joseph form for symmetry under repeated updates
    A = eye - K @ s.H
    cov = A @ track.cov @ A.T + K @ s.R @ K.T
    return Gaussian(mean, cov), innov, S


def apply_offset(obj, from_theta: OffsetTransform, to_theta: OffsetTransform):
    """Re-express a point, state vector, or Gaussian track in another frame.

    Positions shift by theta_from - theta_to; velocities and covariances are
    unchanged (translation-only transforms).
    """
    shift = from_theta.theta - to_theta.theta
    if isinstance(obj, Gaussian):
        mean = obj.mean.copy()
        mean[:2] += shift
        return Gaussian(mean, obj.cov.copy())
    arr = np.asarray(obj, dtype=np.float64).copy()
    arr[..., :2] += shift
    return arr


def gaussian_product(gs: list[Gaussian]) -> Gaussian:
    """Normalized product: precisions add, precision-weighted means add."""
    if not gs:
        raise ValueError("need at least one Gaussian")
    d = gs[0].dim
    if any(g.dim != d for g in gs):
        raise ValueError("all Gaussians must share a dimension")
    prec_sum = np.zeros((d, d))
    info_sum = np.zeros(d)
    for g in gs:
        prec = np.linalg.inv(regularize_cov(g.cov))
        prec_sum += prec
        info_sum += prec @ g.mean
    cov = np.linalg.inv(regularize_cov(prec_sum))
    return Gaussian(cov @ info_sum, cov)


def log_bhattacharyya(g1: Gaussian, g2: Gaussian) -> float:
    """log of the Bhattacharyya coefficient, standard mean/covariance form.

    BC = exp(-1/8 dmu^T M^{-1} dmu) * |S1|^{1/4} |S2|^{1/4} / |M|^{1/2},
    M = (S1 + S2) / 2.
    """
    if g1.dim != g2.dim:
        raise ValueError("dimension mismatch")
    mid = regularize_cov(0.5 * (g1.cov + g2.cov))
    chol = _chol(mid)
    diff = np.linalg.solve(chol, g1.mean - g2.mean)
    logdet_mid = 2.0 * np.sum(np.log(np.diag(chol)))
    logdet_1 = 2.0 * np.sum(np.log(np.diag(_chol(g1.cov))))
    logdet_2 = 2.0 * np.sum(np.log(np.diag(_chol(g2.cov))))
    return float(-0.125 * diff @ diff + 0.25 * (logdet_1 + logdet_2) - 0.5 * logdet_mid)


def bhattacharyya_coefficient(g1: Gaussian, g2: Gaussian) -> float:
    """Bhattacharyya coefficient in (0, 1], standard form."""
    return float(np.exp(log_bhattacharyya(g1, g2)))


def bhattacharyya_coefficient_precision(g1: Gaussian, g2: Gaussian) -> float:
    """Bhattacharyya coefficient via the precision-matrix expression.

    BC = (|S1^{-1}| |S2^{-1}|)^{1/4} / |(S1^{-1} + S2^{-1})/2|^{1/2}
         * exp{-1/4 (mu1^T S1^{-1} mu1 + mu2^T S2^{-1} mu2)
               +1/4 eta^T (S1^{-1} + S2^{-1})^{-1} eta},
    eta = S1^{-1} mu1 + S2^{-1} mu2.  Algebraically equal to the standard
    form; kept as an independent route for cross-checking.
    """
    if g1.dim != g2.dim:
        raise ValueError("dimension mismatch")
    p1 = np.linalg.inv(regularize_cov(g1.cov))
    p2 = np.linalg.inv(regularize_cov(g2.cov))
    eta = p1 @ g1.mean + p2 @ g2.mean
    psum = regularize_cov(p1 + p2)
    sign1, ld1 = np.linalg.slogdet(p1)
    sign2, ld2 = np.linalg.slogdet(p2)
    signm, ldm = np.linalg.slogdet(0.5 * psum)
    if min(sign1, sign2, signm) <= 0:
        raise NumericalError("precision matrices must be positive definite")
    quad = -0.25 * (g1.mean @ p1 @ g1.mean + g2.mean @ p2 @ g2.mean)
    quad += 0.25 * eta @ np.linalg.solve(psum, eta)
    return float(np.exp(0.25 * (ld1 + ld2) - 0.5 * ldm + quad))
