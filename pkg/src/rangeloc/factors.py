"""Constraint factors: residuals, robust loss, and measurement weights.

Two cost conventions coexist (deliberately, they are not interchangeable):
    - scalar factors (range, smoothness) cost ``w * rho(e)``;
    - vector factors (relative translation/rotation/transform, pose
      smoothness) cost ``rho(sqrt(e^T W e))``.

``rho`` is the Pseudo-Huber loss ``xi^2 * (sqrt(1 + (e/xi)^2) - 1)``:
quadratic near zero, linear in the tails.

Factors are frozen dataclasses and residual evaluation is pure, so factors
may be shared and evaluated from any number of threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import liegroup
from .errors import SingularGeometryError

SINGULAR_RANGE_NORM = 1e-9

DEFAULT_XI = 1.0
DEFAULT_IOTA = 1.0


def pseudo_huber(rho_in: float, xi: float) -> tuple[float, float]:
    """Loss value and exact derivative d(rho)/d(input) at ``rho_in``."""
    if xi <= 0.0:
        raise ValueError("xi must be positive")
    r = rho_in / xi
    root = math.sqrt(1.0 + r * r)
    value = xi * xi * (root - 1.0)
    d_value = rho_in / root
    return value, d_value


def weight_from_variance(sigma_sq: float, iota: float) -> float:
    """Weight iota^2 / (sigma^2 + iota^2), always in (0, 1]."""
    if sigma_sq < 0.0:
        raise ValueError("variance must be nonnegative")
    if iota <= 0.0:
        raise ValueError("iota must be positive")
    return iota * iota / (sigma_sq + iota * iota)


def range_variance(eta: float) -> float:
    """3-sigma rule: bounded noise |n| <= eta modeled as N(0, eta^2/9)."""
    return eta * eta / 9.0


def smoothness_variance(v_max: float, dt: float) -> float:
    """3-sigma rule applied to the step bound v_max * dt."""
    b = v_max * dt
    return b * b / 9.0


@dataclass(frozen=True)
class RobustLoss:
    """Pseudo-Huber slope parameter."""

    xi: float = DEFAULT_XI

    def __post_init__(self):
        if self.xi <= 0.0:
            raise ValueError("xi must be positive")

    def __call__(self, rho_in: float) -> tuple[float, float]:
        return pseudo_huber(rho_in, self.xi)


@dataclass(frozen=True)
class RangeFactor:
    """One range measurement d to a fixed anchor; cost w_r * rho(e_r)."""

    d: float
    anchor: np.ndarray
    w_r: float
    xi: float = DEFAULT_XI

    def __post_init__(self):
        object.__setattr__(self, "anchor", np.asarray(self.anchor, dtype=float))
        if self.d < 0.0:
            raise ValueError("range must be nonnegative")
        if not 0.0 < self.w_r <= 1.0:
            raise ValueError("w_r must lie in (0, 1]")


@dataclass(frozen=True)
class SmoothnessFactor:
    """Distance penalty between consecutive translations; cost w_s * rho(e_s)."""

    w_s: float
    dt: float
    v_max: float
    xi: float = DEFAULT_XI

    def __post_init__(self):
        if not 0.0 < self.w_s <= 1.0:
            raise ValueError("w_s must lie in (0, 1]")
        if self.dt <= 0.0 or self.v_max <= 0.0:
            raise ValueError("dt and v_max must be positive")


def _require_spsd(W: np.ndarray, dim: int) -> np.ndarray:
    W = np.asarray(W, dtype=float)
    if W.shape != (dim, dim) or np.abs(W - W.T).max() > 1e-9:
        raise ValueError(f"weight must be a symmetric {dim}x{dim} matrix")
    if np.linalg.eigvalsh(W).min() < -1e-9:
        raise ValueError("weight must be positive semidefinite")
    return W


@dataclass(frozen=True)
class RelTranslationFactor:
    """Measured relative translation l between two nodes."""

    l: np.ndarray
    W: np.ndarray
    xi: float = DEFAULT_XI

    def __post_init__(self):
        object.__setattr__(self, "l", np.asarray(self.l, dtype=float))
        object.__setattr__(self, "W", _require_spsd(self.W, 3))


@dataclass(frozen=True)
class RelRotationFactor:
    """Measured relative rotation U between two nodes."""

    U: np.ndarray
    W: np.ndarray
    xi: float = DEFAULT_XI

    def __post_init__(self):
        object.__setattr__(self, "U", liegroup.require_rotation(self.U))
        object.__setattr__(self, "W", _require_spsd(self.W, 3))


@dataclass(frozen=True)
class RelTransformFactor:
    """Measured relative transformation Q between two nodes."""

    Q: np.ndarray
    W: np.ndarray
    xi: float = DEFAULT_XI

    def __post_init__(self):
        object.__setattr__(self, "Q", liegroup.require_pose(self.Q))
        object.__setattr__(self, "W", _require_spsd(self.W, 6))


@dataclass(frozen=True)
class PoseSmoothnessFactor:
    """Pose step penalty driven by two orientation-sensor readings.

    The 6x6 weight is block-diagonal diag(W_o, W_t): W_o weights the
    rotational residual (orientation-sensor confidence), W_t = w_s * I
    weights the translational residual, so orientation fusion does not
    disturb the translation estimate.
    """

    R_meas_prev: np.ndarray
    R_meas_curr: np.ndarray
    W: np.ndarray
    xi: float = DEFAULT_XI

    def __post_init__(self):
        object.__setattr__(self, "R_meas_prev", liegroup.require_rotation(self.R_meas_prev))
        object.__setattr__(self, "R_meas_curr", liegroup.require_rotation(self.R_meas_curr))
        W = _require_spsd(self.W, 6)
        if np.abs(W[:3, 3:]).max() > 1e-12 or np.abs(W[3:, :3]).max() > 1e-12:
            raise ValueError("pose smoothness weight must be block-diagonal")
        object.__setattr__(self, "W", W)


def pose_smoothness_weight(W_o: np.ndarray, w_s: float) -> np.ndarray:
    """Assemble diag(W_o, w_s * I)."""
    W = np.zeros((6, 6))
    W[:3, :3] = W_o
    W[3:, 3:] = w_s * np.eye(3)
    return W


def range_residual(t: np.ndarray, f: RangeFactor) -> tuple[float, np.ndarray]:
    """Residual e_r = d - ||t - anchor|| and its gradient wrt t.

    Raises SingularGeometryError when t coincides with the anchor (the
    gradient divides by the distance).
    """
    diff = t - f.anchor
    dist = math.sqrt(float(diff @ diff))
    if dist < SINGULAR_RANGE_NORM:
        raise SingularGeometryError("translation coincides with anchor")
    return f.d - dist, -diff / dist


def smoothness_residual(t_k: np.ndarray, t_prev: np.ndarray) -> float:
    """Euclidean distance between consecutive translations."""
    diff = t_k - t_prev
    return math.sqrt(float(diff @ diff))


def rel_translation_residual(t_i: np.ndarray, t_j: np.ndarray, f: RelTranslationFactor) -> np.ndarray:
    return f.l - (t_i - t_j)


def rel_rotation_residual(R_i: np.ndarray, R_j: np.ndarray, f: RelRotationFactor) -> np.ndarray:
    return liegroup.log_so3(f.U @ (R_i @ R_j).T)


def rel_transform_residual(P_i: np.ndarray, P_j: np.ndarray, f: RelTransformFactor) -> np.ndarray:
    return liegroup.log_se3(f.Q @ liegroup.inverse(P_i @ P_j))


def pose_smoothness_residual(P_k: np.ndarray, P_prev: np.ndarray, f: PoseSmoothnessFactor) -> np.ndarray:
    """log_SE3 of (relative-orientation block) * P_k^-1 * P_prev."""
    rel = liegroup.make_pose(f.R_meas_prev.T @ f.R_meas_curr, np.zeros(3))
    return liegroup.log_se3(rel @ liegroup.inverse(P_k) @ P_prev)


def range_residual_pose(P_k: np.ndarray, anchor_pose: np.ndarray, d: float) -> float:
    """Range residual in pose form; only the translation columns matter.

    The residual value itself is defined even at zero distance; the
    robot-at-anchor singularity lives in the derivative and is handled by
    the solver (factor skipped for the iteration, warning recorded).
    """
    diff = liegroup.translation_of(P_k) - liegroup.translation_of(anchor_pose)
    return d - math.sqrt(float(diff @ diff))


def mahalanobis_cost(e: np.ndarray, W: np.ndarray, xi: float) -> float:
    """rho(sqrt(e^T W e)) for vector residuals."""
    g = math.sqrt(max(0.0, float(e @ W @ e)))
    value, _ = pseudo_huber(g, xi)
    return value
