"""Closed-form exponential/logarithm maps on SO(3) and SE(3).

Conventions:
    - Rotations are 3x3 matrices, poses are 4x4 homogeneous matrices.
    - Rotation tangent vectors ``omega`` are axis-angle 3-vectors (radians).
    - Pose tangent vectors are 6-vectors ``(omega, u)`` with the rotational
      part first; the translation of ``exp`` is ``V(omega) @ u`` where V is
      the SO(3) left Jacobian.
    - ``log_so3`` returns the canonical branch with ``norm(omega) <= pi``.
      At exactly pi the axis sign is chosen so that the largest-magnitude
      component is positive.

Numerical policy:
    Rodrigues / closed-form coefficients switch to second-order Taylor
    series below SMALL_ANGLE = 1e-6 rad, which avoids 0/0 without any
    precision loss at double precision. The pi-branch of the log engages
    within PI_ANGLE_BAND of pi, where the (R - R^T) extraction loses
    accuracy; there the axis is recovered from the diagonal entries.

All functions are pure and all arrays are treated as immutable values.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import InvalidRotationError

SMALL_ANGLE = 1e-6
PI_ANGLE_BAND = 1e-6

_EYE3 = np.eye(3)


def hat3(omega: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector: hat3(w) @ v == cross(w, v)."""
    w0, w1, w2 = omega
    return np.array([
        [0.0, -w2, w1],
        [w2, 0.0, -w0],
        [-w1, w0, 0.0],
    ])


def vee3(S: np.ndarray) -> np.ndarray:
    """Inverse of hat3 (reads the off-diagonal entries)."""
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def is_rotation(R: np.ndarray, tol: float = 1e-9) -> bool:
    """True when R is orthonormal with det +1 within tol."""
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        return False
    if not np.all(np.isfinite(R)):
        return False
    if np.abs(R @ R.T - _EYE3).max() > tol:
        return False
    return abs(np.linalg.det(R) - 1.0) <= tol


def require_rotation(R: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if not is_rotation(R, tol):
        raise InvalidRotationError("matrix is not a rotation (R R^T != I or det != +1)")
    return R


def exp_so3(omega: np.ndarray) -> np.ndarray:
    """Rodrigues formula; second-order series below SMALL_ANGLE."""
    omega = np.asarray(omega, dtype=float)
    theta = math.sqrt(float(omega @ omega))
    W = hat3(omega)
    if theta < SMALL_ANGLE:
        return _EYE3 + W + 0.5 * (W @ W)
    s = math.sin(theta) / theta
    c = (1.0 - math.cos(theta)) / (theta * theta)
    return _EYE3 + s * W + c * (W @ W)


def log_so3(R: np.ndarray) -> np.ndarray:
    """Canonical axis-angle log with norm <= pi.

    Raises InvalidRotationError on non-orthonormal input. Near theta = pi
    the axis is extracted from the diagonal (the antisymmetric part is
    O(pi - theta) and unusable there).
    """
    R = require_rotation(R)
    cos_theta = min(1.0, max(-1.0, 0.5 * (np.trace(R) - 1.0)))
    theta = math.acos(cos_theta)
    v = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < SMALL_ANGLE:
        # v = sin(theta) * axis; theta/sin(theta) = 1 + O(theta^2)
        return v
    if math.pi - theta < PI_ANGLE_BAND:
        return _log_near_pi(R, theta, v)
    return (theta / math.sin(theta)) * v


def _log_near_pi(R: np.ndarray, theta: float, v: np.ndarray) -> np.ndarray:
    # R = I + sin(t) W + (1 - cos(t)) W^2 puts (1 - cos(t)) (a_i^2 - 1) + 1
    # on the diagonal; solve for the axis from the largest diagonal entry
    # and fill the remaining components from the symmetric off-diagonals.
    one_minus_cos = 1.0 - math.cos(theta)
    diag = np.diag(R)
    k = int(np.argmax(diag))
    axis = np.empty(3)
    axis[k] = math.sqrt(max(0.0, (diag[k] - 1.0) / one_minus_cos + 1.0))
    denom = 2.0 * one_minus_cos * axis[k]
    for j in range(3):
        if j != k:
            axis[j] = (R[k, j] + R[j, k]) / denom
    norm = np.linalg.norm(axis)
    if norm > 0.0:
        axis = axis / norm
    sign = float(v @ axis)
    if abs(sign) > 1e-12:
        if sign < 0.0:
            axis = -axis
    elif axis[int(np.argmax(np.abs(axis)))] < 0.0:
        axis = -axis
    return theta * axis


def _left_jacobian(omega: np.ndarray) -> np.ndarray:
    """V(omega) such that translation of exp_se3((omega, u)) is V @ u."""
    theta = math.sqrt(float(omega @ omega))
    W = hat3(omega)
    if theta < SMALL_ANGLE:
        return _EYE3 + 0.5 * W + (W @ W) / 6.0
    t2 = theta * theta
    a = (1.0 - math.cos(theta)) / t2
    b = (theta - math.sin(theta)) / (t2 * theta)
    return _EYE3 + a * W + b * (W @ W)


def _left_jacobian_inv(omega: np.ndarray) -> np.ndarray:
    theta = math.sqrt(float(omega @ omega))
    W = hat3(omega)
    if theta < SMALL_ANGLE:
        return _EYE3 - 0.5 * W + (W @ W) / 12.0
    t2 = theta * theta
    c = (1.0 - (theta * math.sin(theta)) / (2.0 * (1.0 - math.cos(theta)))) / t2
    return _EYE3 - 0.5 * W + c * (W @ W)


def make_pose(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """4x4 homogeneous matrix from rotation and translation."""
    P = np.eye(4)
    P[:3, :3] = R
    P[:3, 3] = t
    return P


def identity_pose() -> np.ndarray:
    return np.eye(4)


def rotation_of(P: np.ndarray) -> np.ndarray:
    return P[:3, :3]


def translation_of(P: np.ndarray) -> np.ndarray:
    return P[:3, 3]


def require_pose(P: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    if P.shape != (4, 4) or np.abs(P[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > tol:
        raise InvalidRotationError("matrix is not a pose (bad shape or bottom row)")
    require_rotation(P[:3, :3], tol)
    return P


def exp_se3(epsilon: np.ndarray) -> np.ndarray:
    """Pose from a 6-vector (omega, u)."""
    epsilon = np.asarray(epsilon, dtype=float)
    omega = epsilon[:3]
    u = epsilon[3:]
    R = exp_so3(omega)
    return make_pose(R, _left_jacobian(omega) @ u)


def log_se3(P: np.ndarray) -> np.ndarray:
    """6-vector (omega, u) such that exp_se3 recovers P; inverse of exp_se3
    for rotation angles below pi."""
    omega = log_so3(P[:3, :3])
    u = _left_jacobian_inv(omega) @ P[:3, 3]
    return np.concatenate([omega, u])


def compose(P1: np.ndarray, P2: np.ndarray) -> np.ndarray:
    return P1 @ P2


def inverse(P: np.ndarray) -> np.ndarray:
    R = P[:3, :3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ P[:3, 3]
    return out


# ---------------------------------------------------------------------------
# Private batched variants for hot paths (no input validation; callers are
# expected to pass products of valid group elements).
# ---------------------------------------------------------------------------


def _hat3_batch(w: np.ndarray) -> np.ndarray:
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def _exp_so3_batch(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1)
    W = _hat3_batch(omega)
    W2 = W @ W
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    a = np.where(small, 1.0, np.sin(t) / t)
    b = np.where(small, 0.5, (1.0 - np.cos(t)) / (t * t))
    return _EYE3 + a[..., None, None] * W + b[..., None, None] * W2


def _log_so3_batch(R: np.ndarray) -> np.ndarray:
    """Batched canonical log; falls back to the scalar path near pi."""
    R = np.asarray(R, dtype=float)
    trace = np.trace(R, axis1=-2, axis2=-1)
    cos_t = np.clip(0.5 * (trace - 1.0), -1.0, 1.0)
    theta = np.arccos(cos_t)
    v = 0.5 * np.stack(
        [
            R[..., 2, 1] - R[..., 1, 2],
            R[..., 0, 2] - R[..., 2, 0],
            R[..., 1, 0] - R[..., 0, 1],
        ],
        axis=-1,
    )
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    scale = np.where(small, 1.0, t / np.sin(np.where(small, 1.0, t)))
    out = scale[..., None] * v
    near_pi = math.pi - theta < PI_ANGLE_BAND
    if np.any(near_pi):
        flat = out.reshape(-1, 3)
        for idx in np.argwhere(near_pi.reshape(-1)).ravel():
            flat[idx] = _log_near_pi(R.reshape(-1, 3, 3)[idx], float(theta.reshape(-1)[idx]), flat[idx])
        out = flat.reshape(out.shape)
    return out


def _left_jacobian_inv_batch(omega: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(omega, axis=-1)
    W = _hat3_batch(omega)
    W2 = W @ W
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    c = np.where(
        small,
        1.0 / 12.0,
        (1.0 - (t * np.sin(t)) / (2.0 * (1.0 - np.cos(t)))) / (t * t),
    )
    return _EYE3 - 0.5 * W + c[..., None, None] * W2


def _left_jacobian_batch(omega: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(omega, axis=-1)
    W = _hat3_batch(omega)
    W2 = W @ W
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    a = np.where(small, 0.5, (1.0 - np.cos(t)) / (t * t))
    b = np.where(small, 1.0 / 6.0, (t - np.sin(t)) / (t * t * t))
    return _EYE3 + a[..., None, None] * W + b[..., None, None] * W2


def _exp_se3_batch(eps: np.ndarray) -> np.ndarray:
    eps = np.asarray(eps, dtype=float)
    omega = eps[..., :3]
    out = np.zeros(eps.shape[:-1] + (4, 4))
    out[..., :3, :3] = _exp_so3_batch(omega)
    out[..., :3, 3] = np.einsum("...ij,...j->...i", _left_jacobian_batch(omega), eps[..., 3:])
    out[..., 3, 3] = 1.0
    return out


def _log_se3_batch(P: np.ndarray) -> np.ndarray:
    omega = _log_so3_batch(P[..., :3, :3])
    u = np.einsum("...ij,...j->...i", _left_jacobian_inv_batch(omega), P[..., :3, 3])
    return np.concatenate([omega, u], axis=-1)


def _inverse_batch(P: np.ndarray) -> np.ndarray:
    RT = np.swapaxes(P[..., :3, :3], -1, -2)
    out = np.zeros_like(P)
    out[..., :3, :3] = RT
    out[..., :3, 3] = -np.einsum("...ij,...j->...i", RT, P[..., :3, 3])
    out[..., 3, 3] = 1.0
    return out
