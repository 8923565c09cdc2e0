"""Quaternion and SO(3) primitives.

Conventions used across the package:

* Quaternions are scalar-first ``numpy`` arrays ``[w, x, y, z]`` and,
  unless stated otherwise, unit norm. ``q`` and ``-q`` encode the same
  rotation.
* ``quat_mul`` is the Hamilton product. ``dcm(q)`` is the direction
  cosine matrix that takes body-frame vectors to the world frame, and it
  composes directly with the product: ``dcm(quat_mul(p, q)) ==
  dcm(p) @ dcm(q)``.
* ``rotate(q, r)`` evaluates the sandwich ``q (x) r (x) q*`` and equals
  ``dcm(q) @ r``.
* ``exp_map(xi)`` maps a tangent 3-vector to ``[cos|xi|, sin|xi|
  xi/|xi|]``; the encoded rotation angle is ``2 |xi|``. Attitude errors
  therefore enter as ``exp_map(xi / 2)`` throughout the filters.

All functions are pure and allocate fresh arrays; they are safe to call
concurrently.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

__all__ = [
    "dcm",
    "exp_map",
    "log_map",
    "mat_exp",
    "omega_matrix",
    "quat_conj",
    "quat_inv",
    "quat_mul",
    "quat_normalize",
    "rotate",
    "skew",
    "xi_matrix",
]

# Below this angle, trig ratios switch to series expansions.
_SMALL_ANGLE = 1e-6
# Unit-norm drift beyond which quaternion products are renormalized.
_NORM_DRIFT = 1e-12


def _check_finite(*arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite input")


def _hamilton(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Raw Hamilton product, no normalization."""
    pw, pv = p[0], p[1:]
    qw, qv = q[0], q[1:]
    out = np.empty(4)
    out[0] = pw * qw - pv @ qv
    out[1:] = pw * qv + qw * pv + np.cross(pv, qv)
    return out


def quat_mul(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Hamilton product ``p (x) q`` of two unit quaternions.

    The result is renormalized only when floating-point drift pushes its
    norm more than 1e-12 away from one.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    _check_finite(p, q)
    out = _hamilton(p, q)
    nrm = np.sqrt(out @ out)
    if abs(nrm - 1.0) > _NORM_DRIFT:
        out /= nrm
    return out


def quat_conj(q: np.ndarray) -> np.ndarray:
    """Conjugate ``[w, -v]``."""
    q = np.asarray(q, dtype=float)
    return np.concatenate(([q[0]], -q[1:]))


def quat_inv(q: np.ndarray) -> np.ndarray:
    """Inverse quaternion; equals the conjugate for unit norm."""
    q = np.asarray(q, dtype=float)
    return quat_conj(q) / (q @ q)


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Rescale to unit norm."""
    q = np.asarray(q, dtype=float)
    return q / np.sqrt(q @ q)


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix ``[v]x`` with ``skew(v) @ u == cross(v, u)``."""
    v = np.asarray(v, dtype=float)
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def _as_quat(q: np.ndarray) -> np.ndarray:
    """Lift a 3-vector to the pure quaternion ``[0, v]``; pass 4-vectors through."""
    q = np.asarray(q, dtype=float)
    if q.shape == (3,):
        return np.concatenate(([0.0], q))
    return q


def xi_matrix(p: np.ndarray) -> np.ndarray:
    """4x4 left-multiplication matrix: ``quat_mul(p, q) == xi_matrix(p) @ q``."""
    p = _as_quat(p)
    out = np.empty((4, 4))
    out[0, 0] = p[0]
    out[0, 1:] = -p[1:]
    out[1:, 0] = p[1:]
    out[1:, 1:] = p[0] * np.eye(3) + skew(p[1:])
    return out


def omega_matrix(q: np.ndarray) -> np.ndarray:
    """4x4 right-multiplication matrix: ``quat_mul(p, q) == omega_matrix(q) @ p``.

    Accepts a 3-vector (e.g. an angular rate), which is lifted to the
    pure quaternion ``[0, v]``.
    """
    q = _as_quat(q)
    out = np.empty((4, 4))
    out[0, 0] = q[0]
    out[0, 1:] = -q[1:]
    out[1:, 0] = q[1:]
    out[1:, 1:] = q[0] * np.eye(3) - skew(q[1:])
    return out


def rotate(q: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Rotate the body-frame vector ``r`` into the world frame.

    Evaluates the sandwich product ``q (x) [0, r] (x) q*``; agrees with
    ``dcm(q) @ r``. The inverse rotation (world to body) is
    ``rotate(quat_conj(q), r)``.
    """
    q = np.asarray(q, dtype=float)
    r = np.asarray(r, dtype=float)
    rq = np.concatenate(([0.0], r))
    return _hamilton(_hamilton(q, rq), quat_conj(q))[1:]


def dcm(q: np.ndarray) -> np.ndarray:
    """Direction cosine matrix of ``q`` (body frame to world frame).

    ``dcm(q) == dcm(-q)``, and composition follows the quaternion
    product directly: ``dcm(quat_mul(p, q)) == dcm(p) @ dcm(q)``.
    """
    q = np.asarray(q, dtype=float)
    w, v = q[0], q[1:]
    return (w * w - v @ v) * np.eye(3) + 2.0 * np.outer(v, v) + 2.0 * w * skew(v)


def exp_map(xi: np.ndarray) -> np.ndarray:
    """Tangent 3-vector to unit quaternion ``[cos|xi|, sin|xi| xi/|xi|]``.

    The rotation angle of the result is ``2 |xi|``; pass ``xi / 2`` to
    build the rotation with angle ``|xi|``. Near zero the trig ratios
    use fourth-order series so the map is smooth through ``[1, xi]``.
    """
    xi = np.asarray(xi, dtype=float)
    _check_finite(xi)
    t2 = xi @ xi
    if t2 < _SMALL_ANGLE * _SMALL_ANGLE:
        c = 1.0 - t2 / 2.0 + t2 * t2 / 24.0
        s = 1.0 - t2 / 6.0 + t2 * t2 / 120.0  # sin t / t
        out = np.concatenate(([c], s * xi))
        return out / np.sqrt(out @ out)
    t = np.sqrt(t2)
    return np.concatenate(([np.cos(t)], (np.sin(t) / t) * xi))


def log_map(q: np.ndarray) -> np.ndarray:
    """Inverse of :func:`exp_map`, choosing the representative with a
    non-negative scalar part (shortest rotation).

    Round-trips ``log_map(exp_map(xi)) == xi`` for ``|xi| < pi / 2``.
    """
    q = np.asarray(q, dtype=float)
    _check_finite(q)
    if q[0] < 0.0:
        q = -q
    w, v = q[0], q[1:]
    s2 = v @ v
    if s2 < _SMALL_ANGLE * _SMALL_ANGLE:
        # atan2(s, w) / s expanded around s = 0
        return v * (1.0 - s2 / (3.0 * w * w)) / w
    s = np.sqrt(s2)
    return v * (np.arctan2(s, w) / s)


def mat_exp(a: np.ndarray) -> np.ndarray:
    """Matrix exponential ``sum_k A^k / k!`` (Pade scaling-and-squaring)."""
    a = np.asarray(a, dtype=float)
    _check_finite(a)
    return scipy.linalg.expm(a)
