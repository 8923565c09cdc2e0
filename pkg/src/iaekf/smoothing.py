"""Fixed-interval (RTS) smoothing plus the lag-one covariance pass.

Both passes run backward over the step records of a forward filter
pass. Record ``i``'s ``F`` is the transition from step ``i - 1`` into
step ``i``, so the backward gain at step ``i`` uses ``records[i + 1].F``.
The tangent means in the records are the non-reset accumulations kept by
the filters; the smoothed quaternion re-applies the extra smoothing
correction multiplicatively: ``q_n[i] = exp_map((xi_n[i] - xi_plus[i]) /
2) (x) q_plus[i]``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from .exceptions import NumericalDegeneracyError
from .filters import StepRecord
from .lie import exp_map, quat_mul, quat_normalize

__all__ = ["SmoothedTrajectory", "lag_one_smooth", "rts_smooth", "save_smoothed_csv"]


@dataclass
class SmoothedTrajectory:
    """Backward-pass output over a window of length ``n``.

    ``xi``, ``q`` and ``P`` hold the smoothed tangent means, quaternions
    and covariances for steps ``0 .. n``. ``P_lag[i]`` is the smoothed
    cross-covariance between steps ``i`` and ``i - 1`` (row 0 is NaN; it
    has no predecessor) and is populated by :func:`lag_one_smooth`.
    ``J[i]`` is the backward gain at step ``i``, retained for the
    lag-one pass and the EM statistics.
    """

    xi: np.ndarray
    q: np.ndarray
    P: np.ndarray
    P_lag: np.ndarray
    J: np.ndarray

    @property
    def n(self) -> int:
        return len(self.xi) - 1


def rts_smooth(records: list[StepRecord]) -> SmoothedTrajectory:
    """Backward fixed-interval smoother over filter step records.

    ``records[0]`` must be the window's initial pseudo-record (see
    :func:`iaekf.filters.initial_record`); a single record therefore
    means a zero-length window, for which the smoothed quantities equal
    the filtered ones. The recursion, for ``i = n-1 .. 0``:

    ``J_i = P+_i F_i^T (P-_{i+1})^-1``
    ``P_n[i] = P+_i + J_i (P_n[i+1] - P-_{i+1}) J_i^T``
    ``xi_n[i] = xi+_i + J_i (xi_n[i+1] - xi-_{i+1})``

    Raises :class:`~iaekf.exceptions.NumericalDegeneracyError` when a
    prior covariance cannot be factorized.
    """
    if not records:
        raise ValueError("records must be non-empty")
    n = len(records) - 1
    dim = records[0].P_plus.shape[0]
    xi = np.zeros((n + 1, dim))
    q = np.zeros((n + 1, 4))
    P = np.zeros((n + 1, dim, dim))
    J = np.zeros((n, dim, dim))

    xi[n] = records[n].xi_plus
    q[n] = records[n].q_plus
    P[n] = records[n].P_plus
    for i in range(n - 1, -1, -1):
        nxt = records[i + 1]
        try:
            cho = scipy.linalg.cho_factor(nxt.P_minus, lower=True, check_finite=False)
        except scipy.linalg.LinAlgError as exc:
            raise NumericalDegeneracyError(
                f"prior covariance at step {i + 1} is singular"
            ) from exc
        J[i] = scipy.linalg.cho_solve(cho, nxt.F @ records[i].P_plus, check_finite=False).T
        Pi = records[i].P_plus + J[i] @ (P[i + 1] - nxt.P_minus) @ J[i].T
        P[i] = (Pi + Pi.T) / 2.0
        xi[i] = records[i].xi_plus + J[i] @ (xi[i + 1] - nxt.xi_minus)
        correction = exp_map((xi[i] - records[i].xi_plus) / 2.0)
        q[i] = quat_normalize(quat_mul(correction, records[i].q_plus))

    P_lag = np.full((n + 1, dim, dim), np.nan)
    return SmoothedTrajectory(xi=xi, q=q, P=P, P_lag=P_lag, J=J)


def lag_one_smooth(records: list[StepRecord], smoothed: SmoothedTrajectory) -> SmoothedTrajectory:
    """Populate the lag-one smoothed cross-covariances in place.

    Initialization at the window end, then backward for ``i = n-1 .. 1``:

    ``P_n[n, n-1] = (I - K_n H_n) F_{n-1} P+_{n-1}``
    ``P_n[i, i-1] = P+_i J_{i-1}^T + J_i (P_n[i+1, i] - F_i P+_i) J_{i-1}^T``

    Requires :func:`rts_smooth` to have run first (the ``J`` gains).
    Returns the updated trajectory for convenience.
    """
    n = len(records) - 1
    if n < 1:
        raise ValueError("lag-one smoothing needs a window of length at least 1")
    dim = records[0].P_plus.shape[0]
    eye = np.eye(dim)
    last = records[n]
    smoothed.P_lag[n] = (eye - last.K @ last.H) @ last.F @ records[n - 1].P_plus
    for i in range(n - 1, 0, -1):
        F_i = records[i + 1].F
        smoothed.P_lag[i] = (
            records[i].P_plus @ smoothed.J[i - 1].T
            + smoothed.J[i] @ (smoothed.P_lag[i + 1] - F_i @ records[i].P_plus) @ smoothed.J[i - 1].T
        )
    return smoothed


_FLOAT_FMT = "%.17g"


def save_smoothed_csv(path: str | Path, smoothed: SmoothedTrajectory) -> None:
    """Dump smoothed quantities (step, tangent mean, quaternion,
    covariance row-major, lag-one covariance row-major)."""
    dim = smoothed.xi.shape[1]
    header = (
        ["i"]
        + [f"xi_{j}" for j in range(dim)]
        + [f"q{c}" for c in "wxyz"]
        + [f"P_{i}{j}" for i in range(dim) for j in range(dim)]
        + [f"Plag_{i}{j}" for i in range(dim) for j in range(dim)]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(smoothed.n + 1):
            row = [float(i), *smoothed.xi[i], *smoothed.q[i], *smoothed.P[i].ravel(), *smoothed.P_lag[i].ravel()]
            writer.writerow([_FLOAT_FMT % v for v in row])
