"""Invariant extended Kalman filters on the unit quaternion.

Two error conventions are implemented. The right-invariant filter works
with the world-frame error ``eps = q_hat (x) q^-1 = exp_map(xi / 2)``:
its tangent dynamics are trajectory independent (``F = I``) and its
measurement matrix ``H = [[g]x; [b]x]`` is constant, so with isotropic
noise the gain sequence does not depend on the trajectory at all. The
left-invariant baseline uses the body-frame error ``q^-1 (x) q_hat``,
whose transition and measurement matrices both vary along the
trajectory.

Each step record keeps the non-reset tangent means ``xi_minus`` /
``xi_plus`` (the multiplicative update folds the correction into the
quaternion, so the accumulated means are carried separately). The
fixed-interval smoother and the EM statistics consume them; see
:mod:`iaekf.smoothing`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .exceptions import NumericalDegeneracyError
from .lie import (
    dcm,
    exp_map,
    log_map,
    mat_exp,
    omega_matrix,
    quat_conj,
    quat_mul,
    quat_normalize,
    skew,
)
from .models import SensorSample, WorldConstants

__all__ = [
    "FilterState",
    "StepRecord",
    "attitude_error",
    "block_rotation",
    "initial_record",
    "liekf_run",
    "load_records_csv",
    "riekf_propagate",
    "riekf_run",
    "riekf_update",
    "save_records_csv",
]

# Innovation-covariance condition numbers beyond this abort the update.
_MAX_CONDITION = 1e12


@dataclass
class FilterState:
    """Attitude estimate: unit quaternion ``q``, 3x3 tangent-error
    covariance ``P`` and step index ``k``."""

    q: np.ndarray
    P: np.ndarray
    k: int = 0

    def __post_init__(self):
        self.q = quat_normalize(np.asarray(self.q, dtype=float))
        self.P = np.asarray(self.P, dtype=float)


@dataclass
class StepRecord:
    """Everything one filter step produced, as consumed by the smoother,
    the EM statistics and the CSV dumps.

    ``F``, ``Q`` and ``Phi`` describe the transition from the previous
    step into this one. ``xi_minus`` / ``xi_plus`` are the non-reset
    tangent means (see module docstring).
    """

    q_minus: np.ndarray
    q_plus: np.ndarray
    P_minus: np.ndarray
    P_plus: np.ndarray
    K: np.ndarray
    r: np.ndarray
    F: np.ndarray
    H: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    Phi: np.ndarray
    xi_minus: np.ndarray = field(default_factory=lambda: np.zeros(3))
    xi_plus: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass
class _Propagation:
    """Propagation-side fields handed from the predict to the update step."""

    Phi: np.ndarray
    F: np.ndarray
    Q: np.ndarray


def block_rotation(q: np.ndarray) -> np.ndarray:
    """6x6 block-diagonal rotation ``blockdiag(dcm(q), dcm(q))``."""
    a = dcm(q)
    out = np.zeros((6, 6))
    out[:3, :3] = a
    out[3:, 3:] = a
    return out


def attitude_error(q_true: np.ndarray, q_hat: np.ndarray) -> np.ndarray:
    """World-frame tangent error ``xi`` with ``exp_map(xi / 2) ==
    q_hat (x) q_true^-1`` up to sign, choosing the shortest rotation.

    Zero when the two quaternions encode the same rotation (including
    the antipodal pair ``q`` and ``-q``).
    """
    eps = quat_mul(np.asarray(q_hat, dtype=float), quat_conj(np.asarray(q_true, dtype=float)))
    return 2.0 * log_map(eps)


def initial_record(
    state: FilterState, meas_dim: int = 6, xi0: np.ndarray | None = None
) -> StepRecord:
    """Pseudo-record for the window's initial state (step 0).

    Prepended to a filter's output so the smoother can reach back to the
    prior; its gain and innovation are zero and never used. ``xi0`` is
    the initial tangent mean (defaults to zero).
    """
    xi0 = np.zeros(3) if xi0 is None else np.asarray(xi0, dtype=float).copy()
    return StepRecord(
        q_minus=state.q.copy(),
        q_plus=state.q.copy(),
        P_minus=state.P.copy(),
        P_plus=state.P.copy(),
        K=np.zeros((3, meas_dim)),
        r=np.zeros(meas_dim),
        F=np.eye(3),
        H=np.zeros((meas_dim, 3)),
        Q=np.zeros((3, 3)),
        R=np.zeros((meas_dim, meas_dim)),
        Phi=np.eye(4),
        xi_minus=xi0,
        xi_plus=xi0.copy(),
    )


def _propagate_cov(P: np.ndarray, F: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Shared covariance propagation ``F P F^T + Q``."""
    return F @ P @ F.T + Q


def _solve_gain(P_minus: np.ndarray, H: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Kalman gain ``P H^T (H P H^T + R)^-1`` via Cholesky of the
    innovation covariance. Raises on numerical degeneracy."""
    S = H @ P_minus @ H.T + R
    try:
        cho = scipy.linalg.cho_factor(S, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise NumericalDegeneracyError("innovation covariance is not positive definite") from exc
    diag = np.diag(cho[0])
    if (diag.max() / diag.min()) ** 2 > _MAX_CONDITION:
        raise NumericalDegeneracyError(
            f"innovation covariance condition number exceeds {_MAX_CONDITION:g}"
        )
    return scipy.linalg.cho_solve(cho, H @ P_minus, check_finite=False).T


def riekf_propagate(
    state: FilterState,
    omega: np.ndarray,
    sigma_eta: np.ndarray,
    dt: float,
) -> tuple[FilterState, _Propagation]:
    """Right-invariant predict step.

    The quaternion advances by the one-step propagator ``Phi =
    mat_exp((dt / 2) Omega[omega])`` and is renormalized. The error
    transition is the identity; the process noise is the gyro covariance
    transported to the world frame at the a-priori attitude:
    ``Q = dcm(q-) sigma_eta dt^2 dcm(q-)^T``.
    """
    phi = mat_exp((dt / 2.0) * omega_matrix(omega))
    q_minus = quat_normalize(phi @ state.q)
    a = dcm(q_minus)
    Q = a @ sigma_eta @ a.T * dt * dt
    F = np.eye(3)
    P_minus = _propagate_cov(state.P, F, Q)
    return FilterState(q=q_minus, P=P_minus, k=state.k + 1), _Propagation(Phi=phi, F=F, Q=Q)


def riekf_update(
    state: FilterState,
    sample: SensorSample,
    world: WorldConstants,
    sigma_nu: np.ndarray,
    prop: _Propagation | None = None,
    xi_minus: np.ndarray | None = None,
) -> tuple[FilterState, StepRecord]:
    """Right-invariant measurement update.

    The innovation rotates the stacked body measurements to the world
    frame at the a-priori estimate and subtracts the references:
    ``r = blockdiag(dcm(q-)) [a; m] - [g; b]``. The constant measurement
    matrix is ``H = [[g]x; [b]x]``; the innovation noise covariance is
    ``R = B sigma_nu B^T`` with ``B = block_rotation(q-)``. The
    quaternion correction is multiplicative: ``q+ = exp_map(K r / 2) (x)
    q-``; the covariance update ``(I - K H) P-`` is symmetrized.
    """
    if prop is None:
        prop = _Propagation(Phi=np.eye(4), F=np.eye(3), Q=np.zeros((3, 3)))
    if xi_minus is None:
        xi_minus = np.zeros(3)
    H = np.vstack([skew(world.g), skew(world.b)])
    B = block_rotation(state.q)
    R = B @ sigma_nu @ B.T
    r = B @ sample.z - world.reference
    K = _solve_gain(state.P, H, R)
    q_plus = quat_normalize(quat_mul(exp_map(K @ r / 2.0), state.q))
    P_plus = (np.eye(3) - K @ H) @ state.P
    P_plus = (P_plus + P_plus.T) / 2.0
    xi_plus = xi_minus + K @ r
    record = StepRecord(
        q_minus=state.q.copy(),
        q_plus=q_plus,
        P_minus=state.P.copy(),
        P_plus=P_plus,
        K=K,
        r=r,
        F=prop.F,
        H=H,
        Q=prop.Q,
        R=R,
        Phi=prop.Phi,
        xi_minus=np.asarray(xi_minus, dtype=float).copy(),
        xi_plus=xi_plus,
    )
    return FilterState(q=q_plus, P=P_plus, k=state.k), record


def riekf_run(
    samples: list[SensorSample],
    init: FilterState,
    params,
    world: WorldConstants,
    dt: float,
    xi0: np.ndarray | None = None,
) -> list[StepRecord]:
    """Run the right-invariant filter over a sample window.

    ``params`` provides ``sigma_eta`` (3x3) and ``sigma_nu`` (6x6); both
    :class:`~iaekf.models.NoiseSpec` and :class:`~iaekf.em.NoiseParams`
    qualify. ``xi0`` seeds the non-reset tangent mean accumulation
    (defaults to zero). Returns one :class:`StepRecord` per sample
    (prepend :func:`initial_record` for smoothing).
    """
    if not samples:
        raise ValueError("samples must be non-empty")
    sigma_eta = np.asarray(params.sigma_eta, dtype=float)
    sigma_nu = np.asarray(params.sigma_nu, dtype=float)
    state = init
    xi = np.zeros(3) if xi0 is None else np.asarray(xi0, dtype=float).copy()
    records = []
    for sample in samples:
        state, prop = riekf_propagate(state, sample.omega, sigma_eta, dt)
        state, record = riekf_update(state, sample, world, sigma_nu, prop, xi_minus=xi)
        xi = record.xi_plus
        records.append(record)
    return records


def liekf_run(
    samples: list[SensorSample],
    init: FilterState,
    params,
    world: WorldConstants,
    dt: float,
) -> list[StepRecord]:
    """Run the left-invariant baseline filter over a sample window.

    The body-frame error transports with the gyro increment, so ``F_k =
    dcm(exp_map(dt omega / 2))^T`` varies with the rates; the gyro noise
    enters un-rotated (``Q = sigma_eta dt^2``). The innovation is formed
    in the body frame against the predicted measurements, giving the
    attitude-dependent ``H_k = [[dcm(q-)^T g]x; [dcm(q-)^T b]x]`` with
    ``R = sigma_nu``, and the correction is applied on the body side:
    ``q+ = q- (x) exp_map(K r / 2)``.
    """
    if not samples:
        raise ValueError("samples must be non-empty")
    sigma_eta = np.asarray(params.sigma_eta, dtype=float)
    sigma_nu = np.asarray(params.sigma_nu, dtype=float)
    state = init
    xi = np.zeros(3)
    records = []
    for sample in samples:
        delta = exp_map(dt * sample.omega / 2.0)
        phi = mat_exp((dt / 2.0) * omega_matrix(sample.omega))
        q_minus = quat_normalize(phi @ state.q)
        F = dcm(delta).T
        Q = sigma_eta * dt * dt
        P_minus = _propagate_cov(state.P, F, Q)
        body = dcm(q_minus).T
        predicted = np.concatenate([body @ world.g, body @ world.b])
        H = np.vstack([skew(predicted[:3]), skew(predicted[3:])])
        r = sample.z - predicted
        K = _solve_gain(P_minus, H, sigma_nu)
        q_plus = quat_normalize(quat_mul(q_minus, exp_map(K @ r / 2.0)))
        P_plus = (np.eye(3) - K @ H) @ P_minus
        P_plus = (P_plus + P_plus.T) / 2.0
        xi_minus = F @ xi
        xi = xi_minus + K @ r
        records.append(
            StepRecord(
                q_minus=q_minus,
                q_plus=q_plus,
                P_minus=P_minus,
                P_plus=P_plus,
                K=K,
                r=r,
                F=F,
                H=H,
                Q=Q,
                R=sigma_nu.copy(),
                Phi=phi,
                xi_minus=xi_minus,
                xi_plus=xi.copy(),
            )
        )
        state = FilterState(q=q_plus, P=P_plus, k=state.k + 1)
    return records


_RECORD_HEADER = (
    ["k"]
    + [f"q{c}_minus" for c in "wxyz"]
    + [f"q{c}_plus" for c in "wxyz"]
    + [f"P_minus_{i}{j}" for i in range(3) for j in range(3)]
    + [f"P_plus_{i}{j}" for i in range(3) for j in range(3)]
    + [f"K_{i}{j}" for i in range(3) for j in range(6)]
    + [f"r_{i}" for i in range(6)]
)

_FLOAT_FMT = "%.17g"


def save_records_csv(path: str | Path, records: list[StepRecord]) -> None:
    """Dump step records (step index, quaternions, covariances row-major,
    gain row-major, innovation)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_RECORD_HEADER)
        for k, rec in enumerate(records):
            row = [
                float(k),
                *rec.q_minus,
                *rec.q_plus,
                *rec.P_minus.ravel(),
                *rec.P_plus.ravel(),
                *rec.K.ravel(),
                *rec.r,
            ]
            writer.writerow([_FLOAT_FMT % v for v in row])


def load_records_csv(path: str | Path) -> list[StepRecord]:
    """Read back a :func:`save_records_csv` dump. Fields not present in
    the CSV schema (``F``, ``H``, ``Q``, ``R``, ``Phi``, tangent means)
    are restored as identities or zeros."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != _RECORD_HEADER:
            raise ValueError(f"unexpected records header: {header[:4]}...")
        for row in reader:
            vals = np.array([float(v) for v in row])
            records.append(
                StepRecord(
                    q_minus=vals[1:5],
                    q_plus=vals[5:9],
                    P_minus=vals[9:18].reshape(3, 3),
                    P_plus=vals[18:27].reshape(3, 3),
                    K=vals[27:45].reshape(3, 6),
                    r=vals[45:51],
                    F=np.eye(3),
                    H=np.zeros((6, 3)),
                    Q=np.zeros((3, 3)),
                    R=np.zeros((6, 6)),
                    Phi=np.eye(4),
                )
            )
    return records
