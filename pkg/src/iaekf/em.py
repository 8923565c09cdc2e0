"""EM estimation of the filter noise parameters over a sample window.

The parameter set is ``{mu0, sigma0, sigma_eta, sigma_nu}``: the initial
tangent mean and covariance, the gyro covariance and the stacked
accelerometer/magnetometer covariance. Each iteration alternates

* an E-step: a right-invariant filter pass with the current parameters
  followed by the fixed-interval and lag-one smoothers, and
* an M-step: closed-form covariance updates from the smoothed moments.

The monitored objective ``G`` is the smoothed expectation of the
complete-data negative log-likelihood (twice it, as customary); its
value after each M-step goes into ``EmReport.G_history``.

All formulas reduce to the classic linear-Gaussian EM when the rotation
conjugations are identities, which is how the implementation is tested
against an independent textbook reference.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .exceptions import DegenerateWindowError, InvalidCovarianceError
from .filters import FilterState, StepRecord, block_rotation, initial_record, riekf_run
from .lie import dcm, exp_map, quat_mul, quat_normalize
from .models import SensorSample, WorldConstants
from .smoothing import SmoothedTrajectory, lag_one_smooth, rts_smooth

__all__ = [
    "EmOptions",
    "EmReport",
    "NoiseParams",
    "e_step",
    "em_fit",
    "expected_log_lik",
    "m_step",
    "save_em_csv",
    "save_em_json",
]

# Relative eigenvalue floor applied to M-step covariance outputs.
_FLOOR_SCALE = 1e-12


def _floor_spd(mat: np.ndarray) -> np.ndarray:
    """Symmetrize and floor eigenvalues at ``1e-12 tr / dim`` so short
    windows with rank-deficient moment sums stay factorizable."""
    mat = (mat + mat.T) / 2.0
    dim = mat.shape[0]
    floor = _FLOOR_SCALE * max(np.trace(mat), 0.0) / dim
    vals = np.linalg.eigvalsh(mat)
    if vals.min() >= floor and floor > 0.0:
        return mat
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, max(floor, _FLOOR_SCALE), None)
    return (vecs * vals) @ vecs.T


def _check_cov(mat: np.ndarray, name: str, dim: int) -> np.ndarray:
    mat = np.asarray(mat, dtype=float)
    if mat.shape != (dim, dim):
        raise InvalidCovarianceError(f"{name} must be {dim}x{dim}")
    if not np.all(np.isfinite(mat)):
        raise InvalidCovarianceError(f"{name} has non-finite entries")
    if np.abs(mat - mat.T).max() > 1e-12 * max(1.0, np.abs(mat).max()):
        raise InvalidCovarianceError(f"{name} is not symmetric")
    if np.linalg.eigvalsh(mat).min() <= 0.0:
        raise InvalidCovarianceError(f"{name} is not positive definite")
    return mat


@dataclass
class NoiseParams:
    """EM parameter set: initial tangent mean ``mu0`` and covariance
    ``sigma0`` (3x3), gyro covariance ``sigma_eta`` (3x3) and stacked
    measurement covariance ``sigma_nu`` (6x6)."""

    mu0: np.ndarray
    sigma0: np.ndarray
    sigma_eta: np.ndarray
    sigma_nu: np.ndarray

    def __post_init__(self):
        self.mu0 = np.asarray(self.mu0, dtype=float)
        self.sigma0 = _check_cov(self.sigma0, "sigma0", 3)
        self.sigma_eta = _check_cov(self.sigma_eta, "sigma_eta", 3)
        self.sigma_nu = _check_cov(self.sigma_nu, "sigma_nu", 6)

    @classmethod
    def from_spec(
        cls,
        spec,
        mu0: np.ndarray | None = None,
        sigma0: np.ndarray | None = None,
        eta_scale: float = 1.0,
        nu_scale: float = 1.0,
    ) -> "NoiseParams":
        """Build from a :class:`~iaekf.models.NoiseSpec`, optionally
        scaling the covariances (e.g. deliberately wrong initial
        guesses)."""
        return cls(
            mu0=np.zeros(3) if mu0 is None else mu0,
            sigma0=np.eye(3) if sigma0 is None else sigma0,
            sigma_eta=eta_scale * spec.sigma_eta,
            sigma_nu=nu_scale * spec.sigma_nu,
        )

    def rel_change(self, other: "NoiseParams") -> float:
        """Largest blockwise relative Frobenius change from ``other``."""
        out = 0.0
        for a, b in (
            (self.sigma0, other.sigma0),
            (self.sigma_eta, other.sigma_eta),
            (self.sigma_nu, other.sigma_nu),
        ):
            denom = np.linalg.norm(b)
            if denom > 0.0:
                out = max(out, np.linalg.norm(a - b) / denom)
        return out


@dataclass
class EmOptions:
    """Stopping controls: iteration cap plus relative tolerances on the
    objective and on blockwise parameter change."""

    max_iter: int = 50
    tol_G: float = 1e-6
    tol_theta: float = 1e-4


@dataclass
class EmReport:
    """Fit history: ``theta_history[0]`` is the initial parameter set and
    ``theta_history[j + 1]`` pairs with ``G_history[j]``, the objective
    value right after M-step ``j``."""

    iterations: int
    G_history: list[float]
    theta_history: list[NoiseParams]
    converged_by: str

    @property
    def theta(self) -> NoiseParams:
        return self.theta_history[-1]


def e_step(
    samples: list[SensorSample],
    theta: NoiseParams,
    world: WorldConstants,
    dt: float,
    q_ref: np.ndarray | None = None,
) -> tuple[SmoothedTrajectory, list[StepRecord]]:
    """Filter-plus-smoother pass with the current parameters.

    The window anchors at ``q_ref`` (identity by default): the initial
    estimate is ``exp_map(mu0 / 2) (x) q_ref`` with covariance
    ``sigma0``, and ``mu0`` seeds the tangent-mean bookkeeping so the
    smoothed ``xi`` stay expressed relative to ``q_ref``. Returns the
    smoothed trajectory (lag-one covariances included) and the step
    records, with the initial pseudo-record at index 0.
    """
    if len(samples) < 2:
        raise ValueError("EM needs a window of at least 2 samples")
    if q_ref is None:
        q_ref = np.array([1.0, 0.0, 0.0, 0.0])
    q0 = quat_normalize(quat_mul(exp_map(theta.mu0 / 2.0), q_ref))
    init = FilterState(q=q0, P=theta.sigma0.copy())
    records = [initial_record(init, xi0=theta.mu0)]
    records += riekf_run(samples, init, theta, world, dt, xi0=theta.mu0)
    smoothed = lag_one_smooth(records, rts_smooth(records))
    return smoothed, records


def _smoothed_innovations(
    smoothed: SmoothedTrajectory,
    samples: list[SensorSample],
    world: WorldConstants,
) -> list[np.ndarray]:
    """Innovations re-evaluated at the smoothed orientations:
    ``B(q_n[i]) z_i - [g; b]`` for ``i = 1 .. n``."""
    ref = world.reference
    return [
        block_rotation(smoothed.q[i]) @ samples[i - 1].z - ref
        for i in range(1, smoothed.n + 1)
    ]


def _em_statistics(
    records: list[StepRecord], smoothed: SmoothedTrajectory
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Second-moment sums of the smoothed states, conjugated back to the
    body frame at each step's a-priori attitude:

    ``S11 = sum A_i^T (xi_i xi_i^T + P_i) A_i``
    ``S10 = sum A_i^T (xi_i xi_{i-1}^T + P_{i,i-1}) F_{i-1}^T A_i``
    ``S00 = sum A_i^T F_{i-1} (xi_{i-1} xi_{i-1}^T + P_{i-1}) F_{i-1}^T A_i``
    """
    n = smoothed.n
    S11 = np.zeros((3, 3))
    S10 = np.zeros((3, 3))
    S00 = np.zeros((3, 3))
    for i in range(1, n + 1):
        A = dcm(records[i].q_minus)
        F_prev = records[i].F
        xi_i = smoothed.xi[i]
        xi_prev = smoothed.xi[i - 1]
        S11 += A.T @ (np.outer(xi_i, xi_i) + smoothed.P[i]) @ A
        S10 += A.T @ (np.outer(xi_i, xi_prev) + smoothed.P_lag[i]) @ F_prev.T @ A
        S00 += A.T @ F_prev @ (np.outer(xi_prev, xi_prev) + smoothed.P[i - 1]) @ F_prev.T @ A
    return S11, S10, S00


def _sigma_nu_statistic(
    records: list[StepRecord],
    smoothed: SmoothedTrajectory,
    innovations: list[np.ndarray],
) -> np.ndarray:
    """``sum B_i^T (r_n[i] r_n[i]^T + H_i P_i H_i^T) B_i``."""
    out = np.zeros((6, 6))
    for i in range(1, smoothed.n + 1):
        rec = records[i]
        B = block_rotation(rec.q_minus)
        rn = innovations[i - 1]
        out += B.T @ (np.outer(rn, rn) + rec.H @ smoothed.P[i] @ rec.H.T) @ B
    return out


def expected_log_lik(
    smoothed: SmoothedTrajectory,
    records: list[StepRecord],
    samples: list[SensorSample],
    theta: NoiseParams,
    world: WorldConstants,
    dt: float,
    smoothed_innovations: list[np.ndarray] | None = None,
) -> float:
    """Smoothed expectation of twice the negative complete-data
    log-likelihood, as a function of ``theta`` for fixed moments:

    ``G = ln|sigma0| + n ln|sigma_eta| + n ln|sigma_nu|
    + tr{sigma0^-1 [P_0 + (xi_0 - mu0)(xi_0 - mu0)^T]}
    + tr{sigma_eta^-1 [S11 - S10 - S10^T + S00]} / dt^2
    + tr{sigma_nu^-1 sum B_i^T (r_n r_n^T + H P H^T) B_i}``

    ``smoothed_innovations`` may be supplied directly (used by the
    linear-surrogate tests); by default they are computed from the
    smoothed orientations and the samples.
    """
    n = smoothed.n
    if smoothed_innovations is None:
        smoothed_innovations = _smoothed_innovations(smoothed, samples, world)
    S11, S10, S00 = _em_statistics(records, smoothed)
    nu_stat = _sigma_nu_statistic(records, smoothed, innovations=smoothed_innovations)

    d0 = smoothed.xi[0] - theta.mu0
    term0 = smoothed.P[0] + np.outer(d0, d0)
    increments = S11 - S10 - S10.T + S00

    def _chol(mat, name):
        try:
            return scipy.linalg.cho_factor(mat, lower=True, check_finite=False)
        except scipy.linalg.LinAlgError as exc:
            raise InvalidCovarianceError(f"{name} is not positive definite") from exc

    c0 = _chol(theta.sigma0, "sigma0")
    ce = _chol(theta.sigma_eta, "sigma_eta")
    cn = _chol(theta.sigma_nu, "sigma_nu")
    logdet = lambda c: 2.0 * np.sum(np.log(np.diag(c[0])))
    trace_solve = lambda c, m: np.trace(scipy.linalg.cho_solve(c, m, check_finite=False))
    return (
        logdet(c0)
        + n * logdet(ce)
        + n * logdet(cn)
        + trace_solve(c0, term0)
        + trace_solve(ce, increments) / (dt * dt)
        + trace_solve(cn, nu_stat)
    )


def m_step(
    smoothed: SmoothedTrajectory,
    records: list[StepRecord],
    samples: list[SensorSample],
    world: WorldConstants,
    dt: float,
    smoothed_innovations: list[np.ndarray] | None = None,
) -> NoiseParams:
    """Closed-form parameter updates from the smoothed moments:

    ``mu0 <- xi_0``, ``sigma0 <- P_0``,
    ``sigma_eta <- (S11 - S10 S00^-1 S10^T) / (n dt^2)``,
    ``sigma_nu <- (1/n) sum B_i^T (r_n r_n^T + H P H^T) B_i``.

    Covariance outputs are symmetrized and eigenvalue-floored. Raises
    :class:`~iaekf.exceptions.DegenerateWindowError` when ``S00`` is
    singular (the caller may enlarge the window).
    """
    n = smoothed.n
    if smoothed_innovations is None:
        smoothed_innovations = _smoothed_innovations(smoothed, samples, world)
    S11, S10, S00 = _em_statistics(records, smoothed)
    nu_stat = _sigma_nu_statistic(records, smoothed, innovations=smoothed_innovations)
    try:
        cho = scipy.linalg.cho_factor(S00, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise DegenerateWindowError("S00 is singular; enlarge the window") from exc
    sigma_eta = (S11 - S10 @ scipy.linalg.cho_solve(cho, S10.T, check_finite=False)) / (
        n * dt * dt
    )
    return NoiseParams(
        mu0=smoothed.xi[0].copy(),
        sigma0=_floor_spd(smoothed.P[0]),
        sigma_eta=_floor_spd(sigma_eta),
        sigma_nu=_floor_spd(nu_stat / n),
    )


def em_fit(
    samples: list[SensorSample],
    theta0: NoiseParams,
    world: WorldConstants,
    dt: float,
    opts: EmOptions | None = None,
    q_ref: np.ndarray | None = None,
) -> EmReport:
    """Alternate E- and M-steps on one window until the objective or the
    parameters converge, or the iteration cap is reached.

    Every iteration re-runs the filter and smoothers with the full
    updated parameter set, including ``mu0`` and ``sigma0``. Convergence
    is declared when the post-M-step objective changes by less than
    ``tol_G`` (relative) or every covariance block moves by less than
    ``tol_theta`` (relative Frobenius). Non-convergence is not an error;
    it is reported as ``converged_by == "max-iter"``.
    """
    if opts is None:
        opts = EmOptions()
    theta = theta0
    G_history: list[float] = []
    theta_history = [theta0]
    converged_by = "max-iter"
    iterations = 0
    for _ in range(opts.max_iter):
        smoothed, records = e_step(samples, theta, world, dt, q_ref=q_ref)
        innovations = _smoothed_innovations(smoothed, samples, world)
        theta_new = m_step(smoothed, records, samples, world, dt, smoothed_innovations=innovations)
        G = expected_log_lik(
            smoothed, records, samples, theta_new, world, dt, smoothed_innovations=innovations
        )
        iterations += 1
        rel = theta_new.rel_change(theta)
        theta = theta_new
        theta_history.append(theta)
        if G_history and abs(G - G_history[-1]) < opts.tol_G * abs(G_history[-1]):
            G_history.append(G)
            converged_by = "likelihood"
            break
        G_history.append(G)
        if rel < opts.tol_theta:
            converged_by = "parameters"
            break
    return EmReport(
        iterations=iterations,
        G_history=G_history,
        theta_history=theta_history,
        converged_by=converged_by,
    )


_FLOAT_FMT = "%.17g"


def save_em_csv(path: str | Path, report: EmReport) -> None:
    """Dump the fit history (iteration, objective, gyro covariance
    row-major, measurement covariance row-major)."""
    header = (
        ["iter", "G"]
        + [f"sigma_eta_{i}{j}" for i in range(3) for j in range(3)]
        + [f"sigma_nu_{i}{j}" for i in range(6) for j in range(6)]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for j, G in enumerate(report.G_history, start=1):
            theta = report.theta_history[j]
            row = [float(j), G, *theta.sigma_eta.ravel(), *theta.sigma_nu.ravel()]
            writer.writerow([_FLOAT_FMT % v for v in row])


def _theta_dict(theta: NoiseParams) -> dict:
    return {
        "mu0": theta.mu0.tolist(),
        "sigma0": theta.sigma0.tolist(),
        "sigma_eta": theta.sigma_eta.tolist(),
        "sigma_nu": theta.sigma_nu.tolist(),
    }


def save_em_json(path: str | Path, report: EmReport, config: dict | None = None) -> None:
    """Write the fit result plus the resolved configuration (for
    reproducibility) as a JSON document."""
    doc = {
        "config": config or {},
        "iterations": report.iterations,
        "converged_by": report.converged_by,
        "G_history": list(map(float, report.G_history)),
        "theta0": _theta_dict(report.theta_history[0]),
        "theta": _theta_dict(report.theta),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
