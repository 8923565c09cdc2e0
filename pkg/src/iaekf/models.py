"""Ground-truth trajectory generation and sensor synthesis.

The simulated body carries a gyroscope (angular rate, rad/s) plus an
accelerometer and magnetometer that observe the world-frame gravity and
magnetic-field directions in the body frame. Gaussian noise is injected
through lower-Cholesky factors of the configured covariances, driven by
a counter-based Philox generator so that every run is reproducible from
its seed alone.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .exceptions import InvalidCovarianceError
from .lie import dcm, exp_map, mat_exp, omega_matrix, quat_normalize

__all__ = [
    "NoiseSpec",
    "SensorSample",
    "TrajectoryConfig",
    "WorldConstants",
    "corrupt",
    "generate_trajectory",
    "load_trajectory_csv",
    "make_rng",
    "measure_noiseless",
    "omega_schedule",
    "propagate_truth",
    "save_trajectory_csv",
]

_FLOAT_FMT = "%.17g"
TRAJECTORY_COLUMNS = (
    "t",
    "qw", "qx", "qy", "qz",
    "wx", "wy", "wz",
    "ax", "ay", "az",
    "mx", "my", "mz",
)


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based Philox generator; the package-wide RNG choice."""
    return np.random.Generator(np.random.Philox(seed))


def _check_spd(mat: np.ndarray, name: str, allow_singular: bool) -> None:
    if not np.all(np.isfinite(mat)):
        raise InvalidCovarianceError(f"{name} has non-finite entries")
    if np.abs(mat - mat.T).max() > 1e-12:
        raise InvalidCovarianceError(f"{name} is not symmetric")
    min_eig = np.linalg.eigvalsh(mat).min()
    if min_eig <= 0.0 and not (allow_singular and min_eig >= -1e-15):
        raise InvalidCovarianceError(f"{name} is not positive definite (min eig {min_eig:g})")


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    """Lower-triangular-like square root; falls back to an eigen square
    root when the matrix is singular (allowed only for testing specs)."""
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(mat)
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


@dataclass
class WorldConstants:
    """World-frame reference vectors: gravity direction ``g`` and
    magnetic field ``b``. They must not be parallel or heading is
    unobservable."""

    g: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    b: np.ndarray = field(
        default_factory=lambda: np.array([np.cos(np.pi / 3), 0.0, np.sin(np.pi / 3)])
    )

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        ng, nb = np.linalg.norm(self.g), np.linalg.norm(self.b)
        if ng == 0.0 or nb == 0.0 or np.linalg.norm(np.cross(self.g, self.b)) <= 1e-6 * ng * nb:
            raise ValueError("g and b must be non-zero and non-parallel")

    @property
    def reference(self) -> np.ndarray:
        """Stacked 6-vector ``[g; b]``."""
        return np.concatenate([self.g, self.b])


@dataclass
class NoiseSpec:
    """Sensor noise covariances: gyro ``sigma_eta`` (3x3), accelerometer
    ``sigma_acc`` (3x3) and magnetometer ``sigma_mag`` (3x3).

    ``allow_singular=True`` bypasses the positive-definiteness check (for
    zero-noise test configurations only).
    """

    sigma_eta: np.ndarray
    sigma_acc: np.ndarray
    sigma_mag: np.ndarray
    allow_singular: bool = False

    def __post_init__(self):
        self.sigma_eta = np.atleast_2d(np.asarray(self.sigma_eta, dtype=float))
        self.sigma_acc = np.atleast_2d(np.asarray(self.sigma_acc, dtype=float))
        self.sigma_mag = np.atleast_2d(np.asarray(self.sigma_mag, dtype=float))
        _check_spd(self.sigma_eta, "sigma_eta", self.allow_singular)
        _check_spd(self.sigma_acc, "sigma_acc", self.allow_singular)
        _check_spd(self.sigma_mag, "sigma_mag", self.allow_singular)

    @classmethod
    def isotropic(cls, var_eta: float, var_meas: float) -> "NoiseSpec":
        """Isotropic spec with gyro variance ``var_eta`` and a shared
        accelerometer/magnetometer variance ``var_meas``."""
        return cls(var_eta * np.eye(3), var_meas * np.eye(3), var_meas * np.eye(3))

    @property
    def sigma_nu(self) -> np.ndarray:
        """Stacked 6x6 measurement covariance ``blockdiag(sigma_acc, sigma_mag)``."""
        out = np.zeros((6, 6))
        out[:3, :3] = self.sigma_acc
        out[3:, 3:] = self.sigma_mag
        return out

    @cached_property
    def _sqrt_eta(self) -> np.ndarray:
        return _psd_sqrt(self.sigma_eta)

    @cached_property
    def _sqrt_nu(self) -> np.ndarray:
        return _psd_sqrt(self.sigma_nu)


@dataclass
class SensorSample:
    """One epoch of corrupted body-frame measurements."""

    omega: np.ndarray  # rad/s
    acc: np.ndarray
    mag: np.ndarray
    t: int  # time index, 1-based within a trajectory

    @property
    def z(self) -> np.ndarray:
        """Stacked measurement ``[acc; mag]``."""
        return np.concatenate([self.acc, self.mag])


@dataclass
class TrajectoryConfig:
    """Simulation schedule: timestep, length, angular-velocity profile
    and initial orientation.

    ``profile`` selects the angular-velocity schedule: ``zero``,
    ``constant`` (params: ``rate``), ``sinusoid`` (params: ``amplitude``,
    ``frequency_hz``, ``phase``) or ``random_walk`` (params:
    ``step_std``). ``init`` is either ``{"mode": "fixed", "quaternion":
    [...]}`` or ``{"mode": "random_tangent", "std": s}``, the latter
    drawing the initial orientation as ``exp_map(xi / 2)`` with
    ``xi ~ N(0, s^2 I)``.
    """

    dt: float = 0.01
    n_steps: int = 1000
    profile: str = "sinusoid"
    profile_params: dict = field(default_factory=dict)
    init: dict = field(default_factory=lambda: {"mode": "fixed", "quaternion": [1.0, 0.0, 0.0, 0.0]})
    seed: int = 0

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")


_SINUSOID_DEFAULTS = {
    "amplitude": (1.0, 0.8, 0.6),
    "frequency_hz": (0.3, 0.2, 0.5),
    "phase": (0.0, np.pi / 2, np.pi / 4),
}


def omega_schedule(cfg: TrajectoryConfig, rng: np.random.Generator) -> np.ndarray:
    """Angular-velocity sequence (n_steps, 3) for the configured profile.

    ``omega[k]`` applies over the interval from step ``k`` to ``k + 1``.
    """
    n, dt = cfg.n_steps, cfg.dt
    params = cfg.profile_params
    if cfg.profile == "zero":
        return np.zeros((n, 3))
    if cfg.profile == "constant":
        rate = np.asarray(params.get("rate", (0.5, -0.3, 0.8)), dtype=float)
        return np.tile(rate, (n, 1))
    if cfg.profile == "sinusoid":
        amp = np.asarray(params.get("amplitude", _SINUSOID_DEFAULTS["amplitude"]), dtype=float)
        freq = np.asarray(params.get("frequency_hz", _SINUSOID_DEFAULTS["frequency_hz"]), dtype=float)
        phase = np.asarray(params.get("phase", _SINUSOID_DEFAULTS["phase"]), dtype=float)
        t = np.arange(n)[:, None] * dt
        return amp * np.sin(2.0 * np.pi * freq * t + phase)
    if cfg.profile == "random_walk":
        step_std = float(params.get("step_std", 0.5))
        steps = rng.normal(size=(n, 3)) * step_std * dt
        return np.cumsum(steps, axis=0)
    raise ValueError(f"unknown omega profile {cfg.profile!r}")


def propagate_truth(q: np.ndarray, omega: np.ndarray, dt: float) -> np.ndarray:
    """Advance a unit quaternion one step under constant body rate ``omega``.

    Applies the 4x4 one-step propagator ``mat_exp((dt / 2) Omega[omega])``
    to ``q`` and renormalizes.
    """
    phi = mat_exp((dt / 2.0) * omega_matrix(omega))
    return quat_normalize(phi @ np.asarray(q, dtype=float))


def measure_noiseless(q: np.ndarray, world: WorldConstants) -> np.ndarray:
    """Ideal body-frame measurement ``[dcm(q)^T g; dcm(q)^T b]``."""
    body = dcm(q).T
    return np.concatenate([body @ world.g, body @ world.b])


def corrupt(
    z: np.ndarray,
    omega: np.ndarray,
    spec: NoiseSpec,
    rng: np.random.Generator,
    t: int = 0,
) -> SensorSample:
    """Add Gaussian noise to an ideal measurement pair.

    Draws gyro noise from ``N(0, sigma_eta)`` and measurement noise from
    ``N(0, blockdiag(sigma_acc, sigma_mag))`` via the Cholesky factor of
    each covariance.
    """
    z = np.asarray(z, dtype=float)
    omega = np.asarray(omega, dtype=float)
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(omega))):
        raise ValueError("non-finite input")
    wbar = omega + spec._sqrt_eta @ rng.normal(size=3)
    zbar = z + spec._sqrt_nu @ rng.normal(size=6)
    return SensorSample(omega=wbar, acc=zbar[:3], mag=zbar[3:], t=t)


def generate_trajectory(
    cfg: TrajectoryConfig,
    world: WorldConstants,
    spec: NoiseSpec,
) -> tuple[list[np.ndarray], list[SensorSample]]:
    """Simulate a ground-truth orientation history and its sensor stream.

    Returns ``(truth, samples)`` where ``truth`` has ``n_steps + 1`` unit
    quaternions (entry 0 is the initial orientation) and ``samples`` has
    one :class:`SensorSample` per step. Sample ``k`` carries the rate
    that drove the step into ``truth[k]`` and the measurements taken at
    ``truth[k]``. Deterministic given ``cfg.seed``.
    """
    rng = make_rng(cfg.seed)
    if cfg.init["mode"] == "fixed":
        q = quat_normalize(np.asarray(cfg.init["quaternion"], dtype=float))
    elif cfg.init["mode"] == "random_tangent":
        xi = rng.normal(size=3) * float(cfg.init.get("std", 1.0))
        q = exp_map(xi / 2.0)
    else:
        raise ValueError(f"unknown init mode {cfg.init['mode']!r}")

    omegas = omega_schedule(cfg, rng)
    truth = [q]
    samples = []
    for k in range(1, cfg.n_steps + 1):
        w = omegas[k - 1]
        q = propagate_truth(q, w, cfg.dt)
        truth.append(q)
        z = measure_noiseless(q, world)
        samples.append(corrupt(z, w, spec, rng, t=k))
    return truth, samples


def save_trajectory_csv(
    path: str | Path,
    truth: list[np.ndarray],
    samples: list[SensorSample],
    dt: float,
) -> None:
    """Write a trajectory dump.

    Row ``k`` holds time ``k * dt``, the truth quaternion and sample
    ``k``'s sensor values; row 0 carries the initial orientation with
    zeroed sensor columns (it has no measurement).
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_COLUMNS)
        row0 = [0.0, *truth[0], 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        writer.writerow([_FLOAT_FMT % v for v in row0])
        for k, s in enumerate(samples, start=1):
            row = [k * dt, *truth[k], *s.omega, *s.acc, *s.mag]
            writer.writerow([_FLOAT_FMT % v for v in row])


def load_trajectory_csv(path: str | Path) -> tuple[list[np.ndarray], list[SensorSample], float]:
    """Read a dump produced by :func:`save_trajectory_csv`.

    Returns ``(truth, samples, dt)``.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != TRAJECTORY_COLUMNS:
            raise ValueError(f"unexpected trajectory header: {header}")
        rows = [np.array([float(v) for v in row]) for row in reader]
    if not rows:
        raise ValueError("empty trajectory file")
    truth = [row[1:5] for row in rows]
    samples = [
        SensorSample(omega=row[5:8], acc=row[8:11], mag=row[11:14], t=k)
        for k, row in enumerate(rows[1:], start=1)
    ]
    dt = rows[1][0] - rows[0][0] if len(rows) > 1 else 0.0
    return truth, samples, dt
