"""Quaternion attitude estimation toolkit.

Right- and left-invariant extended Kalman filters on unit quaternions,
fixed-interval smoothing, EM-based noise-covariance estimation, and a
Monte Carlo experiment harness.
"""

from .lie import (
    dcm,
    exp_map,
    log_map,
    mat_exp,
    omega_matrix,
    quat_conj,
    quat_inv,
    quat_mul,
    rotate,
    skew,
    xi_matrix,
)
from .models import (
    NoiseSpec,
    SensorSample,
    TrajectoryConfig,
    WorldConstants,
    corrupt,
    generate_trajectory,
    measure_noiseless,
    propagate_truth,
)
from .filters import (
    FilterState,
    StepRecord,
    attitude_error,
    block_rotation,
    initial_record,
    liekf_run,
    riekf_propagate,
    riekf_run,
    riekf_update,
)
from .smoothing import SmoothedTrajectory, lag_one_smooth, rts_smooth
from .em import EmOptions, EmReport, NoiseParams, e_step, em_fit, expected_log_lik, m_step
from .exceptions import (
    DegenerateWindowError,
    InvalidCovarianceError,
    NumericalDegeneracyError,
)

__version__ = "0.1.0"

__all__ = [
    "DegenerateWindowError",
    "EmOptions",
    "EmReport",
    "FilterState",
    "InvalidCovarianceError",
    "NoiseParams",
    "NoiseSpec",
    "NumericalDegeneracyError",
    "SensorSample",
    "SmoothedTrajectory",
    "StepRecord",
    "TrajectoryConfig",
    "WorldConstants",
    "attitude_error",
    "block_rotation",
    "corrupt",
    "dcm",
    "e_step",
    "em_fit",
    "exp_map",
    "expected_log_lik",
    "generate_trajectory",
    "initial_record",
    "lag_one_smooth",
    "liekf_run",
    "log_map",
    "m_step",
    "mat_exp",
    "measure_noiseless",
    "omega_matrix",
    "propagate_truth",
    "quat_conj",
    "quat_inv",
    "quat_mul",
    "riekf_propagate",
    "riekf_run",
    "riekf_update",
    "rotate",
    "rts_smooth",
    "skew",
    "xi_matrix",
]
