import numpy as np
import pytest

from iaekf.exceptions import NumericalDegeneracyError
from iaekf.filters import (
    FilterState,
    attitude_error,
    block_rotation,
    initial_record,
    liekf_run,
    load_records_csv,
    riekf_propagate,
    riekf_run,
    riekf_update,
    save_records_csv,
)
from iaekf.lie import dcm, exp_map, quat_conj, quat_mul, skew
from iaekf.models import (
    NoiseSpec,
    SensorSample,
    TrajectoryConfig,
    WorldConstants,
    generate_trajectory,
    measure_noiseless,
)

from conftest import random_unit_quat

IDENT = np.array([1.0, 0.0, 0.0, 0.0])


def zero_noise():
    return NoiseSpec(np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((3, 3)), allow_singular=True)


def static_samples(q_true, world, n, spec=None, rng=None):
    """Zero-rate samples at a fixed true orientation."""
    z = measure_noiseless(q_true, world)
    out = []
    for k in range(1, n + 1):
        zk = z.copy()
        if spec is not None:
            zk = zk + spec._sqrt_nu @ rng.normal(size=6)
        out.append(SensorSample(omega=np.zeros(3), acc=zk[:3], mag=zk[3:], t=k))
    return out


class TestBlockRotation:
    def test_identity(self):
        np.testing.assert_allclose(block_rotation(IDENT), np.eye(6))

    def test_orthogonality(self, rng):
        b = block_rotation(random_unit_quat(rng))
        np.testing.assert_allclose(b @ b.T, np.eye(6), atol=1e-9)

    def test_rotates_each_half(self, rng):
        q = random_unit_quat(rng)
        z = rng.normal(size=6)
        out = block_rotation(q) @ z
        np.testing.assert_allclose(out[:3], dcm(q) @ z[:3], atol=1e-12)
        np.testing.assert_allclose(out[3:], dcm(q) @ z[3:], atol=1e-12)


class TestAttitudeError:
    def test_zero_for_equal(self, rng):
        q = random_unit_quat(rng)
        np.testing.assert_allclose(attitude_error(q, q), np.zeros(3), atol=1e-12)

    def test_round_trip(self, rng):
        for scale in (1e-6, 1e-2, 1.0, 3.0):
            xi = rng.normal(size=3)
            xi *= scale / np.linalg.norm(xi)
            if np.linalg.norm(xi) >= np.pi:
                continue
            q = random_unit_quat(rng)
            q_hat = quat_mul(exp_map(xi / 2), q)
            np.testing.assert_allclose(attitude_error(q, q_hat), xi, atol=1e-12)

    def test_antipodal(self, rng):
        q = random_unit_quat(rng)
        np.testing.assert_allclose(attitude_error(q, -q), np.zeros(3), atol=1e-12)


class TestRiekfPropagate:
    def test_static_no_noise(self, rng):
        s = FilterState(q=random_unit_quat(rng), P=0.1 * np.eye(3))
        out, prop = riekf_propagate(s, np.zeros(3), np.zeros((3, 3)), 0.01)
        np.testing.assert_allclose(out.q, s.q, atol=1e-15)
        np.testing.assert_allclose(out.P, s.P, atol=1e-15)
        np.testing.assert_allclose(prop.F, np.eye(3))

    def test_isotropic_process_noise(self, rng):
        # rotation invariance: isotropic covariance transports to itself
        s = FilterState(q=random_unit_quat(rng), P=np.zeros((3, 3)))
        var = 0.3
        out, prop = riekf_propagate(s, rng.normal(size=3), var * np.eye(3), 0.05)
        np.testing.assert_allclose(prop.Q, var * 0.05**2 * np.eye(3), atol=1e-15)

    def test_anisotropic_eigenvalues_preserved(self, rng):
        sigma = np.diag([0.1, 0.4, 0.9])
        s = FilterState(q=random_unit_quat(rng), P=np.zeros((3, 3)))
        _, prop = riekf_propagate(s, rng.normal(size=3), sigma, 0.1)
        got = np.sort(np.linalg.eigvalsh(prop.Q))
        np.testing.assert_allclose(got, np.sort(np.diag(sigma)) * 0.1**2, atol=1e-12)


class TestRiekfUpdate:
    def test_perfect_measurement_no_op(self, rng):
        world = WorldConstants()
        q = random_unit_quat(rng)
        z = measure_noiseless(q, world)
        sample = SensorSample(omega=np.zeros(3), acc=z[:3], mag=z[3:], t=1)
        s = FilterState(q=q, P=0.2 * np.eye(3))
        out, rec = riekf_update(s, sample, world, 1e-5 * np.eye(6))
        np.testing.assert_allclose(rec.r, np.zeros(6), atol=1e-12)
        np.testing.assert_allclose(attitude_error(q, out.q), np.zeros(3), atol=1e-12)

    def test_zero_prior_covariance_freezes_state(self, rng):
        world = WorldConstants()
        q_true = random_unit_quat(rng)
        z = measure_noiseless(q_true, world)
        sample = SensorSample(omega=np.zeros(3), acc=z[:3], mag=z[3:], t=1)
        s = FilterState(q=random_unit_quat(rng), P=np.zeros((3, 3)))
        out, rec = riekf_update(s, sample, world, 1e-5 * np.eye(6))
        np.testing.assert_allclose(rec.K, np.zeros((3, 6)), atol=1e-12)
        np.testing.assert_allclose(out.q, s.q)

    def test_linearized_contraction(self, rng):
        # posterior tangent error approaches (I - K H) xi0 as xi0 -> 0
        world = WorldConstants()
        for norm in (1e-3, 1e-4):
            xi0 = rng.normal(size=3)
            xi0 *= norm / np.linalg.norm(xi0)
            q_true = random_unit_quat(rng)
            q_hat = quat_mul(exp_map(xi0 / 2), q_true)
            z = measure_noiseless(q_true, world)
            sample = SensorSample(omega=np.zeros(3), acc=z[:3], mag=z[3:], t=1)
            s = FilterState(q=q_hat, P=1e-2 * np.eye(3))
            out, rec = riekf_update(s, sample, world, 1e-5 * np.eye(6))
            predicted = (np.eye(3) - rec.K @ rec.H) @ xi0
            actual = attitude_error(q_true, out.q)
            assert np.linalg.norm(actual - predicted) < 5.0 * norm**2

    def test_degenerate_innovation_covariance(self, rng):
        world = WorldConstants()
        q = random_unit_quat(rng)
        z = measure_noiseless(q, world)
        sample = SensorSample(omega=np.zeros(3), acc=z[:3], mag=z[3:], t=1)
        s = FilterState(q=q, P=1e12 * np.eye(3))
        with pytest.raises(NumericalDegeneracyError):
            riekf_update(s, sample, world, 1e-12 * np.eye(6))


class TestRiekfRun:
    def test_static_fixed_point(self):
        world = WorldConstants()
        q_true = exp_map(np.array([0.3, -0.2, 0.5]))
        samples = static_samples(q_true, world, 200)
        spec = NoiseSpec.isotropic(1e-1, 1e-5)
        records = riekf_run(samples, FilterState(q=q_true, P=np.eye(3)), spec, world, 0.01)
        for rec in records:
            assert np.linalg.norm(attitude_error(q_true, rec.q_plus)) < 1e-9

    def test_h_constant_across_steps(self, rng):
        world = WorldConstants()
        cfg = TrajectoryConfig(dt=0.01, n_steps=50, profile="sinusoid", seed=8)
        spec = NoiseSpec.isotropic(1e-1, 1e-5)
        _, samples = generate_trajectory(cfg, world, spec)
        records = riekf_run(samples, FilterState(q=IDENT, P=np.eye(3)), spec, world, cfg.dt)
        H_expected = np.vstack([skew(world.g), skew(world.b)])
        for rec in records:
            np.testing.assert_array_equal(rec.H, H_expected)

    def test_error_decreases_from_large_init(self):
        world = WorldConstants()
        spec = NoiseSpec.isotropic(1e-1, 1e-5)
        cfg = TrajectoryConfig(
            dt=0.01, n_steps=400, profile="sinusoid",
            init={"mode": "random_tangent", "std": 1.0}, seed=3,
        )
        truth, samples = generate_trajectory(cfg, world, spec)
        records = riekf_run(samples, FilterState(q=IDENT, P=np.eye(3)), spec, world, cfg.dt)
        e0 = np.linalg.norm(attitude_error(truth[0], IDENT))
        e_end = np.linalg.norm(attitude_error(truth[-1], records[-1].q_plus))
        assert e_end < 0.05 * e0

    def test_covariance_stays_symmetric_psd(self):
        # long mixed run with strong rates and noise
        world = WorldConstants()
        spec = NoiseSpec.isotropic(1e-1, 1e-5)
        cfg = TrajectoryConfig(dt=0.01, n_steps=100_000, profile="random_walk",
                               profile_params={"step_std": 5.0}, seed=17)
        _, samples = generate_trajectory(cfg, world, spec)
        records = riekf_run(samples, FilterState(q=IDENT, P=np.eye(3)), spec, world, cfg.dt)
        for rec in records[:: len(records) // 500]:
            assert np.abs(rec.P_plus - rec.P_plus.T).max() < 1e-10
            assert np.linalg.eigvalsh(rec.P_plus).min() >= -1e-9

    def test_gain_trajectory_independence(self):
        # isotropic noise: identical gain sequences on different trajectories
        world = WorldConstants()
        spec = NoiseSpec.isotropic(1e-1, 1e-5)
        gains = []
        for profile, seed in (("sinusoid", 1), ("constant", 2)):
            cfg = TrajectoryConfig(dt=0.01, n_steps=100, profile=profile, seed=seed)
            _, samples = generate_trajectory(cfg, world, spec)
            records = riekf_run(samples, FilterState(q=IDENT, P=np.eye(3)), spec, world, cfg.dt)
            gains.append(np.stack([rec.K for rec in records]))
        assert np.abs(gains[0] - gains[1]).max() < 1e-10

    def test_right_invariance_of_error_sequence(self, rng):
        # rotating truth and initial estimate on the right, with body-frame
        # data transported accordingly, leaves the error sequence unchanged
        world = WorldConstants()
        spec = NoiseSpec.isotropic(1e-1, 1e-5)
        cfg = TrajectoryConfig(
            dt=0.01, n_steps=150, profile="sinusoid",
            init={"mode": "random_tangent", "std": 0.7}, seed=21,
        )
        truth, samples = generate_trajectory(cfg, world, spec)
        q0_hat = IDENT
        records = riekf_run(samples, FilterState(q=q0_hat, P=np.eye(3)), spec, world, cfg.dt)
        errs = [attitude_error(truth[k], records[k - 1].q_plus) for k in range(1, len(truth))]

        rho = random_unit_quat(rng)
        a_rho_t = dcm(rho).T
        moved = [
            SensorSample(omega=a_rho_t @ s.omega, acc=a_rho_t @ s.acc, mag=a_rho_t @ s.mag, t=s.t)
            for s in samples
        ]
        truth_rho = [quat_mul(q, rho) for q in truth]
        records_rho = riekf_run(
            moved, FilterState(q=quat_mul(q0_hat, rho), P=np.eye(3)), spec, world, cfg.dt
        )
        errs_rho = [
            attitude_error(truth_rho[k], records_rho[k - 1].q_plus) for k in range(1, len(truth_rho))
        ]
        assert max(np.linalg.norm(a - b) for a, b in zip(errs, errs_rho)) < 1e-8

    def test_empty_samples_rejected(self):
        with pytest.raises(ValueError):
            riekf_run([], FilterState(q=IDENT, P=np.eye(3)), NoiseSpec.isotropic(1, 1), WorldConstants(), 0.01)


class TestLiekfRun:
    def test_static_fixed_point(self):
        world = WorldConstants()
        q_true = exp_map(np.array([-0.4, 0.1, 0.2]))
        samples = static_samples(q_true, world, 200)
        spec = NoiseSpec.isotropic(1e-1, 1e-5)
        records = liekf_run(samples, FilterState(q=q_true, P=np.eye(3)), spec, world, 0.01)
        for rec in records:
            assert np.linalg.norm(attitude_error(q_true, rec.q_plus)) < 1e-9

    def test_matches_riekf_at_identity(self, rng):
        # frames coincide at the identity orientation; with a tiny initial
        # error the two filters agree to second order
        world = WorldConstants()
        spec = NoiseSpec.isotropic(1e-1, 1e-5)
        xi0 = rng.normal(size=3)
        xi0 *= 1e-5 / np.linalg.norm(xi0)
        q0_hat = exp_map(xi0 / 2)
        samples = static_samples(IDENT, world, 50)
        ri = riekf_run(samples, FilterState(q=q0_hat, P=np.eye(3)), spec, world, 0.01)
        li = liekf_run(samples, FilterState(q=q0_hat, P=np.eye(3)), spec, world, 0.01)
        for a, b in zip(ri, li):
            ea = np.linalg.norm(attitude_error(IDENT, a.q_plus))
            eb = np.linalg.norm(attitude_error(IDENT, b.q_plus))
            assert abs(ea - eb) < 1e-9

    def test_gain_varies_on_moving_trajectory(self):
        world = WorldConstants()
        spec = NoiseSpec.isotropic(1e-1, 1e-5)
        cfg = TrajectoryConfig(dt=0.01, n_steps=600, profile="sinusoid", seed=5)
        _, samples = generate_trajectory(cfg, world, spec)
        ri = riekf_run(samples, FilterState(q=IDENT, P=np.eye(3)), spec, world, cfg.dt)
        li = liekf_run(samples, FilterState(q=IDENT, P=np.eye(3)), spec, world, cfg.dt)
        burn = 300
        ri_gain = np.stack([r.K for r in ri[burn:]])
        li_gain = np.stack([r.K for r in li[burn:]])
        ri_var = (ri_gain.max(axis=0) - ri_gain.min(axis=0)).max()
        li_var = (li_gain.max(axis=0) - li_gain.min(axis=0)).max()
        assert ri_var < 1e-6
        assert li_var > 10 * ri_var


class TestRecordCsv:
    def test_round_trip(self, tmp_path):
        world = WorldConstants()
        spec = NoiseSpec.isotropic(1e-1, 1e-5)
        cfg = TrajectoryConfig(dt=0.01, n_steps=10, profile="sinusoid", seed=1)
        _, samples = generate_trajectory(cfg, world, spec)
        init = FilterState(q=IDENT, P=np.eye(3))
        records = [initial_record(init)] + riekf_run(samples, init, spec, world, cfg.dt)
        path = tmp_path / "records.csv"
        save_records_csv(path, records)
        back = load_records_csv(path)
        assert len(back) == len(records)
        for a, b in zip(records, back):
            np.testing.assert_array_equal(a.q_plus, b.q_plus)
            np.testing.assert_array_equal(a.P_plus, b.P_plus)
            np.testing.assert_array_equal(a.K, b.K)
            np.testing.assert_array_equal(a.r, b.r)
