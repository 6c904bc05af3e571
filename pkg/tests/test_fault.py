"""Fault reconstruction: partitioning, weighting, synthesis, tracking."""

import numpy as np
import pytest

from linfdeconv import lmi, sdp
from linfdeconv import simulate as sim
from linfdeconv.fault import (
    FaultEstimator,
    FaultModel,
    FaultStructureError,
    build_H,
    build_fault_augmented,
    fault_estimator,
    normalize_fault_structure,
    pendulum_model,
    ramp_and_hold,
    reconstruct,
    simulate_fault_scenario,
    synthesize_fault_filter,
)
from linfdeconv.model import DeconvolutionFilter


class TestPartition:
    def test_pendulum_structure_identity_permutation(self):
        C2 = np.array([[0.0, 1.0], [1.0, 0.0]])
        D2 = np.array([[0.0, 0.6], [0.0, 0.0]])
        part = normalize_fault_structure(C2, D2, [[0.0], [1.0]])
        assert part.order == (0, 1)
        assert part.F2[0, 0] == 1.0
        assert part.scaling == (1.0, 1.0)

    def test_swap_permutation(self):
        part = normalize_fault_structure(
            np.eye(2), np.zeros((2, 1)), [[1.0], [0.0]]
        )
        assert part.order == (1, 0)
        assert part.F2[0, 0] == 1.0

    def test_no_row_scaling_applied(self):
        part = normalize_fault_structure(
            np.eye(2), np.zeros((2, 1)), [[0.0], [3.0]]
        )
        assert part.F2[0, 0] == 3.0  # kept as found
        assert part.scaling == (1.0, 1.0)

    def test_round_trip(self):
        rng = np.random.default_rng(2)
        C2 = rng.normal(size=(3, 4))
        F = np.array([[0.0], [2.0], [0.0]])
        part = normalize_fault_structure(C2, rng.normal(size=(3, 2)), F)
        np.testing.assert_array_equal(part.restore(part.apply(C2)), C2)
        reordered_F = part.apply(F)
        assert np.all(reordered_F[: part.n_faultfree] == 0.0)
        np.testing.assert_array_equal(reordered_F[part.n_faultfree:], part.F2)

    def test_entangled_rows_rejected(self):
        with pytest.raises(FaultStructureError, match="fault-free"):
            normalize_fault_structure(
                np.eye(2), np.zeros((2, 1)), [[1.0], [1.0]]
            )

    def test_rank_deficient_rejected(self):
        with pytest.raises(FaultStructureError, match="rank"):
            normalize_fault_structure(
                np.eye(3), np.zeros((3, 1)), np.zeros((3, 2))
            )

    def test_no_faults_rejected(self):
        with pytest.raises(ValueError, match="r > faults p"):
            normalize_fault_structure(
                np.eye(2), np.zeros((2, 1)), np.zeros((2, 0))
            )


class TestWeight:
    def test_published_choice(self):
        H = build_H([[1.0]], [[1.0]])
        np.testing.assert_array_equal(H, [[1.0, 1.0]])

    def test_inverse_block(self):
        H = build_H([[0.0]], [[2.0]])
        np.testing.assert_array_equal(H, [[0.0, 0.5]])

    def test_wide_freeside(self):
        H = build_H([[0.3, -0.2]], [[4.0]])
        np.testing.assert_allclose(H, [[0.3, -0.2, 0.25]])

    def test_singular_block_rejected(self):
        with pytest.raises(ValueError, match="singular"):
            build_H([[1.0]], [[0.0]])

    def test_weight_inverts_fault_block_exactly(self, pendulum):
        H = pendulum.weight(1.0)
        resid = H @ np.vstack([np.zeros((1, 1)), pendulum.partition.F2]) - np.eye(1)
        assert np.max(np.abs(resid)) <= 1e-12


class TestPendulumModel:
    def test_published_entries_to_four_decimals(self, pendulum):
        A = pendulum.base.A
        assert A[0, 1] == pytest.approx(1.0 / 0.245, abs=5e-5)
        assert A[0, 1] == pytest.approx(4.0816, abs=5e-5)
        assert A[1, 0] == pytest.approx(-26.8063, abs=5e-5)
        assert A[1, 1] == pytest.approx(-0.25 / 0.245 - 63.9668, abs=5e-5)
        assert A[1, 1] == pytest.approx(-64.9872, abs=5e-5)
        np.testing.assert_allclose(pendulum.base.B1, [[0, 0], [1.0, 0]])
        np.testing.assert_allclose(
            pendulum.base.G1, [[0, 0], [0, -1.0 / 0.245]]
        )
        assert np.all(pendulum.base.G2 == 0.0)
        np.testing.assert_array_equal(pendulum.F, [[0.0], [1.0]])

    def test_double_integrator_limit(self):
        fm = pendulum_model(m=1.0, l=1.0, kappa=0.0, zeta=0.0, g=0.0,
                            k1=0.0, k2=0.0, R1=0.0, R2=0.0)
        np.testing.assert_array_equal(fm.base.A, [[0.0, 1.0], [0.0, 0.0]])

    def test_nonpositive_parameters_rejected(self):
        with pytest.raises(ValueError):
            pendulum_model(m=0.0)
        with pytest.raises(ValueError):
            pendulum_model(l=-1.0)


class TestFaultSynthesis:
    def test_published_design_point(self, pendulum):
        res = synthesize_fault_filter(
            pendulum, h1=1.0, gamma=1.0, lam=2.0, eps=1e-3, mu=0.8453
        )
        assert res.ok and res.certified
        assert res.mu == pytest.approx(0.8453)
        assert res.filter.n_inputs == 1 and res.filter.n_outputs == 2

    def test_free_split_feasible_and_interval_covers_published(self, pendulum):
        from linfdeconv.fault import fault_problem

        res = synthesize_fault_filter(pendulum, h1=1.0, gamma=1.0, lam=2.0, eps=1e-3)
        assert res.ok and 0 < res.mu < 1.0
        base = fault_problem(pendulum, 1.0, 2.0, 1e-3)
        lo = sdp.minimize(
            lmi.LmiProblem(base.variables, base.constraints, (("mu", 1.0),))
        )
        hi = sdp.minimize(
            lmi.LmiProblem(base.variables, base.constraints, (("mu", -1.0),))
        )
        assert lo.scalar("mu") < 0.80 < 0.89 < hi.scalar("mu")

    def test_level_well_below_optimum_has_no_filter(self, pendulum):
        res = synthesize_fault_filter(pendulum, h1=1.0, gamma=0.005, lam=2.0, eps=1e-3)
        assert res.status == "no_admissible_filter"

    def test_estimator_certified_against_direct_analysis(self, pendulum):
        res = synthesize_fault_filter(pendulum, h1=1.0, gamma=None, lam=2.0, eps=1e-3)
        assert res.ok
        aug = build_fault_augmented(pendulum, res.filter, h1=1.0)
        check = sdp.solve(
            lmi.peak_gain_direct_lmis(aug, res.gamma * 1.05, 2.0)
        )
        assert check.ok

    def test_published_filter_validates_at_unit_level(
        self, pendulum, filter_fault_published
    ):
        aug = build_fault_augmented(pendulum, filter_fault_published, h1=1.0)
        check = sdp.solve(lmi.peak_gain_direct_lmis(aug, 1.0, 2.0))
        assert check.ok

    def test_fault_structure_error_propagates(self):
        base = pendulum_model().base
        with pytest.raises(FaultStructureError):
            FaultModel(base=base, F=np.array([[1.0], [1.0]]))


class TestFaultAugmented:
    def test_error_map_hand_value(self, pendulum, filter_fault_published):
        """D = H (Df D21 - D2) multiplied out by hand for the pendulum."""
        aug = build_fault_augmented(pendulum, filter_fault_published, h1=1.0)
        s = np.sqrt(0.4)
        # Df D21 = [[0, 0.5073 s], [0, 0.4925 s]]; D2 = [[0, s], [0, 0]]
        expected = [[0.0, (0.5073 * s - s) + 0.4925 * s]]
        np.testing.assert_allclose(aug.D, expected, atol=1e-12)

    def test_drift_block_structure(self, pendulum, filter_fault_published):
        aug = build_fault_augmented(pendulum, filter_fault_published, h1=1.0)
        C21 = pendulum.base.C2[:1]
        np.testing.assert_array_equal(aug.A[:2, :2], pendulum.base.A)
        np.testing.assert_array_equal(
            aug.A[2:, :2], filter_fault_published.Bf @ C21
        )
        np.testing.assert_array_equal(aug.A[2:, 2:], filter_fault_published.Af)
        assert np.all(aug.A[:2, 2:] == 0.0)

    def test_wrong_filter_shape_rejected(self, pendulum):
        bad = DeconvolutionFilter(
            Af=-np.eye(2), Bf=np.zeros((2, 2)),
            Cf=np.zeros((2, 2)), Df=np.zeros((2, 2)),
        )
        with pytest.raises(ValueError, match="fault-free"):
            build_fault_augmented(pendulum, bad, h1=1.0)


class TestReconstruct:
    def test_zero_stream_zero_estimate(self, pendulum, filter_fault_published):
        est = fault_estimator(pendulum, filter_fault_published, h1=1.0)
        fhat = reconstruct(est, np.zeros((100, 2)), dt=1e-3)
        assert np.all(fhat == 0.0)

    def test_noise_free_fault_free_run_exactly_zero(
        self, pendulum, filter_fault_published
    ):
        est = fault_estimator(pendulum, filter_fault_published, h1=1.0)
        run = simulate_fault_scenario(
            pendulum, est, None, None, dt=1e-3, horizon=2.0, seed=0
        )
        assert np.all(run.fhat == 0.0)
        assert np.all(run.y == 0.0)

    def test_estimator_weight_consistency_guard(self, pendulum, filter_fault_published):
        with pytest.raises(ValueError, match="invert"):
            FaultEstimator(
                filter=filter_fault_published,
                H=np.array([[1.0, 2.0]]),
                partition=pendulum.partition,
            )

    def test_ramp_fault_tracked(self, pendulum, filter_fault_published):
        est = fault_estimator(pendulum, filter_fault_published, h1=1.0)
        dist = sim.FilteredNoise(bandwidth=1.0, peak=0.1, channels=2, seed=13)
        profile = ramp_and_hold(rate=0.1, hold=0.5, start=2.0)
        run = simulate_fault_scenario(
            pendulum, est, dist, profile, dt=1e-3, horizon=12.0, seed=4
        )
        late = run.t > 8.0
        err = run.f[late, 0] - run.fhat[late, 0]
        # certified level 1.0 with disturbance peak 0.1: the mean-square
        # reconstruction error stays below (1.0 * 0.1)^2 with a wide margin
        assert float(np.mean(err ** 2)) <= 0.01
        assert abs(float(np.mean(run.fhat[late, 0])) - 0.5) < 0.05

    def test_fault_free_plateau_small_relative_to_faulty(
        self, pendulum, filter_fault_published
    ):
        est = fault_estimator(pendulum, filter_fault_published, h1=1.0)
        dist = sim.FilteredNoise(bandwidth=1.0, peak=0.1, channels=2, seed=13)
        profile = ramp_and_hold(rate=0.1, hold=0.5, start=2.0)
        faulty = simulate_fault_scenario(
            pendulum, est, dist, profile, dt=1e-3, horizon=12.0, seed=4
        )
        clean = simulate_fault_scenario(
            pendulum, est, dist, None, dt=1e-3, horizon=12.0, seed=4
        )
        late = faulty.t > 8.0
        plateau_faulty = float(np.mean(np.abs(faulty.fhat[late, 0])))
        plateau_clean = float(np.mean(np.abs(clean.fhat[late, 0])))
        assert plateau_clean < 0.2 * plateau_faulty

    def test_sample_channel_mismatch_rejected(self, pendulum, filter_fault_published):
        est = fault_estimator(pendulum, filter_fault_published, h1=1.0)
        with pytest.raises(ValueError, match="channels"):
            reconstruct(est, np.zeros((10, 3)), dt=1e-3)


class TestProfiles:
    def test_ramp_and_hold_shape(self):
        prof = ramp_and_hold(rate=0.1, hold=0.5, start=2.0)
        t = np.array([0.0, 2.0, 4.5, 7.0, 20.0])
        f = prof.sample(t)[:, 0]
        np.testing.assert_allclose(f, [0.0, 0.0, 0.25, 0.5, 0.5], atol=1e-12)

    def test_breakpoints_must_increase(self):
        from linfdeconv.fault import FaultProfile

        with pytest.raises(ValueError, match="increase"):
            FaultProfile(times=(1.0, 1.0), values=((0.0,), (1.0,)))
