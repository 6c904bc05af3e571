"""Backend contract: solve / minimize / verify round trips."""

import numpy as np
import pytest

from linfdeconv import lmi, sdp
from linfdeconv.model import build_augmented


def trivial_lower_bound_problem(bound=3.0):
    gamma = lmi.MatrixVariable("gamma", (1, 1), "scalar")
    con = lmi.make_constraint(
        "gamma_floor", lmi.POSITIVE, (1,),
        {(0, 0): lmi.sterm(gamma, [[1.0]]) + lmi.cexpr([[-bound]])},
    )
    return lmi.LmiProblem((gamma,), (con,), (("gamma", 1.0),))


class TestSolve:
    def test_scalar_lower_bound(self):
        sol = sdp.minimize(trivial_lower_bound_problem(3.0))
        assert sol.status == "optimal"
        assert sol.objective_value == pytest.approx(3.0, abs=1e-5)

    def test_stability_check_with_strong_noise(self):
        # scalar drift -1 with unit multiplicative noise: -2Q + Q = -Q < 0
        sol = sdp.solve(lmi.esms_lmis([[-1.0]], [[1.0]]))
        assert sol.ok
        assert sol.value("Q")[0, 0] > 0

    def test_example1_at_published_minimum(self, example1):
        # published four-digit minimum, bracketed one digit above
        sol = sdp.solve(lmi.robust_quadratic_synthesis_lmis(example1, 0.7279, 2.5))
        assert sol.ok

    def test_infeasible_reported_with_evidence(self, example1):
        sol = sdp.solve(lmi.robust_quadratic_synthesis_lmis(example1, 0.60, 2.5))
        assert sol.status == "infeasible"

    def test_minimize_requires_objective(self, example1):
        with pytest.raises(ValueError, match="objective"):
            sdp.minimize(lmi.robust_quadratic_synthesis_lmis(example1, 0.8, 2.5))

    def test_unbounded_objective_raises(self):
        gamma = lmi.MatrixVariable("gamma", (1, 1), "scalar")
        ceiling = lmi.make_constraint(
            "gamma_ceiling", lmi.POSITIVE, (1,),
            {(0, 0): lmi.cexpr([[5.0]]) + lmi.sterm(gamma, [[-1.0]])},
        )
        problem = lmi.LmiProblem((gamma,), (ceiling,), (("gamma", 1.0),))
        with pytest.raises(sdp.SolverFailure, match="unbounded"):
            sdp.minimize(problem)

    def test_feasible_solutions_always_verify(self, example1, filter_quadratic_published):
        # round trip on a small golden set
        problems = [
            lmi.robust_quadratic_synthesis_lmis(example1, 0.75, 2.5),
            lmi.robust_improved_synthesis_lmis(example1, 0.72, 2.7, 1e-3),
            lmi.peak_gain_direct_lmis(
                build_augmented(example1.vertices[0], filter_quadratic_published),
                0.75, 2.5,
            ),
        ]
        for problem in problems:
            sol = sdp.solve(problem)
            assert sol.ok
            assert sdp.verify(problem, sol).satisfied

    def test_symmetric_variables_returned_symmetric(self, example1):
        sol = sdp.solve(lmi.robust_quadratic_synthesis_lmis(example1, 0.75, 2.5))
        R = sol.value("R")
        assert np.max(np.abs(R - R.T)) <= 1e-10


class TestMinimize:
    def test_example1_quadratic_value(self, example1):
        sol = sdp.minimize(lmi.robust_quadratic_synthesis_lmis(example1, None, 2.5))
        assert sol.status == "optimal"
        assert sol.objective_value == pytest.approx(0.7278, rel=3e-2)

    def test_perturbed_reoptimum_stays_feasible(self, example1):
        sol = sdp.minimize(lmi.robust_quadratic_synthesis_lmis(example1, None, 2.5))
        bumped = sdp.solve(
            lmi.robust_quadratic_synthesis_lmis(
                example1, sol.objective_value + 1e-6, 2.5
            )
        )
        assert bumped.status != "infeasible"

    def test_zero_error_map_minimum_is_margin_level(self):
        from test_model import zero_system

        sys = zero_system()
        sys = type(sys)(
            A=-np.eye(2), B1=sys.B1, C1=sys.C1, C2=sys.C2,
            D11=sys.D11, D2=sys.D2, G1=sys.G1, G2=sys.G2,
        )
        sol = sdp.minimize(lmi.improved_synthesis_lmis(sys, None, 1.0, 1e-3))
        assert sol.status == "optimal"
        assert sol.objective_value <= 1e-3

    def test_determinism_across_runs(self, example1):
        vals = [
            sdp.minimize(
                lmi.robust_quadratic_synthesis_lmis(example1, None, 2.5)
            ).objective_value
            for _ in range(2)
        ]
        assert abs(vals[0] - vals[1]) <= 1e-6


class TestVerify:
    def test_trivial_slack(self):
        problem = trivial_lower_bound_problem(3.0)
        report = sdp.verify(problem, {"gamma": np.array([[4.0]])})
        assert report.satisfied
        # slack = value - bound - margin + tol
        assert report.slacks["gamma_floor"] == pytest.approx(1.0, abs=1e-5)

    def test_solve_then_verify_published_filter(
        self, example1, filter_quadratic_published
    ):
        augs = [
            build_augmented(v, filter_quadratic_published)
            for v in example1.vertices
        ]
        problem = lmi.common_q_certification_lmis(augs, 0.73, 2.5)
        sol = sdp.solve(problem)
        assert sol.ok
        assert sdp.verify(problem, sol).satisfied

    def test_corruption_names_failing_constraint(
        self, example1, filter_quadratic_published
    ):
        augs = [
            build_augmented(v, filter_quadratic_published)
            for v in example1.vertices
        ]
        problem = lmi.common_q_certification_lmis(augs, 0.73, 2.5)
        sol = sdp.solve(problem)
        broken = dict(sol.assignment)
        Q = broken["Q"].copy()
        Q[0, 0] = -Q[0, 0]
        broken["Q"] = Q
        report = sdp.verify(problem, broken)
        assert not report.satisfied
        assert report.worst_slack < 0
        assert report.worst_constraint  # a specific grid is named
        assert report.slacks["Q_pos"] < 0

    def test_missing_variable_rejected(self):
        problem = trivial_lower_bound_problem()
        with pytest.raises(KeyError, match="gamma"):
            sdp.verify(problem, {})


class TestScalingRobustness:
    def test_constant_rescaling_preserves_verdicts(
        self, example1, filter_quadratic_published
    ):
        """Scaling every constant block by 10 rescales the feasible set
        (variables follow) without flipping any verdict."""

        def scaled(problem, k):
            constraints = []
            for con in problem.constraints:
                upper = {
                    (i, j): lmi.Expr(k * e.const, e.terms)
                    for i, j, e in con.upper
                }
                constraints.append(
                    lmi.make_constraint(con.name, con.sense, con.dims, upper)
                )
            return lmi.LmiProblem(problem.variables, tuple(constraints))

        aug = build_augmented(example1.vertices[0], filter_quadratic_published)
        golden = [
            (lmi.peak_gain_direct_lmis(aug, 0.75, 2.5), True),
            (lmi.peak_gain_direct_lmis(aug, 0.30, 2.5), False),
            (lmi.robust_quadratic_synthesis_lmis(example1, 0.75, 2.5), True),
            (lmi.robust_quadratic_synthesis_lmis(example1, 0.60, 2.5), False),
        ]
        for problem, feasible in golden:
            sol = sdp.solve(scaled(problem, 10.0))
            assert sol.ok == feasible


class TestMaxSlack:
    def test_sign_tracks_feasibility(self, example1, filter_quadratic_published):
        aug = build_augmented(example1.vertices[0], filter_quadratic_published)
        t_feas, sol = sdp.max_slack(lmi.peak_gain_direct_lmis(aug, 0.75, 2.5))
        assert t_feas > 0
        assert sdp.verify(
            lmi.peak_gain_direct_lmis(aug, 0.75, 2.5), sol
        ).satisfied
        t_infeas, _ = sdp.max_slack(lmi.peak_gain_direct_lmis(aug, 0.30, 2.5))
        assert t_infeas < 0
