"""Semidefinite backend: solve LMI problems and verify solutions.

The solver side goes through cvxpy with the CLARABEL interior-point conic
solver (deterministic, primal-dual, certificate-based infeasibility
detection).  Verification instantiates the same constraint tables
numerically and runs a dense symmetric eigensolver, sharing no code with
the solver's own residual bookkeeping.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .lmi import (
    NEGATIVE,
    POSITIVE,
    LmiConstraint,
    LmiProblem,
    MatrixVariable,
    eval_expr,
    instantiate,
)

__all__ = [
    "SdpSolution",
    "VerificationReport",
    "SolverFailure",
    "solve",
    "minimize",
    "max_slack",
    "verify",
]

SOLVER = "CLARABEL"
FALLBACK_SOLVER = "SCS"
VERIFY_TOL = 1e-6


class SolverFailure(RuntimeError):
    """The backend broke down; distinct from a proven-infeasible problem."""


@dataclass(frozen=True)
class SdpSolution:
    """Solved assignment with backend status.

    status is one of optimal / feasible / infeasible / numerical_failure;
    an assignment is attached only for the first two, and only after it
    passed independent verification.
    """

    status: str
    assignment: dict
    objective_value: float | None
    solver_stats: dict

    def value(self, name: str) -> np.ndarray:
        return self.assignment[name]

    def scalar(self, name: str) -> float:
        return float(np.asarray(self.assignment[name]).reshape(()))

    @property
    def ok(self) -> bool:
        return self.status in ("optimal", "feasible")


@dataclass(frozen=True)
class VerificationReport:
    """Per-constraint slack from a dense eigensolver.

    slacks maps constraint name to the sign-adjusted margin surplus
    (min eig - margin for positive grids, -max eig - margin for negative
    ones) plus the verification tolerance; satisfied iff every entry >= 0.
    """

    slacks: dict
    satisfied: bool
    worst_slack: float
    worst_constraint: str
    tolerance: float


def _cvxpy_env(problem: LmiProblem):
    import cvxpy as cp

    env = {}
    for v in problem.variables:
        if v.structure == "scalar":
            env[v.name] = cp.Variable(name=v.name)
        elif v.structure == "symmetric":
            env[v.name] = cp.Variable(v.shape, name=v.name, symmetric=True)
        else:
            env[v.name] = cp.Variable(v.shape, name=v.name)
    return env


def _cvxpy_constraint(con: LmiConstraint, env, slack=None):
    """Translate one grid into a cvxpy cone membership.

    1x1 grids become scalar inequalities; larger grids are assembled from
    the upper triangle with mirrored transposes.
    """
    import cvxpy as cp

    bound = con.margin if slack is None else slack
    k = len(con.dims)
    if con.size == 1:
        e = eval_expr(con.block(0, 0), env)
        e = cp.reshape(e, (), order="F") if e.ndim > 0 else e
        return e >= bound if con.sense == POSITIVE else e <= -bound
    rows = []
    for i in range(k):
        row = []
        for j in range(k):
            if i <= j:
                row.append(eval_expr(con.block(i, j), env))
            else:
                row.append(rows[j][i].T)
        rows.append(row)
    grid = cp.bmat(rows)
    eye = np.eye(con.size)
    if con.sense == POSITIVE:
        return grid - bound * eye >> 0
    return grid + bound * eye << 0


def _extract_assignment(problem: LmiProblem, env) -> dict:
    assignment = {}
    for v in problem.variables:
        val = env[v.name].value
        if val is None:
            raise SolverFailure(f"no value returned for {v.name}")
        M = np.atleast_2d(np.asarray(val, dtype=float))
        if v.structure == "symmetric":
            M = 0.5 * (M + M.T)
        assignment[v.name] = M.reshape(v.shape)
    return assignment


def _solver_stats(cp_problem) -> dict:
    st = cp_problem.solver_stats
    return {
        "solver": getattr(st, "solver_name", SOLVER),
        "iterations": getattr(st, "num_iters", None),
        "duality_gap": (getattr(st, "extra_stats", None) or {}).get("gap")
        if isinstance(getattr(st, "extra_stats", None), dict)
        else None,
        "solve_time": getattr(st, "solve_time", None),
    }


def _run(problem: LmiProblem, objective_terms, verbose: bool | None = None,
         solver: str = SOLVER):
    import cvxpy as cp

    if verbose is None:
        verbose = bool(os.environ.get("LINFDECONV_SOLVER_VERBOSE"))
    env = _cvxpy_env(problem)
    constraints = [_cvxpy_constraint(c, env) for c in problem.constraints]
    if objective_terms:
        obj = cp.Minimize(sum(w * env[nm] for nm, w in objective_terms))
    else:
        obj = cp.Minimize(0)
    cp_problem = cp.Problem(obj, constraints)
    try:
        with warnings.catch_warnings():
            # inaccurate-solution warnings are redundant: every accepted
            # assignment passes the independent eigenvalue check
            warnings.filterwarnings("ignore", message="Solution may be inaccurate")
            cp_problem.solve(solver=solver, verbose=verbose)
    except cp.error.SolverError:
        # backend breakdown: surfaced as a status, never as instability
        return None, env
    return cp_problem, env


def _settle(problem: LmiProblem, cp_problem, env) -> SdpSolution:
    """Map a cvxpy outcome to the verified status contract."""
    import cvxpy as cp

    if cp_problem is None:
        return SdpSolution("numerical_failure", {}, None, {"solver": SOLVER})
    status = cp_problem.status
    stats = _solver_stats(cp_problem)
    if status == cp.INFEASIBLE:
        return SdpSolution("infeasible", {}, None, stats)
    if status == cp.UNBOUNDED:
        raise SolverFailure("objective is unbounded below")
    if status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        return SdpSolution("numerical_failure", {}, None, stats)
    try:
        assignment = _extract_assignment(problem, env)
    except SolverFailure:
        return SdpSolution("numerical_failure", {}, None, stats)
    report = verify(problem, assignment, tol=VERIFY_TOL)
    if not report.satisfied:
        return SdpSolution("numerical_failure", {}, None, stats)
    objective_value = None
    if problem.objective:
        objective_value = float(
            sum(w * float(np.asarray(env[nm].value)) for nm, w in problem.objective)
        )
        return SdpSolution("optimal", assignment, objective_value, stats)
    return SdpSolution("feasible", assignment, None, stats)


def solve(problem: LmiProblem, verbose: bool | None = None) -> SdpSolution:
    """Solve for feasibility (or the declared objective) and verify.

    A feasible/optimal status is only reported after the assignment passes
    the independent eigenvalue check; otherwise the result degrades to
    numerical_failure.  Infeasibility is reported only with a dual
    certificate or, as a last resort, with gap-based evidence from the
    maximum-slack program (its optimum bounds the achievable strictness
    margin, so a clearly negative value proves infeasibility).  When the
    interior-point backend cannot make progress, one deterministic retry
    runs on the first-order fallback solver under the same verification
    gate.
    """
    cp_problem, env = _run(problem, problem.objective, verbose)
    result = _settle(problem, cp_problem, env)
    if result.status != "numerical_failure":
        return result
    cp_problem, env = _run(
        problem, problem.objective, verbose, solver=FALLBACK_SOLVER
    )
    fallback = _settle(problem, cp_problem, env)
    if fallback.status != "numerical_failure":
        return fallback
    return _slack_resolution(problem, result, verbose)


def _slack_resolution(
    problem: LmiProblem, result: SdpSolution, verbose: bool | None
) -> SdpSolution:
    """Classify a stuck solve through the maximum-slack program."""
    try:
        t_star, slack_sol = max_slack(problem, verbose=verbose)
    except SolverFailure:
        return result
    margin_ref = max(c.margin for c in problem.constraints)
    stats = dict(slack_sol.solver_stats, slack_bound=t_star)
    if t_star <= -10.0 * margin_ref:
        return SdpSolution("infeasible", {}, None, stats)
    if t_star > 0 and not problem.objective:
        report = verify(problem, slack_sol.assignment, tol=VERIFY_TOL)
        if report.satisfied:
            return SdpSolution("feasible", slack_sol.assignment, None, stats)
    return result


def minimize(problem: LmiProblem, verbose: bool | None = None) -> SdpSolution:
    """Solve a problem that carries a linear objective."""
    if not problem.objective:
        raise ValueError("problem has no objective; use solve()")
    return solve(problem, verbose=verbose)


def max_slack(problem: LmiProblem, verbose: bool | None = None):
    """Best joint strictness margin: maximize t with every grid at least t
    inside its cone.  t > 0 means strictly feasible; t < 0 measures how far
    from feasible the problem is.  Returns (t, solution with assignment).
    """
    import cvxpy as cp

    if verbose is None:
        verbose = bool(os.environ.get("LINFDECONV_SOLVER_VERBOSE"))

    def attempt(solver):
        env = _cvxpy_env(problem)
        t = cp.Variable(name="slack")
        constraints = [
            _cvxpy_constraint(c, env, slack=t) for c in problem.constraints
        ]
        cp_problem = cp.Problem(cp.Maximize(t), constraints)
        try:
            with warnings.catch_warnings():
                warnings.filterwarnings(
                    "ignore", message="Solution may be inaccurate"
                )
                cp_problem.solve(solver=solver, verbose=verbose)
        except cp.error.SolverError:
            return None
        if cp_problem.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
            return None
        return float(t.value), env, cp_problem

    out = attempt(SOLVER) or attempt(FALLBACK_SOLVER)
    if out is None:
        raise SolverFailure("slack maximization failed on both backends")
    t_star, env, cp_problem = out
    assignment = _extract_assignment(problem, env)
    stats = _solver_stats(cp_problem)
    return t_star, SdpSolution("optimal", assignment, t_star, stats)


def verify(
    problem: LmiProblem,
    assignment_or_solution,
    tol: float = VERIFY_TOL,
) -> VerificationReport:
    """Independent check of an assignment by dense symmetric eigenvalues.

    Each constraint grid is instantiated numerically and its extreme
    eigenvalue compared against the margin; the slack includes tol so a
    solution within solver accuracy of the margin still verifies.
    """
    if isinstance(assignment_or_solution, SdpSolution):
        assignment: Mapping[str, np.ndarray] = assignment_or_solution.assignment
    else:
        assignment = assignment_or_solution
    for v in problem.variables:
        if v.name not in assignment:
            raise KeyError(f"assignment is missing variable {v.name}")
    slacks = {}
    for con in problem.constraints:
        grid = instantiate(con, assignment)
        eigs = np.linalg.eigvalsh(grid)
        if con.sense == POSITIVE:
            slack = float(eigs[0]) - con.margin + tol
        elif con.sense == NEGATIVE:
            slack = -float(eigs[-1]) - con.margin + tol
        else:
            raise ValueError(f"unknown sense {con.sense}")
        slacks[con.name] = slack
    worst_name = min(slacks, key=slacks.get)
    worst = slacks[worst_name]
    return VerificationReport(
        slacks=slacks,
        satisfied=worst >= 0.0,
        worst_slack=worst,
        worst_constraint=worst_name,
        tolerance=tol,
    )
