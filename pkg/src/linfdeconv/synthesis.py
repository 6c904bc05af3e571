"""Synthesis orchestration: gamma minimization, parameter tuning,
filter extraction, and closed-loop certification.

A synthesis run solves one of the LMI families, recovers the filter
realization from the solved variables, and re-checks the two post-hoc
conditions that the LMIs alone cannot express: the decay rate must lie
inside the admissible interval of the realized closed loop, and the solved
assignment must pass independent verification.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import lmi, sdp
from .model import (
    AugmentedSystem,
    DeconvolutionFilter,
    PolytopicModel,
    StochasticLtiSystem,
    build_augmented,
    lambda_admissible_bound,
    spectral_abscissa,
)

__all__ = [
    "SynthesisResult",
    "CertificationOutcome",
    "ExtractionError",
    "extract_filter_quadratic",
    "extract_filter_improved",
    "synthesize",
    "minimize_gamma",
    "minimize_gamma_bisection",
    "line_search_lambda",
    "tune_parameters",
    "certify_closed_loop",
    "frequency_response",
]

FAMILIES = ("quadratic", "improved", "fault")
CONDITION_LIMIT = 1e12
DEFAULT_EPS = 1e-3
EPS_BOUNDS = (1e-6, 1e-1)


class ExtractionError(RuntimeError):
    """Filter recovery hit a numerically singular transformation."""


@dataclass(frozen=True)
class SynthesisResult:
    """Outcome of one synthesis run.

    certified is set only when the solver assignment passed independent
    verification and the decay rate is inside the admissible interval of
    the realized closed loop; status covers the no-filter outcomes
    (no_admissible_filter, numerical_failure).
    """

    family: str
    status: str
    gamma: float | None
    mu: float | None
    lam: float
    epsilon: float | None
    filter: DeconvolutionFilter | None
    certificates: dict
    certified: bool
    reason: str | None = None
    solver_stats: dict | None = None

    @property
    def ok(self) -> bool:
        return self.status in ("optimal", "feasible")


@dataclass(frozen=True)
class CertificationOutcome:
    """Result of validating a fixed filter against a model."""

    certified: bool
    mode: str
    gamma: float
    lam: float
    epsilon: float | None
    status: str
    reason: str | None
    mu: float | None
    report: sdp.VerificationReport | None


def _guarded_inverse(M: np.ndarray, name: str) -> np.ndarray:
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise ExtractionError(
            f"{name} is numerically singular (condition {cond:.3e} > "
            f"{CONDITION_LIMIT:.0e}); retry with a larger strictness margin"
        )
    return np.linalg.inv(M)


def extract_filter_quadratic(solution) -> DeconvolutionFilter:
    """Recover the filter from a quadratic-family assignment.

    Af = -V^-1 S, Bf = -V^-1 Z, Cf = T, Df direct from the solution.
    """
    assignment = solution.assignment if isinstance(solution, sdp.SdpSolution) else solution
    Vi = _guarded_inverse(assignment["V"], "V")
    return DeconvolutionFilter(
        Af=-Vi @ assignment["S"],
        Bf=-Vi @ assignment["Z"],
        Cf=assignment["T"],
        Df=assignment["Df"],
    )


def extract_filter_improved(solution) -> DeconvolutionFilter:
    """Recover the filter from a slack-decoupled assignment.

    [Af Bf; Cf Df] = blockdiag(T^-1, I) [Afbar Bfbar; Cfbar Dfbar].
    """
    assignment = solution.assignment if isinstance(solution, sdp.SdpSolution) else solution
    Ti = _guarded_inverse(assignment["Tbar"], "Tbar")
    return DeconvolutionFilter(
        Af=Ti @ assignment["Afbar"],
        Bf=Ti @ assignment["Bfbar"],
        Cf=assignment["Cfbar"],
        Df=assignment["Dfbar"],
    )


def _scale_margins(problem: lmi.LmiProblem, factor: float) -> lmi.LmiProblem:
    constraints = tuple(
        replace(c, margin=c.margin * factor) for c in problem.constraints
    )
    return lmi.LmiProblem(problem.variables, constraints, problem.objective)


def _as_model(model) -> PolytopicModel:
    if isinstance(model, PolytopicModel):
        return model
    if isinstance(model, StochasticLtiSystem):
        return PolytopicModel((model,))
    raise TypeError(f"expected a system or polytopic model, got {type(model)!r}")


def _build_problem(family, model, gamma, lam, eps, mu, h1):
    if family == "quadratic":
        return lmi.robust_quadratic_synthesis_lmis(_as_model(model), gamma, lam, mu=mu)
    if family == "improved":
        return lmi.robust_improved_synthesis_lmis(
            _as_model(model), gamma, lam, eps if eps is not None else DEFAULT_EPS, mu=mu
        )
    if family == "fault":
        from .fault import FaultModel, fault_problem

        if not isinstance(model, FaultModel):
            raise TypeError("fault synthesis needs a FaultModel")
        return fault_problem(
            model, gamma, lam, eps if eps is not None else DEFAULT_EPS,
            h1=h1, mu=mu,
        )
    raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")


def _closed_loops(family, model, filt, h1) -> list[AugmentedSystem]:
    if family == "fault":
        from .fault import build_fault_augmented

        return [build_fault_augmented(model, filt, h1=h1)]
    return [build_augmented(v, filt) for v in _as_model(model).vertices]


def _lambda_posthoc(lam: float, loops: list[AugmentedSystem]) -> tuple[bool, float]:
    bound = -2.0 * max(spectral_abscissa(a.A) for a in loops)
    return lam < bound, bound


def synthesize(
    family: str,
    model,
    gamma: float | None,
    lam: float,
    eps: float | None = None,
    mu: float | None = None,
    h1=None,
) -> SynthesisResult:
    """Run one synthesis solve and return the certified outcome.

    gamma=None minimizes the certified level; a float requests feasibility
    at that level.  mu pins the split level (useful for reproducing
    published certificate points; mu is non-unique at interior gamma).
    """
    eps_used = None if family == "quadratic" else (eps if eps is not None else DEFAULT_EPS)
    problem = _build_problem(family, model, gamma, lam, eps_used, mu, h1)
    solution = sdp.solve(problem)
    if solution.status == "infeasible":
        return SynthesisResult(
            family, "no_admissible_filter", gamma, None, lam, eps_used,
            None, {}, False, reason="synthesis LMIs are infeasible",
            solver_stats=solution.solver_stats,
        )
    if not solution.ok:
        return SynthesisResult(
            family, "numerical_failure", gamma, None, lam, eps_used,
            None, {}, False, reason="solver did not produce a verified point",
            solver_stats=solution.solver_stats,
        )

    try:
        filt = _extract(family, solution)
    except ExtractionError:
        # one margin-bump retry pushes the solution off the singular face
        solution = sdp.solve(_scale_margins(problem, 10.0))
        if not solution.ok:
            return SynthesisResult(
                family, "numerical_failure", gamma, None, lam, eps_used,
                None, {}, False,
                reason="extraction ill-conditioned and margin retry failed",
                solver_stats=solution.solver_stats,
            )
        filt = _extract(family, solution)

    achieved = solution.objective_value if gamma is None else float(gamma)
    mu_val = mu if mu is not None else solution.scalar("mu")
    loops = _closed_loops(family, model, filt, h1)
    lam_ok, bound = _lambda_posthoc(lam, loops)
    certified = bool(lam_ok)
    reason = None
    if not lam_ok:
        reason = (
            f"decay rate {lam} is outside the realized closed-loop "
            f"admissible interval (0, {bound:.6g})"
        )
    return SynthesisResult(
        family=family,
        status=solution.status if gamma is None else "feasible",
        gamma=float(achieved),
        mu=float(mu_val),
        lam=float(lam),
        epsilon=eps_used,
        filter=filt,
        certificates=dict(solution.assignment),
        certified=certified,
        reason=reason,
        solver_stats=solution.solver_stats,
    )


def _extract(family: str, solution) -> DeconvolutionFilter:
    if family == "quadratic":
        return extract_filter_quadratic(solution)
    return extract_filter_improved(solution)


def minimize_gamma(
    family: str, model, lam: float, eps: float | None = None, h1=None
) -> SynthesisResult:
    """Minimize the certified peak-to-peak level at fixed parameters."""
    return synthesize(family, model, None, lam, eps=eps, h1=h1)


def minimize_gamma_bisection(
    family: str,
    model,
    lam: float,
    eps: float | None = None,
    lo: float = 1e-4,
    hi: float = 1e3,
    rel_tol: float = 1e-3,
    h1=None,
) -> SynthesisResult:
    """Bisection on feasibility; cross-check for the direct minimization."""
    best = None
    if not synthesize(family, model, hi, lam, eps=eps, h1=h1).ok:
        return SynthesisResult(
            family, "no_admissible_filter", None, None, lam, eps, None, {},
            False, reason=f"infeasible even at gamma={hi}",
        )
    while hi - lo > rel_tol * hi:
        mid = math.sqrt(lo * hi)
        res = synthesize(family, model, mid, lam, eps=eps, h1=h1)
        if res.ok:
            best, hi = res, mid
        else:
            lo = mid
    return best if best is not None else synthesize(family, model, hi, lam, eps=eps, h1=h1)


def _drift_matrices(family, model) -> list[np.ndarray]:
    if family == "fault":
        return [model.base.A]
    return [v.A for v in _as_model(model).vertices]


def _result_key(res: SynthesisResult) -> tuple:
    return (res.gamma, res.lam, res.epsilon if res.epsilon is not None else 0.0)


def line_search_lambda(
    family: str,
    model,
    eps: float | None = None,
    h1=None,
    coarse: int = 20,
    refine: int = 10,
    span: tuple[float, float] = (0.01, 0.98),
) -> SynthesisResult:
    """Two-stage search for the decay rate: a log-spaced coarse grid
    strictly inside the admissible interval, then a linear refinement
    around the best point.  Ties break lexicographically on
    (gamma, lambda, epsilon)."""
    bound = lambda_admissible_bound(_drift_matrices(family, model))
    lo, hi = span[0] * bound, span[1] * bound
    grid = np.geomspace(lo, hi, coarse)

    def run(lams):
        results = []
        for lam in lams:
            res = minimize_gamma(family, model, float(lam), eps=eps, h1=h1)
            if res.ok and res.certified:
                results.append(res)
        return results

    stage1 = run(grid)
    if not stage1:
        return SynthesisResult(
            family, "no_admissible_filter", None, None, float(grid[0]), eps,
            None, {}, False,
            reason="no feasible decay rate on the coarse grid",
        )
    best = min(stage1, key=_result_key)
    idx = int(np.argmin(np.abs(grid - best.lam)))
    left = grid[max(idx - 1, 0)]
    right = grid[min(idx + 1, coarse - 1)]
    fine = np.linspace(max(left, lo), min(right, hi), refine)
    stage2 = run(fine)
    return min(stage1 + stage2, key=_result_key)


def tune_parameters(
    family: str,
    model,
    eps_bounds: tuple[float, float] = EPS_BOUNDS,
    h1=None,
    max_iter: int = 40,
) -> tuple[float, float | None, SynthesisResult]:
    """Bounded derivative-free tuning of (lambda, epsilon).

    Seeds a simplex search at the line-search optimum, scoring a parameter
    pair by its minimized gamma (infeasible points score infinity).  The
    result is never worse than the line-search start.  For the quadratic
    family the search degenerates to the decay rate alone.
    """
    from scipy import optimize

    start_eps = None if family == "quadratic" else DEFAULT_EPS
    start = line_search_lambda(family, model, eps=start_eps, h1=h1)
    if not start.ok:
        return start.lam, start.epsilon, start
    bound = lambda_admissible_bound(_drift_matrices(family, model))
    lam_lo, lam_hi = 1e-3 * bound, 0.999 * bound
    cache: dict[tuple, SynthesisResult] = {}

    def score(x) -> float:
        lam = float(np.clip(x[0], lam_lo, lam_hi))
        eps = None
        if family != "quadratic":
            eps = float(np.clip(x[1], *eps_bounds))
        key = (round(lam, 12), None if eps is None else round(eps, 14))
        if key not in cache:
            cache[key] = minimize_gamma(family, model, lam, eps=eps, h1=h1)
        res = cache[key]
        return res.gamma if (res.ok and res.certified) else float("inf")

    if family == "quadratic":
        x0 = [start.lam]
        bounds = [(lam_lo, lam_hi)]
    else:
        x0 = [start.lam, start.epsilon]
        bounds = [(lam_lo, lam_hi), eps_bounds]
    optimize.minimize(
        score, np.asarray(x0, dtype=float), method="Nelder-Mead",
        bounds=bounds, options={"maxfev": max_iter, "xatol": 1e-3, "fatol": 1e-7},
    )
    feasible = [r for r in cache.values() if r.ok and r.certified]
    best = min(feasible + [start], key=_result_key)
    return best.lam, best.epsilon, best


def certify_closed_loop(
    model,
    filt: DeconvolutionFilter,
    gamma: float | None,
    lam: float,
    mode: str = "quadratic",
    eps: float = DEFAULT_EPS,
    mu: float | None = None,
) -> CertificationOutcome:
    """Validate a fixed filter at a given level over the whole polytope.

    quadratic mode searches one (Q, mu) certifying every vertex loop with
    the direct grids; improved mode searches vertex-wise Lyapunov data in
    the slack-decoupled grids with the filter realization frozen.  Both
    start with the post-hoc decay-rate range check on the realized loops.
    gamma=None estimates the loop: it minimizes the certified level.
    """
    model = _as_model(model)
    loops = [build_augmented(v, filt) for v in model.vertices]
    lam_ok, bound = _lambda_posthoc(lam, loops)
    if not lam_ok:
        return CertificationOutcome(
            certified=False, mode=mode, gamma=gamma, lam=lam,
            epsilon=eps if mode == "improved" else None,
            status="uncertified",
            reason=(
                f"decay rate {lam} is outside the realized closed-loop "
                f"admissible interval (0, {bound:.6g})"
            ),
            mu=None, report=None,
        )
    if mode == "quadratic":
        problem = lmi.common_q_certification_lmis(loops, gamma, lam, mu=mu)
        epsilon = None
    elif mode == "improved":
        problem = lmi.robust_improved_certification_lmis(
            model, filt, gamma, lam, eps, mu=mu
        )
        epsilon = eps
    else:
        raise ValueError(f"unknown certification mode {mode!r}")
    solution = sdp.solve(problem)
    if not solution.ok:
        return CertificationOutcome(
            certified=False, mode=mode, gamma=gamma, lam=lam, epsilon=epsilon,
            status=solution.status,
            reason="certification LMIs did not verify at this level",
            mu=None, report=None,
        )
    report = sdp.verify(problem, solution)
    achieved = solution.objective_value if gamma is None else float(gamma)
    mu_val = mu if mu is not None else solution.scalar("mu")
    return CertificationOutcome(
        certified=True, mode=mode, gamma=float(achieved), lam=lam,
        epsilon=epsilon, status=solution.status, reason=None,
        mu=float(mu_val), report=report,
    )


def frequency_response(
    Af: np.ndarray, Bf: np.ndarray, Cf: np.ndarray, Df: np.ndarray, omegas,
) -> np.ndarray:
    """Transfer matrix Cf (jwI - Af)^-1 Bf + Df sampled at given omegas."""
    Af, Bf = np.atleast_2d(Af), np.atleast_2d(Bf)
    Cf, Df = np.atleast_2d(Cf), np.atleast_2d(Df)
    n = Af.shape[0]
    out = np.empty((len(omegas), Cf.shape[0], Bf.shape[1]), dtype=complex)
    for k, w in enumerate(omegas):
        out[k] = Cf @ np.linalg.solve(1j * w * np.eye(n) - Af, Bf) + Df
    return out
