"""Assembly of the peak-to-peak filtering matrix inequalities.

Every inequality used by the toolkit is represented as a symmetric grid of
affine matrix expressions over named decision variables.  Each family has a
single authoritative block table here; the SDP backend and the independent
numeric verifier both consume the same table, so there is exactly one place
a block can be wrong.

Senses are strict on paper; numerically every `> 0` / `< 0` is implemented
as `>= margin*I` / `<= -margin*I` with a margin scaled to the constant data
of the grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .model import (
    AugmentedSystem,
    DeconvolutionFilter,
    PolytopicModel,
    StochasticLtiSystem,
)

__all__ = [
    "MatrixVariable",
    "Expr",
    "LmiConstraint",
    "LmiProblem",
    "cexpr",
    "vexpr",
    "zexpr",
    "sterm",
    "eval_expr",
    "instantiate",
    "default_margin",
    "make_constraint",
    "esms_lmis",
    "peak_gain_direct_lmis",
    "peak_gain_decoupled_lmis",
    "quadratic_synthesis_lmis",
    "common_q_certification_lmis",
    "robust_quadratic_synthesis_lmis",
    "improved_synthesis_lmis",
    "robust_improved_synthesis_lmis",
    "robust_improved_certification_lmis",
    "improved_vertex_decay_constraint",
    "fault_synthesis_lmis",
    "serialize_problem",
    "to_sdpa",
]

MARGIN_SCALE = 1e-7

POSITIVE = "positive_definite"
NEGATIVE = "negative_definite"


# ---------------------------------------------------------------------------
# affine matrix expressions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MatrixVariable:
    """A named decision variable: full, symmetric, or scalar."""

    name: str
    shape: tuple[int, int]
    structure: str = "full"

    def __post_init__(self):
        if self.structure not in ("full", "symmetric", "scalar"):
            raise ValueError(f"unknown structure {self.structure!r}")
        r, c = self.shape
        if self.structure == "symmetric" and r != c:
            raise ValueError(f"symmetric variable {self.name} must be square")
        if self.structure == "scalar" and self.shape != (1, 1):
            raise ValueError(f"scalar variable {self.name} must be 1x1")


@dataclass(frozen=True)
class _MatTerm:
    """Contribution left @ X @ right (or left @ X.T @ right)."""

    var: str
    left: np.ndarray
    right: np.ndarray
    transpose: bool = False


@dataclass(frozen=True)
class _ScalTerm:
    """Contribution coeff * x for a scalar variable x."""

    var: str
    coeff: np.ndarray


@dataclass(frozen=True)
class Expr:
    """Affine matrix expression: constant + sum of variable terms."""

    const: np.ndarray
    terms: tuple = ()

    # defer ndarray @ Expr / ndarray * Expr to the reflected operators here
    __array_ufunc__ = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.const.shape

    def __add__(self, other: "Expr") -> "Expr":
        if self.shape != other.shape:
            raise ValueError(f"shape mismatch {self.shape} + {other.shape}")
        return Expr(self.const + other.const, self.terms + other.terms)

    def __sub__(self, other: "Expr") -> "Expr":
        return self + (-other)

    def __neg__(self) -> "Expr":
        return -1.0 * self

    def __mul__(self, s: float) -> "Expr":
        return self.__rmul__(s)

    def __rmul__(self, s: float) -> "Expr":
        s = float(s)
        terms = tuple(
            _MatTerm(t.var, s * t.left, t.right, t.transpose)
            if isinstance(t, _MatTerm)
            else _ScalTerm(t.var, s * t.coeff)
            for t in self.terms
        )
        return Expr(s * self.const, terms)

    def __matmul__(self, M) -> "Expr":
        M = np.atleast_2d(np.asarray(M, dtype=float))
        terms = tuple(
            _MatTerm(t.var, t.left, t.right @ M, t.transpose)
            if isinstance(t, _MatTerm)
            else _ScalTerm(t.var, t.coeff @ M)
            for t in self.terms
        )
        return Expr(self.const @ M, terms)

    def __rmatmul__(self, M) -> "Expr":
        M = np.atleast_2d(np.asarray(M, dtype=float))
        terms = tuple(
            _MatTerm(t.var, M @ t.left, t.right, t.transpose)
            if isinstance(t, _MatTerm)
            else _ScalTerm(t.var, M @ t.coeff)
            for t in self.terms
        )
        return Expr(M @ self.const, terms)

    @property
    def T(self) -> "Expr":
        terms = tuple(
            _MatTerm(t.var, t.right.T, t.left.T, not t.transpose)
            if isinstance(t, _MatTerm)
            else _ScalTerm(t.var, t.coeff.T)
            for t in self.terms
        )
        return Expr(self.const.T.copy(), terms)


def cexpr(M) -> Expr:
    """Constant matrix as an expression."""
    return Expr(np.atleast_2d(np.asarray(M, dtype=float)))


def zexpr(rows: int, cols: int) -> Expr:
    return Expr(np.zeros((rows, cols)))


def vexpr(v: MatrixVariable) -> Expr:
    """The variable itself as an expression."""
    r, c = v.shape
    return Expr(np.zeros((r, c)), (_MatTerm(v.name, np.eye(r), np.eye(c)),))


def sterm(s, M) -> Expr:
    """M * s where s is a fixed float or a scalar MatrixVariable."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if isinstance(s, MatrixVariable):
        if s.structure != "scalar":
            raise ValueError(f"{s.name} is not scalar")
        return Expr(np.zeros_like(M), (_ScalTerm(s.name, M.copy()),))
    return Expr(float(s) * M)


def eval_expr(expr: Expr, env: Mapping[str, object]):
    """Evaluate with numeric matrices, or build the cvxpy expression.

    env maps variable names to numpy arrays (numeric instantiation) or to
    cvxpy variables (problem construction); both support @, * and +.
    """
    acc = expr.const
    for t in expr.terms:
        X = env[t.var]
        if isinstance(t, _MatTerm):
            V = X.T if t.transpose else X
            acc = acc + t.left @ V @ t.right
        else:
            x = X if np.isscalar(X) or getattr(X, "ndim", 0) == 0 else X[0, 0]
            acc = acc + t.coeff * x
    return acc


# ---------------------------------------------------------------------------
# constraints and problems
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LmiConstraint:
    """One symmetric block inequality: grid >= margin*I or <= -margin*I.

    Only the upper triangle is stored; the lower triangle is the transpose
    by construction, so assembled grids are symmetric for any assignment.
    """

    name: str
    sense: str
    dims: tuple[int, ...]
    upper: tuple[tuple[int, int, Expr], ...]
    margin: float

    @property
    def size(self) -> int:
        return sum(self.dims)

    def block(self, i: int, j: int) -> Expr:
        """Block (i, j) of the full grid (transposing across the diagonal)."""
        if i > j:
            return self.block(j, i).T
        for bi, bj, e in self.upper:
            if (bi, bj) == (i, j):
                return e
        return zexpr(self.dims[i], self.dims[j])


def default_margin(constraint_consts: Sequence[np.ndarray]) -> float:
    """Strictness margin scaled to the constant data of a grid."""
    peak = max((float(np.max(np.abs(c))) for c in constraint_consts), default=0.0)
    return MARGIN_SCALE * (1.0 + peak)


def make_constraint(
    name: str,
    sense: str,
    dims: Sequence[int],
    upper: Mapping[tuple[int, int], Expr],
    margin: float | None = None,
) -> LmiConstraint:
    dims = tuple(int(d) for d in dims)
    blocks = []
    for (i, j), e in upper.items():
        if i > j:
            raise ValueError(f"{name}: block ({i},{j}) is below the diagonal")
        want = (dims[i], dims[j])
        if e.shape != want:
            raise ValueError(
                f"{name}: block ({i},{j}) has shape {e.shape}, expected {want}"
            )
        blocks.append((i, j, e))
    blocks.sort(key=lambda t: (t[0], t[1]))
    if margin is None:
        margin = default_margin([e.const for _, _, e in blocks])
    return LmiConstraint(
        name=name, sense=sense, dims=dims, upper=tuple(blocks), margin=float(margin)
    )


@dataclass(frozen=True)
class LmiProblem:
    """A feasibility or linear-objective problem over LMI constraints."""

    variables: tuple[MatrixVariable, ...]
    constraints: tuple[LmiConstraint, ...]
    objective: tuple[tuple[str, float], ...] | None = None

    def __post_init__(self):
        declared = {v.name for v in self.variables}
        if len(declared) != len(self.variables):
            raise ValueError("duplicate variable names")
        for c in self.constraints:
            for _, _, e in c.upper:
                for t in e.terms:
                    if t.var not in declared:
                        raise ValueError(
                            f"constraint {c.name} references undeclared {t.var}"
                        )
        if self.objective:
            for nm, _ in self.objective:
                if nm not in declared:
                    raise ValueError(f"objective references undeclared {nm}")

    def variable(self, name: str) -> MatrixVariable:
        for v in self.variables:
            if v.name == name:
                return v
        raise KeyError(name)


def instantiate(constraint: LmiConstraint, env: Mapping[str, np.ndarray]) -> np.ndarray:
    """Numeric grid for an assignment, exactly symmetric by construction.

    Off-diagonal blocks are mirrored with an exact transpose and diagonal
    blocks are symmetrized, so ``grid == grid.T`` holds bitwise.
    """
    k = len(constraint.dims)
    offs = np.concatenate([[0], np.cumsum(constraint.dims)]).astype(int)
    size = int(offs[-1])
    grid = np.zeros((size, size))
    for i in range(k):
        for j in range(i, k):
            B = np.asarray(eval_expr(constraint.block(i, j), env), dtype=float)
            if i == j:
                B = 0.5 * (B + B.T)
                grid[offs[i]:offs[i + 1], offs[j]:offs[j + 1]] = B
            else:
                grid[offs[i]:offs[i + 1], offs[j]:offs[j + 1]] = B
                grid[offs[j]:offs[j + 1], offs[i]:offs[i + 1]] = B.T
    return grid


def _scalar_positive(name: str, expr: Expr, margin: float | None = None) -> LmiConstraint:
    return make_constraint(name, POSITIVE, (1,), {(0, 0): expr}, margin=margin)


def _gamma_atom(gamma):
    """Fixed float, or a fresh scalar variable with a minimize objective."""
    if gamma is None:
        gv = MatrixVariable("gamma", (1, 1), "scalar")
        return gv, [gv], [("gamma", 1.0)]
    gamma = float(gamma)
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    return gamma, [], None


def _mu_atom(mu, gamma):
    """Split level mu: a fresh scalar variable, or a fixed positive float.

    Pinning mu reproduces published certificate points; it is non-unique
    whenever gamma sits strictly inside the feasible range.
    """
    if mu is None:
        mv = MatrixVariable("mu", (1, 1), "scalar")
        return mv, [mv]
    mu = float(mu)
    if mu <= 0:
        raise ValueError(f"mu must be positive, got {mu}")
    if not isinstance(gamma, MatrixVariable) and mu >= gamma:
        raise ValueError(f"mu={mu} must be below gamma={gamma}")
    return mu, []


def _scalar_order_constraints(gamma, mu) -> list[LmiConstraint]:
    """0 < mu < gamma, skipping constraints that involve no variable."""
    cons = []
    gamma_var = isinstance(gamma, MatrixVariable)
    mu_var = isinstance(mu, MatrixVariable)
    if mu_var:
        cons.append(_scalar_positive("mu_pos", sterm(mu, [[1.0]])))
    if mu_var or gamma_var:
        gap = sterm(gamma, [[1.0]]) + sterm(mu, [[-1.0]])
        cons.append(_scalar_positive("gamma_minus_mu_pos", gap))
    if gamma_var:
        cons.append(_scalar_positive("gamma_pos", sterm(gamma, [[1.0]])))
    return cons


def _check_rates(lam: float, eps: float | None = None):
    if lam <= 0:
        raise ValueError(f"decay rate lambda must be positive, got {lam}")
    if eps is not None and eps <= 0:
        raise ValueError(f"slack coupling epsilon must be positive, got {eps}")


# ---------------------------------------------------------------------------
# stability certificate
# ---------------------------------------------------------------------------

def esms_lmis(A, G1, margin: float = 1e-7) -> LmiProblem:
    """Mean-square stability: Q > 0 with A^T Q + Q A + G1^T Q G1 < 0."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    G1 = np.atleast_2d(np.asarray(G1, dtype=float))
    n = A.shape[0]
    if A.shape != (n, n) or G1.shape != (n, n):
        raise ValueError(f"A and G1 must both be {n} x {n}")
    Q = MatrixVariable("Q", (n, n), "symmetric")
    Qe = vexpr(Q)
    lyap = A.T @ Qe + Qe @ A + G1.T @ Qe @ G1
    return LmiProblem(
        variables=(Q,),
        constraints=(
            make_constraint("Q_pos", POSITIVE, (n,), {(0, 0): Qe}, margin=margin),
            make_constraint("lyapunov_neg", NEGATIVE, (n,), {(0, 0): lyap}, margin=margin),
        ),
    )


# ---------------------------------------------------------------------------
# closed-loop gain analysis
# ---------------------------------------------------------------------------

def _gain_upper(C: Expr, D: Expr, Q: Expr, gamma, mu, lam: float, q: int, m: int) -> dict:
    # [ lam Q        0          C^T   ]
    # [   *     (g - mu) I_q    D^T   ]
    # [   *          *         g I_m  ]   > 0
    return {
        (0, 0): lam * Q,
        (0, 2): C.T,
        (1, 1): sterm(gamma, np.eye(q)) + sterm(mu, -np.eye(q)),
        (1, 2): D.T,
        (2, 2): sterm(gamma, np.eye(m)),
    }


def _direct_constraints(
    aug: AugmentedSystem, gsym, mu, Qe: Expr, lam: float, suffix: str
) -> list[LmiConstraint]:
    N, q, m = aug.n_states, aug.n_inputs, aug.n_outputs
    # [ A^T Q + Q A + lam Q    Q B      G1^T Q ]
    # [          *           -mu I_q    G2^T Q ]
    # [          *               *        -Q   ]   < 0
    decay = make_constraint(
        "decay_neg" + suffix, NEGATIVE, (N, q, N),
        {
            (0, 0): aug.A.T @ Qe + Qe @ aug.A + lam * Qe,
            (0, 1): Qe @ aug.B,
            (0, 2): aug.G1.T @ Qe,
            (1, 1): sterm(mu, -np.eye(q)),
            (1, 2): aug.G2.T @ Qe,
            (2, 2): -1.0 * Qe,
        },
    )
    gain = make_constraint(
        "gain_pos" + suffix, POSITIVE, (N, q, m),
        _gain_upper(cexpr(aug.C), cexpr(aug.D), Qe, gsym, mu, lam, q, m),
    )
    return [decay, gain]


def peak_gain_direct_lmis(
    aug: AugmentedSystem, gamma, lam: float, mu=None
) -> LmiProblem:
    """Peak-to-peak gain certificate with direct Lyapunov products.

    Decision variables: Q > 0 on the stacked state and the split level mu,
    0 < mu < gamma.  Feasibility certifies mean-square stability plus
    sup_t sqrt(E||e||^2) < gamma * sup_t sqrt(E||w||^2).  Pass gamma=None
    to minimize the certified level instead; pass a float mu to pin it.
    """
    _check_rates(lam)
    N = aug.n_states
    gsym, extra_vars, objective = _gamma_atom(gamma)
    msym, mu_vars = _mu_atom(mu, gsym)
    Q = MatrixVariable("Q", (N, N), "symmetric")
    Qe = vexpr(Q)
    constraints = _direct_constraints(aug, gsym, msym, Qe, lam, "")
    constraints.append(make_constraint("Q_pos", POSITIVE, (N,), {(0, 0): Qe}))
    constraints += _scalar_order_constraints(gsym, msym)
    return LmiProblem(
        variables=tuple([Q] + mu_vars + extra_vars),
        constraints=tuple(constraints),
        objective=tuple(objective) if objective else None,
    )


def common_q_certification_lmis(
    augs: Sequence[AugmentedSystem], gamma, lam: float, mu=None
) -> LmiProblem:
    """Direct gain certificate with one (Q, mu) shared by several loops.

    Used to certify a fixed filter over a plant polytope: feasibility at the
    vertices extends to the whole polytope because the grids are affine in
    the plant data for fixed Q.
    """
    _check_rates(lam)
    augs = list(augs)
    if not augs:
        raise ValueError("need at least one closed loop")
    N = augs[0].n_states
    gsym, extra_vars, objective = _gamma_atom(gamma)
    msym, mu_vars = _mu_atom(mu, gsym)
    Q = MatrixVariable("Q", (N, N), "symmetric")
    Qe = vexpr(Q)
    constraints: list[LmiConstraint] = []
    many = len(augs) > 1
    for i, aug in enumerate(augs):
        if aug.n_states != N:
            raise ValueError("loops must share the state dimension")
        sfx = f"[v{i}]" if many else ""
        constraints += _direct_constraints(aug, gsym, msym, Qe, lam, sfx)
    constraints.append(make_constraint("Q_pos", POSITIVE, (N,), {(0, 0): Qe}))
    constraints += _scalar_order_constraints(gsym, msym)
    return LmiProblem(
        variables=tuple([Q] + mu_vars + extra_vars),
        constraints=tuple(constraints),
        objective=tuple(objective) if objective else None,
    )


def peak_gain_decoupled_lmis(
    aug: AugmentedSystem, gamma, lam: float, eps: float, mu=None
) -> LmiProblem:
    """Gain certificate with Lyapunov/system products decoupled by a slack W.

    Same guarantee as the direct form; the full slack variable W removes all
    Q-times-system products at the price of a small coupling constant eps.
    """
    _check_rates(lam, eps)
    N, q, m = aug.n_states, aug.n_inputs, aug.n_outputs
    gsym, extra_vars, objective = _gamma_atom(gamma)
    msym, mu_vars = _mu_atom(mu, gsym)
    Q = MatrixVariable("Q", (N, N), "symmetric")
    W = MatrixVariable("W", (N, N), "full")
    Qe, We = vexpr(Q), vexpr(W)
    se = float(np.sqrt(eps))
    shift = (1.0 + lam * eps / 2.0) * np.eye(N) + eps * aug.A

    # [ Q - W - W^T   W^T ((1+lam*eps/2) I + eps A)   se W^T B        0      ]
    # [      *                    -Q                      0       se G1^T W  ]
    # [      *                     *                   -mu I       G2^T W    ]
    # [      *                     *                      *      Q - W - W^T ]  < 0
    contract = Qe - We - We.T
    decay = make_constraint(
        "decay_slack_neg", NEGATIVE, (N, N, q, N),
        {
            (0, 0): contract,
            (0, 1): We.T @ shift,
            (0, 2): We.T @ (se * aug.B),
            (1, 1): -1.0 * Qe,
            (1, 3): (se * aug.G1.T) @ We,
            (2, 2): sterm(msym, -np.eye(q)),
            (2, 3): aug.G2.T @ We,
            (3, 3): contract,
        },
    )
    gain = make_constraint(
        "gain_pos", POSITIVE, (N, q, m),
        _gain_upper(cexpr(aug.C), cexpr(aug.D), Qe, gsym, msym, lam, q, m),
    )
    q_pos = make_constraint("Q_pos", POSITIVE, (N,), {(0, 0): Qe})
    return LmiProblem(
        variables=tuple([Q, W] + mu_vars + extra_vars),
        constraints=tuple([decay, gain, q_pos] + _scalar_order_constraints(gsym, msym)),
        objective=tuple(objective) if objective else None,
    )


# ---------------------------------------------------------------------------
# quadratic synthesis (common Lyapunov matrix over the polytope)
# ---------------------------------------------------------------------------

def _quadratic_vertex_constraints(
    sys: StochasticLtiSystem, gsym, mu, lam: float, vars_: dict, suffix: str
) -> list[LmiConstraint]:
    n, q, r, m = sys.dims
    Re, Ve, Ze, Se, Te, Dfe = (
        vexpr(vars_["R"]), vexpr(vars_["V"]), vexpr(vars_["Z"]),
        vexpr(vars_["S"]), vexpr(vars_["T"]), vexpr(vars_["Df"]),
    )
    A, B1, C1, C2 = sys.A, sys.B1, sys.C1, sys.C2
    D11, D2, G1, G2 = sys.D11, sys.D2, sys.G1, sys.G2

    # [ R A + A^T R + lam R   A^T V + C2^T Z^T + S^T    R B1      G1^T R   G1^T V ]
    # [          *              -S - S^T + lam V      V B1+Z D2     0        0    ]
    # [          *                      *              -mu I_q    G2^T R   G2^T V ]
    # [          *                      *                  *         -R       0   ]
    # [          *                      *                  *          *      -V   ]  < 0
    syn = make_constraint(
        "syn_neg" + suffix, NEGATIVE, (n, n, q, n, n),
        {
            (0, 0): Re @ A + A.T @ Re + lam * Re,
            (0, 1): A.T @ Ve + C2.T @ Ze.T + Se.T,
            (0, 2): Re @ B1,
            (0, 3): G1.T @ Re,
            (0, 4): G1.T @ Ve,
            (1, 1): -1.0 * Se - Se.T + lam * Ve,
            (1, 2): Ve @ B1 + Ze @ D2,
            (2, 2): sterm(mu, -np.eye(q)),
            (2, 3): G2.T @ Re,
            (2, 4): G2.T @ Ve,
            (3, 3): -1.0 * Re,
            (4, 4): -1.0 * Ve,
        },
    )
    # [ lam R     0          0             C1^T - C2^T Df^T - T^T ]
    # [   *     lam V        0                      T^T           ]
    # [   *       *      (g - mu) I_q       D11^T - D2^T Df^T     ]
    # [   *       *          *                     g I_m          ]  > 0
    gain = make_constraint(
        "gain_pos" + suffix, POSITIVE, (n, n, q, m),
        {
            (0, 0): lam * Re,
            (0, 3): cexpr(C1).T - C2.T @ Dfe.T - Te.T,
            (1, 1): lam * Ve,
            (1, 3): Te.T,
            (2, 2): sterm(gsym, np.eye(q)) + sterm(mu, -np.eye(q)),
            (2, 3): cexpr(D11).T - D2.T @ Dfe.T,
            (3, 3): sterm(gsym, np.eye(m)),
        },
    )
    return [syn, gain]


def robust_quadratic_synthesis_lmis(
    model: PolytopicModel, gamma, lam: float, mu=None
) -> LmiProblem:
    """Filter synthesis with one Lyapunov certificate for all vertices.

    A single variable set (R, V, Z, S, T, Df, mu) must satisfy the synthesis
    pair at every polytope vertex; the filter is recovered from (V, S, Z, T,
    Df) afterwards.  Pass gamma=None to minimize gamma.
    """
    _check_rates(lam)
    n, q, r, m = model.dims
    gsym, extra_vars, objective = _gamma_atom(gamma)
    msym, mu_vars = _mu_atom(mu, gsym)
    vars_ = {
        "R": MatrixVariable("R", (n, n), "symmetric"),
        "V": MatrixVariable("V", (n, n), "symmetric"),
        "Z": MatrixVariable("Z", (n, r), "full"),
        "S": MatrixVariable("S", (n, n), "full"),
        "T": MatrixVariable("T", (m, n), "full"),
        "Df": MatrixVariable("Df", (m, r), "full"),
    }
    constraints: list[LmiConstraint] = []
    many = model.n_vertices > 1
    for i, sys in enumerate(model.vertices):
        suffix = f"[v{i}]" if many else ""
        constraints += _quadratic_vertex_constraints(sys, gsym, msym, lam, vars_, suffix)
    # positivity of R and V keeps the filter extraction well posed
    constraints.append(
        make_constraint("R_pos", POSITIVE, (n,), {(0, 0): vexpr(vars_["R"])})
    )
    constraints.append(
        make_constraint("V_pos", POSITIVE, (n,), {(0, 0): vexpr(vars_["V"])})
    )
    constraints += _scalar_order_constraints(gsym, msym)
    return LmiProblem(
        variables=tuple(list(vars_.values()) + mu_vars + extra_vars),
        constraints=tuple(constraints),
        objective=tuple(objective) if objective else None,
    )


def quadratic_synthesis_lmis(
    sys: StochasticLtiSystem, gamma, lam: float, mu=None
) -> LmiProblem:
    """Single-plant quadratic synthesis (one-vertex polytope)."""
    return robust_quadratic_synthesis_lmis(PolytopicModel((sys,)), gamma, lam, mu=mu)


# ---------------------------------------------------------------------------
# improved synthesis (slack-decoupled, vertex-wise Lyapunov matrices)
# ---------------------------------------------------------------------------

@dataclass
class _ImprovedAtoms:
    """Variable atoms for the slack-decoupled family.

    Filter atoms are either free variables (synthesis) or frozen products of
    T with a known realization (certification of a fixed filter).
    """

    variables: list
    Q1e: dict
    Q2e: dict
    Q3e: dict
    Re: dict
    Se: dict
    Te: Expr
    Afe: Expr
    Bfe: Expr
    Cfe: Expr
    Dfe: Expr
    mu: object  # scalar MatrixVariable or fixed float


def _improved_atoms(
    n: int, r_in: int, m_out: int, s: int,
    filt: DeconvolutionFilter | None, mu=None,
) -> _ImprovedAtoms:
    variables: list[MatrixVariable] = []

    def add(v):
        variables.append(v)
        return v

    Q1e, Q2e, Q3e, Re, Se = {}, {}, {}, {}, {}
    tag = (lambda i: f"_{i}") if s > 1 else (lambda i: "")
    for i in range(s):
        Q1e[i] = vexpr(add(MatrixVariable(f"Qbar1{tag(i)}", (n, n), "symmetric")))
        Q2e[i] = vexpr(add(MatrixVariable(f"Qbar2{tag(i)}", (n, n), "full")))
        Q3e[i] = vexpr(add(MatrixVariable(f"Qbar3{tag(i)}", (n, n), "symmetric")))
        Re[i] = vexpr(add(MatrixVariable(f"Rbar{tag(i)}", (n, n), "full")))
        Se[i] = vexpr(add(MatrixVariable(f"Sbar{tag(i)}", (n, n), "full")))
    Te = vexpr(add(MatrixVariable("Tbar", (n, n), "full")))
    if filt is None:
        Afe = vexpr(add(MatrixVariable("Afbar", (n, n), "full")))
        Bfe = vexpr(add(MatrixVariable("Bfbar", (n, r_in), "full")))
        Cfe = vexpr(add(MatrixVariable("Cfbar", (m_out, n), "full")))
        Dfe = vexpr(add(MatrixVariable("Dfbar", (m_out, r_in), "full")))
    else:
        # freeze the realization: Afbar = Tbar Af, Bfbar = Tbar Bf
        if filt.n != n or filt.n_inputs != r_in or filt.n_outputs != m_out:
            raise ValueError(
                f"filter dims ({filt.n}, {filt.n_inputs}, {filt.n_outputs}) do "
                f"not match problem dims ({n}, {r_in}, {m_out})"
            )
        Afe = Te @ filt.Af
        Bfe = Te @ filt.Bf
        Cfe = cexpr(filt.Cf)
        Dfe = cexpr(filt.Df)
    if mu is None:
        mu = add(MatrixVariable("mu", (1, 1), "scalar"))
    return _ImprovedAtoms(variables, Q1e, Q2e, Q3e, Re, Se, Te, Afe, Bfe, Cfe, Dfe, mu)


def _improved_gain_upper(plant: StochasticLtiSystem, gsym, lam, at, i: int) -> dict:
    # [ lam Q1   lam Q2      0         C1^T - C2^T Dfbar^T ]
    # [   *      lam Q3      0              -Cfbar^T       ]
    # [   *        *     (g-mu) I_q    D11^T - D2^T Dfbar^T]
    # [   *        *         *                g I_m        ]  > 0
    n, q, r, m = plant.dims
    m_out = at.Cfe.shape[0]
    return {
        (0, 0): lam * at.Q1e[i],
        (0, 1): lam * at.Q2e[i],
        (0, 3): cexpr(plant.C1).T - plant.C2.T @ at.Dfe.T,
        (1, 1): lam * at.Q3e[i],
        (1, 3): -1.0 * at.Cfe.T,
        (2, 2): sterm(gsym, np.eye(q)) + sterm(at.mu, -np.eye(q)),
        (2, 3): cexpr(plant.D11).T - plant.D2.T @ at.Dfe.T,
        (3, 3): sterm(gsym, np.eye(m)),
    }


def _fault_gain_upper(
    plant: StochasticLtiSystem, gsym, lam, at, i: int,
    H: np.ndarray, C21: np.ndarray, D21: np.ndarray,
) -> dict:
    # last block row (here: column, transposed):
    #   H (Dfbar C21 - C2),  H Cfbar,  H (Dfbar D21 - D2),  g I_p
    n, q, r, m = plant.dims
    p = H.shape[0]
    col0 = (at.Dfe @ C21).T @ H.T - cexpr(plant.C2.T @ H.T)
    col1 = at.Cfe.T @ H.T
    col2 = (at.Dfe @ D21).T @ H.T - cexpr(plant.D2.T @ H.T)
    return {
        (0, 0): lam * at.Q1e[i],
        (0, 1): lam * at.Q2e[i],
        (0, 3): col0,
        (1, 1): lam * at.Q3e[i],
        (1, 3): col1,
        (2, 2): sterm(gsym, np.eye(q)) + sterm(at.mu, -np.eye(q)),
        (2, 3): col2,
        (3, 3): sterm(gsym, np.eye(p)),
    }


def _improved_decay_upper(
    plant: StochasticLtiSystem, lam: float, eps: float, at,
    lyap_i: int, meas: tuple[np.ndarray, np.ndarray] | None,
) -> dict:
    """Upper triangle of the 7x7 slack-decoupled synthesis grid.

    Lyapunov blocks and slacks carry index lyap_i while the plant data comes
    from `plant`; T, the filter atoms and mu are shared.
    """
    n, q, r, m = plant.dims
    A, B1, G1, G2 = plant.A, plant.B1, plant.G1, plant.G2
    Cm, Dm = meas if meas is not None else (plant.C2, plant.D2)
    se = float(np.sqrt(eps))
    c = 1.0 + lam * eps / 2.0
    Q1e, Q2e, Q3e = at.Q1e[lyap_i], at.Q2e[lyap_i], at.Q3e[lyap_i]
    Re, Se, Te = at.Re[lyap_i], at.Se[lyap_i], at.Te
    p11 = Q1e - Re - Re.T
    p12 = Q2e - Te - Se
    p22 = Q3e - Te - Te.T
    # [ p11   p12   c R^T + e R^T A + e Bf C   c T + e Af    se(R^T B1 + Bf D)    0        0    ]
    # [  *    p22   c S^T + e S^T A + e Bf C   c T^T + e Af  se(S^T B1 + Bf D)    0        0    ]
    # [  *     *              -Q1                 -Q2                0        se G1^T R se G1^T S]
    # [  *     *               *                  -Q3                0            0        0    ]
    # [  *     *               *                   *              -mu I_q     G2^T R   G2^T S   ]
    # [  *     *               *                   *                 *          p11      p12    ]
    # [  *     *               *                   *                 *           *       p22    ]  < 0
    # both coupling slots carry T untransposed: with the slack partition
    # recovered as W3 = W4 = T^T, the transformed (row, xh)-columns equal
    # c T + eps (T Af) in both block rows, which is what makes this grid
    # exactly the decoupled analysis grid of the extracted filter
    return {
        (0, 0): p11,
        (0, 1): p12,
        (0, 2): c * Re.T + Re.T @ (eps * A) + eps * (at.Bfe @ Cm),
        (0, 3): c * Te + eps * at.Afe,
        (0, 4): Re.T @ (se * B1) + se * (at.Bfe @ Dm),
        (1, 1): p22,
        (1, 2): c * Se.T + Se.T @ (eps * A) + eps * (at.Bfe @ Cm),
        (1, 3): c * Te + eps * at.Afe,
        (1, 4): Se.T @ (se * B1) + se * (at.Bfe @ Dm),
        (2, 2): -1.0 * Q1e,
        (2, 3): -1.0 * Q2e,
        (2, 5): (se * G1.T) @ Re,
        (2, 6): (se * G1.T) @ Se,
        (3, 3): -1.0 * Q3e,
        (4, 4): sterm(at.mu, -np.eye(q)),
        (4, 5): G2.T @ Re,
        (4, 6): G2.T @ Se,
        (5, 5): p11,
        (5, 6): p12,
        (6, 6): p22,
    }


def _add_upper(u1: Mapping, u2: Mapping) -> dict:
    out = dict(u1)
    for key, e in u2.items():
        out[key] = out[key] + e if key in out else e
    return out


def _improved_problem(
    vertices: Sequence[StochasticLtiSystem],
    gamma,
    lam: float,
    eps: float,
    filt: DeconvolutionFilter | None = None,
    meas: tuple[np.ndarray, np.ndarray] | None = None,
    fault_rows: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
    mu=None,
) -> LmiProblem:
    """Shared assembly for the slack-decoupled synthesis family.

    meas overrides the measurement pair (C2, D2) driving the filter (fault
    variant: only fault-free outputs drive it); fault_rows = (H, C21, D21)
    switches the gain grid to the weighted reconstruction-error output.
    """
    _check_rates(lam, eps)
    s = len(vertices)
    n, q, r, m = vertices[0].dims
    r_in = meas[0].shape[0] if meas is not None else r
    m_out = fault_rows[0].shape[0] if fault_rows is not None else m
    filt_rows = r if fault_rows is not None else m
    gsym, extra_vars, objective = _gamma_atom(gamma)
    msym, _ = _mu_atom(mu, gsym)
    at = _improved_atoms(n, r_in, filt_rows, s, filt,
                         mu=None if mu is None else msym)

    many = s > 1
    constraints: list[LmiConstraint] = []
    for i, plant in enumerate(vertices):
        sfx = f"[v{i}]" if many else ""
        if fault_rows is None:
            gup = _improved_gain_upper(plant, gsym, lam, at, i)
        else:
            gup = _fault_gain_upper(plant, gsym, lam, at, i, *fault_rows)
        constraints.append(
            make_constraint("gain_pos" + sfx, POSITIVE, (n, n, q, m_out), gup)
        )
        constraints.append(
            make_constraint(
                "Qbar_pos" + sfx, POSITIVE, (n, n),
                {(0, 0): at.Q1e[i], (0, 1): at.Q2e[i], (1, 1): at.Q3e[i]},
            )
        )

    dims7 = (n, n, n, n, q, n, n)
    for i in range(s):
        sfx = f"[v{i}]" if many else ""
        constraints.append(
            make_constraint(
                "decay_neg" + sfx, NEGATIVE, dims7,
                _improved_decay_upper(vertices[i], lam, eps, at, i, meas),
            )
        )
    for i in range(s):
        for j in range(i + 1, s):
            combined = _add_upper(
                _improved_decay_upper(vertices[j], lam, eps, at, i, meas),
                _improved_decay_upper(vertices[i], lam, eps, at, j, meas),
            )
            constraints.append(
                make_constraint(f"decay_cross_neg[v{i},v{j}]", NEGATIVE, dims7, combined)
            )
    constraints += _scalar_order_constraints(gsym, at.mu)
    return LmiProblem(
        variables=tuple(at.variables + extra_vars),
        constraints=tuple(constraints),
        objective=tuple(objective) if objective else None,
    )


def improved_synthesis_lmis(
    sys: StochasticLtiSystem, gamma, lam: float, eps: float, mu=None
) -> LmiProblem:
    """Single-plant slack-decoupled synthesis."""
    return _improved_problem([sys], gamma, lam, eps, mu=mu)


def robust_improved_synthesis_lmis(
    model: PolytopicModel, gamma, lam: float, eps: float, mu=None
) -> LmiProblem:
    """Polytopic slack-decoupled synthesis with vertex-wise Lyapunov data.

    Vertex i carries its own Lyapunov blocks and slacks (R, S); the filter
    variables, T and mu are shared.  The decay condition is imposed on every
    vertex and on each symmetrized cross pair (i, j), which makes the
    parameter-dependent condition finite-dimensional.
    """
    return _improved_problem(list(model.vertices), gamma, lam, eps, mu=mu)


def robust_improved_certification_lmis(
    model: PolytopicModel,
    filt: DeconvolutionFilter,
    gamma,
    lam: float,
    eps: float,
    mu=None,
) -> LmiProblem:
    """Vertex-wise certification of a fixed filter in the slack-decoupled form.

    The filter realization is frozen by substituting Afbar = Tbar Af and
    Bfbar = Tbar Bf (T stays a free variable), Cfbar/Dfbar constant.
    """
    return _improved_problem(list(model.vertices), gamma, lam, eps, filt=filt, mu=mu)


def improved_vertex_decay_constraint(
    model: PolytopicModel, i: int, j: int, gamma, lam: float, eps: float
) -> LmiConstraint:
    """The (i, j)-indexed decay grid alone (Lyapunov/slack index i, plant
    index j), for convex-combination expansion checks against the synthesis
    problem's variables."""
    s = model.n_vertices
    n, q, r, m = model.dims
    at = _improved_atoms(n, r, m, s, None)
    upper = _improved_decay_upper(model.vertices[j], lam, eps, at, i, None)
    return make_constraint(
        f"decay_pair[{i},{j}]", NEGATIVE, (n, n, n, n, q, n, n), upper
    )


# ---------------------------------------------------------------------------
# fault-reconstruction synthesis
# ---------------------------------------------------------------------------

def fault_synthesis_lmis(
    base: StochasticLtiSystem,
    C21: np.ndarray,
    D21: np.ndarray,
    H: np.ndarray,
    gamma,
    lam: float,
    eps: float,
    mu=None,
) -> LmiProblem:
    """Synthesis of the fault-estimation filter driven by fault-free outputs.

    base carries the full measurement pair (C2, D2); (C21, D21) is the
    fault-free sub-block driving the filter and H weights the output
    mismatch into a fault estimate.  The filter maps r-p measurements to r
    reconstructed outputs.
    """
    C21 = np.atleast_2d(np.asarray(C21, dtype=float))
    D21 = np.atleast_2d(np.asarray(D21, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    n, q, r, m = base.dims
    p = H.shape[0]
    if H.shape[1] != r:
        raise ValueError(f"H has {H.shape[1]} cols, expected r={r}")
    if C21.shape != (r - p, n) or D21.shape != (r - p, q):
        raise ValueError("fault-free measurement blocks have wrong shapes")
    return _improved_problem(
        [base], gamma, lam, eps,
        meas=(C21, D21),
        fault_rows=(H, C21, D21),
        mu=mu,
    )


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _triplets(M: np.ndarray) -> str:
    rows, cols = np.nonzero(M)
    parts = [f"{i},{j},{M[i, j]!r}" for i, j in zip(rows.tolist(), cols.tolist())]
    return "; ".join(parts) if parts else "-"


def serialize_problem(problem: LmiProblem) -> str:
    """Deterministic text form: variables, then constraints with block
    coordinates and coefficient triplets.  Byte-stable for identical input.
    """
    out = ["lmi-problem v1"]
    if problem.objective:
        terms = " + ".join(f"{c!r}*{nm}" for nm, c in problem.objective)
        out.append(f"objective: minimize {terms}")
    else:
        out.append("objective: feasibility")
    for v in problem.variables:
        out.append(f"variable {v.name} {v.structure} {v.shape[0]} {v.shape[1]}")
    for c in problem.constraints:
        dims = ",".join(str(d) for d in c.dims)
        out.append(f"constraint {c.name} {c.sense} dims={dims} margin={c.margin!r}")
        for i, j, e in c.upper:
            out.append(f"  block {i} {j}")
            out.append(f"    const {_triplets(e.const)}")
            for t in e.terms:
                if isinstance(t, _MatTerm):
                    tt = "T" if t.transpose else "N"
                    out.append(
                        f"    matterm {t.var} {tt} left[{_triplets(t.left)}] "
                        f"right[{_triplets(t.right)}]"
                    )
                else:
                    out.append(f"    scalterm {t.var} coeff[{_triplets(t.coeff)}]")
    return "\n".join(out) + "\n"


def _scalar_coordinates(problem: LmiProblem) -> list[tuple[str, int, int]]:
    coords = []
    for v in problem.variables:
        r, c = v.shape
        if v.structure == "scalar":
            coords.append((v.name, 0, 0))
        elif v.structure == "symmetric":
            for i in range(r):
                for j in range(i, r):
                    coords.append((v.name, i, j))
        else:
            for i in range(r):
                for j in range(c):
                    coords.append((v.name, i, j))
    return coords


def _coefficient_matrix(
    constraint: LmiConstraint, var: MatrixVariable, a: int, b: int, env0: dict,
) -> np.ndarray:
    """d(grid)/d(X[a, b]), treating symmetric entries (a,b)=(b,a) as one."""
    env = dict(env0)
    base = instantiate(constraint, env)
    E = env0[var.name].copy()
    E[a, b] = 1.0
    if var.structure == "symmetric" and a != b:
        E[b, a] = 1.0
    env[var.name] = E
    K = instantiate(constraint, env) - base
    return 0.5 * (K + K.T)


def to_sdpa(problem: LmiProblem) -> str:
    """Sparse SDPA dump of the margin-adjusted problem, for cross-checking.

    Emits `sum_i x_i F_i - F0 >= 0` blocks, one per constraint: positive
    grids as G(x) - margin I and negative grids as -G(x) - margin I, with
    any minimize objective in the cost row.  Deterministic ordering.
    """
    coords = _scalar_coordinates(problem)
    mvar = {v.name: v for v in problem.variables}
    env0 = {v.name: np.zeros(v.shape) for v in problem.variables}
    nblocks = len(problem.constraints)
    lines = [
        f"* linfdeconv sdpa dump: {len(coords)} scalars, {nblocks} blocks",
        f"{len(coords)} = mDIM",
        f"{nblocks} = nBLOCK",
        " ".join(str(c.size) for c in problem.constraints) + " = bLOCKsTRUCT",
    ]
    cvec = {nm: w for nm, w in (problem.objective or ())}
    lines.append(" ".join(repr(float(cvec.get(nm, 0.0))) for nm, _, _ in coords))
    entries: list[str] = []
    for bi, con in enumerate(problem.constraints, start=1):
        sign = 1.0 if con.sense == POSITIVE else -1.0
        const = instantiate(con, env0)
        F0 = con.margin * np.eye(con.size) - sign * const
        for i, j in zip(*np.nonzero(np.triu(F0))):
            entries.append(f"0 {bi} {i + 1} {j + 1} {F0[i, j]!r}")
        for k, (nm, a, b) in enumerate(coords, start=1):
            K = sign * _coefficient_matrix(con, mvar[nm], a, b, env0)
            for i, j in zip(*np.nonzero(np.triu(K))):
                entries.append(f"{k} {bi} {i + 1} {j + 1} {K[i, j]!r}")
    return "\n".join(lines + entries) + "\n"
