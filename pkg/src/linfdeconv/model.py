"""Domain types for linear stochastic systems with multiplicative noise.

A plant is a continuous-time Ito-type system

    dx = (A x + B1 w) dt + (G1 x + G2 w) db,
    y  = C2 x + D2 w,
    z  = C1 x + D11 w,

driven by an exogenous bounded input w and a single scalar Wiener process b.
This module holds the value types (plant, polytope of plants, deconvolution
filter, closed-loop error system) plus mean-square stability oracles.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

__all__ = [
    "StochasticLtiSystem",
    "PolytopicModel",
    "DeconvolutionFilter",
    "AugmentedSystem",
    "build_augmented",
    "combine_vertices",
    "esms_lmi_check",
    "esms_spectral_oracle",
    "lambda_admissible_bound",
    "spectral_abscissa",
]

SIMPLEX_TOL = 1e-12


def _as_matrix(value, name: str, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Coerce to a read-only 2-D float array, checking finiteness and shape."""
    M = np.atleast_2d(np.asarray(value, dtype=float))
    if M.ndim != 2:
        raise ValueError(f"{name} must be a matrix, got ndim={M.ndim}")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} contains non-finite entries")
    if shape is not None and M.shape != shape:
        raise ValueError(f"{name} has shape {M.shape}, expected {shape}")
    M = M.copy()
    M.flags.writeable = False
    return M


@dataclass(frozen=True)
class StochasticLtiSystem:
    """One plant realization: the eight state-space matrices.

    Shapes: A n x n, B1 n x q, C1 m x n, C2 r x n, D11 m x q, D2 r x q,
    G1 n x n, G2 n x q.
    """

    A: np.ndarray
    B1: np.ndarray
    C1: np.ndarray
    C2: np.ndarray
    D11: np.ndarray
    D2: np.ndarray
    G1: np.ndarray
    G2: np.ndarray

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError(f"A must be square, got {A.shape}")
        B1 = _as_matrix(self.B1, "B1")
        if B1.shape[0] != n:
            raise ValueError(f"B1 has {B1.shape[0]} rows, expected n={n}")
        q = B1.shape[1]
        C1 = _as_matrix(self.C1, "C1")
        if C1.shape[1] != n:
            raise ValueError(f"C1 has {C1.shape[1]} cols, expected n={n}")
        m = C1.shape[0]
        C2 = _as_matrix(self.C2, "C2")
        if C2.shape[1] != n:
            raise ValueError(f"C2 has {C2.shape[1]} cols, expected n={n}")
        r = C2.shape[0]
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B1", B1)
        object.__setattr__(self, "C1", C1)
        object.__setattr__(self, "C2", C2)
        object.__setattr__(self, "D11", _as_matrix(self.D11, "D11", (m, q)))
        object.__setattr__(self, "D2", _as_matrix(self.D2, "D2", (r, q)))
        object.__setattr__(self, "G1", _as_matrix(self.G1, "G1", (n, n)))
        object.__setattr__(self, "G2", _as_matrix(self.G2, "G2", (n, q)))

    @property
    def dims(self) -> tuple[int, int, int, int]:
        """(n, q, r, m) = (states, inputs, measurements, estimated outputs)."""
        return (
            self.A.shape[0],
            self.B1.shape[1],
            self.C2.shape[0],
            self.C1.shape[0],
        )

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def q(self) -> int:
        return self.B1.shape[1]

    @property
    def r(self) -> int:
        return self.C2.shape[0]

    @property
    def m(self) -> int:
        return self.C1.shape[0]


@dataclass(frozen=True)
class PolytopicModel:
    """Convex polytope of plants given by its vertex realizations."""

    vertices: tuple[StochasticLtiSystem, ...]

    def __post_init__(self):
        verts = tuple(self.vertices)
        if not verts:
            raise ValueError("polytopic model needs at least one vertex")
        dims = verts[0].dims
        for k, v in enumerate(verts):
            if v.dims != dims:
                raise ValueError(
                    f"vertex {k} has dims {v.dims}, expected {dims} from vertex 0"
                )
        object.__setattr__(self, "vertices", verts)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.vertices[0].dims

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)


@dataclass(frozen=True)
class DeconvolutionFilter:
    """Filter realization dxh = Af xh dt + Bf y dt, zh = Cf xh + Df y.

    The input width (columns of Bf/Df) is the number of measurements the
    filter consumes; the output height is the number of estimated channels.
    """

    Af: np.ndarray
    Bf: np.ndarray
    Cf: np.ndarray
    Df: np.ndarray

    def __post_init__(self):
        Af = _as_matrix(self.Af, "Af")
        n = Af.shape[0]
        if Af.shape != (n, n):
            raise ValueError(f"Af must be square, got {Af.shape}")
        Bf = _as_matrix(self.Bf, "Bf")
        if Bf.shape[0] != n:
            raise ValueError(f"Bf has {Bf.shape[0]} rows, expected {n}")
        Cf = _as_matrix(self.Cf, "Cf")
        if Cf.shape[1] != n:
            raise ValueError(f"Cf has {Cf.shape[1]} cols, expected {n}")
        Df = _as_matrix(self.Df, "Df", (Cf.shape[0], Bf.shape[1]))
        object.__setattr__(self, "Af", Af)
        object.__setattr__(self, "Bf", Bf)
        object.__setattr__(self, "Cf", Cf)
        object.__setattr__(self, "Df", Df)

    @property
    def n(self) -> int:
        return self.Af.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.Bf.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.Cf.shape[0]


@dataclass(frozen=True)
class AugmentedSystem:
    """Closed-loop error dynamics in the stacked state (x, xh):

        dxi = (A xi + B w) dt + (G1 xi + G2 w) db,   e = C xi + D w.
    """

    A: np.ndarray
    B: np.ndarray
    G1: np.ndarray
    G2: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        N = A.shape[0]
        if A.shape != (N, N):
            raise ValueError(f"A must be square, got {A.shape}")
        B = _as_matrix(self.B, "B")
        if B.shape[0] != N:
            raise ValueError(f"B has {B.shape[0]} rows, expected {N}")
        q = B.shape[1]
        C = _as_matrix(self.C, "C")
        if C.shape[1] != N:
            raise ValueError(f"C has {C.shape[1]} cols, expected {N}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "G1", _as_matrix(self.G1, "G1", (N, N)))
        object.__setattr__(self, "G2", _as_matrix(self.G2, "G2", (N, q)))
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "D", _as_matrix(self.D, "D", (C.shape[0], q)))

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.B.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.C.shape[0]


def build_augmented(
    sys: StochasticLtiSystem, filt: DeconvolutionFilter
) -> AugmentedSystem:
    """Stack plant and deconvolution filter into the error system.

    The filter is driven by the plant measurement y and the error output is
    z - zh, giving the exact block layout

        A = [[A, 0], [Bf C2, Af]],  B = [[B1], [Bf D2]],
        G1 = [[G1, 0], [0, 0]],     G2 = [[G2], [0]],
        C = [C1 - Df C2, -Cf],      D = D11 - Df D2.
    """
    n, q, r, m = sys.dims
    if filt.n != n:
        raise ValueError(f"filter order {filt.n} != plant order {n}")
    if filt.n_inputs != r:
        raise ValueError(
            f"filter consumes {filt.n_inputs} measurements, plant produces {r}"
        )
    if filt.n_outputs != m:
        raise ValueError(
            f"filter estimates {filt.n_outputs} channels, plant defines {m}"
        )
    zn = np.zeros((n, n))
    A = np.block([[sys.A, zn], [filt.Bf @ sys.C2, filt.Af]])
    B = np.vstack([sys.B1, filt.Bf @ sys.D2])
    G1 = np.block([[sys.G1, zn], [zn, zn]])
    G2 = np.vstack([sys.G2, np.zeros((n, q))])
    C = np.hstack([sys.C1 - filt.Df @ sys.C2, -filt.Cf])
    D = sys.D11 - filt.Df @ sys.D2
    return AugmentedSystem(A=A, B=B, G1=G1, G2=G2, C=C, D=D)


def combine_vertices(
    model: PolytopicModel, alpha: Sequence[float]
) -> StochasticLtiSystem:
    """Entrywise convex combination of all eight vertex matrices."""
    a = np.asarray(alpha, dtype=float).ravel()
    if a.size != model.n_vertices:
        raise ValueError(
            f"got {a.size} weights for {model.n_vertices} vertices"
        )
    if np.any(a < 0):
        raise ValueError("simplex weights must be nonnegative")
    if abs(a.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError(f"simplex weights sum to {a.sum()!r}, expected 1")

    def mix(field: str) -> np.ndarray:
        return sum(
            w * getattr(v, field) for w, v in zip(a, model.vertices)
        )

    return StochasticLtiSystem(
        A=mix("A"), B1=mix("B1"), C1=mix("C1"), C2=mix("C2"),
        D11=mix("D11"), D2=mix("D2"), G1=mix("G1"), G2=mix("G2"),
    )


def spectral_abscissa(A: np.ndarray) -> float:
    """Largest real part over the eigenvalues of A."""
    return float(np.max(np.linalg.eigvals(np.atleast_2d(A)).real))


class EsmsOracleResult(NamedTuple):
    stable: bool
    abscissa: float


def esms_spectral_oracle(A, G1) -> EsmsOracleResult:
    """Mean-square stability via the second-moment flow generator.

    The covariance P = E[x x^T] of dx = A x dt + G1 x db evolves linearly:
    vec(dP/dt) = M vec(P) with M = I (x) A + A (x) I + G1 (x) G1.  The
    unforced system is exponentially mean-square stable iff every eigenvalue
    of M has negative real part.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    G1 = np.atleast_2d(np.asarray(G1, dtype=float))
    n = A.shape[0]
    if A.shape != (n, n) or G1.shape != (n, n):
        raise ValueError(f"A and G1 must both be {n} x {n}")
    eye = np.eye(n)
    M = np.kron(eye, A) + np.kron(A, eye) + np.kron(G1, G1)
    abscissa = spectral_abscissa(M)
    return EsmsOracleResult(stable=abscissa < 0.0, abscissa=abscissa)


def esms_lmi_check(A, G1, margin: float = 1e-7) -> np.ndarray | None:
    """Mean-square stability certificate via semidefinite programming.

    Searches for Q > 0 with A^T Q + Q A + G1^T Q G1 <= -margin I.  Returns
    the certificate Q on success, None when the search problem is infeasible
    (not mean-square stable within the margin).  Solver breakdowns raise,
    they are not reported as instability.
    """
    from . import lmi, sdp

    problem = lmi.esms_lmis(A, G1, margin=margin)
    solution = sdp.solve(problem)
    if solution.status in ("optimal", "feasible"):
        return solution.value("Q")
    if solution.status == "infeasible":
        return None
    raise sdp.SolverFailure(
        f"stability check did not resolve: status={solution.status}"
    )


def lambda_admissible_bound(A_list: Sequence[np.ndarray]) -> float:
    """Upper end of the admissible decay-rate interval (0, bound).

    bound = -2 * max over the given drift matrices of the spectral abscissa.
    Search grids for the decay rate must stay strictly inside the interval.
    """
    mats = list(A_list)
    if not mats:
        raise ValueError("need at least one drift matrix")
    worst = max(spectral_abscissa(A) for A in mats)
    if worst >= 0.0:
        raise ValueError(
            f"drift spectral abscissa {worst:.6g} >= 0: "
            "admissible decay-rate interval is empty"
        )
    return -2.0 * worst
