"""Sensor-fault reconstruction via peak-to-peak deconvolution.

With a sensor fault f entering the measurements as y = C2 x + D2 w + F f,
the outputs are reordered so the fault hits only the last p channels.  A
deconvolution filter driven by the fault-free channels predicts the full
output vector and the weighted mismatch H (y - yhat) reconstructs f: by
construction H F = I, so the reconstruction error is exactly the filter's
output-estimation error, and the synthesized peak-to-peak level bounds it
against the disturbance regardless of the fault signal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import lmi
from .model import (
    AugmentedSystem,
    DeconvolutionFilter,
    StochasticLtiSystem,
    _as_matrix,
)

__all__ = [
    "OutputPartition",
    "FaultModel",
    "FaultEstimator",
    "FaultStructureError",
    "normalize_fault_structure",
    "build_H",
    "build_fault_augmented",
    "fault_problem",
    "synthesize_fault_filter",
    "fault_estimator",
    "reconstruct",
    "pendulum_model",
    "ramp_and_hold",
    "FaultProfile",
    "simulate_fault_scenario",
]

ZERO_ROW_TOL = 1e-12


class FaultStructureError(ValueError):
    """The fault directions cannot be isolated by reordering outputs."""


@dataclass(frozen=True)
class OutputPartition:
    """Row permutation putting fault-free outputs first.

    order[i] gives the original row index of reordered row i; the first
    r - p rows are fault-free, the last p rows carry the nonsingular fault
    block F2.  Rows are permuted only, never rescaled, so F2 is kept as
    found in F.
    """

    order: tuple[int, ...]
    n_faultfree: int
    F2: np.ndarray
    scaling: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "F2", _as_matrix(self.F2, "F2"))

    @property
    def r(self) -> int:
        return len(self.order)

    @property
    def p(self) -> int:
        return self.r - self.n_faultfree

    @property
    def condition_F2(self) -> float:
        return float(np.linalg.cond(self.F2))

    @property
    def matrix(self) -> np.ndarray:
        """The transform as a matrix: reordered = matrix @ original."""
        P = np.zeros((self.r, self.r))
        for new, old in enumerate(self.order):
            P[new, old] = self.scaling[new]
        return P

    def apply(self, rows: np.ndarray) -> np.ndarray:
        """Reorder the rows of a matrix (or the entries of an output)."""
        M = np.asarray(rows, dtype=float)
        scale = np.asarray(self.scaling)
        if M.ndim == 1:
            return M[list(self.order)] * scale
        return M[list(self.order)] * scale[:, None]

    def restore(self, rows: np.ndarray) -> np.ndarray:
        """Invert apply(): back to the original row order and scale."""
        M = np.asarray(rows, dtype=float)
        out = np.empty_like(M)
        for new, old in enumerate(self.order):
            out[old] = M[new] / self.scaling[new]
        return out

    def apply_samples(self, Y: np.ndarray) -> np.ndarray:
        """Reorder output samples arranged as rows of a (steps, r) array."""
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        return Y[:, list(self.order)] * np.asarray(self.scaling)

    def split(self, reordered: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(fault-free block, faulty block) of an already reordered matrix."""
        M = np.asarray(reordered)
        return M[: self.n_faultfree], M[self.n_faultfree:]


def normalize_fault_structure(C2, D2, F) -> OutputPartition:
    """Find the output reordering that isolates the fault channels.

    F must have exactly r - p zero rows (after which the remaining p rows
    form a nonsingular block); when every row of F is populated no
    permutation can produce fault-free measurements to drive the filter,
    and the structure is rejected.
    """
    C2 = _as_matrix(C2, "C2")
    D2 = _as_matrix(D2, "D2")
    F = _as_matrix(F, "F")
    r, p = F.shape
    if C2.shape[0] != r or D2.shape[0] != r:
        raise ValueError("C2/D2 row count must match the output count of F")
    if not (r > p >= 1):
        raise ValueError(f"need outputs r > faults p >= 1, got r={r}, p={p}")
    if np.linalg.matrix_rank(F) < p:
        raise FaultStructureError("fault direction matrix is column-rank deficient")
    scale = max(float(np.max(np.abs(F))), 1.0)
    row_mass = np.max(np.abs(F), axis=1)
    zero_rows = [i for i in range(r) if row_mass[i] <= ZERO_ROW_TOL * scale]
    live_rows = [i for i in range(r) if i not in zero_rows]
    if len(live_rows) != p:
        raise FaultStructureError(
            f"{len(live_rows)} output rows touch the {p} fault channels; a "
            "row permutation cannot isolate them (some sensors must be "
            "fault-free)"
        )
    F2 = F[live_rows]
    if not np.isfinite(np.linalg.cond(F2)) or abs(np.linalg.det(F2)) == 0.0:
        raise FaultStructureError("fault block F2 is singular")
    order = tuple(zero_rows + live_rows)
    return OutputPartition(
        order=order,
        n_faultfree=r - p,
        F2=F2,
        scaling=tuple(1.0 for _ in range(r)),
    )


def build_H(H1, F2) -> np.ndarray:
    """Reconstruction weight H = [H1  F2^-1]: H applied to the reordered
    output mismatch returns fault estimates, with H hitting the fault block
    as the identity."""
    F2 = _as_matrix(F2, "F2")
    p = F2.shape[0]
    if F2.shape != (p, p):
        raise ValueError(f"F2 must be square, got {F2.shape}")
    if abs(np.linalg.det(F2)) == 0.0:
        raise ValueError("F2 is singular")
    H1 = np.atleast_2d(np.asarray(H1, dtype=float))
    if H1.shape[0] != p:
        raise ValueError(f"H1 has {H1.shape[0]} rows, expected p={p}")
    return np.hstack([H1, np.linalg.inv(F2)])


@dataclass(frozen=True)
class FaultModel:
    """Plant with additive sensor faults y = C2 x + D2 w + F f.

    The output partition is computed eagerly, so an inseparable fault
    structure is rejected at construction.
    """

    base: StochasticLtiSystem
    F: np.ndarray

    def __post_init__(self):
        F = _as_matrix(self.F, "F")
        n, q, r, m = self.base.dims
        if F.shape[0] != r:
            raise ValueError(f"F has {F.shape[0]} rows, expected r={r}")
        if not (n >= r):
            raise ValueError(f"need states n >= outputs r, got n={n}, r={r}")
        object.__setattr__(self, "F", F)
        partition = normalize_fault_structure(self.base.C2, self.base.D2, F)
        object.__setattr__(self, "_partition", partition)

    @property
    def p(self) -> int:
        return self.F.shape[1]

    @property
    def partition(self) -> OutputPartition:
        return self._partition

    def reordered_measurements(self):
        """(C21, C22, D21, D22): the partitioned measurement blocks."""
        part = self.partition
        C21, C22 = part.split(part.apply(self.base.C2))
        D21, D22 = part.split(part.apply(self.base.D2))
        return C21, C22, D21, D22

    def default_H1(self) -> np.ndarray:
        return np.ones((self.p, self.partition.n_faultfree))

    def weight(self, h1=None) -> np.ndarray:
        h1 = self.default_H1() if h1 is None else np.atleast_2d(np.asarray(h1, float))
        return build_H(h1, self.partition.F2)


@dataclass(frozen=True)
class FaultEstimator:
    """Deployed reconstruction: filter on fault-free outputs plus weight H."""

    filter: DeconvolutionFilter
    H: np.ndarray
    partition: OutputPartition

    def __post_init__(self):
        object.__setattr__(self, "H", _as_matrix(self.H, "H"))
        p = self.partition.p
        resid = self.H[:, -p:] @ self.partition.F2 - np.eye(p)
        if np.max(np.abs(resid)) > 1e-12:
            raise ValueError("H does not invert the fault block F2")


def _reordered_base(fm: FaultModel) -> StochasticLtiSystem:
    """Base plant with measurements in partition order."""
    part = fm.partition
    return StochasticLtiSystem(
        A=fm.base.A, B1=fm.base.B1, C1=fm.base.C1,
        C2=part.apply(fm.base.C2),
        D11=fm.base.D11,
        D2=part.apply(fm.base.D2),
        G1=fm.base.G1, G2=fm.base.G2,
    )


def fault_problem(
    fm: FaultModel, gamma, lam: float, eps: float, h1=None, mu=None
) -> lmi.LmiProblem:
    """Synthesis LMIs for the reconstruction filter of a fault model."""
    base = _reordered_base(fm)
    C21, _, D21, _ = fm.reordered_measurements()
    H = fm.weight(h1)
    return lmi.fault_synthesis_lmis(base, C21, D21, H, gamma, lam, eps, mu=mu)


def build_fault_augmented(
    fm: FaultModel, filt: DeconvolutionFilter, h1=None
) -> AugmentedSystem:
    """Reconstruction-error dynamics: the fault cancels exactly through
    H F = I, leaving e_f = H(Df C21 - C2) x + H Cf xh + H(Df D21 - D2) w."""
    base = _reordered_base(fm)
    n, q, r, m = base.dims
    C21, _, D21, _ = fm.reordered_measurements()
    H = fm.weight(h1)
    if filt.n != n or filt.n_inputs != r - fm.p or filt.n_outputs != r:
        raise ValueError(
            f"fault filter must map {r - fm.p} fault-free outputs to {r} "
            f"predicted outputs on {n} states; got "
            f"({filt.n}, {filt.n_inputs}, {filt.n_outputs})"
        )
    zn = np.zeros((n, n))
    A = np.block([[base.A, zn], [filt.Bf @ C21, filt.Af]])
    B = np.vstack([base.B1, filt.Bf @ D21])
    G1 = np.block([[base.G1, zn], [zn, zn]])
    G2 = np.vstack([base.G2, np.zeros((n, q))])
    C = np.hstack([H @ (filt.Df @ C21 - base.C2), H @ filt.Cf])
    D = H @ (filt.Df @ D21 - base.D2)
    return AugmentedSystem(A=A, B=B, G1=G1, G2=G2, C=C, D=D)


def synthesize_fault_filter(
    fm: FaultModel,
    h1=None,
    gamma: float | None = None,
    lam: float = 2.0,
    eps: float = 1e-3,
    mu: float | None = None,
):
    """Synthesize a reconstruction filter; returns the synthesis result.

    gamma=None minimizes the certified level.  Wrap the resulting filter
    with fault_estimator() for deployment.
    """
    from .synthesis import synthesize

    return synthesize("fault", fm, gamma, lam, eps=eps, mu=mu, h1=h1)


def fault_estimator(fm: FaultModel, filt: DeconvolutionFilter, h1=None) -> FaultEstimator:
    return FaultEstimator(filter=filt, H=fm.weight(h1), partition=fm.partition)


def reconstruct(est: FaultEstimator, y: np.ndarray, dt: float) -> np.ndarray:
    """Run the estimator over sampled outputs (rows in partition order).

    Forward-Euler realization at the sample rate: the filter state is
    driven by the fault-free channels and each sample yields
    fhat_k = H (y_k - yhat_k).  Use est.partition.apply() on raw samples
    first if they are in original sensor order.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if dt <= 0:
        raise ValueError("dt must be positive")
    r = est.partition.r
    if y.shape[1] != r:
        raise ValueError(f"output samples have {y.shape[1]} channels, expected {r}")
    filt = est.filter
    k_free = est.partition.n_faultfree
    xh = np.zeros(filt.n)
    fhat = np.empty((len(y), est.partition.p))
    for k, yk in enumerate(y):
        y1 = yk[:k_free]
        yhat = filt.Cf @ xh + filt.Df @ y1
        fhat[k] = est.H @ (yk - yhat)
        xh = xh + dt * (filt.Af @ xh + filt.Bf @ y1)
    return fhat


def pendulum_model(
    m: float = 0.5,
    l: float = 0.7,
    kappa: float = 0.5,
    zeta: float = 0.25,
    g: float = 9.81,
    k1: float = -29.7398,
    k2: float = -63.9668,
    R1: float = 1.0,
    R2: float = 0.4,
) -> FaultModel:
    """Stabilized inverted pendulum with damping noise and a faulty angle
    sensor.

    States are the inclination angle and its scaled rate (x2 = m l^2 d/dt
    angle).  The pre-designed feedback u = k1 x1 + k2 x2 is folded into the
    drift; the stochastic damping perturbation enters through the scalar
    Wiener channel.  Measurements: y1 = x2 + noise (intensity R2),
    y2 = x1 + fault.
    """
    if m <= 0 or l <= 0:
        raise ValueError("mass and length must be positive")
    if R1 < 0 or R2 < 0:
        raise ValueError("noise intensities must be nonnegative")
    ml2 = m * l * l
    A = np.array([
        [0.0, 1.0 / ml2],
        [-kappa + m * g * l + k1, -zeta / ml2 + k2],
    ])
    B1 = np.array([[0.0, 0.0], [np.sqrt(R1), 0.0]])
    G1 = np.array([[0.0, 0.0], [0.0, -1.0 / ml2]])
    G2 = np.zeros((2, 2))
    C2 = np.array([[0.0, 1.0], [1.0, 0.0]])
    D2 = np.array([[0.0, np.sqrt(R2)], [0.0, 0.0]])
    base = StochasticLtiSystem(
        A=A, B1=B1, C1=np.zeros((2, 2)), C2=C2,
        D11=np.zeros((2, 2)), D2=D2, G1=G1, G2=G2,
    )
    return FaultModel(base=base, F=np.array([[0.0], [1.0]]))


@dataclass(frozen=True)
class FaultProfile:
    """Piecewise-linear fault signal given by (time, value) breakpoints."""

    times: tuple
    values: tuple

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.atleast_2d(np.asarray(self.values, dtype=float))
        if v.shape[0] != t.size:
            v = v.T
        if v.shape[0] != t.size:
            raise ValueError("breakpoint times and values disagree")
        if np.any(np.diff(t) <= 0):
            raise ValueError("breakpoint times must increase")
        object.__setattr__(self, "times", tuple(t.tolist()))
        object.__setattr__(self, "values", tuple(map(tuple, v.tolist())))

    @property
    def channels(self) -> int:
        return len(self.values[0])

    def sample(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t)
        vals = np.asarray(self.values)
        out = np.empty((t.size, vals.shape[1]))
        for j in range(vals.shape[1]):
            out[:, j] = np.interp(t, np.asarray(self.times), vals[:, j])
        return out


def ramp_and_hold(
    rate: float = 0.1, hold: float = 0.5, start: float = 0.0, channels: int = 1
) -> FaultProfile:
    """Incipient fault: zero until start, then a ramp saturating at hold."""
    if rate <= 0:
        raise ValueError("ramp rate must be positive")
    t_sat = start + abs(hold) / rate
    lvl = [0.0] * channels
    sat = [hold] * channels
    times = [start, t_sat] if start == 0.0 else [0.0, start, t_sat]
    vals = [lvl, sat] if start == 0.0 else [lvl, lvl, sat]
    return FaultProfile(times=tuple(times), values=tuple(vals))


@dataclass(frozen=True)
class FaultRun:
    """Monte-Carlo run of plant + estimator with an injected sensor fault."""

    t: np.ndarray
    f: np.ndarray
    fhat: np.ndarray
    y: np.ndarray
    seed: int
    dt: float


def simulate_fault_scenario(
    fm: FaultModel,
    est: FaultEstimator,
    disturbance,
    fault: FaultProfile | None,
    dt: float,
    horizon: float,
    seed: int = 0,
) -> FaultRun:
    """Simulate the faulty plant and run reconstruction on its outputs.

    The plant integrates under the bounded disturbance and multiplicative
    noise; the fault is added to the measurements in original sensor order,
    then samples are reordered for the estimator.
    """
    from .simulate import euler_maruyama

    traj = euler_maruyama(fm.base, disturbance, dt, horizon, seed=seed)
    y_clean = traj.z  # measurement output of the base plant
    if fault is not None:
        f = fault.sample(traj.t)
    else:
        f = np.zeros((len(traj.t), fm.p))
    y_raw = y_clean + f @ fm.F.T
    y_part = est.partition.apply_samples(y_raw)
    fhat = reconstruct(est, y_part, dt)
    return FaultRun(t=traj.t, f=f, fhat=fhat, y=y_raw, seed=seed, dt=dt)
