"""Linear programming for l1 minimization under sup-norm constraints.

solve_l1_linf handles   min ||x||_1  s.t.  ||Ax - b||_inf <= lambda
by splitting x = u - v and running a dense two-phase tableau simplex with
Bland's anti-cycling rule. The solver is deliberately dependency-free and
bit-deterministic: identical inputs produce identical pivot sequences, and
optimal vertices carry exact zeros rather than shrunken near-zeros. lambda
may also be given per constraint row, which is how the trust-region and
box rows of the outer estimator join the moment rows.

Problem sizes here stay at desk scale (hundreds of rows and columns), where
the dense tableau is fast enough and easy to audit.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

PIVOT_TOL = 1e-10
FEAS_TOL = 1e-8
MAX_PIVOTS = 100_000
MAX_DENSE_ENTRIES = 10_000_000


class LpStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    ITERATION_LIMIT = "iteration_limit"


class LpSizeError(ValueError):
    """Problem exceeds the dense-solver size guard."""


@dataclass(frozen=True)
class L1LinfProblem:
    """Data for min ||x||_1 s.t. ||Ax - b||_inf <= lam; lam scalar or per-row."""

    A: np.ndarray
    b: np.ndarray
    lam: float | np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        b = np.asarray(self.b, dtype=float)
        if A.ndim != 2 or b.ndim != 1 or A.shape[0] != b.size:
            raise ValueError(f"A {A.shape} and b {b.shape} do not conform")
        lam = np.broadcast_to(np.asarray(self.lam, dtype=float), b.shape).copy()
        if np.any(lam < 0) or not np.all(np.isfinite(lam)):
            raise ValueError("lam must be finite and nonnegative")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
            raise ValueError("A and b must be finite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "lam", lam)


@dataclass(frozen=True)
class LpSolution:
    x: np.ndarray
    status: LpStatus
    objective: float
    max_violation: float
    dual: np.ndarray | None
    phase1_objective: float
    pivots: int


def _pivot(T: np.ndarray, i: int, j: int) -> None:
    T[i] = T[i] / T[i, j]
    col = T[:, j].copy()
    col[i] = 0.0
    T -= np.outer(col, T[i])
    T[:, j] = 0.0
    T[i, j] = 1.0


_DEGENERATE_STREAK = 12


def _run_simplex(T, basis, allowed, max_pivots):
    """Iterate pivots on the canonical tableau until optimal.

    Entering column: most negative reduced cost (Dantzig), ties to the lowest
    index. Leaving row: minimum ratio, ties to the lowest basic-variable
    index. After a streak of degenerate pivots with no objective progress the
    loop falls back to Bland's rule (lowest-index entering column), whose
    termination guarantee breaks any cycle; Dantzig selection resumes once the
    objective moves again. Every choice is deterministic, so identical inputs
    give identical pivot sequences.
    """
    m = len(basis)
    pivots = 0
    basis_arr = np.asarray(basis)
    stall = 0
    last_obj = T[-1, -1]
    while pivots < max_pivots:
        r = T[-1, :-1]
        eligible = (r < -FEAS_TOL) & allowed
        if not eligible.any():
            return LpStatus.OPTIMAL, pivots
        if stall >= _DEGENERATE_STREAK:
            j = int(np.flatnonzero(eligible)[0])  # Bland: lowest index
        else:
            masked = np.where(eligible, r, 0.0)
            j = int(masked.argmin())
        col = T[:m, j]
        pos = col > PIVOT_TOL
        if not pos.any():
            raise ArithmeticError("unbounded LP; not expected for this problem class")
        ratios = np.full(m, np.inf)
        ratios[pos] = T[:m, -1][pos] / col[pos]
        rmin = ratios.min()
        ties = np.flatnonzero(ratios <= rmin + 1e-12 * (1.0 + abs(rmin)))
        i = int(ties[np.argmin(basis_arr[ties])])
        _pivot(T, i, j)
        basis[i] = j
        basis_arr[i] = j
        pivots += 1
        # objective-row rhs holds -z, so minimization progress pushes it up
        neg_obj = T[-1, -1]
        if neg_obj > last_obj + 1e-12 * (1.0 + abs(last_obj)):
            stall = 0
            last_obj = neg_obj
        else:
            stall += 1
    return LpStatus.ITERATION_LIMIT, pivots


@dataclass(frozen=True)
class _RawLp:
    z: np.ndarray
    status: LpStatus
    objective: float
    dual: np.ndarray | None
    phase1_objective: float
    pivots: int


def solve_nonneg_lp(c, A_ub, b_ub, max_pivots: int = MAX_PIVOTS) -> _RawLp:
    """min c'z s.t. A_ub z <= b_ub, z >= 0, by two-phase dense simplex.

    Returns the primal solution, a dual vector y for the inequality rows
    (y <= 0 under this min/<= orientation, so that c - A_ub'y >= 0 at the
    optimum), the phase-1 objective, and the pivot count.
    """
    c = np.asarray(c, dtype=float)
    A_ub = np.asarray(A_ub, dtype=float)
    b_ub = np.asarray(b_ub, dtype=float)
    m, n = A_ub.shape
    if (m + 1) * (n + 2 * m + 1) > MAX_DENSE_ENTRIES:
        raise LpSizeError(f"dense tableau would need {(m + 1) * (n + 2 * m + 1)} entries")

    A = np.hstack([A_ub, np.eye(m)])
    b = b_ub.astype(float).copy()
    neg = b < 0
    A[neg] *= -1.0
    b[neg] *= -1.0
    nslack = n + m
    # artificials only where the flipped slack cannot start the basis
    art_rows = np.flatnonzero(neg)
    ncols = nslack + art_rows.size

    T = np.zeros((m + 1, ncols + 1))
    T[:m, :nslack] = A
    for a, i in enumerate(art_rows):
        T[i, nslack + a] = 1.0
    T[:m, -1] = b
    basis = [nslack + 0] * m  # placeholder, filled below
    art_of_row = {int(i): nslack + a for a, i in enumerate(art_rows)}
    for i in range(m):
        basis[i] = art_of_row.get(i, n + i)
    # phase-1 reduced costs for min(sum of artificials)
    T[-1, :nslack] = -A[art_rows].sum(axis=0)
    T[-1, -1] = -b[art_rows].sum()

    allowed = np.ones(ncols, dtype=bool)
    status, p1 = _run_simplex(T, basis, allowed, max_pivots)
    phase1_obj = float(-T[-1, -1])
    if status is LpStatus.ITERATION_LIMIT:
        return _RawLp(np.zeros(n), status, np.nan, None, phase1_obj, p1)
    if phase1_obj > FEAS_TOL:
        return _RawLp(np.zeros(n), LpStatus.INFEASIBLE, np.nan, None, phase1_obj, p1)

    # drive artificials out of the basis where a real pivot exists
    for i in range(m):
        if basis[i] >= nslack:
            row = T[i, :nslack]
            cand = np.flatnonzero(np.abs(row) > PIVOT_TOL)
            if cand.size:
                _pivot(T, i, int(cand[0]))
                basis[i] = int(cand[0])
            # otherwise the row is redundant; the artificial stays basic at 0

    allowed[nslack:] = False
    cfull = np.zeros(ncols)
    cfull[:n] = c
    T[-1, :-1] = cfull
    T[-1, -1] = 0.0
    for i, bi in enumerate(basis):
        if cfull[bi] != 0.0:
            T[-1] -= cfull[bi] * T[i]

    status, p2 = _run_simplex(T, basis, allowed, max_pivots - p1)
    z = np.zeros(ncols)
    for i, bi in enumerate(basis):
        z[bi] = T[i, -1]
    objective = float(cfull @ z)
    if status is LpStatus.ITERATION_LIMIT:
        return _RawLp(z[:n], status, objective, None, phase1_obj, p1 + p2)

    # duals from the final basis: B'y = c_B on the standard-form columns
    Afull = np.zeros((m, ncols))
    Afull[:, :nslack] = A
    for a, i in enumerate(art_rows):
        Afull[i, nslack + a] = 1.0
    B = Afull[:, basis]
    try:
        y = np.linalg.solve(B.T, cfull[list(basis)])
    except np.linalg.LinAlgError:
        y = np.linalg.lstsq(B.T, cfull[list(basis)], rcond=None)[0]
    y = np.where(neg, -y, y)  # undo row sign flips
    return _RawLp(z[:n], LpStatus.OPTIMAL, objective, y, phase1_obj, p1 + p2)


def solve_l1_linf(problem: L1LinfProblem, max_pivots: int = MAX_PIVOTS) -> LpSolution:
    """Minimize ||x||_1 subject to |a_i'x - b_i| <= lam_i for every row.

    Returns an LpSolution whose dual vector y certifies optimality in the
    usual Dantzig-selector sense: ||A'y||_inf <= 1, the dual objective
    b'y - sum_i lam_i |y_i| equals ||x||_1, and -y'(Ax - b) = sum_i lam_i |y_i|
    (complementary slackness). All three are exercised by the tests.
    """
    A, b, lam = problem.A, problem.b, problem.lam
    m, p = A.shape
    if m == 0:
        return LpSolution(np.zeros(p), LpStatus.OPTIMAL, 0.0, 0.0, np.zeros(0), 0.0, 0)

    # row equilibration: rescaling (a_i, b_i, lam_i) by 1/||a_i||_inf leaves the
    # feasible set unchanged but keeps pivot tolerances meaningful
    rownorm = np.abs(A).max(axis=1)
    live = rownorm > 0.0
    if not live.all():
        viol = np.abs(b[~live]) - lam[~live]
        if viol.size and viol.max() > FEAS_TOL:
            return LpSolution(np.zeros(p), LpStatus.INFEASIBLE, np.nan, np.inf, None, float(viol.max()), 0)
    scale = np.ones(m)
    scale[live] = 1.0 / rownorm[live]
    As = A[live] * scale[live, None]
    bs = b[live] * scale[live]
    lams = lam[live] * scale[live]
    ml = As.shape[0]

    c = np.ones(2 * p)
    A_ub = np.block([[As, -As], [-As, As]])
    b_ub = np.concatenate([bs + lams, lams - bs])
    raw = solve_nonneg_lp(c, A_ub, b_ub, max_pivots)
    x = raw.z[:p] - raw.z[p:]
    if raw.status is LpStatus.OPTIMAL:
        resid = A @ x - b
        max_violation = float((np.abs(resid) - lam).max())
        dual = np.zeros(m)
        dual[live] = (raw.dual[:ml] - raw.dual[ml:]) * scale[live]
        objective = float(np.abs(x).sum())
    else:
        x = np.zeros(p)
        max_violation = np.inf
        dual = None
        objective = np.nan
    return LpSolution(
        x=x,
        status=raw.status,
        objective=objective,
        max_violation=max_violation,
        dual=dual,
        phase1_objective=raw.phase1_objective,
        pivots=raw.pivots,
    )


def solve_row_family(
    A: np.ndarray,
    B: np.ndarray,
    lam: np.ndarray,
    max_pivots: int = MAX_PIVOTS,
) -> list[LpSolution]:
    """Solve min ||x_r||_1 s.t. ||x_r A - B_r||_inf <= lam_r for each row r of B.

    Equivalent to solve_l1_linf on (A', B_r') row by row; rows are independent
    and solved in order so results are deterministic. Statuses are returned
    per row rather than raised, so callers can name the offending row.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    lam = np.broadcast_to(np.asarray(lam, dtype=float), (B.shape[0],))
    if A.shape[1] != B.shape[1]:
        # x_r A has length A.shape[1]; B_r must match it
        raise ValueError(f"row family shapes do not conform: A {A.shape}, B {B.shape}")
    At = A.T.copy()
    return [
        solve_l1_linf(L1LinfProblem(A=At, b=B[r], lam=lam[r]), max_pivots)
        for r in range(B.shape[0])
    ]
