"""
Robust tube MPC as a parametrized Q-function.

The QP minimizes, over the nominal inputs u_0..u_{N-1} (and slacks),

    sum_k gamma^k ((xi_k - xi_r)' H (xi_k - xi_r) + h' xi_k)
        + gamma^N ((x_N - x_r)' P (x_N - x_r) + p' x_N) + rho * sum(sigma)

with xi_k = (x_k, u_k), nominal dynamics x_{k+1} = A x_k + B u_k + b, tightened
stage rows C x_k + D u_k + c_k <= sigma and the terminal rows G x_N + g <= sigma.
Rows involving the state are not imposed at k = 0 and rows on the input only
are never relaxed.
"""

import logging
from dataclasses import dataclass, replace
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionMismatch, Infeasible
from .polytope import FacetPolytope
from .solver import QpProblem, SolveResult, objective_sensitivity, solve
from .tightening import TERMINAL_CAP, TighteningProfile, reprofile, tighten_pipeline

logger = logging.getLogger(__name__)

CONDENSE_MAX_HORIZON = 30
SLACK_TOL = 1e-8
MAX_RHO_DOUBLINGS = 20
POSITIVITY_FLOOR = 1e-6

THETA_BLOCKS = ("H", "h", "P", "p", "C", "D", "c_bar", "K", "M", "m")
COST_BLOCKS = ("H", "h", "P", "p")
PROFILE_BLOCKS = ("C", "D", "c_bar", "K", "M", "m")

# inequality row kinds
ROW_INPUT = 0
ROW_STATE = 1
ROW_TERMINAL = 2
ROW_SLACK = 3
ROW_PROXIMITY = 4


def cholesky_factor(S: np.ndarray, floor: float = POSITIVITY_FLOOR) -> np.ndarray:
    """Lower-triangular factor of a positive definite matrix, diagonal >= floor."""
    L = np.linalg.cholesky(0.5 * (S + S.T))
    L[np.diag_indices_from(L)] = np.maximum(np.diag(L), floor)
    return L


@dataclass
class MpcParams:
    """Full parameter set of the robust MPC.

    H and P are stored through lower-triangular Cholesky factors so that their
    positive definiteness is structural.
    """
    L_H: np.ndarray
    h: np.ndarray
    L_P: np.ndarray
    p: np.ndarray
    A: np.ndarray
    B: np.ndarray
    b: np.ndarray
    C: np.ndarray
    D: np.ndarray
    c_bar: np.ndarray
    K: np.ndarray
    W: FacetPolytope
    gamma: float = 0.99
    rho: float = 1.0
    N: int = 20
    terminal_cap: int = TERMINAL_CAP

    @classmethod
    def from_matrices(cls, H, P, A, B, C, D, c_bar, K, W: FacetPolytope,
                      gamma: float = 0.99, N: int = 20, h=None, p=None, b=None,
                      rho: Optional[float] = None, terminal_cap: int = TERMINAL_CAP) -> "MpcParams":
        """Build parameters from cost matrices; rho defaults to 1e3 * lambda_max(H)."""
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
        n_s, n_a = B.shape
        H = np.atleast_2d(np.asarray(H, dtype=float))
        P = np.atleast_2d(np.asarray(P, dtype=float))
        C = np.asarray(C, dtype=float).reshape(-1, n_s)
        D = np.asarray(D, dtype=float).reshape(C.shape[0], n_a)
        params = cls(
            L_H=cholesky_factor(H),
            h=np.zeros(n_s + n_a) if h is None else np.asarray(h, dtype=float),
            L_P=cholesky_factor(P),
            p=np.zeros(n_s) if p is None else np.asarray(p, dtype=float),
            A=A, B=B,
            b=np.zeros(n_s) if b is None else np.asarray(b, dtype=float),
            C=C, D=D,
            c_bar=np.asarray(c_bar, dtype=float).ravel(),
            K=np.asarray(K, dtype=float).reshape(n_a, n_s),
            W=W.copy(),
            gamma=float(gamma),
            rho=float(rho) if rho is not None else 1e3 * float(np.max(np.linalg.eigvalsh(H))),
            N=int(N),
            terminal_cap=int(terminal_cap),
        )
        params.validate()
        return params

    @property
    def H(self) -> np.ndarray:
        return self.L_H @ self.L_H.T

    @property
    def P(self) -> np.ndarray:
        return self.L_P @ self.L_P.T

    @property
    def n_s(self) -> int:
        return self.A.shape[0]

    @property
    def n_a(self) -> int:
        return self.B.shape[1]

    @property
    def n_c(self) -> int:
        return self.C.shape[0]

    def validate(self):
        n_s, n_a, n_c = self.n_s, self.n_a, self.n_c
        expected = {
            "L_H": (self.L_H.shape, (n_s + n_a, n_s + n_a)),
            "h": (self.h.shape, (n_s + n_a,)),
            "L_P": (self.L_P.shape, (n_s, n_s)),
            "p": (self.p.shape, (n_s,)),
            "b": (self.b.shape, (n_s,)),
            "D": (self.D.shape, (n_c, n_a)),
            "c_bar": (self.c_bar.shape, (n_c,)),
            "K": (self.K.shape, (n_a, n_s)),
        }
        for name, (actual, wanted) in expected.items():
            if actual != wanted:
                raise DimensionMismatch(f"{name} has shape {actual}, expected {wanted}")
        if self.W.dim != n_s:
            raise DimensionMismatch(f"W lives in R^{self.W.dim}, state in R^{n_s}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not (self.rho > 0 and np.isfinite(self.rho)):
            raise ValueError(f"rho must be positive and finite, got {self.rho}")
        if self.N < 1:
            raise ValueError(f"horizon must be >= 1, got {self.N}")
        if self.terminal_cap < 1:
            raise ValueError(f"terminal cap must be >= 1, got {self.terminal_cap}")

    def copy(self) -> "MpcParams":
        return replace(self, **{
            name: getattr(self, name).copy()
            for name in ("L_H", "h", "L_P", "p", "A", "B", "b", "C", "D", "c_bar", "K", "W")
        })


@dataclass(frozen=True)
class ThetaSelection:
    """Which parameter blocks are learnable, in canonical order.

    H and P enter through the lower-triangular entries of their Cholesky factors;
    matrices are flattened row-major.
    """
    blocks: Tuple[str, ...] = ("M", "m")

    def __post_init__(self):
        unknown = [b for b in self.blocks if b not in THETA_BLOCKS]
        if unknown:
            raise ValueError(f"unknown or non-learnable parameter blocks: {unknown}")
        object.__setattr__(self, "blocks", tuple(b for b in THETA_BLOCKS if b in self.blocks))

    @property
    def profile_blocks(self) -> Tuple[str, ...]:
        return tuple(b for b in self.blocks if b in PROFILE_BLOCKS)

    def _block_value(self, params: MpcParams, name: str) -> np.ndarray:
        if name == "H":
            return params.L_H[np.tril_indices(params.L_H.shape[0])]
        if name == "P":
            return params.L_P[np.tril_indices(params.L_P.shape[0])]
        if name == "M":
            return params.W.M.ravel()
        if name == "m":
            return params.W.m.ravel()
        return getattr(params, name).ravel()

    def slices(self, params: MpcParams) -> Dict[str, slice]:
        out, start = {}, 0
        for name in self.blocks:
            size = self._block_value(params, name).size
            out[name] = slice(start, start + size)
            start += size
        return out

    def size(self, params: MpcParams) -> int:
        return sum(self._block_value(params, name).size for name in self.blocks)

    def vector(self, params: MpcParams) -> np.ndarray:
        if not self.blocks:
            return np.zeros(0)
        return np.concatenate([self._block_value(params, name) for name in self.blocks])

    def apply(self, params: MpcParams, theta: np.ndarray) -> MpcParams:
        """Return a copy of params with the selected entries taken from theta."""
        new = params.copy()
        for name, sl in self.slices(params).items():
            values = np.asarray(theta[sl], dtype=float)
            if name in ("H", "P"):
                attr = "L_H" if name == "H" else "L_P"
                L = np.zeros_like(getattr(new, attr))
                L[np.tril_indices(L.shape[0])] = values
                setattr(new, attr, L)
            elif name == "M":
                new.W = FacetPolytope(values.reshape(new.W.M.shape), new.W.m)
            elif name == "m":
                new.W = FacetPolytope(new.W.M, values.copy())
            else:
                setattr(new, name, values.reshape(getattr(new, name).shape))
        return new


@dataclass(frozen=True)
class Reference:
    state: np.ndarray
    action: np.ndarray

    @classmethod
    def zero(cls, n_s: int, n_a: int) -> "Reference":
        return cls(np.zeros(n_s), np.zeros(n_a))

    @property
    def xi(self) -> np.ndarray:
        return np.concatenate([self.state, self.action])


@dataclass
class QpLayout:
    """Variable and row bookkeeping for a built MPC QP."""
    condensed: bool
    relaxed: bool
    Sx: np.ndarray          # (N + 1, n_s, n_y): x_k = Sx[k] y + sx[k]
    sx: np.ndarray          # (N + 1, n_s)
    Su: np.ndarray          # (N, n_a, n_y): u_k = Su[k] y
    sigma: slice
    aux: slice
    row_kind: np.ndarray
    row_stage: np.ndarray
    row_index: np.ndarray

    def states(self, y: np.ndarray) -> np.ndarray:
        return np.einsum('kij,j->ki', self.Sx, y) + self.sx

    def actions(self, y: np.ndarray) -> np.ndarray:
        return np.einsum('kij,j->ki', self.Su, y)


@dataclass
class PolicyEval:
    """Evaluation of the MPC at a state (and optionally a fixed first action)."""
    V: Optional[float]
    Q: Optional[float]
    action: np.ndarray
    grad_V: Optional[np.ndarray]
    grad_Q: Optional[np.ndarray]
    slack_total: float
    feasible_unrelaxed: bool
    rho: float
    predicted_states: np.ndarray
    predicted_actions: np.ndarray
    solve: SolveResult
    layout: QpLayout
    licq: bool
    strict_complementarity: bool


def make_profile(params: MpcParams, blocks: Sequence[str] = (),
                 structure: Optional[TighteningProfile] = None) -> TighteningProfile:
    """Tightening profile of params with sensitivities for the given blocks.

    With a structure, k' and the kept terminal rows are reused from it and
    only the offsets are recomputed; otherwise the full pipeline runs with
    the terminal cap of params.
    """
    if structure is not None:
        return reprofile(structure, params.A, params.B, params.C, params.D, params.c_bar,
                         params.K, params.W, blocks=tuple(blocks))
    return tighten_pipeline(params.A, params.B, params.C, params.D, params.c_bar,
                            params.K, params.W, params.N, blocks=tuple(blocks),
                            cap=params.terminal_cap)


def stage_cost(H: np.ndarray, s: np.ndarray, a: np.ndarray, ref: Reference) -> float:
    """Tracking stage cost (xi - xi_r)' H (xi - xi_r)."""
    dev = np.concatenate([s, np.atleast_1d(a)]) - ref.xi
    return float(dev @ H @ dev)


def _is_input_row(C_row: np.ndarray) -> bool:
    return not np.any(C_row != 0.0)


def _variable_maps(params: MpcParams, s: np.ndarray, condensed: bool):
    N, n_s, n_a = params.N, params.n_s, params.n_a
    A, B, b = params.A, params.B, params.b
    if condensed:
        n_core = N * n_a
        Su = np.zeros((N, n_a, n_core))
        for k in range(N):
            Su[k, :, k * n_a:(k + 1) * n_a] = np.eye(n_a)
        Sx = np.zeros((N + 1, n_s, n_core))
        sx = np.zeros((N + 1, n_s))
        sx[0] = s
        for k in range(N):
            Sx[k + 1] = A @ Sx[k] + B @ Su[k]
            sx[k + 1] = A @ sx[k] + b
        return Sx, sx, Su, None, None

    n_x = n_s * (N + 1)
    n_core = n_x + N * n_a
    Sx = np.zeros((N + 1, n_s, n_core))
    sx = np.zeros((N + 1, n_s))
    Su = np.zeros((N, n_a, n_core))
    for k in range(N + 1):
        Sx[k, :, k * n_s:(k + 1) * n_s] = np.eye(n_s)
    for k in range(N):
        Su[k, :, n_x + k * n_a:n_x + (k + 1) * n_a] = np.eye(n_a)
    A_dyn = [Sx[0]]
    b_dyn = [s]
    for k in range(N):
        A_dyn.append(Sx[k + 1] - A @ Sx[k] - B @ Su[k])
        b_dyn.append(b)
    return Sx, sx, Su, np.vstack(A_dyn), np.concatenate(b_dyn)


def _pad(arr: np.ndarray, extra: int) -> np.ndarray:
    pad = [(0, 0)] * (arr.ndim - 1) + [(0, extra)]
    return np.pad(arr, pad)


def build_qp(params: MpcParams,
             profile: TighteningProfile,
             s: np.ndarray,
             reference: Optional[Reference] = None,
             a: Optional[np.ndarray] = None,
             q_perturb: Optional[np.ndarray] = None,
             mode: str = "linear",
             proximity_weight: float = 100.0,
             relaxed: bool = True,
             condensed: Optional[bool] = None,
             rho: Optional[float] = None) -> Tuple[QpProblem, QpLayout]:
    """Build the (slack-relaxed) robust MPC QP.

    Args:
        params: MPC parameters
        profile: Tightening profile consistent with params (same W, K)
        s: Current state
        reference: Tracking reference (zero by default)
        a: Fixed first action for Q evaluation
        q_perturb: Exploration perturbation
        mode: "linear" (q' u_0) or "proximity" (weight * |u_0 - q|_1)
        proximity_weight: Weight of the proximity term
        relaxed: Add slacks to state-involving rows
        condensed: Eliminate states (default: N <= 30)
        rho: Penalty weight override

    Returns:
        Tuple of (QpProblem, QpLayout)

    Raises:
        DimensionMismatch: on inconsistent shapes
    """
    N, n_s, n_a, n_c = params.N, params.n_s, params.n_a, params.n_c
    s = np.asarray(s, dtype=float).ravel()
    if s.shape[0] != n_s:
        raise DimensionMismatch(f"state has {s.shape[0]} entries, expected {n_s}")
    if profile.c.shape != (N + 1, n_c) or profile.G.shape[1:] != (n_s,):
        raise DimensionMismatch("tightening profile does not match the MPC dimensions")
    if a is not None:
        a = np.atleast_1d(np.asarray(a, dtype=float)).ravel()
        if a.shape[0] != n_a:
            raise DimensionMismatch(f"action has {a.shape[0]} entries, expected {n_a}")
    if q_perturb is not None:
        q_perturb = np.atleast_1d(np.asarray(q_perturb, dtype=float)).ravel()
        if q_perturb.shape[0] != n_a:
            raise DimensionMismatch(f"perturbation has {q_perturb.shape[0]} entries, expected {n_a}")
        if mode not in ("linear", "proximity"):
            raise ValueError(f"unknown exploration mode: {mode}")
    reference = reference or Reference.zero(n_s, n_a)
    condensed = N <= CONDENSE_MAX_HORIZON if condensed is None else condensed
    rho = params.rho if rho is None else rho

    state_rows = [i for i in range(n_c) if not _is_input_row(params.C[i])]
    n_G = profile.G.shape[0]
    n_sig = ((N - 1) * len(state_rows) + n_G) if relaxed else 0
    n_aux = n_a if (q_perturb is not None and mode == "proximity") else 0

    Sx, sx, Su, A_dyn, b_dyn = _variable_maps(params, s, condensed)
    n_core = Sx.shape[2]
    n_y = n_core + n_sig + n_aux
    Sx, Su = _pad(Sx, n_sig + n_aux), _pad(Su, n_sig + n_aux)
    sig = slice(n_core, n_core + n_sig)
    aux = slice(n_core + n_sig, n_y)

    # cost
    H, P = params.H, params.P
    H_y = np.zeros((n_y, n_y))
    g_y = np.zeros(n_y)
    const = 0.0
    xi_r = reference.xi
    for k in range(N):
        weight = params.gamma ** k
        Xi = np.vstack([Sx[k], Su[k]])
        xi0 = np.concatenate([sx[k], np.zeros(n_a)])
        dev = xi0 - xi_r
        H_y += 2.0 * weight * Xi.T @ H @ Xi
        g_y += weight * (2.0 * Xi.T @ H @ dev + Xi.T @ params.h)
        const += weight * (dev @ H @ dev + params.h @ xi0)
    weight = params.gamma ** N
    dev = sx[N] - reference.state
    H_y += 2.0 * weight * Sx[N].T @ P @ Sx[N]
    g_y += weight * (2.0 * Sx[N].T @ P @ dev + Sx[N].T @ params.p)
    const += weight * (dev @ P @ dev + params.p @ sx[N])
    g_y[sig] += rho
    if q_perturb is not None:
        if mode == "linear":
            g_y += Su[0].T @ q_perturb
        else:
            g_y[aux] += proximity_weight

    # inequalities
    rows, rhs, kinds, stages, indices = [], [], [], [], []

    def add(row, bound, kind, stage, index):
        rows.append(row)
        rhs.append(bound)
        kinds.append(kind)
        stages.append(stage)
        indices.append(index)

    # stage rows; state rows from k = 1 get one slack each when relaxed
    slack_col = n_core
    for k in range(N):
        for i in range(n_c):
            input_only = i not in state_rows
            if not input_only and k == 0:
                continue
            row = params.C[i] @ Sx[k] + params.D[i] @ Su[k]
            bound = -profile.c[k, i] - params.C[i] @ sx[k]
            if not input_only and relaxed:
                row = row.copy()
                row[slack_col] = -1.0
                slack_col += 1
            add(row, bound, ROW_INPUT if input_only else ROW_STATE, k, i)
    # terminal rows
    for r in range(n_G):
        row = profile.G[r] @ Sx[N]
        if relaxed:
            row = row.copy()
            row[slack_col] = -1.0
            slack_col += 1
        add(row, -profile.g[r] - profile.G[r] @ sx[N], ROW_TERMINAL, N, r)
    # sigma >= 0
    for j in range(n_sig):
        row = np.zeros(n_y)
        row[n_core + j] = -1.0
        add(row, 0.0, ROW_SLACK, -1, j)
    # |u_0 - q| <= t
    if n_aux:
        for j in range(n_a):
            t_row = np.zeros(n_y)
            t_row[aux.start + j] = -1.0
            add(Su[0][j] + t_row, q_perturb[j], ROW_PROXIMITY, 0, j)
            add(-Su[0][j] + t_row, -q_perturb[j], ROW_PROXIMITY, 0, j)

    # equalities
    eq_rows, eq_rhs = [], []
    if A_dyn is not None:
        eq_rows.append(_pad(A_dyn, n_sig + n_aux))
        eq_rhs.append(b_dyn)
    if a is not None:
        eq_rows.append(Su[0])
        eq_rhs.append(a)

    qp = QpProblem(
        H=H_y, g=g_y,
        A_eq=np.vstack(eq_rows) if eq_rows else None,
        b_eq=np.concatenate(eq_rhs) if eq_rhs else None,
        A_in=np.vstack(rows) if rows else None,
        b_in=np.array(rhs) if rows else None,
        const=const,
    )
    layout = QpLayout(
        condensed=condensed, relaxed=relaxed, Sx=Sx, sx=sx, Su=Su, sigma=sig, aux=aux,
        row_kind=np.array(kinds, dtype=int), row_stage=np.array(stages, dtype=int),
        row_index=np.array(indices, dtype=int),
    )
    return qp, layout


def _initial_point(qp: QpProblem, layout: QpLayout, params: MpcParams, s: np.ndarray,
                   a: Optional[np.ndarray], q_perturb: Optional[np.ndarray]) -> np.ndarray:
    """Zero inputs (u_0 = a if given), rolled-out states and large enough slacks."""
    N = params.N
    inputs = np.zeros((N, params.n_a))
    if a is not None:
        inputs[0] = a
    y = np.zeros(qp.n_vars)
    for k in range(N):
        y += layout.Su[k].T @ inputs[k]
    if not layout.condensed:
        x = np.asarray(s, dtype=float).copy()
        for k in range(N + 1):
            y += layout.Sx[k].T @ x
            if k < N:
                x = params.A @ x + params.B @ inputs[k] + params.b
    if q_perturb is not None and layout.aux.stop > layout.aux.start:
        y[layout.aux] = np.abs(inputs[0] - q_perturb) + 1.0
    if layout.sigma.stop > layout.sigma.start:
        residual = qp.A_in @ y - qp.b_in
        relaxed = np.flatnonzero(np.isin(layout.row_kind, (ROW_STATE, ROW_TERMINAL)))
        for r in relaxed:
            col = np.flatnonzero(qp.A_in[r, layout.sigma])
            if col.size:
                y[layout.sigma.start + col[0]] = max(residual[r], 0.0) + 1.0
    return y


def _slack_floor(layout: QpLayout) -> Optional[Tuple[int, ...]]:
    rows = np.flatnonzero(layout.row_kind == ROW_SLACK)
    return tuple(int(r) for r in rows) if rows.size else None


def _unrelaxed_feasible(params: MpcParams, profile: TighteningProfile, s: np.ndarray,
                        a: Optional[np.ndarray], condensed: Optional[bool]) -> bool:
    qp, _ = build_qp(params, profile, s, a=a, relaxed=False, condensed=condensed)
    feasibility = QpProblem.lp(np.zeros(qp.n_vars), A_in=qp.A_in, b_in=qp.b_in,
                               A_eq=qp.A_eq, b_eq=qp.b_eq)
    try:
        solve(feasibility)
    except Infeasible:
        return False
    return True


def _solve_relaxed(params: MpcParams, profile: TighteningProfile, s: np.ndarray,
                   reference: Optional[Reference], a: Optional[np.ndarray],
                   q_perturb: Optional[np.ndarray], mode: str, proximity_weight: float,
                   condensed: Optional[bool], warm_start: Optional[Sequence[int]]):
    """Solve the relaxed QP, doubling rho while slack is used on a feasible problem."""
    rho = params.rho
    feasible_unrelaxed = True
    for _ in range(MAX_RHO_DOUBLINGS + 1):
        qp, layout = build_qp(params, profile, s, reference, a=a, q_perturb=q_perturb,
                              mode=mode, proximity_weight=proximity_weight,
                              condensed=condensed, rho=rho)
        start = _initial_point(qp, layout, params, s, a, q_perturb)
        # without a previous active set, guess that no slack is used
        guess = warm_start if warm_start is not None else _slack_floor(layout)
        res = solve(qp, warm_start=guess, initial_point=start)
        slack = float(np.sum(res.y_star[layout.sigma]))
        if slack <= SLACK_TOL:
            return qp, layout, res, rho, True
        feasible_unrelaxed = _unrelaxed_feasible(params, profile, s, a, condensed)
        if not feasible_unrelaxed:
            break
        logger.warning(f"Slack {slack:.3e} used on a feasible problem, doubling rho to {2 * rho:.3e}")
        rho *= 2.0
        warm_start = None
    return qp, layout, res, rho, feasible_unrelaxed


def lagrangian_gradient(params: MpcParams, profile: TighteningProfile,
                        selection: ThetaSelection, layout: QpLayout,
                        reference: Optional[Reference], y: np.ndarray,
                        mu: np.ndarray) -> np.ndarray:
    """Gradient of the MPC Lagrangian w.r.t. the selected parameters at (y, mu).

    Raises:
        ValueError: if the profile lacks sensitivities for a selected block
    """
    missing = [b for b in selection.profile_blocks if b not in profile.sens]
    if missing:
        raise ValueError(f"tightening profile lacks sensitivities for {missing}")
    N, n_s, n_a = params.N, params.n_s, params.n_a
    reference = reference or Reference.zero(n_s, n_a)
    slices = selection.slices(params)
    grad = np.zeros(selection.size(params))
    xs, us = layout.states(y), layout.actions(y)

    if "H" in slices or "h" in slices:
        S = np.zeros((n_s + n_a, n_s + n_a))
        xi_sum = np.zeros(n_s + n_a)
        for k in range(N):
            weight = params.gamma ** k
            xi = np.concatenate([xs[k], us[k]])
            dev = xi - reference.xi
            S += weight * np.outer(dev, dev)
            xi_sum += weight * xi
        if "H" in slices:
            grad[slices["H"]] = (2.0 * S @ params.L_H)[np.tril_indices(n_s + n_a)]
        if "h" in slices:
            grad[slices["h"]] = xi_sum
    weight = params.gamma ** N
    if "P" in slices:
        dev = xs[N] - reference.state
        grad[slices["P"]] = (2.0 * weight * np.outer(dev, dev) @ params.L_P)[np.tril_indices(n_s)]
    if "p" in slices:
        grad[slices["p"]] = weight * xs[N]

    for r in np.flatnonzero(mu > 0.0):
        kind, k, i = layout.row_kind[r], layout.row_stage[r], layout.row_index[r]
        if kind in (ROW_INPUT, ROW_STATE):
            if "C" in slices:
                grad[slices["C"]][i * n_s:(i + 1) * n_s] += mu[r] * xs[k]
            if "D" in slices:
                grad[slices["D"]][i * n_a:(i + 1) * n_a] += mu[r] * us[k]
            for name in selection.profile_blocks:
                grad[slices[name]] += mu[r] * profile.sens[name].dc[k, i]
        elif kind == ROW_TERMINAL:
            for name in selection.profile_blocks:
                sens = profile.sens[name]
                grad[slices[name]] += mu[r] * (xs[N] @ sens.dG[i] + sens.dg[i])
    return grad


def _policy_eval(qp: QpProblem, layout: QpLayout, res: SolveResult, rho: float,
                 feasible_unrelaxed: bool, fixed_action: bool,
                 grad: Optional[np.ndarray]) -> PolicyEval:
    value = res.objective
    return PolicyEval(
        V=None if fixed_action else value,
        Q=value,
        action=layout.actions(res.y_star)[0],
        grad_V=None if fixed_action else grad,
        grad_Q=grad,
        slack_total=float(np.sum(res.y_star[layout.sigma])),
        feasible_unrelaxed=feasible_unrelaxed,
        rho=rho,
        predicted_states=layout.states(res.y_star),
        predicted_actions=layout.actions(res.y_star),
        solve=res,
        layout=layout,
        licq=res.licq,
        strict_complementarity=res.strict_complementarity,
    )


def eval_q(params: MpcParams, profile: TighteningProfile, s: np.ndarray, a: np.ndarray,
           reference: Optional[Reference] = None,
           selection: Optional[ThetaSelection] = None,
           condensed: Optional[bool] = None,
           warm_start: Optional[Sequence[int]] = None) -> PolicyEval:
    """Q_theta(s, a): the MPC value with the first input fixed to a.

    With a selection the gradient dQ/dtheta is returned in ``grad_Q``.

    Raises:
        Infeasible: if the fixed action violates an unrelaxed input row
        WeakActivation: if a gradient is requested without strict complementarity
    """
    qp, layout, res, rho, feasible = _solve_relaxed(
        params, profile, s, reference, np.atleast_1d(a), None, "linear", 0.0, condensed, warm_start)
    grad = None
    if selection is not None:
        grad = objective_sensitivity(res, lambda y, lam, mu: lagrangian_gradient(
            params, profile, selection, layout, reference, y, mu))
    return _policy_eval(qp, layout, res, rho, feasible, True, grad)


def eval_v_policy(params: MpcParams, profile: TighteningProfile, s: np.ndarray,
                  reference: Optional[Reference] = None,
                  selection: Optional[ThetaSelection] = None,
                  condensed: Optional[bool] = None,
                  warm_start: Optional[Sequence[int]] = None) -> PolicyEval:
    """V_theta(s) and the policy pi_theta(s) = u_0*.

    Raises:
        Infeasible: if an unrelaxed input row cannot be met
        WeakActivation: if a gradient is requested without strict complementarity
    """
    qp, layout, res, rho, feasible = _solve_relaxed(
        params, profile, s, reference, None, None, "linear", 0.0, condensed, warm_start)
    grad = None
    if selection is not None:
        grad = objective_sensitivity(res, lambda y, lam, mu: lagrangian_gradient(
            params, profile, selection, layout, reference, y, mu))
    return _policy_eval(qp, layout, res, rho, feasible, False, grad)


def explore_action(params: MpcParams, profile: TighteningProfile, s: np.ndarray,
                   q_perturb: np.ndarray, mode: str = "linear",
                   reference: Optional[Reference] = None,
                   proximity_weight: float = 100.0,
                   condensed: Optional[bool] = None) -> PolicyEval:
    """Exploratory action: the robust MPC with a perturbed first-stage cost.

    The returned action satisfies every constraint the unperturbed MPC imposes.
    """
    qp, layout, res, rho, feasible = _solve_relaxed(
        params, profile, s, reference, None, q_perturb, mode, proximity_weight, condensed, None)
    return _policy_eval(qp, layout, res, rho, feasible, False, None)
