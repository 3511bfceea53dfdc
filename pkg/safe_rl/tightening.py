"""
Constraint tightening for tube-based robust MPC.

The error e evolves as e+ = A_K e + w with A_K = A - BK, and the safety rows
become C_K e with C_K = C - DK. Stage tightenings are prefix sums of support
LPs over W in directions (C_K A_K^j)_i; the terminal set stacks C_K A_K^j
until the next block is redundant.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    EmptyTerminalSet,
    Infeasible,
    NotFinitelyDetermined,
    UnstableClosedLoop,
    Unbounded,
)
from .polytope import FacetPolytope, support, vertex_form, vertex_support
from .solver import QpProblem, solve

logger = logging.getLogger(__name__)

TERMINAL_CAP = 200
REDUNDANCY_TOL = 1e-9
STABILITY_TOL = 1e-10
FD_STEP = 1e-6

# parameter blocks whose profile sensitivity is computed by finite differences
FD_BLOCKS = ("C", "D", "K")


def spectral_radius(A: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(np.atleast_2d(A)))))


def closed_loop(A: np.ndarray, B: np.ndarray, C: np.ndarray, D: np.ndarray,
                K: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Return (A_K, C_K) = (A - BK, C - DK)."""
    return A - B @ K, C - D @ K


def check_stable(A_K: np.ndarray):
    """Raise UnstableClosedLoop unless the spectral radius of A_K is below one."""
    rho = spectral_radius(A_K)
    if rho >= 1.0 - STABILITY_TOL:
        raise UnstableClosedLoop(f"spectral radius of A - BK is {rho:.6f}")


class SummandTable:
    """Lazily grown table of support LPs s_{i,j} = support(W, (rows A_K^j)_i).

    Row i at index j also keeps the LP multipliers and maximizer so that
    sensitivities w.r.t. (M, m) can be summed alongside the values. Low
    dimensional bounded W is enumerated once and every entry is a vertex
    maximum; otherwise each entry is a support LP warm-started from the same
    row at the previous index.

    Raises:
        Infeasible: if W is empty
    """

    def __init__(self, rows: np.ndarray, A_K: np.ndarray, W: FacetPolytope):
        self.rows = np.atleast_2d(rows)
        self.A_K = A_K
        self.W = W
        self.values: List[np.ndarray] = []
        self.multipliers: List[np.ndarray] = []
        self.maximizers: List[np.ndarray] = []
        self._power_rows = self.rows.copy()
        self._warm: List[Optional[Tuple[int, ...]]] = [None] * self.rows.shape[0]
        self._cumsum = [np.zeros(self.rows.shape[0])]
        self._points = vertex_form(W)

    @property
    def length(self) -> int:
        return len(self.values)

    def _lp_entries(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        n_rows = self.rows.shape[0]
        vals = np.zeros(n_rows)
        mults = np.zeros((n_rows, self.W.n_facets))
        argmax = np.zeros((n_rows, self.W.dim))
        for i, direction in enumerate(self._power_rows):
            sv = support(self.W, direction, warm_start=self._warm[i])
            self._warm[i] = sv.active_set
            vals[i], mults[i], argmax[i] = sv.value, sv.multipliers, sv.maximizer
        return vals, mults, argmax

    def extend(self, length: int):
        while self.length < length:
            if self._points is not None:
                vals, mults, argmax = vertex_support(self.W, self._points, self._power_rows)
            else:
                vals, mults, argmax = self._lp_entries()
            self.values.append(vals)
            self.multipliers.append(mults)
            self.maximizers.append(argmax)
            self._cumsum.append(self._cumsum[-1] + vals)
            self._power_rows = self._power_rows @ self.A_K

    def d(self, k: int) -> np.ndarray:
        """Tightening d_k = sum_{j<k} s_j."""
        self.extend(k)
        return self._cumsum[k]

    def prefix(self, horizon: int) -> np.ndarray:
        """Stacked d_0..d_horizon, shape (horizon + 1, n_rows)."""
        self.extend(horizon)
        return np.vstack(self._cumsum[:horizon + 1])

    def summand_gradients(self, j: int) -> Tuple[np.ndarray, np.ndarray]:
        """d s_{., j} / d m (n_rows, n_f) and / d vec(M) (n_rows, n_f * n_w)."""
        self.extend(j + 1)
        mu = self.multipliers[j]
        w_star = self.maximizers[j]
        dM = -(mu[:, :, None] * w_star[:, None, :]).reshape(mu.shape[0], -1)
        return mu, dM


def tighten_stage(A: np.ndarray, B: np.ndarray, C: np.ndarray, D: np.ndarray,
                  K: np.ndarray, W: FacetPolytope, N: int,
                  check_stability: bool = True) -> np.ndarray:
    """Stage tightenings d_0..d_N (shape (N + 1, n_c)), d_0 = 0.

    Raises:
        UnstableClosedLoop: if A - BK is not Schur stable (when checked)
    """
    A_K, C_K = closed_loop(A, B, C, D, K)
    if check_stability:
        check_stable(A_K)
    return SummandTable(C_K, A_K, W).prefix(N)


def _stacked(blocks: List[np.ndarray]) -> np.ndarray:
    return np.vstack(blocks)


def _is_empty(G: np.ndarray, g: np.ndarray) -> bool:
    try:
        solve(QpProblem.lp(np.zeros(G.shape[1]), A_in=G, b_in=-g))
    except Infeasible:
        return True
    return False


def terminal_set(A: np.ndarray, B: np.ndarray, C: np.ndarray, D: np.ndarray,
                 K: np.ndarray, c_profile: Callable[[int], np.ndarray],
                 cap: int = TERMINAL_CAP,
                 tol: float = REDUNDANCY_TOL) -> Tuple[np.ndarray, np.ndarray, int]:
    """Finitely determined terminal set {x | G x + g <= 0}.

    Blocks C_K A_K^j with offsets c_profile(j) are stacked for j = 0..k'-1,
    where k' is the first index whose block is redundant for the stacked set.

    Args:
        A, B, C, D, K: System, safety rows and feedback gain
        c_profile: Offsets of block j (e.g. j -> c_bar + d_{N+j})
        cap: Largest admissible k'
        tol: Redundancy tolerance

    Returns:
        Tuple of (G, stacked offsets, k_prime)

    Raises:
        NotFinitelyDetermined: if k' exceeds the cap
        EmptyTerminalSet: if the stacked set is empty
    """
    A_K, C_K = closed_loop(A, B, C, D, K)
    check_stable(A_K)
    G_blocks = [C_K]
    g_blocks = [np.asarray(c_profile(0), dtype=float)]
    power = np.eye(A_K.shape[0])

    for j in range(1, cap + 1):
        power = power @ A_K
        rows = C_K @ power
        offsets = np.asarray(c_profile(j), dtype=float)
        current = FacetPolytope(_stacked(G_blocks), -np.concatenate(g_blocks))
        # block j is redundant when every new row is implied by blocks 0..j-1
        try:
            points = vertex_form(current)
        except Infeasible:
            raise EmptyTerminalSet(f"terminal set empty after {j} blocks")
        redundant = True
        for row, offset in zip(rows, offsets):
            if np.linalg.norm(row) <= 1e-14:
                if offset > tol:
                    raise EmptyTerminalSet(f"block {j} forces 0 <= {-offset:.3e}")
                continue
            if points is not None:
                value = float(np.max(points @ row))
            else:
                try:
                    value = support(current, row).value
                except Unbounded:
                    redundant = False
                    continue
                except Infeasible:
                    raise EmptyTerminalSet(f"terminal set empty after {j} blocks")
            if value + offset > tol:
                redundant = False
        if redundant:
            G, g = _stacked(G_blocks), np.concatenate(g_blocks)
            if _is_empty(G, g):
                raise EmptyTerminalSet("terminal set is empty")
            logger.debug(f"Terminal set finitely determined at k'={j} ({G.shape[0]} rows)")
            return G, g, j
        G_blocks.append(rows)
        g_blocks.append(offsets)

    raise NotFinitelyDetermined(f"no finite determination within {cap} blocks")


def tighten_terminal(G: np.ndarray, A: np.ndarray, B: np.ndarray, K: np.ndarray,
                     W: FacetPolytope, horizon: int) -> np.ndarray:
    """Terminal tightening h_r = sum_{l<horizon} support(W, (G_r A_K^l)')."""
    A_K = A - B @ K
    check_stable(A_K)
    if horizon == 0:
        return np.zeros(G.shape[0])
    return SummandTable(G, A_K, W).d(horizon)


def redundant_rows(G: np.ndarray, g: np.ndarray, tol: float = REDUNDANCY_TOL) -> List[int]:
    """Indices of rows of {x | G x + g <= 0} that are kept.

    Exact duplicates keep their first copy. Otherwise a row is dropped only when
    its support over the remaining rows is strictly below -g_i - tol.
    """
    norms = np.linalg.norm(G, axis=1)
    kept: List[int] = []
    seen: List[Tuple[np.ndarray, float]] = []
    for i in range(G.shape[0]):
        if norms[i] <= 1e-14:
            continue
        unit, offset = G[i] / norms[i], g[i] / norms[i]
        if any(np.allclose(unit, u, atol=1e-12) and abs(offset - o) <= 1e-12 for u, o in seen):
            continue
        seen.append((unit, offset))
        kept.append(i)

    # a row of a full-dimensional set is needed iff it touches some vertex
    points = None
    if len(kept) > 1:
        try:
            points = vertex_form(FacetPolytope(G[kept], -g[kept]))
        except Infeasible:
            points = None
    if points is not None:
        reach = np.max(G[kept] @ points.T, axis=1) + g[kept]
        return [i for i, r in zip(kept, reach) if r >= -tol]

    index = 0
    while index < len(kept):
        i = kept[index]
        others = [r for r in kept if r != i]
        if not others:
            break
        try:
            value = support(FacetPolytope(G[others], -g[others]), G[i]).value
        except (Unbounded, Infeasible):
            index += 1
            continue
        if value < -g[i] - tol:
            kept.pop(index)
        else:
            index += 1
    return kept


def remove_redundant(G: np.ndarray, g: np.ndarray,
                     tol: float = REDUNDANCY_TOL) -> Tuple[np.ndarray, np.ndarray]:
    """Drop rows that can never become active."""
    kept = redundant_rows(G, g, tol)
    return G[kept], g[kept]


@dataclass(frozen=True)
class BlockSensitivity:
    """Derivatives of the profile w.r.t. one parameter block (last axis)."""
    dc: np.ndarray   # (N + 1, n_c, p)
    dG: np.ndarray   # (n_G, n_s, p)
    dg: np.ndarray   # (n_G, p)


@dataclass(frozen=True)
class TighteningProfile:
    """Stage tightenings, terminal pair and their sensitivities.

    Kept terminal row r corresponds to block ``blocks[r]`` and safety row
    ``rows[r]``, i.e. G_r = (C_K A_K^blocks[r])_rows[r].
    """
    d: np.ndarray
    c: np.ndarray
    G: np.ndarray
    g_bar: np.ndarray
    h: np.ndarray
    g: np.ndarray
    k_prime: int
    horizon: int
    blocks: Tuple[int, ...]
    rows: Tuple[int, ...]
    A_K: np.ndarray
    C_K: np.ndarray
    sens: Dict[str, BlockSensitivity] = field(default_factory=dict)

    @property
    def kept_rows(self) -> Tuple[int, ...]:
        n_c = self.C_K.shape[0]
        return tuple(b * n_c + i for b, i in zip(self.blocks, self.rows))

    def to_dict(self) -> Dict:
        return {
            "d": self.d.tolist(),
            "c": self.c.tolist(),
            "G": self.G.tolist(),
            "g_bar": self.g_bar.tolist(),
            "h": self.h.tolist(),
            "g": self.g.tolist(),
            "k_prime": self.k_prime,
            "horizon": self.horizon,
        }


def tighten_pipeline(A: np.ndarray, B: np.ndarray, C: np.ndarray, D: np.ndarray,
                     c_bar: np.ndarray, K: np.ndarray, W: FacetPolytope, N: int,
                     blocks: Sequence[str] = (),
                     cap: int = TERMINAL_CAP,
                     tol: float = REDUNDANCY_TOL) -> TighteningProfile:
    """Full tightening: stage offsets, terminal set, redundancy removal, sensitivities.

    The terminal set is determined on the offsets c_bar + d_{N+j} since the
    state reaching it still carries the error set E_N.

    Args:
        A, B: Nominal model
        C, D, c_bar: Safety rows C s + D a + c_bar <= 0
        K: Error feedback gain
        W: Uncertainty set
        N: Horizon
        blocks: Parameter blocks ("M", "m", "c_bar", "C", "D", "K") needing sensitivities

    Returns:
        TighteningProfile
    """
    # stage tightenings
    A_K, C_K = closed_loop(A, B, C, D, K)
    check_stable(A_K)
    n_c = C_K.shape[0]
    table = SummandTable(C_K, A_K, W)
    table.prefix(N)

    # terminal set on the offsets of the error set E_{N+j}, then prune
    G_full, g_full, k_prime = terminal_set(
        A, B, C, D, K, lambda j: c_bar + table.d(N + j), cap=cap, tol=tol)
    kept = redundant_rows(G_full, g_full, tol)
    block_of = tuple(r // n_c for r in kept)
    row_of = tuple(r % n_c for r in kept)

    profile = _assemble(table, c_bar, N, k_prime, block_of, row_of)
    if blocks:
        sens = tightening_sensitivity(profile, table, A, B, C, D, c_bar, K, W, blocks)
        profile = replace(profile, sens=sens)
    logger.debug(f"Tightening profile: k'={k_prime}, {profile.G.shape[0]} terminal rows, "
                 f"d_N={np.array2string(profile.d[-1], precision=4)}")
    return profile


def reprofile(structure: TighteningProfile, A, B, C, D, c_bar, K, W: FacetPolytope,
              blocks: Sequence[str] = ()) -> TighteningProfile:
    """Profile of new parameters on the terminal structure of an existing profile.

    k' and the kept terminal rows (block, safety row) come from ``structure``;
    only offsets, terminal rows and sensitivities are recomputed, so no
    terminal set search or redundancy test is run.

    Raises:
        UnstableClosedLoop: if A - BK is not Schur stable
    """
    A_K, C_K = closed_loop(A, B, C, D, K)
    check_stable(A_K)
    N = structure.horizon
    table = SummandTable(C_K, A_K, W)
    profile = _assemble(table, c_bar, N, structure.k_prime, structure.blocks, structure.rows)
    if blocks:
        sens = tightening_sensitivity(profile, table, A, B, C, D, c_bar, K, W, blocks)
        profile = replace(profile, sens=sens)
    return profile


def _terminal_rows(table: SummandTable, c_bar: np.ndarray, N: int,
                   block_of: Sequence[int], row_of: Sequence[int]
                   ) -> Tuple[np.ndarray, np.ndarray]:
    """G_r = (C_K A_K^b)_i and g_r = c_bar_i + d_{N+b, i} for kept rows (b, i)."""
    n_s = table.A_K.shape[0]
    G = np.zeros((len(block_of), n_s))
    g = np.zeros(len(block_of))
    powers: Dict[int, np.ndarray] = {}
    for r, (b, i) in enumerate(zip(block_of, row_of)):
        if b not in powers:
            powers[b] = np.linalg.matrix_power(table.A_K, b)
        G[r] = table.rows[i] @ powers[b]
        g[r] = c_bar[i] + table.d(N + b)[i]
    return G, g


def _assemble(table: SummandTable, c_bar: np.ndarray, N: int, k_prime: int,
              block_of: Tuple[int, ...], row_of: Tuple[int, ...]) -> TighteningProfile:
    d = table.prefix(N)
    G, g = _terminal_rows(table, c_bar, N, block_of, row_of)
    g_bar = np.array([c_bar[i] + table.d(b)[i] for b, i in zip(block_of, row_of)])
    return TighteningProfile(
        d=d, c=c_bar + d, G=G, g_bar=g_bar, h=g - g_bar, g=g, k_prime=k_prime,
        horizon=N, blocks=tuple(block_of), rows=tuple(row_of), A_K=table.A_K, C_K=table.rows)


def profile_offsets(A, B, C, D, c_bar, K, W: FacetPolytope, N: int,
                    block_of: Sequence[int], row_of: Sequence[int]
                    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Recompute (c_0..c_N, G, g) for a fixed terminal structure."""
    A_K, C_K = closed_loop(A, B, C, D, K)
    table = SummandTable(C_K, A_K, W)
    c = c_bar + table.prefix(N)
    G, g = _terminal_rows(table, c_bar, N, block_of, row_of)
    return c, G, g


def tightening_sensitivity(profile: TighteningProfile, table: SummandTable,
                           A, B, C, D, c_bar, K, W: FacetPolytope,
                           blocks: Sequence[str]) -> Dict[str, BlockSensitivity]:
    """Derivatives of (c_k, G, g) w.r.t. the selected parameter blocks.

    M and m use the support LP multipliers (summed like the values); c_bar is
    an identity; C, D and K use central differences of the whole pipeline with
    k' and the kept rows held fixed.
    """
    N = profile.horizon
    n_c, n_s = profile.C_K.shape
    n_G = profile.G.shape[0]
    n_f, n_w = W.n_facets, W.dim
    result: Dict[str, BlockSensitivity] = {}

    if "m" in blocks or "M" in blocks:
        longest = N + max(profile.blocks, default=0)
        grads_m = [table.summand_gradients(j)[0] for j in range(longest)]
        grads_M = [table.summand_gradients(j)[1] for j in range(longest)]
        for name, grads, p in (("m", grads_m, n_f), ("M", grads_M, n_f * n_w)):
            if name not in blocks:
                continue
            cum = [np.zeros((n_c, p))]
            for grad in grads:
                cum.append(cum[-1] + grad)
            dc = np.stack(cum[:N + 1])
            dg = np.array([cum[N + b][i] for b, i in zip(profile.blocks, profile.rows)]).reshape(n_G, p)
            result[name] = BlockSensitivity(dc=dc, dG=np.zeros((n_G, n_s, p)), dg=dg)

    if "c_bar" in blocks:
        eye = np.eye(n_c)
        dc = np.broadcast_to(eye, (N + 1, n_c, n_c)).copy()
        dg = eye[list(profile.rows)].reshape(n_G, n_c)
        result["c_bar"] = BlockSensitivity(dc=dc, dG=np.zeros((n_G, n_s, n_c)), dg=dg)

    arrays = {"C": C, "D": D, "K": K}
    for name in FD_BLOCKS:
        if name not in blocks:
            continue
        base = arrays[name]
        p = base.size
        dc = np.zeros((N + 1, n_c, p))
        dG = np.zeros((n_G, n_s, p))
        dg = np.zeros((n_G, p))
        for e in range(p):
            outputs = []
            for sign in (1.0, -1.0):
                perturbed = dict(arrays)
                bumped = base.astype(float).copy()
                bumped.flat[e] += sign * FD_STEP
                perturbed[name] = bumped
                outputs.append(profile_offsets(A, B, perturbed["C"], perturbed["D"], c_bar,
                                               perturbed["K"], W, N, profile.blocks, profile.rows))
            (c_p, G_p, g_p), (c_m, G_m, g_m) = outputs
            dc[:, :, e] = (c_p - c_m) / (2 * FD_STEP)
            dG[:, :, e] = (G_p - G_m) / (2 * FD_STEP)
            dg[:, e] = (g_p - g_m) / (2 * FD_STEP)
        result[name] = BlockSensitivity(dc=dc, dG=dG, dg=dg)
    return result


def rpi_cloud(A_K: np.ndarray, W_vertices: np.ndarray, rng: np.random.Generator,
              n_points: int = 500, steps: int = 40) -> np.ndarray:
    """Samples of the reachable error set under random vertex disturbances."""
    W_vertices = np.atleast_2d(W_vertices)
    points = np.zeros((n_points, A_K.shape[0]))
    for _ in range(steps):
        picks = rng.integers(0, W_vertices.shape[0], size=n_points)
        points = points @ A_K.T + W_vertices[picks]
    return points
