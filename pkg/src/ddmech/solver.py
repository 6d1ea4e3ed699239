"""Data-driven solvers: fixed-point projection iteration, the small-instance
enumeration oracle, and the conditioned time marches.

One time step solves

    min |z - y|^2 + cost(y)   over z in E(t), y in D

with E(t) the compatible-equilibrated set and D the product of per-element
data sets. The fixed-point iteration alternates the two closest-point maps
(data association, then projection onto E) and stops when the data
association repeats; the global objective is non-increasing along the
iteration because each half-step is an exact minimization. The enumeration
oracle checks every data assignment and is the ground truth on instances
small enough to afford it.

Marches rebuild the per-element data sets every step, conditioned on the
previously accepted local states; randomness is split per (step, element)
from the run seed, so trajectories are bit-reproducible and elements could
be generated concurrently.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import (
    ConditioningState,
    GeneratorSpec,
    HistoryRepository,
    LocalDataSet,
    StackedSets,
    batch_nearest,
    generate_plastic_set,
    generate_sls_set,
    history_cost_dataset,
    stack_sets,
)
from .materials import PlasticParams, SlsParams, plastic_return_map, sls_affine_coefficients
from .phase import GlobalMetric, GlobalState
from .truss import ConstraintSystem, LoadProgram, TrussMesh, assemble

__all__ = [
    "SolverConfig",
    "StepResult",
    "Trajectory",
    "fixed_point_solve",
    "enumerate_global_min",
    "time_march",
    "history_matching_march",
    "export_trajectory_csv",
    "trajectory_summary",
    "write_summary_csv",
]


@dataclass(frozen=True)
class SolverConfig:
    """Iteration limits, initialization policy and tolerances.

    ``init_strategy`` picks the marches' warm start: "response" equilibrates
    against the empirical response read off the step's own data sets (nearest
    stress by strain, local secant slope) and starts the walk there, which
    keeps the association in the globally consistent basin; "predicted"
    advances the previous accepted state by the elastic strain estimate of
    the step, "previous" reuses the state unchanged, "zero" starts virgin.
    ``swap_polish`` runs an exact-gain single-element reassignment descent
    whenever the alternating walk stops, restarting the walk from any
    improved association; it only ever lowers the same objective.
    """

    max_fixed_point_iters: int = 200
    init_strategy: str = "response"
    equilibrium_tol: float = 1e-9
    abort_on_nonconvergence: bool = False
    rng_seed: int = 0
    swap_polish: bool = True

    def __post_init__(self) -> None:
        if int(self.max_fixed_point_iters) < 1:
            raise ValueError("max_fixed_point_iters must be positive")
        object.__setattr__(self, "max_fixed_point_iters", int(self.max_fixed_point_iters))
        if self.init_strategy not in ("response", "predicted", "previous", "zero"):
            raise ValueError(f"unknown init strategy {self.init_strategy!r}")
        if float(self.equilibrium_tol) <= 0.0:
            raise ValueError("equilibrium_tol must be positive")


@dataclass
class StepResult:
    """Converged (or best-found) state of one solve.

    ``objective_history`` records the global objective (square distance plus
    fidelity cost) after every projection; it is non-increasing. For cost-free
    data sets it coincides with the square distance.
    """

    z: GlobalState
    y: GlobalState
    assignment: np.ndarray
    iterations: int
    distance_sq: float
    converged: bool
    objective_history: list[float] = field(default_factory=list)
    equilibrium_residual: float = 0.0
    displacements: np.ndarray | None = None


def _as_arrays(sets: Sequence[LocalDataSet] | StackedSets):
    """Returns (stacked | None, eps_list, sig_list, cost_list)."""
    if isinstance(sets, StackedSets):
        m = sets.eps.shape[0]
        eps_list = [sets.eps[e] for e in range(m)]
        sig_list = [sets.sig[e] for e in range(m)]
        cost_list = [None if sets.costs is None else sets.costs[e] for e in range(m)]
        return sets, eps_list, sig_list, cost_list
    stacked = stack_sets(sets)
    eps_list = [d.strains[:, 0] for d in sets]
    sig_list = [d.stresses[:, 0] for d in sets]
    cost_list = [d.costs for d in sets]
    return stacked, eps_list, sig_list, cost_list


def _nearest_all(eps, sig, stacked, eps_list, sig_list, cost_list, gm):
    """Per-element association; batch when the sets stack, scan otherwise."""
    if stacked is not None:
        return batch_nearest(eps, sig, stacked, gm.c_diag, gm.c_inv_diag)
    m = len(eps_list)
    idx = np.zeros(m, dtype=np.int64)
    c, ci = gm.c_diag, gm.c_inv_diag
    for e in range(m):
        de = eps_list[e] - eps[e]
        ds = sig_list[e] - sig[e]
        d2 = c[e] * de * de + ci[e] * ds * ds
        if cost_list[e] is not None:
            d2 = d2 + cost_list[e]
        idx[e] = np.argmin(d2)
    return idx


def _gather(idx, stacked, eps_list, sig_list, cost_list):
    if stacked is not None:
        rows = np.arange(idx.size)
        y_eps = stacked.eps[rows, idx]
        y_sig = stacked.sig[rows, idx]
        cost = 0.0 if stacked.costs is None else stacked.costs[rows, idx]
        return y_eps, y_sig, cost
    y_eps = np.array([eps_list[e][i] for e, i in enumerate(idx)])
    y_sig = np.array([sig_list[e][i] for e, i in enumerate(idx)])
    cost = np.array(
        [0.0 if cost_list[e] is None else cost_list[e][i] for e, i in enumerate(idx)]
    )
    return y_eps, y_sig, cost


def _objective(sys, eps, sig, y_eps, y_sig, cost) -> tuple[float, float]:
    """(square distance, square distance + weighted fidelity cost)."""
    de = eps - y_eps
    ds = sig - y_sig
    d2 = float(np.sum(sys.weights * (sys.c * de * de + sys.c_inv * ds * ds)))
    total = d2 + float(np.sum(sys.weights * cost))
    return d2, total


def _swap_polish(sys, eps_list, sig_list, cost_list, f, g, y_eps0, y_sig0, assign0):
    """Greedy exact-gain reassignment descent: single swaps, then pair moves.

    Both projections are affine in the assigned points, so switching one
    element changes the step objective by a quadratic whose coefficients
    come from the factorized metric stiffness: every candidate is scored in
    O(1) and an accepted switch updates the residuals in O(m). When no
    single switch improves, coordinated pair moves are scored the same way
    (the cross term is one off-diagonal leverage entry), and when pairs
    stall too, joint blocks of the most inconsistent elements are tried
    against an exact re-projection, which unlocks equilibrium-coupled
    stalls lower-order moves cannot leave. Only strictly improving moves
    are taken, so ties never move and a global minimizer is a fixed point.
    Returns the improved assignment, or None.
    """
    m = sys.n_elements
    b = sys.b_free
    w = sys.weights
    c = sys.c
    wc = w * c
    s = sys.solve_k(b.T)  # K^-1 B^T
    infl = b @ s  # per-element leverage of a unit data shift
    hdiag = np.diag(infl)
    a_eps = np.maximum(wc * (1.0 - wc * hdiag), 0.0)
    a_sig = (w * w) * hdiag
    y_eps = np.array(y_eps0, dtype=float)
    y_sig = np.array(y_sig0, dtype=float)
    assign = assign0.copy()
    x_eps = s @ (wc * (y_eps - g))
    r_eps = b @ x_eps + g - y_eps
    x_sig = sys.solve_k(f - b.T @ (w * y_sig))
    r_sig = c * (b @ x_sig)
    cur_cost = np.array(
        [0.0 if cost_list[e] is None else float(cost_list[e][assign[e]]) for e in range(m)]
    )
    phi = float(np.sum(w * (c * r_eps * r_eps + r_sig * r_sig / c + cur_cost)))
    tol = 1e-12 * max(1.0, phi)

    def gain_vec(e):
        de = eps_list[e] - y_eps[e]
        ds = sig_list[e] - y_sig[e]
        gain = (
            (-2.0 * wc[e] * r_eps[e]) * de
            + a_eps[e] * de * de
            + (-2.0 * (w[e] / c[e]) * r_sig[e]) * ds
            + a_sig[e] * ds * ds
        )
        if cost_list[e] is not None:
            gain = gain + w[e] * (cost_list[e] - cost_list[e][assign[e]])
        return gain, de, ds

    def apply_move(e, j, de, ds):
        dee = de[j]
        dss = ds[j]
        r_eps[:] += (dee * wc[e]) * infl[:, e]
        r_eps[e] -= dee
        r_sig[:] -= (dss * w[e]) * (c * infl[:, e])
        y_eps[e] = eps_list[e][j]
        y_sig[e] = sig_list[e][j]
        assign[e] = j

    changed = False
    for _ in range(60):
        swept_any = False
        for _sweep in range(60):
            accepted = False
            for e in range(m):
                gain, de, ds = gain_vec(e)
                j = int(np.argmin(gain))
                if j == assign[e] or not (gain[j] < -tol):
                    continue
                apply_move(e, j, de, ds)
                accepted = True
            if accepted:
                swept_any = True
                changed = True
            else:
                break
        # pair stage: the most mismatched elements, each with its best few
        # alternatives, scored jointly
        loc = w * (c * r_eps * r_eps + r_sig * r_sig / c)
        k_short = min(32, m)
        short = np.sort(np.argpartition(-loc, k_short - 1)[:k_short])
        cand: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = {}
        for e in short:
            gain, de, ds = gain_vec(e)
            n_l = min(6, gain.size)
            top = np.sort(np.argpartition(gain, n_l - 1)[:n_l])
            cand[e] = (top, gain[top], de[top], ds[top])
        best_pair = None
        for i1 in range(k_short):
            e1 = int(short[i1])
            t1, g1, de1, ds1 = cand[e1]
            for i2 in range(i1 + 1, k_short):
                e2 = int(short[i2])
                t2, g2, de2, ds2 = cand[e2]
                cross = 2.0 * infl[e1, e2] * (
                    (w[e1] * w[e2]) * np.outer(ds1, ds2)
                    - (wc[e1] * wc[e2]) * np.outer(de1, de2)
                )
                total = g1[:, None] + g2[None, :] + cross
                flat = int(np.argmin(total))
                val = float(total.flat[flat])
                if best_pair is None or val < best_pair[0]:
                    j1, j2 = divmod(flat, t2.size)
                    best_pair = (val, e1, int(t1[j1]), e2, int(t2[j2]))
        if best_pair is not None and best_pair[0] < -tol:
            _, e1, j1, e2, j2 = best_pair
            for e, j in ((e1, j1), (e2, j2)):
                de = eps_list[e] - y_eps[e]
                ds = sig_list[e] - y_sig[e]
                apply_move(e, j, de, ds)
            changed = True
            continue
        # subset stage: the objective is quadratic in the assigned points,
        # so the exact change of any joint move is its single gains plus
        # pairwise cross terms; enumerate full candidate products over small
        # groups of the most inconsistent elements
        order = np.lexsort((np.arange(m), -loc))
        n_grp = 6
        sub_best = None
        for g0 in (0, n_grp):
            grp = [int(e) for e in order[g0 : g0 + n_grp]]
            if len(grp) < 2:
                continue
            cands = []
            for e in grp:
                gain, de, ds = gain_vec(e)
                n_c = min(4, gain.size - 1)
                top = np.argpartition(gain, n_c)[: n_c + 1] if n_c > 0 else np.array([0])
                js = np.unique(np.append(top, assign[e]))
                cands.append((e, js, gain[js], de, ds))
            shape = tuple(ct[1].size for ct in cands)
            total = np.zeros(shape)
            for i, (e, js, gi, de, ds) in enumerate(cands):
                ax = [1] * len(shape)
                ax[i] = shape[i]
                total += gi.reshape(ax)
            for i in range(len(cands)):
                ei, ji, _, dei, dsi = cands[i]
                for j in range(i + 1, len(cands)):
                    ej, jj, _, dej, dsj = cands[j]
                    cross = 2.0 * infl[ei, ej] * (
                        (w[ei] * w[ej]) * np.outer(dsi[ji], dsj[jj])
                        - (wc[ei] * wc[ej]) * np.outer(dei[ji], dej[jj])
                    )
                    ax = [1] * len(shape)
                    ax[i] = shape[i]
                    ax[j] = shape[j]
                    total += cross.reshape(ax)
            flat = int(np.argmin(total))
            val = float(total.flat[flat])
            if val < -tol and (sub_best is None or val < sub_best[0]):
                combo = np.unravel_index(flat, shape)
                moves = []
                for i, (e, js, _, de, ds) in enumerate(cands):
                    jn = int(js[combo[i]])
                    if jn != assign[e]:
                        moves.append((e, jn, de, ds))
                if moves:
                    sub_best = (val, moves)
        if sub_best is not None:
            for e, jn, de, ds in sub_best[1]:
                apply_move(e, jn, de, ds)
            changed = True
            continue
        # block stage: stalls that survive subset moves are collective, so
        # jointly send the most inconsistent elements to their own best
        # candidates and keep the block only if an exact re-projection
        # confirms the objective drops
        cost_now = sum(
            0.0 if cost_list[e] is None else w[e] * float(cost_list[e][assign[e]])
            for e in range(m)
        )
        phi_now = float(np.sum(w * (c * r_eps * r_eps + r_sig * r_sig / c))) + cost_now
        targets = np.empty(m, dtype=np.int64)
        for e in range(m):
            gain, _, _ = gain_vec(e)
            targets[e] = int(np.argmin(gain))
        best_block = None
        for kb in (2, 4, 8, 16, 32):
            if kb > m:
                break
            trial = assign.copy()
            sel = order[:kb]
            trial[sel] = targets[sel]
            if np.array_equal(trial, assign):
                continue
            ye, ys, cost_t = _gather(trial, None, eps_list, sig_list, cost_list)
            eps_t, sig_t, _ = sys.project_arrays(ye, ys, f, g)
            _, obj_t = _objective(sys, eps_t, sig_t, ye, ys, cost_t)
            if obj_t < phi_now - tol and (best_block is None or obj_t < best_block[0]):
                best_block = (obj_t, trial)
        if best_block is None:
            break
        assign = best_block[1]
        y_eps, y_sig, _ = _gather(assign, None, eps_list, sig_list, cost_list)
        x_eps = s @ (wc * (y_eps - g))
        r_eps = b @ x_eps + g - y_eps
        x_sig = sys.solve_k(f - b.T @ (w * y_sig))
        r_sig = c * (b @ x_sig)
        changed = True
    return assign if changed else None


def _empirical_response_init(
    sys: ConstraintSystem,
    stacked: StackedSets,
    f: np.ndarray,
    g: np.ndarray,
    eps_start: np.ndarray,
    *,
    max_iters: int = 20,
    rel_tol: float = 1e-10,
) -> GlobalState | None:
    """Equilibrium solve against the empirical response read off the data.

    Each element's set is treated as a response curve: stress is looked up
    at the nearest sampled strain and the tangent is a local secant over a
    few sorted neighbours. Newton steps on that curve land the state near
    the assignment a globally consistent walk would reach, using nothing
    but the data itself. Returns None when the sets are too small or a
    tangent solve fails; callers then fall back to an elastic predictor.
    """
    n = stacked.eps.shape[1]
    if n < 8:
        return None
    m = sys.n_elements
    b = sys.b_free
    w = sys.weights
    order = np.argsort(stacked.eps, axis=1)
    es = np.take_along_axis(stacked.eps, order, axis=1)
    ss = np.take_along_axis(stacked.sig, order, axis=1)
    rows = np.arange(m)
    k = min(4, (n - 1) // 2)
    c_ref = float(np.max(sys.c))
    # start from the metric-least-squares displacement fit of the predictor
    u = sys.solve_k(b.T @ (w * sys.c * (eps_start - g)))
    eps = b @ u + g
    f_scale = max(1.0, float(np.linalg.norm(f)))
    best = None
    for _ in range(max_iters):
        idx = np.empty(m, dtype=np.int64)
        for e in range(m):
            j = int(np.searchsorted(es[e], eps[e]))
            if j >= n:
                j = n - 1
            elif j > 0 and eps[e] - es[e, j - 1] <= es[e, j] - eps[e]:
                j -= 1
            idx[e] = j
        sig_hat = ss[rows, idx]
        r = f - b.T @ (w * sig_hat)
        res = float(np.linalg.norm(r)) / f_scale
        if best is None or res < best[0]:
            best = (res, eps.copy(), sig_hat.copy())
        if res < rel_tol:
            break
        lo = np.clip(idx - k, 0, n - 1)
        hi = np.clip(idx + k, 0, n - 1)
        de = es[rows, hi] - es[rows, lo]
        dsg = ss[rows, hi] - ss[rows, lo]
        slope = np.where(de > 0.0, dsg / np.where(de > 0.0, de, 1.0), c_ref)
        slope = np.clip(slope, 1e-3 * c_ref, 1e3 * c_ref)
        kt = (b.T * (w * slope)) @ b
        try:
            du = np.linalg.solve(kt, r)
        except np.linalg.LinAlgError:
            return None
        u = u + du
        eps = b @ u + g
    if best is None:
        return None
    return GlobalState(best[1], best[2])


def fixed_point_solve(
    sys: ConstraintSystem,
    sets: Sequence[LocalDataSet] | StackedSets,
    gm: GlobalMetric,
    f: np.ndarray | None = None,
    init: GlobalState | None = None,
    cfg: SolverConfig | None = None,
    *,
    t: float | None = None,
    init_assignment: np.ndarray | None = None,
) -> StepResult:
    """Alternating closest-point iteration for one time step.

    Stops as soon as the data association repeats (the iterate is then a
    fixed point of the composed map) or the state itself repeats bitwise.
    On hitting the iteration cap, returns the lowest-objective iterate seen
    with ``converged=False``.
    """
    cfg = cfg or SolverConfig()
    if not gm.is_scalar:
        raise ValueError("the projection solver requires scalar local metrics")
    m = sys.n_elements
    f = np.zeros(sys.n_free) if f is None else np.asarray(f, dtype=float).reshape(-1)
    if f.size != sys.n_free:
        raise ValueError(f"force vector must have {sys.n_free} entries")
    g = sys.affine_strain(t)
    stacked, eps_list, sig_list, cost_list = _as_arrays(sets)
    if len(eps_list) != m:
        raise ValueError(f"{m} data sets required, got {len(eps_list)}")

    if init is None:
        eps = np.zeros(m)
        sig = np.zeros(m)
    else:
        if init.n_elements != m or init.dim != 1:
            raise ValueError("initial state shape does not match the system")
        eps = init.strain[:, 0].copy()
        sig = init.stress[:, 0].copy()
    u = np.zeros(sys.n_free)
    prev_assign = None
    if init_assignment is not None:
        prev_assign = np.asarray(init_assignment, dtype=np.int64).reshape(-1).copy()
        if prev_assign.size != m:
            raise ValueError("init_assignment must hold one index per element")
        y_eps, y_sig, _ = _gather(prev_assign, stacked, eps_list, sig_list, cost_list)
        eps, sig, u = sys.project_arrays(y_eps, y_sig, f, g)

    history: list[float] = []
    best = None
    converged = False
    iterations = 0
    budget = cfg.max_fixed_point_iters
    assign = prev_assign
    y_eps = y_sig = None
    cost = 0.0
    for _round in range(64 if cfg.swap_polish else 1):
        seen: set[bytes] = set()
        if prev_assign is not None:
            seen.add(prev_assign.tobytes())
        walk_done = False
        cycled = False
        while budget > 0:
            budget -= 1
            iterations += 1
            assign = _nearest_all(eps, sig, stacked, eps_list, sig_list, cost_list, gm)
            y_eps, y_sig, cost = _gather(assign, stacked, eps_list, sig_list, cost_list)
            if prev_assign is not None and np.array_equal(assign, prev_assign):
                walk_done = True
                break
            if assign.tobytes() in seen:
                # deterministic map revisiting an assignment: a limit cycle on
                # an objective plateau; accept its best member
                walk_done = True
                cycled = True
                break
            seen.add(assign.tobytes())
            eps_new, sig_new, u_new = sys.project_arrays(y_eps, y_sig, f, g)
            d2, obj = _objective(sys, eps_new, sig_new, y_eps, y_sig, cost)
            history.append(obj)
            if best is None or obj < best[0]:
                best = (obj, d2, eps_new, sig_new, u_new, assign, y_eps, y_sig)
            repeated = np.array_equal(eps_new, eps) and np.array_equal(sig_new, sig)
            eps, sig, u = eps_new, sig_new, u_new
            prev_assign = assign
            if repeated:
                walk_done = True
                break
        converged = walk_done
        if walk_done and not cycled:
            d2, obj = _objective(sys, eps, sig, y_eps, y_sig, cost)
            if not history or obj < history[-1]:
                history.append(obj)
            if best is None or obj <= best[0]:
                best = (obj, d2, eps, sig, u, assign, y_eps, y_sig)
        if best is None:
            break
        if cycled or not walk_done:
            obj, d2, eps, sig, u, assign, y_eps, y_sig = best
            prev_assign = assign
        if not cfg.swap_polish:
            break
        polished = _swap_polish(
            sys, eps_list, sig_list, cost_list, f, g, best[6], best[7], best[5]
        )
        if polished is None:
            break
        y_eps, y_sig, cost = _gather(polished, stacked, eps_list, sig_list, cost_list)
        eps, sig, u = sys.project_arrays(y_eps, y_sig, f, g)
        d2, obj = _objective(sys, eps, sig, y_eps, y_sig, cost)
        if obj >= best[0]:
            break
        history.append(obj)
        best = (obj, d2, eps, sig, u, polished, y_eps, y_sig)
        assign = polished
        prev_assign = polished
        if budget <= 0:
            # improved association left unconfirmed by a walk restart
            converged = False
            break

    obj, d2, eps, sig, u, assign, y_eps, y_sig = best
    residual = sys.equilibrium_residual(sig, f)
    return StepResult(
        z=GlobalState(eps, sig),
        y=GlobalState(y_eps, y_sig),
        assignment=np.asarray(assign, dtype=np.int64),
        iterations=iterations,
        distance_sq=d2,
        converged=converged,
        objective_history=history if history else [obj],
        equilibrium_residual=residual,
        displacements=u,
    )


def enumerate_global_min(
    sys: ConstraintSystem,
    sets: Sequence[LocalDataSet] | StackedSets,
    gm: GlobalMetric,
    f: np.ndarray | None = None,
    *,
    t: float | None = None,
    budget: int = 1_000_000,
) -> StepResult:
    """Exhaustive minimum over all data assignments (small instances only).

    Assignments are ranked by a vectorized batched projection, then the
    near-minimal candidates are re-evaluated through the same scalar path the
    fixed-point solver uses, so the returned objective is float-identical to
    a fixed-point solve that lands on the same assignment. Ties resolve to
    the lexicographically smallest assignment.
    """
    if not gm.is_scalar:
        raise ValueError("the projection solver requires scalar local metrics")
    m = sys.n_elements
    f = np.zeros(sys.n_free) if f is None else np.asarray(f, dtype=float).reshape(-1)
    g = sys.affine_strain(t)
    _, eps_list, sig_list, cost_list = _as_arrays(sets)
    if len(eps_list) != m:
        raise ValueError(f"{m} data sets required, got {len(eps_list)}")
    counts = np.array([a.size for a in eps_list], dtype=np.int64)
    total = 1
    for c in counts:  # python ints cannot overflow, unlike np.prod
        total *= int(c)
    if total > budget:
        raise ValueError(
            f"{total} assignments exceed the enumeration budget {budget}"
        )

    wc = sys.weights * sys.c
    w = sys.weights
    b = sys.b_free

    def batch_objective(ids: np.ndarray) -> np.ndarray:
        multi = np.array(np.unravel_index(ids, counts), dtype=np.int64).T  # (chunk, M)
        eps_c = np.empty(multi.shape)
        sig_c = np.empty(multi.shape)
        cost_c = np.zeros(multi.shape)
        for e in range(m):
            eps_c[:, e] = eps_list[e][multi[:, e]]
            sig_c[:, e] = sig_list[e][multi[:, e]]
            if cost_list[e] is not None:
                cost_c[:, e] = cost_list[e][multi[:, e]]
        uu = sys.solve_k(b.T @ ((wc * (eps_c - g)).T))
        eps_p = (b @ uu).T + g
        lam = sys.solve_k(f[:, None] - b.T @ ((w * sig_c).T))
        sig_p = sig_c + (sys.c[None, :] * (b @ lam).T)
        de = eps_p - eps_c
        ds = sig_p - sig_c
        return np.sum(
            w * (sys.c * de * de + sys.c_inv * ds * ds + cost_c), axis=1
        )

    chunk = max(1, min(total, 4_000_000 // max(m, 1)))
    best_obj = np.inf
    for lo in range(0, total, chunk):
        ids = np.arange(lo, min(lo + chunk, total), dtype=np.int64)
        best_obj = min(best_obj, float(np.min(batch_objective(ids))))
    candidates: list[int] = []
    cutoff = best_obj * (1.0 + 1e-9) + 1e-300
    for lo in range(0, total, chunk):
        ids = np.arange(lo, min(lo + chunk, total), dtype=np.int64)
        obj = batch_objective(ids)
        candidates.extend(int(i) for i in ids[obj <= cutoff])

    best = None
    for lin in sorted(candidates):
        idx = np.array(np.unravel_index(lin, counts), dtype=np.int64)
        y_eps = np.array([eps_list[e][idx[e]] for e in range(m)])
        y_sig = np.array([sig_list[e][idx[e]] for e in range(m)])
        cost = np.array(
            [0.0 if cost_list[e] is None else cost_list[e][idx[e]] for e in range(m)]
        )
        eps_p, sig_p, uu = sys.project_arrays(y_eps, y_sig, f, g)
        d2, obj = _objective(sys, eps_p, sig_p, y_eps, y_sig, cost)
        if best is None or obj < best[0]:
            best = (obj, d2, idx, eps_p, sig_p, uu, y_eps, y_sig)
    obj, d2, idx, eps_p, sig_p, uu, y_eps, y_sig = best
    return StepResult(
        z=GlobalState(eps_p, sig_p),
        y=GlobalState(y_eps, y_sig),
        assignment=idx,
        iterations=0,
        distance_sq=d2,
        converged=True,
        objective_history=[obj],
        equilibrium_residual=sys.equilibrium_residual(sig_p, f),
        displacements=uu,
    )


@dataclass
class Trajectory:
    """Per-step states and solver diagnostics of one march."""

    times: np.ndarray
    strain: np.ndarray  # (T, M)
    stress: np.ndarray  # (T, M)
    assignment: np.ndarray  # (T, M), -1 where not applicable
    iterations: np.ndarray  # (T,)
    distance_sq: np.ndarray  # (T,)
    converged: np.ndarray  # (T,) bool
    equilibrium_residual: np.ndarray  # (T,)
    displacements: np.ndarray  # (T, n_free)
    q_acc: np.ndarray  # (T, M)
    gm: GlobalMetric

    @property
    def n_steps(self) -> int:
        return self.times.size

    @property
    def n_elements(self) -> int:
        return self.strain.shape[1]

    def state(self, k: int) -> GlobalState:
        return GlobalState(self.strain[k], self.stress[k])


def _check_times(times) -> np.ndarray:
    t = np.asarray(times, dtype=float).reshape(-1)
    if t.size < 1:
        raise ValueError("at least one time step is required")
    if not np.all(np.isfinite(t)):
        raise ValueError("times must be finite")
    if t.size > 1 and not np.all(np.diff(t) > 0.0):
        raise ValueError("time grid must be strictly increasing")
    return t


def _window_halfwidths(
    g: GeneratorSpec, est: np.ndarray, creep: np.ndarray
) -> np.ndarray:
    rule = g.window
    if rule.halfwidth is not None:
        return np.full(est.size, float(rule.halfwidth) * g.window_scale)
    hw = np.maximum(
        rule.incr_factor * np.maximum(np.abs(est), np.abs(creep)),
        max(rule.band_factor * g.band_width, rule.floor),
    )
    hw = hw * g.window_scale
    if np.any(hw <= 0.0):
        raise ValueError("sampling window collapsed to zero; set floor or halfwidth")
    return hw


def _stacked_step_sets(
    g: GeneratorSpec,
    eps_prev: np.ndarray,
    sig_prev: np.ndarray,
    q_acc: np.ndarray,
    est: np.ndarray,
    dt: float | None,
    step: int,
) -> StackedSets:
    """Vectorized per-step draw of all element sets.

    Matches the public per-element generators exactly: grids are anchored at
    the predicted strain, and every element's noise stream is seeded from
    (run seed, step, element) so the result is independent of batching.
    """
    m = eps_prev.size
    n = g.n_points
    centers = eps_prev + est
    ab = None
    if isinstance(g.law, SlsParams):
        cond = ConditioningState(eps_prev, sig_prev)
        ab = sls_affine_coefficients(cond, g.law, dt)
    if ab is not None and dt is not None:
        creep = (sig_prev - ab[0]) / ab[1] - eps_prev
    else:
        creep = np.zeros(m)
    hw = _window_halfwidths(g, est, creep)
    if g.sampling == "grid":
        steps = hw / max(n // 2, 1)
        eps = centers[:, None] + (np.arange(n) - n // 2)[None, :] * steps[:, None]
        if g.band_width > 0.0:
            for e in range(m):
                rng = np.random.default_rng(
                    np.random.SeedSequence([int(g.rng_seed), int(step), int(e)])
                )
                eps[e] += rng.uniform(-0.5 * g.band_width, 0.5 * g.band_width, n)
    else:
        eps = np.empty((m, n))
        for e in range(m):
            rng = np.random.default_rng(
                np.random.SeedSequence([int(g.rng_seed), int(step), int(e)])
            )
            eps[e] = centers[e] + rng.uniform(-hw[e], hw[e], n)
    if ab is not None:
        a, b = ab
        sig = a[:, None] + b * eps
    else:
        p = g.law
        q_prev = ((p.e0 + p.e1) * eps_prev - sig_prev) / p.e1
        sig, _, _ = plastic_return_map(eps, q_prev[:, None], q_acc[:, None], p)
    return StackedSets(eps, sig, None)


def time_march(
    mesh: TrussMesh,
    gm: GlobalMetric,
    generator: GeneratorSpec,
    loads: LoadProgram | None,
    times,
    cfg: SolverConfig | None = None,
    *,
    sys: ConstraintSystem | None = None,
    dataset_sink: Callable[[int, Sequence[LocalDataSet]], None] | None = None,
) -> Trajectory:
    """Incremental data-driven solve over a monotone time grid.

    Every step regenerates the per-element data sets conditioned on the
    previously accepted states; the first step uses the instantaneous
    (rate-free) response so a suddenly applied load or displacement yields
    the correct initial state. The step solution warm-starts from the
    elastically advanced previous state (see SolverConfig.init_strategy).
    """
    cfg = cfg or SolverConfig()
    t_grid = _check_times(times)
    system = sys if sys is not None else assemble(mesh, gm)
    m = system.n_elements
    plastic = isinstance(generator.law, PlasticParams)

    T = t_grid.size
    out_eps = np.zeros((T, m))
    out_sig = np.zeros((T, m))
    out_assign = np.full((T, m), -1, dtype=np.int64)
    out_iters = np.zeros(T, dtype=np.int64)
    out_dist = np.zeros(T)
    out_conv = np.zeros(T, dtype=bool)
    out_resid = np.zeros(T)
    out_u = np.zeros((T, system.n_free))
    out_qacc = np.zeros((T, m))

    eps_prev = np.zeros(m)
    sig_prev = np.zeros(m)
    q_acc = np.zeros(m)
    drift_eps = np.zeros(m)
    drift_sig = np.zeros(m)
    f_prev: np.ndarray | None = None
    t_prev: float | None = None
    for k in range(T):
        t = float(t_grid[k])
        f = loads.forces(t) if loads is not None else np.zeros(system.n_free)
        dt = None if k == 0 else float(t_grid[k] - t_grid[k - 1])
        est = system.elastic_strain_increment(f, f_prev, t, t_prev)
        stacked = _stacked_step_sets(generator, eps_prev, sig_prev, q_acc, est, dt, k)
        if dataset_sink is not None:
            sets = [
                LocalDataSet(stacked.eps[e], stacked.sig[e]) for e in range(m)
            ]
            dataset_sink(k, sets)
        if cfg.init_strategy == "zero":
            inits = [GlobalState.zeros(m)]
        elif cfg.init_strategy == "previous":
            inits = [GlobalState(eps_prev, sig_prev)]
        else:
            # warm start at the elastic estimate plus the previous step's
            # inelastic increment, so steady flow never has to climb out of
            # the previous step's basin
            inits = [
                GlobalState(
                    eps_prev + est + drift_eps,
                    sig_prev + gm.c_diag * est + drift_sig,
                )
            ]
            if cfg.init_strategy == "response":
                resp = _empirical_response_init(
                    system, stacked, f, system.affine_strain(t), eps_prev + est
                )
                if resp is not None:
                    inits.append(resp)
        step = None
        for ini in inits:
            cand = fixed_point_solve(system, stacked, gm, f, ini, cfg, t=t)
            if step is None or cand.objective_history[-1] < step.objective_history[-1]:
                step = cand
        if not step.converged and cfg.abort_on_nonconvergence:
            raise RuntimeError(
                f"fixed point did not converge at step {k} (t={t}): "
                f"{step.iterations} iterations, objective {step.objective_history[-1]:.6e}"
            )
        eps_new = step.z.strain[:, 0]
        sig_new = step.z.stress[:, 0]
        if plastic:
            p = generator.law
            dq = np.abs(
                ((p.e0 + p.e1) * (eps_new - eps_prev) - (sig_new - sig_prev)) / p.e1
            )
            q_acc = q_acc + dq
        out_eps[k] = eps_new
        out_sig[k] = sig_new
        out_assign[k] = step.assignment
        out_iters[k] = step.iterations
        out_dist[k] = step.distance_sq
        out_conv[k] = step.converged
        out_resid[k] = step.equilibrium_residual
        out_u[k] = step.displacements
        out_qacc[k] = q_acc
        drift_eps = (eps_new - eps_prev) - est
        drift_sig = (sig_new - sig_prev) - gm.c_diag * est
        eps_prev, sig_prev = eps_new, sig_new
        f_prev, t_prev = f, t
    return Trajectory(
        times=t_grid,
        strain=out_eps,
        stress=out_sig,
        assignment=out_assign,
        iterations=out_iters,
        distance_sq=out_dist,
        converged=out_conv,
        equilibrium_residual=out_resid,
        displacements=out_u,
        q_acc=out_qacc,
        gm=gm,
    )


def history_matching_march(
    mesh: TrussMesh,
    gm: GlobalMetric,
    repositories: Sequence[HistoryRepository],
    loads: LoadProgram | None,
    times,
    cfg: SolverConfig | None = None,
    *,
    sys: ConstraintSystem | None = None,
) -> Trajectory:
    """March against fixed two-time archives instead of regenerated sets.

    Each step searches the current slots of every element's repository with
    the prior-slot mismatch (against the previously accepted state) added as
    a fidelity cost; nothing is regenerated, so the archives can be sampled
    entirely offline.
    """
    cfg = cfg or SolverConfig()
    t_grid = _check_times(times)
    system = sys if sys is not None else assemble(mesh, gm)
    m = system.n_elements
    if len(repositories) != m:
        raise ValueError(f"{m} repositories required, got {len(repositories)}")

    T = t_grid.size
    out_eps = np.zeros((T, m))
    out_sig = np.zeros((T, m))
    out_assign = np.full((T, m), -1, dtype=np.int64)
    out_iters = np.zeros(T, dtype=np.int64)
    out_dist = np.zeros(T)
    out_conv = np.zeros(T, dtype=bool)
    out_resid = np.zeros(T)
    out_u = np.zeros((T, system.n_free))

    eps_prev = np.zeros(m)
    sig_prev = np.zeros(m)
    drift_eps = np.zeros(m)
    drift_sig = np.zeros(m)
    f_prev: np.ndarray | None = None
    t_prev: float | None = None
    for k in range(T):
        t = float(t_grid[k])
        f = loads.forces(t) if loads is not None else np.zeros(system.n_free)
        sets = []
        for e, h in enumerate(repositories):
            z_prev = GlobalState(eps_prev, sig_prev).point(e)
            sets.append(history_cost_dataset(h, z_prev, gm.locals[e]))
        est = system.elastic_strain_increment(f, f_prev, t, t_prev)
        if cfg.init_strategy == "zero":
            inits = [GlobalState.zeros(m)]
        elif cfg.init_strategy == "previous":
            inits = [GlobalState(eps_prev, sig_prev)]
        else:
            # same drift-corrected warm start as the differential march; the
            # archive holds stale neighborhoods from every past step, so a
            # cold start inside one of them can pin the walk there
            inits = [
                GlobalState(
                    eps_prev + est + drift_eps,
                    sig_prev + gm.c_diag * est + drift_sig,
                )
            ]
            if cfg.init_strategy == "response":
                stacked_h = stack_sets(sets)
                if stacked_h is not None:
                    resp = _empirical_response_init(
                        system, stacked_h, f, system.affine_strain(t), eps_prev + est
                    )
                    if resp is not None:
                        inits.append(resp)
        step = None
        for ini in inits:
            cand = fixed_point_solve(system, sets, gm, f, ini, cfg, t=t)
            if step is None or cand.objective_history[-1] < step.objective_history[-1]:
                step = cand
        if not step.converged and cfg.abort_on_nonconvergence:
            raise RuntimeError(
                f"fixed point did not converge at step {k} (t={t})"
            )
        out_eps[k] = step.z.strain[:, 0]
        out_sig[k] = step.z.stress[:, 0]
        out_assign[k] = step.assignment
        out_iters[k] = step.iterations
        out_dist[k] = step.distance_sq
        out_conv[k] = step.converged
        out_resid[k] = step.equilibrium_residual
        out_u[k] = step.displacements
        drift_eps = out_eps[k] - eps_prev - est
        drift_sig = out_sig[k] - sig_prev - gm.c_diag * est
        eps_prev = out_eps[k]
        sig_prev = out_sig[k]
        f_prev, t_prev = f, t
    return Trajectory(
        times=t_grid,
        strain=out_eps,
        stress=out_sig,
        assignment=out_assign,
        iterations=out_iters,
        distance_sq=out_dist,
        converged=out_conv,
        equilibrium_residual=out_resid,
        displacements=out_u,
        q_acc=np.zeros((T, m)),
        gm=gm,
    )


def export_trajectory_csv(traj: Trajectory, path) -> None:
    """One row per (time, element): strain, stress, assignment, iterations,
    square distance."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["time", "element", "strain", "stress", "assignment", "iterations", "distance_sq"]
        )
        for k in range(traj.n_steps):
            for e in range(traj.n_elements):
                writer.writerow(
                    [
                        repr(float(traj.times[k])),
                        e,
                        repr(float(traj.strain[k, e])),
                        repr(float(traj.stress[k, e])),
                        int(traj.assignment[k, e]),
                        int(traj.iterations[k]),
                        repr(float(traj.distance_sq[k])),
                    ]
                )


def trajectory_summary(traj: Trajectory) -> dict:
    return {
        "n_steps": int(traj.n_steps),
        "n_elements": int(traj.n_elements),
        "all_converged": bool(np.all(traj.converged)),
        "max_iterations": int(np.max(traj.iterations)),
        "total_iterations": int(np.sum(traj.iterations)),
        "max_distance_sq": float(np.max(traj.distance_sq)),
        "max_equilibrium_residual": float(np.max(traj.equilibrium_residual)),
        "final_time": float(traj.times[-1]),
    }


def write_summary_csv(traj: Trajectory, path) -> None:
    summary = trajectory_summary(traj)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(summary))
        writer.writerow([summary[k] for k in summary])
