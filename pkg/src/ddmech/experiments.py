"""Experiment harness: reference solves, error norms, canonical fixtures,
and data-resolution convergence studies.

The reference trajectories integrate the generating material laws exactly
(linear solves for the viscoelastic solid, Newton with the return map for
plasticity) on the same meshes, load programs and time grids as the
data-driven marches, so every study compares against an independent oracle.
Trajectory discrepancies are measured by an exponentially weighted l2 norm
in time (rate-sensitive) or by a total-variation norm of the increments
(rate-independent), both built on the weighted phase-space metric.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from types import SimpleNamespace
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .data import GeneratorSpec, HistoryRepository, LocalDataSet, WindowRule
from .materials import (
    PlasticParams,
    SlsParams,
    plastic_return_map,
    sls_affine_coefficients,
    sls_relaxation_exact,
)
from .phase import GlobalMetric, LocalMetric
from .solver import (
    SolverConfig,
    Trajectory,
    enumerate_global_min,
    fixed_point_solve,
    history_matching_march,
    time_march,
)
from .truss import (
    ConstraintSystem,
    LatticeSpec,
    LoadProgram,
    MechanismError,
    PiecewiseLinearProgram,
    Prescribed,
    TrussMesh,
    assemble,
    generate_lattice_truss,
)

__all__ = [
    "DEFAULT_SLS",
    "DEFAULT_PLASTIC",
    "VISCO_BREAKPOINTS",
    "PLASTIC_BREAKPOINTS",
    "weighted_l2_error",
    "bv_error",
    "trajectory_norm",
    "fit_loglog_slope",
    "reference_trajectory",
    "relaxation_mesh",
    "RelaxationConfig",
    "RelaxationResult",
    "run_relaxation",
    "build_relaxation_repository",
    "run_relaxation_history",
    "StudyConfig",
    "ConvergenceRow",
    "StudyResult",
    "study_mesh",
    "study_loads",
    "study_times",
    "study_metric",
    "study_generator",
    "run_convergence_study",
    "default_study_config",
    "small_truss_fixture",
    "build_truss_repositories",
    "OracleCheckResult",
    "oracle_check",
    "random_small_instance",
    "write_relaxation_csv",
    "write_study_csv",
    "write_rate_csv",
]

DEFAULT_SLS = SlsParams(e0=75_000.0, e1=100_000.0, tau1=5.0)
DEFAULT_PLASTIC = PlasticParams(e0=10_000.0, e1=100_000.0, sigma1=500.0, h=0.0)

# load multiplier schedules: ramp/hold/unload for the viscoelastic runs,
# a full load reversal for the plastic runs
VISCO_BREAKPOINTS = ((0.0, 0.0), (10.0, 1.0), (50.0, 1.0), (60.0, 0.0), (100.0, 0.0))
PLASTIC_BREAKPOINTS = ((0.0, 0.0), (20.0, 0.8), (60.0, -0.9), (100.0, 1.0))


def _check_pair(traj: Trajectory, ref: Trajectory) -> None:
    if traj.strain.shape != ref.strain.shape:
        raise ValueError("trajectories have different shapes")
    if not np.array_equal(traj.times, ref.times):
        raise ValueError("trajectories live on different time grids")
    if traj.gm is not ref.gm and not (
        np.array_equal(traj.gm.weights, ref.gm.weights)
        and traj.gm.is_scalar
        and ref.gm.is_scalar
        and np.array_equal(traj.gm.c_diag, ref.gm.c_diag)
    ):
        raise ValueError("trajectories measured in different metrics")


def _step_norms_sq(de: np.ndarray, ds: np.ndarray, gm: GlobalMetric) -> np.ndarray:
    """Global square norm of per-step difference arrays of shape (T, M)."""
    if not gm.is_scalar:
        raise ValueError("trajectory norms require scalar local metrics")
    return (de * de) @ (gm.weights * gm.c_diag) + (ds * ds) @ (
        gm.weights * gm.c_inv_diag
    )


def weighted_l2_error(traj: Trajectory, ref: Trajectory, tau: float) -> float:
    """Exponentially weighted l2 trajectory distance.

    ``sqrt(sum_k |z_k - ref_k|^2 exp(-t_k / tau) (t_k - t_{k-1}))`` over all
    steps after the first; the weight suppresses the long-time tail on the
    relaxation scale ``tau``.
    """
    _check_pair(traj, ref)
    if float(tau) <= 0.0:
        raise ValueError("tau must be positive")
    d2 = _step_norms_sq(traj.strain - ref.strain, traj.stress - ref.stress, traj.gm)
    t = traj.times
    if t.size < 2:
        return 0.0
    weights = np.exp(-t[1:] / float(tau)) * np.diff(t)
    return float(np.sqrt(np.sum(d2[1:] * weights)))


def bv_error(traj: Trajectory, ref: Trajectory) -> float:
    """Total variation of the increment mismatch; rate independent.

    ``sum_k |(z_k - z_{k-1}) - (ref_k - ref_{k-1})|``; a spurious jump
    contributes on the way up and again on any reversal.
    """
    _check_pair(traj, ref)
    de = np.diff(traj.strain - ref.strain, axis=0)
    ds = np.diff(traj.stress - ref.stress, axis=0)
    return float(np.sum(np.sqrt(_step_norms_sq(de, ds, traj.gm))))


def trajectory_norm(traj: Trajectory, tau: float) -> float:
    """Weighted l2 size of a trajectory (distance to the zero trajectory)."""
    if float(tau) <= 0.0:
        raise ValueError("tau must be positive")
    d2 = _step_norms_sq(traj.strain, traj.stress, traj.gm)
    t = traj.times
    if t.size < 2:
        return 0.0
    weights = np.exp(-t[1:] / float(tau)) * np.diff(t)
    return float(np.sqrt(np.sum(d2[1:] * weights)))


def fit_loglog_slope(n_points: Sequence[float], errors: Sequence[float]) -> float:
    """Least-squares slope of log(error) against log(n); returned sign-flipped
    so a decaying error reads as a positive convergence rate."""
    n = np.asarray(n_points, dtype=float)
    e = np.asarray(errors, dtype=float)
    if n.size != e.size or n.size < 2:
        raise ValueError("at least two (n, error) pairs are required")
    if np.any(n <= 0.0) or np.any(e <= 0.0):
        raise ValueError("points and errors must be positive for a log-log fit")
    slope = np.polyfit(np.log(n), np.log(e), 1)[0]
    return float(-slope)


def _metric_for(mesh: TrussMesh, law, metric_value: float | None) -> GlobalMetric:
    c = law.modulus_instantaneous if metric_value is None else float(metric_value)
    return GlobalMetric.uniform(c, mesh.volumes)


def reference_trajectory(
    mesh: TrussMesh,
    gm: GlobalMetric,
    law: SlsParams | PlasticParams,
    loads: LoadProgram | None,
    times,
    *,
    sys: ConstraintSystem | None = None,
    newton_tol: float = 1e-10,
    newton_max_iters: int = 100,
) -> Trajectory:
    """Exact incremental solve of the generating law on the same fixture.

    Viscoelastic steps are linear (the one-step response is an affine line
    per element); plastic steps run Newton iterations with the consistent
    bilinear tangent. The first step is the instantaneous response in both
    cases.
    """
    t_grid = np.asarray(times, dtype=float).reshape(-1)
    system = sys if sys is not None else assemble(mesh, gm)
    m = system.n_elements
    w = system.weights
    b_op = system.b_free
    T = t_grid.size

    out_eps = np.zeros((T, m))
    out_sig = np.zeros((T, m))
    out_resid = np.zeros(T)
    out_u = np.zeros((T, system.n_free))
    out_qacc = np.zeros((T, m))

    # weight-only Gram matrix; the per-step modulus is a scalar multiplier
    if system.n_free:
        k_w = b_op.T @ (w[:, None] * b_op)
        cho_w = cho_factor(k_w)

    eps_prev = np.zeros(m)
    sig_prev = np.zeros(m)
    q_prev = np.zeros(m)
    qacc_prev = np.zeros(m)
    u = np.zeros(system.n_free)
    for k in range(T):
        t = float(t_grid[k])
        f = loads.forces(t) if loads is not None else np.zeros(system.n_free)
        g = system.affine_strain(t)
        dt = None if k == 0 else float(t_grid[k] - t_grid[k - 1])
        if isinstance(law, SlsParams):
            cond = SimpleNamespace(prev_strain=eps_prev, prev_stress=sig_prev)
            a, bmod = sls_affine_coefficients(cond, law, dt)
            if system.n_free:
                rhs = f - b_op.T @ (w * (a + bmod * g))
                u = cho_solve(cho_w, rhs) / bmod
            eps = b_op @ u + g
            sig = a + bmod * eps
        else:
            # Newton on the displacement residual with the return map; the
            # incremental response is monotone, so the step energy is convex
            # and a line search that zeroes its directional derivative keeps
            # full steps from oscillating across the yield kinks
            def _slope(u_trial: np.ndarray, d: np.ndarray) -> float:
                e_t = b_op @ u_trial + g
                s_t, _, _ = plastic_return_map(e_t, q_prev, qacc_prev, law)
                return float(d @ (b_op.T @ (w * s_t) - f))

            for _ in range(newton_max_iters):
                eps = b_op @ u + g
                sig, q_new, qacc_new = plastic_return_map(eps, q_prev, qacc_prev, law)
                resid = b_op.T @ (w * sig) - f
                if np.linalg.norm(resid) <= newton_tol * (1.0 + np.linalg.norm(f)):
                    break
                if system.n_free == 0:
                    break
                f_trial = np.abs(law.e1 * (eps - q_prev)) - law.yield_stress(qacc_prev)
                kt = np.where(
                    f_trial > 0.0,
                    law.e0 + law.e1 * law.h / (law.e1 + law.h),
                    law.e0 + law.e1,
                )
                k_t = b_op.T @ ((w * kt)[:, None] * b_op)
                d = -cho_solve(cho_factor(k_t), resid)
                alpha = 1.0
                if _slope(u + d, d) > 0.0:
                    lo, hi = 0.0, 1.0
                    for _ in range(50):
                        mid = 0.5 * (lo + hi)
                        if _slope(u + mid * d, d) > 0.0:
                            hi = mid
                        else:
                            lo = mid
                    alpha = 0.5 * (lo + hi)
                u = u + alpha * d
            else:
                raise RuntimeError(f"reference Newton failed to converge at step {k}")
            eps = b_op @ u + g
            sig, q_new, qacc_new = plastic_return_map(eps, q_prev, qacc_prev, law)
            q_prev, qacc_prev = np.asarray(q_new), np.asarray(qacc_new)
        out_eps[k] = eps
        out_sig[k] = sig
        out_resid[k] = system.equilibrium_residual(sig, f)
        out_u[k] = u
        out_qacc[k] = qacc_prev
        eps_prev, sig_prev = eps, sig
    return Trajectory(
        times=t_grid,
        strain=out_eps,
        stress=out_sig,
        assignment=np.full((T, m), -1, dtype=np.int64),
        iterations=np.zeros(T, dtype=np.int64),
        distance_sq=np.zeros(T),
        converged=np.ones(T, dtype=bool),
        equilibrium_residual=out_resid,
        displacements=out_u,
        q_acc=out_qacc,
        gm=gm,
    )


# ---------------------------------------------------------------------------
# relaxation fixture: a single bar held at constant strain


def relaxation_mesh(eps_bar: float) -> TrussMesh:
    """Unit bar along x, fully pinned except the driven end displacement."""
    program = PiecewiseLinearProgram.constant(float(eps_bar))
    return TrussMesh(
        node_coords=np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]),
        conn=np.array([[0, 1]]),
        areas=np.array([1.0]),
        supports=frozenset({(0, 0), (0, 1), (0, 2), (1, 1), (1, 2)}),
        prescribed=(Prescribed(1, 0, program),),
    )


@dataclass(frozen=True)
class RelaxationConfig:
    law: SlsParams = DEFAULT_SLS
    eps_bar: float = 1e-3
    dt: float = 1.0
    t_end: float = 100.0
    n_points: int = 2048
    band_width: float = 0.0
    seed: int = 0
    metric_value: float | None = None

    def __post_init__(self) -> None:
        if float(self.eps_bar) == 0.0:
            raise ValueError("eps_bar must be nonzero")
        if float(self.dt) <= 0.0 or float(self.t_end) < 0.0:
            raise ValueError("dt must be positive and t_end nonnegative")


@dataclass
class RelaxationResult:
    times: np.ndarray
    stress: np.ndarray
    exact: np.ndarray
    max_rel_error: float
    instantaneous_modulus_ratio: float  # sigma_0 / eps_bar
    trajectory: Trajectory


def _relaxation_setup(cfg: RelaxationConfig):
    mesh = relaxation_mesh(cfg.eps_bar)
    gm = _metric_for(mesh, cfg.law, cfg.metric_value)
    times = np.arange(0.0, cfg.t_end + 0.5 * cfg.dt, cfg.dt)
    return mesh, gm, times


def run_relaxation(cfg: RelaxationConfig = RelaxationConfig()) -> RelaxationResult:
    """Data-driven relaxation of the held bar against the closed form."""
    mesh, gm, times = _relaxation_setup(cfg)
    generator = GeneratorSpec(
        law=cfg.law,
        n_points=cfg.n_points,
        band_width=cfg.band_width,
        window=WindowRule(floor=abs(cfg.eps_bar)),
        rng_seed=cfg.seed,
        dt=cfg.dt,
    )
    traj = time_march(mesh, gm, generator, None, times, SolverConfig())
    return _relaxation_result(cfg, times, traj)


def _relaxation_result(cfg, times, traj) -> RelaxationResult:
    stress = traj.stress[:, 0]
    exact = sls_relaxation_exact(np.arange(times.size), cfg.law, cfg.eps_bar, cfg.dt)
    rel = np.abs(stress - exact) / np.abs(exact)
    return RelaxationResult(
        times=times,
        stress=stress,
        exact=exact,
        max_rel_error=float(np.max(rel)),
        instantaneous_modulus_ratio=float(stress[0] / cfg.eps_bar),
        trajectory=traj,
    )


def build_relaxation_repository(
    cfg: RelaxationConfig,
    *,
    n_prior: int = 100_001,
    n_current: int = 9,
    current_halfwidth: float | None = None,
    weights: tuple[float, float] = (1.0, 1.0),
) -> HistoryRepository:
    """Offline two-time archive covering the held-bar operating region.

    Entries pair prior states on a dense stress grid at the pinned strain
    with their one-step responses on a strain grid, plus instantaneous pairs
    rooted at the virgin state for the suddenly applied first step. The
    prior-grid spacing bounds the accumulated march bias, so it is the knob
    that controls agreement with the differential mode.
    """
    law = cfg.law
    eps_bar = cfg.eps_bar
    hw = abs(eps_bar) * 0.05 if current_halfwidth is None else float(current_halfwidth)
    cur_offsets = (np.arange(n_current) - n_current // 2) * (hw / max(n_current // 2, 1))
    e_cur = eps_bar + cur_offsets

    sig_lo = min(law.e0 * eps_bar, law.modulus_instantaneous * eps_bar)
    sig_hi = max(law.e0 * eps_bar, law.modulus_instantaneous * eps_bar)
    span = sig_hi - sig_lo
    sig_grid = np.linspace(sig_lo - 0.05 * span, sig_hi + 0.05 * span, n_prior)

    # one-step pairs conditioned on every prior stress level
    r = law.tau1 / cfg.dt
    bmod = (law.e0 + (law.e0 + law.e1) * r) / (1.0 + r)
    a = (sig_grid * r - (law.e0 + law.e1) * r * eps_bar) / (1.0 + r)
    return HistoryRepository(
        # instantaneous pairs out of the virgin state come first
        np.concatenate([np.zeros_like(e_cur), np.full(sig_grid.size * e_cur.size, eps_bar)]),
        np.concatenate([np.zeros_like(e_cur), np.repeat(sig_grid, e_cur.size)]),
        np.concatenate([e_cur, np.tile(e_cur, sig_grid.size)]),
        np.concatenate(
            [law.modulus_instantaneous * e_cur, (a[:, None] + bmod * e_cur).ravel()]
        ),
        weights,
    )


def run_relaxation_history(
    cfg: RelaxationConfig = RelaxationConfig(),
    repository: HistoryRepository | None = None,
) -> RelaxationResult:
    """Relaxation march against a fixed two-time archive."""
    mesh, gm, times = _relaxation_setup(cfg)
    if repository is None:
        repository = build_relaxation_repository(cfg)
    traj = history_matching_march(mesh, gm, [repository], None, times, SolverConfig())
    return _relaxation_result(cfg, times, traj)


# ---------------------------------------------------------------------------
# convergence studies on the lattice cantilever


@dataclass(frozen=True)
class StudyConfig:
    """Sweep description for one data-resolution convergence study.

    ``band_ref`` is the data band at the reference resolution ``n_ref``; the
    band refines as ``band_ref * (n_ref / n) ** band_exponent`` so denser
    sets are also more accurate, and the sampling window tightens with
    ``window_exponent`` the same way.
    """

    kind: str  # "visco" or "plastic"
    law: SlsParams | PlasticParams
    lattice: LatticeSpec = LatticeSpec(6, 1, 2)
    mesh: TrussMesh | None = None
    nodal_loads: tuple[tuple[int, int, float], ...] | None = None
    load_scale: float = 1.0
    breakpoints: tuple[tuple[float, float], ...] = VISCO_BREAKPOINTS
    dt: float = 1.0
    t_end: float = 100.0
    points: tuple[int, ...] = (64, 256, 1024, 4096)
    runs: int = 20
    band_ref: float = 0.030
    n_ref: int = 64
    band_exponent: float = 1.0
    window: WindowRule = WindowRule(incr_factor=4.0, band_factor=8.0)
    window_exponent: float = 0.0
    sampling: str = "grid"
    seed: int = 7041
    metric_value: float | None = None
    workers: int = 0
    max_fixed_point_iters: int = 200

    def __post_init__(self) -> None:
        if self.kind not in ("visco", "plastic"):
            raise ValueError(f"unknown study kind {self.kind!r}")
        pts = tuple(int(p) for p in self.points)
        if len(pts) < 1 or any(p < 1 for p in pts):
            raise ValueError("points must be positive")
        if len(pts) > 1 and any(b <= a for a, b in zip(pts, pts[1:])):
            raise ValueError("points must be strictly increasing")
        object.__setattr__(self, "points", pts)
        if int(self.runs) < 1:
            raise ValueError("runs must be positive")
        object.__setattr__(self, "runs", int(self.runs))
        if float(self.band_ref) < 0.0:
            raise ValueError("band_ref must be nonnegative")


@dataclass(frozen=True)
class ConvergenceRow:
    n_points: int
    mean_error: float
    std_error: float
    errors: tuple[float, ...]


@dataclass
class StudyResult:
    config: StudyConfig
    rows: list[ConvergenceRow]
    rate: float | None
    reference: Trajectory


def study_mesh(cfg: StudyConfig) -> TrussMesh:
    return cfg.mesh if cfg.mesh is not None else generate_lattice_truss(cfg.lattice)


def study_loads(cfg: StudyConfig, sys: ConstraintSystem) -> LoadProgram:
    """Vertical tip forces on the far face (or explicit nodal loads),
    scheduled by the breakpoints."""
    if cfg.nodal_loads:
        nodal = {(int(n), int(d)): float(v) for n, d, v in cfg.nodal_loads}
        return LoadProgram.from_nodal(sys, nodal, cfg.breakpoints)
    mesh = sys.mesh
    x_max = float(np.max(mesh.node_coords[:, 0]))
    tip_nodes = [
        n
        for n in range(mesh.n_nodes)
        if mesh.node_coords[n, 0] == x_max and sys.is_free(n, 2)
    ]
    if not tip_nodes:
        raise ValueError("no free far-face node to load")
    nodal = {(n, 2): -cfg.load_scale for n in tip_nodes}
    return LoadProgram.from_nodal(sys, nodal, cfg.breakpoints)


def study_times(cfg: StudyConfig) -> np.ndarray:
    return np.arange(0.0, cfg.t_end + 0.5 * cfg.dt, cfg.dt)


def study_metric(cfg: StudyConfig, mesh: TrussMesh) -> GlobalMetric:
    return _metric_for(mesh, cfg.law, cfg.metric_value)


def study_generator(cfg: StudyConfig, n: int, point_index: int, run: int) -> GeneratorSpec:
    """The data generator one (sweep index, run) cell of the study uses."""
    return _generator_for(cfg, n, _run_seed(cfg, point_index, run))


def _study_error(cfg: StudyConfig, traj: Trajectory, ref: Trajectory) -> float:
    if cfg.kind == "visco":
        return weighted_l2_error(traj, ref, cfg.law.tau1)
    return bv_error(traj, ref)


def _run_seed(cfg: StudyConfig, point_index: int, run: int) -> int:
    ss = np.random.SeedSequence([int(cfg.seed), int(point_index), int(run)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _generator_for(cfg: StudyConfig, n: int, run_seed: int) -> GeneratorSpec:
    scale = (cfg.n_ref / n) ** cfg.band_exponent
    band = cfg.band_ref * scale
    wscale = (cfg.n_ref / n) ** cfg.window_exponent
    return GeneratorSpec(
        law=cfg.law,
        n_points=n,
        band_width=band,
        window=cfg.window,
        rng_seed=run_seed,
        dt=cfg.dt,
        sampling=cfg.sampling,
        window_scale=wscale,
    )


def _march_once(cfg: StudyConfig, n: int, run_seed: int) -> Trajectory:
    mesh = study_mesh(cfg)
    gm = _metric_for(mesh, cfg.law, cfg.metric_value)
    sys = assemble(mesh, gm)
    loads = study_loads(cfg, sys)
    times = study_times(cfg)
    generator = _generator_for(cfg, n, run_seed)
    solver_cfg = SolverConfig(max_fixed_point_iters=cfg.max_fixed_point_iters)
    return time_march(mesh, gm, generator, loads, times, solver_cfg, sys=sys)


def _worker_run(args: tuple) -> tuple[np.ndarray, np.ndarray]:
    cfg, n, run_seed = args
    traj = _march_once(cfg, n, run_seed)
    return traj.strain, traj.stress


def run_convergence_study(cfg: StudyConfig) -> StudyResult:
    """Mean trajectory error against data-set size, over independent runs.

    All randomness derives from (study seed, sweep index, run index), so
    repeated executions give bit-identical results regardless of worker
    count; parallel results are reduced in submission order.
    """
    mesh = study_mesh(cfg)
    gm = _metric_for(mesh, cfg.law, cfg.metric_value)
    sys = assemble(mesh, gm)
    loads = study_loads(cfg, sys)
    times = study_times(cfg)
    ref = reference_trajectory(mesh, gm, cfg.law, loads, times, sys=sys)

    tasks = []
    for i, n in enumerate(cfg.points):
        for r in range(cfg.runs):
            tasks.append((n, _run_seed(cfg, i, r)))

    results: list[tuple[np.ndarray, np.ndarray]] = []
    if cfg.workers and cfg.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [pool.submit(_worker_run, (cfg, n, s)) for n, s in tasks]
            results = [f.result() for f in futures]
    else:
        for n, s in tasks:
            results.append(_worker_run((cfg, n, s)))

    rows: list[ConvergenceRow] = []
    solver_fields = dict(
        assignment=np.full_like(ref.assignment, -1),
        iterations=np.zeros_like(ref.iterations),
        distance_sq=np.zeros_like(ref.distance_sq),
        converged=np.ones_like(ref.converged),
        equilibrium_residual=np.zeros_like(ref.equilibrium_residual),
        displacements=np.zeros_like(ref.displacements),
        q_acc=np.zeros_like(ref.q_acc),
    )
    idx = 0
    for n in cfg.points:
        errors = []
        for _ in range(cfg.runs):
            eps, sig = results[idx]
            idx += 1
            traj = Trajectory(times=times, strain=eps, stress=sig, gm=gm, **solver_fields)
            errors.append(_study_error(cfg, traj, ref))
        arr = np.array(errors)
        rows.append(
            ConvergenceRow(
                n_points=n,
                mean_error=float(np.mean(arr)),
                std_error=float(np.std(arr)),
                errors=tuple(float(x) for x in arr),
            )
        )
    rate = None
    if len(rows) >= 2 and all(r.mean_error > 0.0 for r in rows):
        rate = fit_loglog_slope([r.n_points for r in rows], [r.mean_error for r in rows])
    return StudyResult(config=cfg, rows=rows, rate=rate, reference=ref)


def build_truss_repositories(
    mesh: TrussMesh,
    gm: GlobalMetric,
    law: SlsParams,
    loads: LoadProgram | None,
    times,
    *,
    prior_strain_radius: float = 0.01,
    prior_offset_radius: float = 0.01,
    n_prior_strain: int = 5,
    n_prior_offset: int = 81,
    current_halfwidth: float = 2e-3,
    n_current: int = 65,
    weights: tuple[float, float] = (1.0, 1.0),
    max_entries: int = 10_000_000,
) -> list[HistoryRepository]:
    """Offline two-time archives around a fixture's operating region.

    For every element and step, prior states form a sheared lattice around
    the reference state one step earlier: the strain direction runs along
    the instantaneous line sigma = (e0+e1) eps (coarse, ``n_prior_strain``
    points over ``prior_strain_radius`` of the element strain scale), while
    the viscous offset sigma - (e0+e1) eps — the only prior combination the
    one-step response depends on — is swept densely (``n_prior_offset``
    points over ``prior_offset_radius`` of the stress scale). Each prior is
    paired with a strain grid of its one-step responses. The offset spacing
    bounds the response error, so it is the knob that controls agreement
    with the differential mode.
    """
    t_grid = np.asarray(times, dtype=float).reshape(-1)
    sys = assemble(mesh, gm)
    ref = reference_trajectory(mesh, gm, law, loads, t_grid, sys=sys)
    m = sys.n_elements
    T = t_grid.size
    per_element = n_current * (1 + (T - 1) * n_prior_strain * n_prior_offset)
    if per_element * m > max_entries:
        raise ValueError(
            f"repository would hold {per_element * m} entries; "
            f"reduce the mesh, grid sizes, or time steps (cap {max_entries})"
        )
    eps_scale = np.maximum(np.max(np.abs(ref.strain), axis=0), 1e-12)
    sig_scale = np.maximum(np.max(np.abs(ref.stress), axis=0), 1e-6)
    side_i = np.linspace(-1.0, 1.0, n_prior_strain)
    side_j = np.linspace(-1.0, 1.0, n_prior_offset)
    cur_grid = (np.arange(n_current) - n_current // 2) / max(n_current // 2, 1)
    ci = law.modulus_instantaneous
    out = []
    for e in range(m):
        d_eps = np.repeat(side_i * prior_strain_radius * eps_scale[e], n_prior_offset)
        d_off = np.tile(side_j * prior_offset_radius * sig_scale[e], n_prior_strain)
        cur_off = cur_grid * current_halfwidth * eps_scale[e]
        eps_prev, sig_prev, eps_cur, sig_cur = [], [], [], []
        # instantaneous responses out of the virgin state
        ec0 = ref.strain[0, e] + cur_off
        eps_prev.append(np.zeros_like(ec0))
        sig_prev.append(np.zeros_like(ec0))
        eps_cur.append(ec0)
        sig_cur.append(ci * ec0)
        for k in range(1, T):
            pe = ref.strain[k - 1, e] + d_eps
            ps = ref.stress[k - 1, e] + ci * d_eps + d_off
            dt = float(t_grid[k] - t_grid[k - 1])
            cond = SimpleNamespace(prev_strain=pe, prev_stress=ps)
            a, bmod = sls_affine_coefficients(cond, law, dt)
            ec = ref.strain[k, e] + cur_off
            # pair every prior with the whole current grid
            eps_prev.append(np.repeat(pe, ec.size))
            sig_prev.append(np.repeat(ps, ec.size))
            eps_cur.append(np.tile(ec, pe.size))
            sig_cur.append((a[:, None] + bmod * ec[None, :]).ravel())
        out.append(
            HistoryRepository(
                np.concatenate(eps_prev),
                np.concatenate(sig_prev),
                np.concatenate(eps_cur),
                np.concatenate(sig_cur),
                weights,
            )
        )
    return out


def small_truss_fixture(
    law: SlsParams = DEFAULT_SLS,
    *,
    load: float = 400.0,
    t_end: float = 20.0,
    dt: float = 1.0,
    metric_value: float | None = None,
):
    """4-bar pyramid: fixed unit-square base, one free apex node pulled
    downward with a ramp-and-hold schedule. Small enough that two-time
    archives covering its whole operating region stay compact.

    Returns (mesh, metric, loads, times).
    """
    coords = np.array(
        [
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.5, 0.5, 1.0],
        ]
    )
    conn = np.array([[0, 4], [1, 4], [2, 4], [3, 4]])
    supports = frozenset((n, d) for n in range(4) for d in range(3))
    mesh = TrussMesh(coords, conn, np.ones(4), supports)
    gm = _metric_for(mesh, law, metric_value)
    sys = assemble(mesh, gm)
    ramp = ((0.0, 0.0), (t_end / 2.0, 1.0), (t_end, 1.0))
    loads = LoadProgram.from_nodal(sys, {(4, 2): -load}, ramp)
    times = np.arange(0.0, t_end + 0.5 * dt, dt)
    return mesh, gm, loads, times


# ---------------------------------------------------------------------------
# oracle equivalence on random small instances


def random_small_instance(rng: np.random.Generator, *, max_elements: int = 3,
                          max_points: int = 20):
    """A random solvable truss instance small enough to enumerate.

    One free node (one or two free displacement components) tied to fixed
    anchor nodes by up to ``max_elements`` bars of random geometry, with
    per-element metric moduli, random per-element data clouds and a random
    force vector. Degenerate (mechanism) geometries are resampled.
    """
    for _ in range(64):
        m = int(rng.integers(1, max_elements + 1))
        free_dirs = 1 if m == 1 else int(rng.integers(1, 3))
        # anchor nodes 0..m-1 surround the free node at index m
        coords = np.zeros((m + 1, 3))
        for i in range(m):
            direction = rng.normal(size=3)
            direction[0] = np.sign(direction[0] or 1.0) * (0.4 + abs(direction[0]))
            if free_dirs == 2:
                direction[1] = np.sign(direction[1] or 1.0) * (
                    0.4 + abs(direction[1])
                )
            coords[i] = direction / np.linalg.norm(direction) * rng.uniform(0.8, 1.6)
        conn = np.array([[i, m] for i in range(m)])
        areas = rng.uniform(0.5, 2.0, m)
        supports = {(i, d) for i in range(m) for d in range(3)}
        supports |= {(m, d) for d in range(free_dirs, 3)}
        mesh = TrussMesh(coords, conn, areas, frozenset(supports))
        moduli = rng.uniform(0.5, 2.0, m) * 1000.0
        gm = GlobalMetric(
            [LocalMetric.from_modulus(c) for c in moduli], mesh.volumes
        )
        try:
            sys = assemble(mesh, gm)
        except MechanismError:
            continue
        f = rng.normal(size=sys.n_free) * 100.0
        sets = []
        for e in range(m):
            n = int(rng.integers(2, max_points + 1))
            eps = rng.normal(scale=0.2, size=n)
            sig = moduli[e] * rng.normal(scale=0.2, size=n)
            sets.append(LocalDataSet(eps, sig))
        return mesh, gm, sys, sets, f
    raise RuntimeError("could not sample a stable random truss in 64 draws")


@dataclass
class OracleCheckResult:
    n_systems: int
    n_bound_ok: int
    n_consistent: int
    max_bound_gap: float
    max_distance_mismatch: float

    @property
    def passed(self) -> bool:
        return self.n_bound_ok == self.n_systems and self.n_consistent == self.n_systems


def oracle_check(
    n_systems: int = 100,
    seed: int = 90210,
    *,
    max_elements: int = 3,
    max_points: int = 20,
) -> OracleCheckResult:
    """Exhaustive-enumeration equivalence batch on random small instances.

    Checks that the enumerated global minimum never exceeds the fixed-point
    objective, and that a fixed point initialized at the oracle's assignment
    terminates on that same assignment with a float-identical objective.
    """
    rng = np.random.default_rng(seed)
    n_bound = 0
    n_consistent = 0
    max_gap = 0.0
    max_mismatch = 0.0
    for _ in range(n_systems):
        mesh, gm, sys, sets, f = random_small_instance(
            rng, max_elements=max_elements, max_points=max_points
        )
        fp = fixed_point_solve(sys, sets, gm, f)
        oracle = enumerate_global_min(sys, sets, gm, f)
        gap = oracle.objective_history[-1] - fp.objective_history[-1]
        max_gap = max(max_gap, gap)
        if gap <= 1e-9 * max(1.0, abs(fp.objective_history[-1])):
            n_bound += 1
        seeded = fixed_point_solve(
            sys, sets, gm, f, init_assignment=oracle.assignment
        )
        mismatch = abs(seeded.objective_history[-1] - oracle.objective_history[-1])
        max_mismatch = max(max_mismatch, mismatch)
        if (
            seeded.converged
            and np.array_equal(seeded.assignment, oracle.assignment)
            and mismatch == 0.0
        ):
            n_consistent += 1
    return OracleCheckResult(
        n_systems=n_systems,
        n_bound_ok=n_bound,
        n_consistent=n_consistent,
        max_bound_gap=float(max_gap),
        max_distance_mismatch=float(max_mismatch),
    )


# ---------------------------------------------------------------------------
# CSV writers shared by the command line and the demonstration scripts


def write_relaxation_csv(result: RelaxationResult, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", "stress", "exact", "rel_error"])
        for k in range(result.times.size):
            rel = abs(result.stress[k] - result.exact[k]) / abs(result.exact[k])
            writer.writerow(
                [
                    repr(float(result.times[k])),
                    repr(float(result.stress[k])),
                    repr(float(result.exact[k])),
                    repr(float(rel)),
                ]
            )


def write_study_csv(result: StudyResult, path) -> None:
    runs = result.config.runs
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["n_points", "mean_error", "std_error"] + [f"err_{r}" for r in range(runs)]
        )
        for row in result.rows:
            writer.writerow(
                [row.n_points, repr(row.mean_error), repr(row.std_error)]
                + [repr(e) for e in row.errors]
            )


def write_rate_csv(result: StudyResult, path) -> None:
    cfg = result.config
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["kind", "rate", "points", "runs", "band_ref", "band_exponent", "seed"]
        )
        writer.writerow(
            [
                cfg.kind,
                "" if result.rate is None else repr(result.rate),
                " ".join(str(p) for p in cfg.points),
                cfg.runs,
                repr(cfg.band_ref),
                repr(cfg.band_exponent),
                cfg.seed,
            ]
        )


def default_study_config(kind: str, **overrides) -> StudyConfig:
    """Calibrated defaults for the two convergence studies."""
    if kind == "visco":
        # the window tracks the shrinking band, so the grid spacing falls as
        # n^-2; the load keeps every per-step increment inside the band term
        base = dict(
            kind="visco",
            law=DEFAULT_SLS,
            breakpoints=VISCO_BREAKPOINTS,
            load_scale=280.0,
            dt=1.0,
            band_ref=0.030,
            band_exponent=1.0,
            window=WindowRule(incr_factor=4.0, band_factor=8.0, floor=1e-9),
            window_exponent=0.0,
        )
    elif kind == "plastic":
        # fixed sampling window spanning the largest plastic step, so the
        # grid spacing falls as n^-1
        base = dict(
            kind="plastic",
            law=DEFAULT_PLASTIC,
            breakpoints=PLASTIC_BREAKPOINTS,
            load_scale=960.0,
            dt=1.0,
            band_ref=0.040,
            band_exponent=1.0,
            window=WindowRule(halfwidth=0.05),
            window_exponent=0.0,
        )
    else:
        raise ValueError(f"unknown study kind {kind!r}")
    base.update(overrides)
    return StudyConfig(**base)
