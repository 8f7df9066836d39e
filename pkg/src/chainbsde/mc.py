"""Regression Monte-Carlo solver and pathwise consistency harness.

The forward step draws chain paths recorded on a uniform time grid.  Grid
marginals are sampled exactly through the interval transition matrices
``exp(dt * A)`` (products across generator segments), so the chain itself
carries no discretization error; only the time integral of the driver does.

The backward step walks the grid from the horizon to zero.  At each step the
next-step values plus the driver increment form per-path targets, which are
least-squares projected on a basis of the current state.  With the
state-indicator basis the projection is exactly the per-state sample mean.
The standard error comes from repeating the backward pass over disjoint
path batches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .chain import Generator, simulate_path
from .drivers import DriverSpec
from .ode import ValueSurface
from .payoffs import PricingProblem

__all__ = [
    "MCConfig",
    "RegressionStage",
    "MCEstimate",
    "PathwiseReport",
    "mc_solve",
    "pathwise_verify",
    "sample_grid_states",
]

BASIS_KINDS = ("state_indicators", "price_polynomials")


@dataclass(frozen=True)
class MCConfig:
    """Path count, grid resolution, basis and seeding for one solve."""

    n_paths: int
    n_steps: int
    rng_seed: int
    start: int
    basis: str = "state_indicators"
    poly_degree: int = 2
    n_batches: int = 32

    def __post_init__(self):
        if self.n_paths < 1 or self.n_steps < 1:
            raise ValueError("n_paths and n_steps must be at least 1")
        if self.basis not in BASIS_KINDS:
            raise ValueError(f"unknown basis {self.basis!r}, expected one of {BASIS_KINDS}")
        if self.poly_degree < 0:
            raise ValueError("poly_degree must be >= 0")
        if self.n_batches < 2:
            raise ValueError("n_batches must be at least 2")


@dataclass(frozen=True)
class RegressionStage:
    """Diagnostics of one backward regression step."""

    t_index: int
    coefficients: np.ndarray
    fitted: np.ndarray
    unvisited: tuple[int, ...] = ()
    singular: bool = False


@dataclass(frozen=True)
class MCEstimate:
    """Initial value estimate with a batch-means standard error."""

    u0_at_start: float
    std_error: float
    n_paths: int
    n_steps: int
    seed: int
    start: int
    u0_vector: np.ndarray
    stages: tuple[RegressionStage, ...] = ()

    @property
    def unvisited_events(self) -> tuple[tuple[int, int], ...]:
        return tuple((s.t_index, i) for s in self.stages for i in s.unvisited)

    @property
    def singular_stages(self) -> tuple[int, ...]:
        return tuple(s.t_index for s in self.stages if s.singular)

    def record(self) -> str:
        return (
            f"estimate={self.u0_at_start!r} std_error={self.std_error!r} "
            f"n_paths={self.n_paths} n_steps={self.n_steps} seed={self.seed}"
        )


def _interval_transition(gen: Generator, t0: float, t1: float) -> np.ndarray:
    """Exact transition matrix over [t0, t1], column-stochastic."""
    cuts = [t0] + [float(b) for b in gen.breakpoints if t0 < b < t1] + [t1]
    p = np.eye(gen.n_states)
    for a, b in zip(cuts[:-1], cuts[1:]):
        p = expm((b - a) * gen.matrix_at(0.5 * (a + b))) @ p
    np.maximum(p, 0.0, out=p)
    p /= p.sum(axis=0, keepdims=True)
    return p


def sample_grid_states(
    gen: Generator, start: int, times: np.ndarray, n_paths: int, rng: np.random.Generator
) -> np.ndarray:
    """Sample chain states on a time grid, exact in law at the grid nodes.

    Returns an ``(n_paths, len(times))`` integer array.  Sampling uses the
    interval transition matrices, so the grid record has the same joint
    distribution as reading an exactly simulated trajectory at the grid
    times.
    """
    m = len(times) - 1
    states = np.empty((n_paths, m + 1), dtype=np.int32)
    states[:, 0] = start
    for k in range(m):
        p = _interval_transition(gen, float(times[k]), float(times[k + 1]))
        cum = np.cumsum(p, axis=0)
        cum[-1, :] = 1.0
        cols = cum[:, states[:, k]]
        u = rng.random(n_paths)
        states[:, k + 1] = np.argmax(u[None, :] < cols, axis=0)
    return states


def _backward_pass(
    states: np.ndarray,
    times: np.ndarray,
    phi: np.ndarray,
    driver: DriverSpec,
    gen: Generator,
    barrier: tuple[int, ...],
    groups: np.ndarray,
    n_groups: int,
    price_map=None,
    basis: str = "state_indicators",
    poly_degree: int = 2,
    record_stages: bool = False,
):
    """Backward regression over the grid, vectorized across path groups.

    Each group runs an independent backward recursion on its own paths;
    the fitted value function of a group feeds that group's driver
    evaluations at the next step.  Returns the ``(n_groups, N)`` array of
    initial-value vectors plus optional per-stage diagnostics (recorded only
    when a single group is processed).
    """
    n = gen.n_states
    m = len(times) - 1
    bar = list(barrier)
    u = np.tile(phi, (n_groups, 1))
    if bar:
        u[:, bar] = 0.0
    stages: list[RegressionStage] = []

    if basis == "price_polynomials":
        p = price_map.prices
        xs = (p - p.mean()) / max(p.std(), 1e-12)
        design_all = np.vander(xs, poly_degree + 1, increasing=True)  # (N, d+1)

    for k in range(m - 1, -1, -1):
        t_k = float(times[k])
        dt = float(times[k + 1] - times[k])
        s_next = states[:, k + 1]
        s_cur = states[:, k]

        fvals = np.empty((n_groups, n))
        for g in range(n_groups):
            ug = u[g]
            for i in range(n):
                fvals[g, i] = driver.evaluate(i, t_k, ug[i], ug, gen)
        targets = u[groups, s_next] + fvals[groups, s_next] * dt

        if basis == "state_indicators":
            key = groups * n + s_cur
            sums = np.bincount(key, weights=targets, minlength=n_groups * n).reshape(n_groups, n)
            cnts = np.bincount(key, minlength=n_groups * n).reshape(n_groups, n)
            visited = cnts > 0
            u_new = np.where(visited, sums / np.maximum(cnts, 1), u)
            if record_stages and n_groups == 1:
                stages.append(
                    RegressionStage(
                        t_index=k,
                        coefficients=u_new[0].copy(),
                        fitted=u_new[0].copy(),
                        unvisited=tuple(int(i) for i in np.flatnonzero(~visited[0])),
                    )
                )
        else:
            u_new = np.empty_like(u)
            for g in range(n_groups):
                sel = groups == g
                dm = design_all[s_cur[sel]]
                coef, _, rank, _ = np.linalg.lstsq(dm, targets[sel], rcond=None)
                u_new[g] = design_all @ coef
                if record_stages and n_groups == 1:
                    stages.append(
                        RegressionStage(
                            t_index=k,
                            coefficients=coef.copy(),
                            fitted=u_new[0].copy(),
                            singular=rank < poly_degree + 1,
                        )
                    )
        if bar:
            u_new[:, bar] = 0.0
        u = u_new

    return u, tuple(reversed(stages))


def mc_solve(problem: PricingProblem, cfg: MCConfig) -> MCEstimate:
    """Estimate the initial claim value by forward simulation and backward
    regression.

    The driver is evaluated at the next-step state and the next-step fitted
    value vector; with the indicator basis unvisited states carry their
    next-step value forward and are reported in the stage diagnostics.
    Deterministic given the seed.  The standard error is the batch-means
    estimate over ``n_batches`` disjoint path blocks.
    """
    gen = problem.gen
    if not (0 <= cfg.start < gen.n_states):
        raise ValueError(f"start state {cfg.start} outside the state space")
    if cfg.basis == "price_polynomials" and problem.price_map is None:
        raise ValueError("price_polynomials basis requires a price map")
    times = np.linspace(0.0, problem.horizon, cfg.n_steps + 1)
    phi = problem.terminal_vector()
    rng = np.random.default_rng(cfg.rng_seed)
    states = sample_grid_states(gen, cfg.start, times, cfg.n_paths, rng)

    ones = np.zeros(cfg.n_paths, dtype=np.int64)
    u_full, stages = _backward_pass(
        states, times, phi, problem.driver, gen, problem.barrier_states,
        ones, 1, price_map=problem.price_map, basis=cfg.basis,
        poly_degree=cfg.poly_degree, record_stages=True,
    )

    n_batches = min(cfg.n_batches, cfg.n_paths)
    if n_batches >= 2:
        groups = (np.arange(cfg.n_paths, dtype=np.int64) * n_batches) // cfg.n_paths
        u_batch, _ = _backward_pass(
            states, times, phi, problem.driver, gen, problem.barrier_states,
            groups, n_batches, price_map=problem.price_map, basis=cfg.basis,
            poly_degree=cfg.poly_degree,
        )
        batch_u0 = u_batch[:, cfg.start]
        std_error = float(np.std(batch_u0, ddof=1) / np.sqrt(n_batches))
    else:
        std_error = 0.0

    return MCEstimate(
        u0_at_start=float(u_full[0, cfg.start]),
        std_error=std_error,
        n_paths=cfg.n_paths,
        n_steps=cfg.n_steps,
        seed=cfg.rng_seed,
        start=cfg.start,
        u0_vector=u_full[0].copy(),
        stages=stages,
    )


@dataclass(frozen=True)
class PathwiseReport:
    """Largest gap between a simulated claim path and the value surface."""

    max_error: float
    n_paths: int
    worst_path: int
    worst_time: float

    def summary(self) -> str:
        return (
            f"pathwise check: max |Y_t - u(t, X_t)| = {self.max_error:.3e} "
            f"over {self.n_paths} paths (worst: path {self.worst_path} "
            f"at t = {self.worst_time:.6g})"
        )


def pathwise_verify(
    surface: ValueSurface,
    gen: Generator,
    driver: DriverSpec,
    n_paths: int,
    seed: int = 0,
    *,
    substeps: int = 4,
    horizon: float | None = None,
) -> PathwiseReport:
    """Check that claim paths driven by the surface stay on the surface.

    Along each simulated chain path the claim value is evolved forward: the
    drift is minus the driver minus the surface vector contracted with the
    rates out of the current state, and at a chain jump the value jumps by
    the difference of the surface entries.  If the surface solves the
    unconstrained value system, the path value coincides with the surface at
    the occupied state up to integration error.  Report-only; barrier-pinned
    surfaces do not satisfy the plain system and are not meaningful here.
    """
    T = float(surface.times[-1]) if horizon is None else float(horizon)
    rows = surface.times
    n_rows = len(rows)
    fine_per = max(1, int(substeps))

    # refined grid: fine_per pieces per surface interval
    fine = [np.linspace(rows[r], rows[r + 1], fine_per + 1)[:-1] for r in range(n_rows - 1)]
    fine_times = np.concatenate(fine + [rows[-1:]])
    n_int = len(fine_times) - 1
    row_of_fine = {r * fine_per: r for r in range(n_rows)}

    paths = [simulate_path(gen, _start_state_hint(surface), T, seed=np.random.default_rng(seed + p))
             for p in range(n_paths)]

    if driver.ignores_y:
        return _pathwise_fast(surface, gen, driver, paths, fine_times, row_of_fine, fine_per)
    return _pathwise_slow(surface, gen, driver, paths, fine_times, row_of_fine)


def _start_state_hint(surface: ValueSurface) -> int:
    # paths start where the surface is most informative: the middle state
    return surface.n_states // 2


def _drift_vector(driver, gen, t, u_vec, matrix):
    n = len(u_vec)
    fvec = np.fromiter(
        (driver.evaluate(i, t, u_vec[i], u_vec, gen, matrix=matrix) for i in range(n)),
        dtype=float, count=n,
    )
    return fvec + u_vec @ matrix


def _pathwise_fast(surface, gen, driver, paths, fine_times, row_of_fine, fine_per):
    """Vectorized check for drivers that ignore the value argument.

    The drift of the path value depends only on (time, state), so it is
    precomputed on the refined grid per state and integrated by trapezoid;
    jump corrections are handled per event.
    """
    n_paths = len(paths)
    n_int = len(fine_times) - 1
    vals = surface.values

    g_left = np.empty((n_int, surface.n_states))
    g_right = np.empty((n_int, surface.n_states))
    for m in range(n_int):
        t0, t1 = float(fine_times[m]), float(fine_times[m + 1])
        a = gen.matrix_at(0.5 * (t0 + t1))
        g_left[m] = _drift_vector(driver, gen, t0, surface.eval(t0), a)
        g_right[m] = _drift_vector(driver, gen, t1, surface.eval(t1), a)

    events: dict[int, dict[int, list[tuple[float, int]]]] = {}
    for p, path in enumerate(paths):
        for tau, new in zip(path.jump_times, path.jump_states):
            m = min(int(np.searchsorted(fine_times, tau, side="right")) - 1, n_int - 1)
            events.setdefault(m, {}).setdefault(p, []).append((float(tau), int(new)))

    cur = np.array([p.initial for p in paths], dtype=int)
    y = vals[0, cur].astype(float)
    max_err, worst_path, worst_time = 0.0, -1, 0.0

    for m in range(n_int):
        t0, t1 = float(fine_times[m]), float(fine_times[m + 1])
        h = t1 - t0
        y -= 0.5 * h * (g_left[m, cur] + g_right[m, cur])
        if m in events:
            a = gen.matrix_at(0.5 * (t0 + t1))
            for p, evs in events[m].items():
                # redo this path's interval piecewise around its jumps
                yp = y[p] + 0.5 * h * (g_left[m, cur[p]] + g_right[m, cur[p]])
                t_prev, s_prev = t0, cur[p]
                g_prev = g_left[m, s_prev]
                for tau, new in evs:
                    u_tau = surface.eval(tau)
                    g_tau = _drift_vector(driver, gen, tau, u_tau, a)
                    yp -= 0.5 * (tau - t_prev) * (g_prev + g_tau[s_prev])
                    yp += u_tau[new] - u_tau[s_prev]
                    t_prev, s_prev, g_prev = tau, new, g_tau[new]
                yp -= 0.5 * (t1 - t_prev) * (g_prev + g_right[m, s_prev])
                y[p] = yp
                cur[p] = s_prev
        r = row_of_fine.get(m + 1)
        if r is not None:
            errs = np.abs(y - vals[r, cur])
            j = int(np.argmax(errs))
            if errs[j] > max_err:
                max_err, worst_path, worst_time = float(errs[j]), j, float(fine_times[m + 1])

    return PathwiseReport(max_error=max_err, n_paths=n_paths, worst_path=worst_path, worst_time=worst_time)


def _pathwise_slow(surface, gen, driver, paths, fine_times, row_of_fine):
    """Per-path fallback for drivers with a genuine value dependence."""
    vals = surface.values
    max_err, worst_path, worst_time = 0.0, -1, 0.0
    n_int = len(fine_times) - 1
    for p, path in enumerate(paths):
        jumps = list(zip(path.jump_times, path.jump_states))
        ji = 0
        state = path.initial
        y = float(vals[0, state])
        for m in range(n_int):
            t0, t1 = float(fine_times[m]), float(fine_times[m + 1])
            a = gen.matrix_at(0.5 * (t0 + t1))
            t_prev = t0
            while ji < len(jumps) and jumps[ji][0] <= t1:
                tau, new = float(jumps[ji][0]), int(jumps[ji][1])
                y = _rk4_scalar(surface, gen, driver, a, state, t_prev, tau, y)
                u_tau = surface.eval(tau)
                y += u_tau[new] - u_tau[state]
                state, t_prev, ji = new, tau, ji + 1
            y = _rk4_scalar(surface, gen, driver, a, state, t_prev, t1, y)
            r = row_of_fine.get(m + 1)
            if r is not None:
                err = abs(y - vals[r, state])
                if err > max_err:
                    max_err, worst_path, worst_time = float(err), p, t1
    return PathwiseReport(max_error=max_err, n_paths=len(paths), worst_path=worst_path, worst_time=worst_time)


def _rk4_scalar(surface, gen, driver, matrix, state, t0, t1, y):
    h = t1 - t0
    if h <= 0:
        return y

    def g(t, yv):
        u = surface.eval(t)
        return -(driver.evaluate(state, t, yv, u, gen, matrix=matrix) + u @ matrix[:, state])

    k1 = g(t0, y)
    k2 = g(t0 + 0.5 * h, y + 0.5 * h * k1)
    k3 = g(t0 + 0.5 * h, y + 0.5 * h * k2)
    k4 = g(t1, y + h * k3)
    return y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
