"""Backward-in-time integration of the coupled value ODE system.

A claim on an N-state chain with a state-invariant driver has a value
``u(t, state)`` solving the coupled system

    du/dt = -(f(t, u) + A_t^T u),    u(T) = terminal vector,

where component ``i`` of ``f`` is ``driver(state=i, t, y=u_i, z=u)`` and
``A_t`` is the (column-convention) rate matrix.  The same vector ``u_t`` is
simultaneously the value and the martingale integrand of the claim.
Integration runs in reversed time as a plain initial value problem, with
steps forced at generator segment breakpoints.

Barrier states are handled as a boundary condition: their components are
zeroed in the terminal vector, masked out of every vector-field evaluation
and re-pinned after each accepted step, which is algebraically identical to
deleting the corresponding rows and columns while keeping indexing stable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .chain import DimensionMismatch, Generator, psi
from .drivers import DriverSpec
from .payoffs import PricingProblem

__all__ = [
    "IntegratorConfig",
    "ValueSurface",
    "SplitProblem",
    "SplitReport",
    "StepLimitExceeded",
    "NonFiniteState",
    "InvalidTerminal",
    "build_vector_field",
    "solve_backward",
    "bid_ask",
    "risk_neutral",
    "validate_split",
    "split_from_driver",
]


class StepLimitExceeded(RuntimeError):
    """The adaptive integrator hit max_steps before reaching the end."""


class NonFiniteState(RuntimeError):
    """The integration state left the finite range (driver blow-up)."""


class InvalidTerminal(ValueError):
    """Terminal vector is malformed or non-finite."""


@dataclass(frozen=True)
class IntegratorConfig:
    """Integration method and tolerances.

    ``fixed_rk4`` uses the classical fourth-order scheme on a uniform grid
    of width ``step`` (which must divide the horizon); the grid is the
    output grid.  ``adaptive_embedded`` is a Dormand-Prince 5(4) pair with
    PI step control; output rows are the accepted steps.
    """

    method: str = "adaptive_embedded"
    step: float | None = None
    rel_tol: float = 1e-6
    abs_tol: float = 1e-9
    max_steps: int = 200_000

    def __post_init__(self):
        if self.method not in ("fixed_rk4", "adaptive_embedded"):
            raise ValueError(f"unknown integrator method {self.method!r}")
        if self.method == "fixed_rk4":
            if self.step is None or self.step <= 0:
                raise ValueError("fixed_rk4 requires a positive step")
        if self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")

    def validate_span(self, span: float) -> None:
        if self.method == "fixed_rk4":
            ratio = span / self.step
            if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
                raise ValueError(f"step {self.step} does not divide the horizon {span}")

    def error_scale(self, terminal) -> float:
        """A priori size of the integration error, used as a verify budget."""
        scale = float(np.max(np.abs(terminal))) if len(terminal) else 1.0
        return self.rel_tol * max(scale, 1.0) + self.abs_tol


@dataclass(frozen=True)
class ValueSurface:
    """Claim values on a time grid: row ``k`` is the vector ``u(times[k])``.

    The last row equals the terminal vector exactly; barrier-state columns
    are exactly zero in every row.  ``d_right``/``d_left`` hold the one-sided
    time derivatives at the grid nodes (they differ only across generator
    segment breakpoints) and enable cubic Hermite evaluation between rows.
    """

    times: np.ndarray
    values: np.ndarray
    barrier_states: tuple[int, ...] = ()
    d_right: np.ndarray | None = None
    d_left: np.ndarray | None = None

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if v.shape[0] != len(t):
            raise ValueError("times and value rows must align")
        if np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")
        if not np.all(np.isfinite(v)):
            raise ValueError("surface contains non-finite values")
        t.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "barrier_states", tuple(int(i) for i in self.barrier_states))

    @property
    def n_states(self) -> int:
        return self.values.shape[1]

    @property
    def initial(self) -> np.ndarray:
        return self.values[0]

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]

    def eval(self, t: float) -> np.ndarray:
        """Value vector at ``t``, cubic Hermite between grid rows.

        Falls back to linear interpolation when derivative rows are absent.
        """
        ts = self.times
        if t <= ts[0]:
            return self.values[0].copy()
        if t >= ts[-1]:
            return self.values[-1].copy()
        k = int(np.searchsorted(ts, t, side="right")) - 1
        h = ts[k + 1] - ts[k]
        th = (t - ts[k]) / h
        v0, v1 = self.values[k], self.values[k + 1]
        if self.d_right is None or self.d_left is None:
            return v0 + th * (v1 - v0)
        d0, d1 = self.d_right[k], self.d_left[k + 1]
        h00 = (1 + 2 * th) * (1 - th) ** 2
        h10 = th * (1 - th) ** 2
        h01 = th * th * (3 - 2 * th)
        h11 = th * th * (th - 1)
        return h00 * v0 + h10 * h * d0 + h01 * v1 + h11 * h * d1

    def value_at(self, t: float, state: int) -> float:
        return float(self.eval(t)[state])

    def to_csv(self, path, price_labels=None) -> None:
        """Write ``t,state_0,...`` rows; floats use shortest round-trip form."""
        n = self.n_states
        if price_labels is not None and len(price_labels) != n:
            raise ValueError("price labels must match the state count")
        header = ["t"] + (
            [f"S_{i}" for i in range(n)] if price_labels is not None
            else [f"state_{i}" for i in range(n)]
        )
        lines = [",".join(header)]
        if price_labels is not None:
            lines.append("# prices," + ",".join(repr(float(p)) for p in price_labels))
        for t, row in zip(self.times, self.values):
            lines.append(",".join([repr(float(t))] + [repr(float(v)) for v in row]))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @staticmethod
    def from_csv(path) -> "ValueSurface":
        with open(path, "r", encoding="utf-8") as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
        rows = [ln for ln in lines[1:] if not ln.startswith("#")]
        data = np.array([[float(v) for v in ln.split(",")] for ln in rows])
        return ValueSurface(times=data[:, 0], values=data[:, 1:])


def build_vector_field(
    gen: Generator, driver: DriverSpec, barrier_states=()
) -> Callable:
    """Right-hand side ``(t, u) -> du/dt`` of the coupled value system.

    Component ``i`` is ``-(driver(i, t, u_i, u) + u . A_t[:, i])``.  With the
    column convention, ``(A^T u)_i`` is exactly the product of ``u`` with the
    rates out of state ``i``.  Barrier components are zeroed on input and
    output, which realizes the knockout boundary condition.  The optional
    ``matrix`` argument overrides the segment lookup; integrators pass the
    segment of the current step so evaluations at breakpoints use the
    correct side.
    """
    bset = tuple(int(i) for i in barrier_states)
    n = gen.n_states

    def fieldfn(t: float, u: np.ndarray, matrix=None) -> np.ndarray:
        a = gen.matrix_at(t) if matrix is None else matrix
        if bset:
            u = u.copy()
            u[list(bset)] = 0.0
        fvec = np.fromiter(
            (driver.evaluate(i, t, u[i], u, gen, matrix=a) for i in range(n)),
            dtype=float, count=n,
        )
        out = -(fvec + a.T @ u)
        if bset:
            out[list(bset)] = 0.0
        return out

    return fieldfn


def solve_backward(problem: PricingProblem, cfg: IntegratorConfig | None = None) -> ValueSurface:
    """Integrate the value system from the terminal vector down to time 0.

    Equivalently runs forward in reversed time on the negated field.  The
    returned surface has its last row equal to the terminal vector exactly
    and barrier columns exactly zero everywhere.
    """
    cfg = cfg or IntegratorConfig()
    gen = problem.gen
    span = problem.horizon
    cfg.validate_span(span)

    phi = np.asarray(problem.terminal_vector(), dtype=float)
    if phi.shape != (gen.n_states,):
        raise InvalidTerminal(f"terminal vector shape {phi.shape}, expected ({gen.n_states},)")
    if not np.all(np.isfinite(phi)):
        raise InvalidTerminal("terminal vector has non-finite entries")

    barrier = problem.barrier_states
    fieldfn = build_vector_field(gen, problem.driver, barrier)

    # reversed time s = span - t; forward IVP dv/ds = +(f + A^T v)
    def rhs(s: float, v: np.ndarray, matrix=None) -> np.ndarray:
        return -fieldfn(span - s, v, matrix=matrix)

    def seg_matrix(s_lo: float, s_hi: float) -> np.ndarray:
        return gen.matrix_at(span - 0.5 * (s_lo + s_hi))

    mandatory = sorted(
        {0.0, span} | {span - float(b) for b in gen.breakpoints if 0.0 < b < span}
    )
    if cfg.method == "fixed_rk4":
        s_nodes, rows = _integrate_fixed_rk4(rhs, seg_matrix, phi, span, cfg.step, mandatory)
    else:
        s_nodes, rows = _integrate_dopri(rhs, seg_matrix, phi, span, cfg, mandatory)

    times = span - s_nodes[::-1]
    times[0] = 0.0 if times[0] < 1e-15 else times[0]
    times[-1] = span
    values = rows[::-1].copy()
    values[-1] = phi
    if barrier:
        values[:, list(barrier)] = 0.0

    d_right = np.empty_like(values)
    d_left = np.empty_like(values)
    for k in range(len(times) - 1):
        a = gen.matrix_at(0.5 * (times[k] + times[k + 1]))
        d_right[k] = fieldfn(times[k], values[k], matrix=a)
        d_left[k + 1] = fieldfn(times[k + 1], values[k + 1], matrix=a)
    d_left[0] = d_right[0]
    d_right[-1] = d_left[-1]

    return ValueSurface(
        times=times, values=values, barrier_states=barrier,
        d_right=d_right, d_left=d_left,
    )


def risk_neutral(problem: PricingProblem, cfg: IntegratorConfig | None = None) -> ValueSurface:
    """Value surface under the zero driver (plain expectation)."""
    from dataclasses import replace

    return solve_backward(replace(problem, driver=DriverSpec.zero()), cfg)


def bid_ask(
    problem: PricingProblem, cfg: IntegratorConfig | None = None
) -> tuple[ValueSurface, ValueSurface]:
    """Bid and ask value surfaces of the claim.

    The ask is the solution with the claim's own terminal vector (what an
    agent pays to acquire it); the bid is the negated solution for the
    negated claim (what an agent accepts to part with it).  For a concave
    driver the bid lies above the ask, and the zero-driver value sits in
    between.  Returns ``(bid, ask)``.
    """
    ask = solve_backward(problem, cfg)

    neg_payoff = _negated_payoff(problem)
    neg_problem = PricingProblem(
        gen=problem.gen, price_map=problem.price_map, payoff=neg_payoff,
        driver=problem.driver, barrier_states=problem.barrier_states,
        horizon=problem.horizon,
    )
    sold = solve_backward(neg_problem, cfg)
    bid = ValueSurface(
        times=sold.times, values=-sold.values,
        barrier_states=sold.barrier_states,
        d_right=None if sold.d_right is None else -sold.d_right,
        d_left=None if sold.d_left is None else -sold.d_left,
    )
    return bid, ask


def _negated_payoff(problem: PricingProblem):
    from .payoffs import Payoff

    phi = problem.payoff.terminal_vector(problem.price_map, problem.gen.n_states)
    return Payoff(kind="custom_table", values=-phi)


# ---------------------------------------------------------------------------
# integrators


def _merge_nodes(nodes, extra, span):
    merged = np.unique(np.concatenate([nodes, extra]))
    keep = [merged[0]]
    for x in merged[1:]:
        if x - keep[-1] > 1e-12 * max(span, 1.0):
            keep.append(x)
    keep[-1] = max(keep[-1], merged[-1])
    return np.asarray(keep)


def _rk4_step(rhs, s, v, h, matrix):
    k1 = rhs(s, v, matrix=matrix)
    k2 = rhs(s + 0.5 * h, v + 0.5 * h * k1, matrix=matrix)
    k3 = rhs(s + 0.5 * h, v + 0.5 * h * k2, matrix=matrix)
    k4 = rhs(s + h, v + h * k3, matrix=matrix)
    return v + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _integrate_fixed_rk4(rhs, seg_matrix, v0, span, step, mandatory):
    n_steps = int(round(span / step))
    nodes = _merge_nodes(np.linspace(0.0, span, n_steps + 1), np.asarray(mandatory), span)
    rows = np.empty((len(nodes), len(v0)))
    rows[0] = v0
    v = v0.copy()
    for k in range(len(nodes) - 1):
        s, s1 = nodes[k], nodes[k + 1]
        mat = seg_matrix(s, s1)
        v = _rk4_step(rhs, s, v, s1 - s, mat)
        if not np.all(np.isfinite(v)):
            raise NonFiniteState(f"non-finite state at reversed time {s1}")
        rows[k + 1] = v
    return nodes, rows


# Dormand-Prince 5(4) tableau
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B4 = np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)
_DP_E = _DP_B5 - _DP_B4


def _integrate_dopri(rhs, seg_matrix, v0, span, cfg: IntegratorConfig, mandatory):
    targets = sorted(set(float(x) for x in mandatory if x > 0.0) | {span})
    s = 0.0
    v = v0.copy()
    nodes = [0.0]
    rows = [v0.copy()]
    h = span / 64.0
    err_prev = 1.0
    steps = 0
    for target in targets:
        while s < target - 1e-13 * max(span, 1.0):
            if steps >= cfg.max_steps:
                raise StepLimitExceeded(
                    f"max_steps={cfg.max_steps} exhausted at reversed time {s}"
                )
            h = min(h, target - s)
            mat = seg_matrix(s, s + h)
            k = np.empty((7, len(v)))
            k[0] = rhs(s, v, matrix=mat)
            for i in range(1, 7):
                vi = v + h * (_DP_A[i] @ k[:i])
                k[i] = rhs(s + _DP_C[i] * h, vi, matrix=mat)
            v_new = v + h * (_DP_B5 @ k)
            if not np.all(np.isfinite(v_new)):
                raise NonFiniteState(f"non-finite state at reversed time {s + h}")
            err_vec = h * (_DP_E @ k)
            scale = cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(v), np.abs(v_new))
            err = float(np.sqrt(np.mean((err_vec / scale) ** 2)))
            steps += 1
            if err <= 1.0:
                s_new = s + h
                if abs(s_new - target) <= 1e-12 * max(span, 1.0):
                    s_new = target
                s = s_new
                v = v_new
                nodes.append(s)
                rows.append(v.copy())
                fac = 0.9 * (max(err, 1e-10) ** -0.14) * (err_prev**0.08)
                err_prev = max(err, 1e-10)
                h *= min(5.0, max(0.2, fac))
            else:
                h *= max(0.2, 0.9 * err**-0.2)
    return np.asarray(nodes), np.asarray(rows)


# ---------------------------------------------------------------------------
# splitting validation


@dataclass(frozen=True)
class SplitProblem:
    """A residual field paired with the rate matrix it was split against.

    ``residual(t, v) -> vector`` is the non-generator part of a coupled ODE
    right-hand side.  For the split to admit the chain-based Monte-Carlo
    treatment, each component ``i`` may move only as fast as the local jump
    activity allows: ``|res_i(t, v) - res_i(t, v')|^2 <= c * q_i(v - v')``
    with ``q_i`` the quadratic form of :func:`chainbsde.chain.psi` at state
    ``i``.  In particular ``res_i`` may depend on coordinate ``j`` only when
    a jump from ``i`` to ``j`` is possible.
    """

    gen: Generator
    residual: Callable[[float, np.ndarray], np.ndarray]
    lipschitz_c: float | None = None


@dataclass(frozen=True)
class SplitReport:
    """Outcome of the empirical seminorm-Lipschitz test."""

    max_ratio: float
    violations: tuple[tuple[int, int], ...]
    n_pairs: int
    passed: bool

    def summary(self) -> str:
        status = "pass" if self.passed else "FAIL"
        lines = [
            f"split check: {status}  (pairs sampled: {self.n_pairs}, "
            f"largest |df_i|^2 / seminorm^2 ratio: {self.max_ratio:.6g})"
        ]
        for i, j in self.violations:
            lines.append(
                f"  violation: component {i} depends on coordinate {j} "
                f"which is unreachable from state {i}"
            )
        return "\n".join(lines)


def split_from_driver(gen: Generator, driver: DriverSpec) -> SplitProblem:
    """Residual field of the value system for a given driver."""
    n = gen.n_states

    def residual(t: float, v: np.ndarray) -> np.ndarray:
        return np.fromiter(
            (driver.evaluate(i, t, v[i], v, gen) for i in range(n)),
            dtype=float, count=n,
        )

    return SplitProblem(gen=gen, residual=residual)


def validate_split(
    split: SplitProblem,
    *,
    n_pairs: int = 200,
    seed: int = 0,
    scale: float = 1.0,
    zero_tol: float = 1e-12,
    dep_tol: float = 1e-9,
) -> SplitReport:
    """Empirically test the seminorm-Lipschitz condition of a splitting.

    Samples random vector pairs and records the largest ratio of squared
    component increment to the seminorm of the perturbation; additionally
    probes every single-coordinate direction and flags components that move
    while the seminorm of the probe is zero (dependence on an unreachable
    coordinate).  Report-only: violations never raise.
    """
    gen = split.gen
    n = gen.n_states
    rng = np.random.default_rng(seed)
    probe_times = np.unique(
        np.concatenate([gen.breakpoints + 1e-9 * max(gen.horizon, 1.0), [gen.horizon * 0.5]])
    )
    probe_times = probe_times[(probe_times >= 0) & (probe_times <= gen.horizon)]

    max_ratio = 0.0
    violations: set[tuple[int, int]] = set()

    for t in probe_times:
        a = gen.matrix_at(t)
        # directional probes: perturb one coordinate at a time
        for _ in range(3):
            v = rng.normal(0.0, scale, n)
            f_v = np.asarray(split.residual(t, v), dtype=float)
            for j in range(n):
                delta = scale * (0.5 + rng.random())
                vp = v.copy()
                vp[j] += delta
                f_vp = np.asarray(split.residual(t, vp), dtype=float)
                for i in range(n):
                    num = (f_vp[i] - f_v[i]) ** 2
                    qf = a[j, i] * delta**2 if j != i else (-a[i, i]) * delta**2
                    if qf <= zero_tol:
                        if num > (dep_tol * max(scale, 1.0)) ** 2:
                            violations.add((i, j))
                    else:
                        max_ratio = max(max_ratio, num / qf)
        # random pair probes for the empirical modulus
        for _ in range(max(1, n_pairs // (3 * len(probe_times)))):
            v = rng.normal(0.0, scale, n)
            vp = v + rng.normal(0.0, scale, n)
            f_v = np.asarray(split.residual(t, v), dtype=float)
            f_vp = np.asarray(split.residual(t, vp), dtype=float)
            d = vp - v
            for i in range(n):
                col = a[:, i]
                qf = float(np.sum(col * (d - d[i]) ** 2))
                num = (f_vp[i] - f_v[i]) ** 2
                if qf > zero_tol:
                    max_ratio = max(max_ratio, num / qf)
                elif num > (dep_tol * max(scale, 1.0)) ** 2:
                    violations.add((i, int(np.argmax(np.abs(d)))))

    return SplitReport(
        max_ratio=float(max_ratio),
        violations=tuple(sorted(violations)),
        n_pairs=n_pairs,
        passed=not violations,
    )
