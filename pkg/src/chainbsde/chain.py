"""Finite-state continuous-time Markov chains.

Rate matrices follow the column convention throughout this package:
``A[i, j]`` is the rate of jumping from state ``j`` to state ``i``.  Every
column of a valid generator sums to zero and off-diagonal entries are
nonnegative.  Most textbooks use the transpose, so loaders state the
convention explicitly and validation rejects anything else.

Generators may be piecewise constant in time: a sorted list of segment
start times, each with its own matrix, covering ``[0, horizon]`` without
gaps.  This is enough for every pricing problem handled here and keeps
path simulation exact (no thinning or uniformization).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Generator",
    "ChainPath",
    "GeneratorValidationError",
    "NegativeOffDiagonal",
    "ColumnSumNonzero",
    "SegmentGap",
    "DimensionMismatch",
    "validate_generator",
    "load_generator",
    "save_generator",
    "psi",
    "seminorm_sq",
    "m_equivalent",
    "simulate_path",
]

COLUMN_SUM_TOL = 1e-12
REPAIR_LIMIT = 1e-9


class GeneratorValidationError(ValueError):
    """A candidate rate matrix violates the generator invariants."""


class NegativeOffDiagonal(GeneratorValidationError):
    def __init__(self, i: int, j: int, segment: int, value: float):
        self.i, self.j, self.segment, self.value = i, j, segment, value
        super().__init__(
            f"segment {segment}: entry ({i}, {j}) = {value} is a negative "
            f"off-diagonal rate"
        )


class ColumnSumNonzero(GeneratorValidationError):
    def __init__(self, j: int, value: float, segment: int):
        self.j, self.value, self.segment = j, value, segment
        super().__init__(
            f"segment {segment}: column {j} sums to {value}, expected 0"
        )


class SegmentGap(GeneratorValidationError):
    def __init__(self, detail: str):
        self.detail = detail
        super().__init__(f"segments do not cover the horizon: {detail}")


class DimensionMismatch(ValueError):
    """Vector or matrix shape does not match the chain's state count."""


@dataclass(frozen=True)
class Generator:
    """Validated piecewise-constant rate matrix on ``[0, horizon]``.

    ``breakpoints[k]`` is the start time of segment ``k``; segment ``k`` is
    active on ``[breakpoints[k], breakpoints[k+1])`` and the last segment
    runs to the horizon inclusive.  Arrays are write-protected, so instances
    are safe to share across threads.  Construct via :func:`validate_generator`.
    """

    n_states: int
    breakpoints: np.ndarray
    matrices: np.ndarray  # shape (n_segments, N, N)
    horizon: float

    @property
    def n_segments(self) -> int:
        return len(self.breakpoints)

    @property
    def segments(self) -> tuple[tuple[float, np.ndarray], ...]:
        return tuple(
            (float(t), self.matrices[k]) for k, t in enumerate(self.breakpoints)
        )

    def segment_index(self, t: float) -> int:
        if t < -1e-12 or t > self.horizon * (1 + 1e-12) + 1e-12:
            raise ValueError(f"time {t} outside [0, {self.horizon}]")
        k = int(np.searchsorted(self.breakpoints, t, side="right")) - 1
        return min(max(k, 0), self.n_segments - 1)

    def matrix_at(self, t: float) -> np.ndarray:
        """Active rate matrix at time ``t`` (right-continuous in ``t``)."""
        return self.matrices[self.segment_index(t)]

    def exit_rate(self, state: int, t: float) -> float:
        """Total rate of leaving ``state`` at time ``t``."""
        return float(-self.matrix_at(t)[state, state])

    @classmethod
    def homogeneous(cls, matrix, horizon: float, **kwargs) -> "Generator":
        """Validate a single constant-in-time rate matrix."""
        return validate_generator([matrix], [0.0], horizon, **kwargs)


def validate_generator(
    matrices,
    breakpoints=None,
    horizon: float = 1.0,
    *,
    tol: float = COLUMN_SUM_TOL,
    repair: bool = False,
) -> Generator:
    """Check generator invariants and return an immutable :class:`Generator`.

    ``matrices`` is one square matrix or a sequence of them; ``breakpoints``
    are the matching segment start times (first must be 0).  With
    ``repair=True``, column-sum defects up to ``1e-9`` are folded into the
    diagonal before the strict ``tol`` check; larger defects always raise.
    Calibrated matrices routinely carry rounding noise, hence the flag.

    Raises :class:`NegativeOffDiagonal`, :class:`ColumnSumNonzero`,
    :class:`SegmentGap` or :class:`DimensionMismatch`.
    """
    mats = np.asarray(matrices, dtype=float)
    if mats.ndim == 2:
        mats = mats[None, :, :]
    if mats.ndim != 3 or mats.shape[1] != mats.shape[2]:
        raise DimensionMismatch(f"expected square matrices, got shape {mats.shape}")
    n_seg, n = mats.shape[0], mats.shape[1]

    if breakpoints is None:
        breakpoints = [0.0] if n_seg == 1 else None
    if breakpoints is None:
        raise SegmentGap("breakpoints required for multi-segment generators")
    bps = np.asarray(breakpoints, dtype=float)
    if len(bps) != n_seg:
        raise SegmentGap(f"{n_seg} matrices but {len(bps)} breakpoints")
    if not np.isfinite(horizon) or horizon <= 0:
        raise ValueError(f"horizon must be positive and finite, got {horizon}")
    if abs(bps[0]) > 1e-15:
        raise SegmentGap(f"first segment starts at {bps[0]}, not 0")
    bps[0] = 0.0
    if np.any(np.diff(bps) <= 0):
        raise SegmentGap("breakpoints must be strictly increasing")
    if bps[-1] >= horizon:
        raise SegmentGap(f"breakpoint {bps[-1]} at or beyond horizon {horizon}")

    mats = mats.copy()
    for s in range(n_seg):
        a = mats[s]
        if not np.all(np.isfinite(a)):
            raise GeneratorValidationError(f"segment {s}: non-finite entries")
        off = a.copy()
        np.fill_diagonal(off, 0.0)
        neg = np.argwhere(off < 0)
        if len(neg):
            i, j = (int(v) for v in neg[0])
            raise NegativeOffDiagonal(i, j, s, float(a[i, j]))
        colsum = a.sum(axis=0)
        bad = np.abs(colsum) > tol
        if np.any(bad):
            j = int(np.argmax(np.abs(colsum)))
            if repair and np.all(np.abs(colsum) <= REPAIR_LIMIT):
                a[np.arange(n), np.arange(n)] -= colsum
            else:
                raise ColumnSumNonzero(j, float(colsum[j]), s)

    mats.setflags(write=False)
    bps.setflags(write=False)
    return Generator(n_states=n, breakpoints=bps, matrices=mats, horizon=float(horizon))


@dataclass(frozen=True)
class ChainPath:
    """One realized trajectory: initial state plus ordered jumps.

    Jump times are strictly increasing in ``(0, horizon]`` and every jump
    changes the state.
    """

    initial: int
    jump_times: np.ndarray
    jump_states: np.ndarray
    horizon: float

    def __post_init__(self):
        jt = np.asarray(self.jump_times, dtype=float)
        js = np.asarray(self.jump_states, dtype=int)
        if jt.shape != js.shape:
            raise ValueError("jump_times and jump_states must align")
        if len(jt):
            if np.any(np.diff(jt) <= 0):
                raise ValueError("jump times must be strictly increasing")
            if jt[0] <= 0 or jt[-1] > self.horizon:
                raise ValueError("jump times must lie in (0, horizon]")
            seq = np.concatenate(([self.initial], js))
            if np.any(seq[1:] == seq[:-1]):
                raise ValueError("each jump must change the state")
        jt.setflags(write=False)
        js.setflags(write=False)
        object.__setattr__(self, "jump_times", jt)
        object.__setattr__(self, "jump_states", js)

    @property
    def n_jumps(self) -> int:
        return len(self.jump_times)

    def state_at(self, t: float) -> int:
        """State occupied at time ``t`` (right-continuous)."""
        k = int(np.searchsorted(self.jump_times, t, side="right"))
        return self.initial if k == 0 else int(self.jump_states[k - 1])

    def states_at(self, times) -> np.ndarray:
        idx = np.searchsorted(self.jump_times, np.asarray(times, dtype=float), side="right")
        seq = np.concatenate(([self.initial], self.jump_states)).astype(int)
        return seq[idx]


def psi(gen: Generator, t: float, state: int) -> np.ndarray:
    """Jump-activity quadratic-form matrix at ``(t, state)``.

    Built as ``diag(A x) - A diag(x) - diag(x) A^T`` with ``x`` the basis
    vector of ``state``.  The result is symmetric positive semidefinite
    with zero row and column sums; ``z^T psi z`` measures how much a chain
    integrand ``z`` is actually exposed to the jumps available from
    ``state``.
    """
    _check_state(gen, state)
    a = gen.matrix_at(t)
    col = a[:, state]
    out = np.diag(col).astype(float)
    out[:, state] -= col
    out[state, :] -= col
    out.setflags(write=False)
    return out


def seminorm_sq(z, gen: Generator, t: float, state: int) -> float:
    """Squared seminorm ``z^T psi(A_t, e_state) z``.

    Computed as ``sum_k A[k, state] * (z_k - z_state)^2`` which is exactly
    nonnegative term by term (the ``k = state`` term vanishes identically),
    so constant vectors map to exactly 0.0.
    """
    _check_state(gen, state)
    zv = _check_vector(z, gen.n_states)
    col = gen.matrix_at(t)[:, state]
    d = zv - zv[state]
    return float(np.sum(col * d * d))


def m_equivalent(z1, z2, gen: Generator, t: float, state: int, tol: float = 0.0) -> bool:
    """True when ``z1`` and ``z2`` are indistinguishable as chain integrands.

    Two vectors are equivalent at ``(t, state)`` when the seminorm of their
    difference is at most ``tol``; stochastic integrals against the chain's
    compensated martingale then coincide.  Adding a constant to every
    component, or changing components unreachable from ``state``, never
    breaks equivalence.
    """
    zv1 = _check_vector(z1, gen.n_states)
    zv2 = _check_vector(z2, gen.n_states)
    return seminorm_sq(zv1 - zv2, gen, t, state) <= tol


def simulate_path(gen: Generator, start: int, horizon: float | None = None, seed=None) -> ChainPath:
    """Exact jump-chain simulation, deterministic given ``seed``.

    Holding times are exponential at the current exit rate; jump targets are
    drawn proportionally to the off-diagonal column entries.  Segment
    boundaries restart the clock (memoryless property), so piecewise-constant
    generators are simulated without bias.  Pure function of its inputs:
    callers may fan out over independent seeds.
    """
    _check_state(gen, start)
    T = gen.horizon if horizon is None else float(horizon)
    if T <= 0 or T > gen.horizon * (1 + 1e-12):
        raise ValueError(f"horizon must lie in (0, {gen.horizon}]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    seg_ends = np.append(gen.breakpoints[1:], T)
    t = 0.0
    state = int(start)
    times: list[float] = []
    states: list[int] = []
    seg = 0
    while t < T:
        while seg + 1 < gen.n_segments and t >= gen.breakpoints[seg + 1]:
            seg += 1
        a = gen.matrices[seg]
        rate = -a[state, state]
        seg_end = min(float(seg_ends[seg]), T)
        if rate <= 0.0:
            t = seg_end
            if seg_end >= T:
                break
            continue
        hold = rng.exponential(1.0 / rate)
        if t + hold >= seg_end:
            t = seg_end
            if seg_end >= T:
                break
            continue
        t = t + hold
        targets = np.flatnonzero(a[:, state] > 0)
        cum = np.cumsum(a[targets, state])
        u = rng.random() * cum[-1]
        state = int(targets[min(int(np.searchsorted(cum, u, side="right")), len(targets) - 1)])
        times.append(t)
        states.append(state)

    return ChainPath(
        initial=int(start),
        jump_times=np.asarray(times, dtype=float),
        jump_states=np.asarray(states, dtype=int),
        horizon=T,
    )


def load_generator(path, horizon: float, **kwargs) -> Generator:
    """Read a generator from the plain-text matrix format.

    Layout: one or more leading ``#`` comment lines (the first is mandatory
    and must state the column convention), then a line ``N S`` giving the
    state and segment counts, then for each segment its start time on its
    own line followed by ``N`` rows of ``N`` whitespace-separated decimals.
    The horizon is not part of the file and must be supplied.
    """
    with open(path, "r", encoding="utf-8") as fh:
        raw = [ln.strip() for ln in fh]
    lines = [ln for ln in raw if ln]
    if not lines or not lines[0].startswith("#"):
        raise ValueError(
            f"{path}: missing mandatory header comment stating the column convention"
        )
    body = [ln for ln in lines if not ln.startswith("#")]
    if not body:
        raise ValueError(f"{path}: no data lines")
    head = body[0].split()
    if len(head) != 2:
        raise ValueError(f"{path}: first data line must be 'N S'")
    n, n_seg = int(head[0]), int(head[1])
    expected = 1 + n_seg * (1 + n)
    if len(body) != expected:
        raise ValueError(f"{path}: expected {expected} data lines, found {len(body)}")
    pos = 1
    bps, mats = [], []
    for _ in range(n_seg):
        bps.append(float(body[pos]))
        pos += 1
        rows = []
        for _ in range(n):
            vals = [float(v) for v in body[pos].split()]
            if len(vals) != n:
                raise DimensionMismatch(f"{path}: row with {len(vals)} entries, expected {n}")
            rows.append(vals)
            pos += 1
        mats.append(rows)
    return validate_generator(mats, bps, horizon, **kwargs)


def save_generator(gen: Generator, path) -> None:
    """Write the plain-text matrix format read by :func:`load_generator`."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            "# rate matrix, column convention: entry (i, j) is the rate of "
            "jumping from state j to state i; columns sum to zero\n"
        )
        fh.write(f"{gen.n_states} {gen.n_segments}\n")
        for t0, mat in gen.segments:
            fh.write(f"{t0!r}\n")
            for row in mat:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def _check_state(gen: Generator, state: int) -> None:
    if not (0 <= int(state) < gen.n_states):
        raise ValueError(f"state {state} outside 0..{gen.n_states - 1}")


def _check_vector(z, n: int) -> np.ndarray:
    zv = np.asarray(z, dtype=float)
    if zv.shape != (n,):
        raise DimensionMismatch(f"expected vector of length {n}, got shape {zv.shape}")
    return zv
