"""Nonlinear drivers for chain-driven backward equations.

A driver maps ``(state, t, y, z, generator)`` to a real drift contribution.
Every driver shipped here is invariant under the integrand equivalence of
:func:`chainbsde.chain.m_equivalent`: adding a constant to ``z``, or editing
components of ``z`` unreachable from the current state, never changes the
value.  Concave drivers turn the linear expectation into a risk-averse one
and produce bid/ask spreads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .chain import Generator, _check_state, _check_vector

__all__ = [
    "DriverSpec",
    "DistortedRates",
    "InvalidAlpha",
    "InvalidGamma",
    "eval_zero",
    "eval_affine",
    "eval_rate_uncertainty",
    "distort_rates",
    "eval_minmaxvar",
]

DRIVER_KINDS = ("zero", "affine", "rate_uncertainty", "minmaxvar")


class InvalidAlpha(ValueError):
    """Rate-uncertainty scale must satisfy alpha >= 1."""


class InvalidGamma(ValueError):
    """Distortion stress level must satisfy gamma >= 0."""


def eval_zero(state, t, y, z) -> float:
    """Driver of the plain linear expectation: identically zero."""
    return 0.0


def eval_affine(state, t, y, z, gen: Generator, y_coef=0.0, z_coef=0.0, const=0.0, matrix=None) -> float:
    """``y_coef*y + z_coef*(z . A_t[:, state]) + const``.

    The ``z`` dependence runs through the column product only, which keeps
    the driver invariant under constant shifts and unreachable-coordinate
    edits of ``z``.
    """
    zv = _check_vector(z, gen.n_states)
    a = gen.matrix_at(t) if matrix is None else matrix
    return float(y_coef * y + z_coef * (zv @ a[:, state]) + const)


def eval_rate_uncertainty(state, t, z, gen: Generator, alpha: float, matrix=None) -> float:
    """Worst case over a multiplicative band of the overall jump rate.

    With ``s = z . A_t[:, state]``, returns ``min over r in [1/alpha, alpha]``
    of ``r*s``, which is ``s/alpha`` for ``s >= 0`` and ``alpha*s`` otherwise
    (linear objective, minimum at an endpoint).  Only the overall scale of
    the rates is uncertain; relative rates into each state are kept.
    """
    if alpha < 1.0:
        raise InvalidAlpha(f"alpha must be >= 1, got {alpha}")
    _check_state(gen, state)
    zv = _check_vector(z, gen.n_states)
    a = gen.matrix_at(t) if matrix is None else matrix
    s = float(zv @ a[:, state])
    return s / alpha if s >= 0.0 else alpha * s


@dataclass(frozen=True)
class DistortedRates:
    """Distorted jump rates out of ``state`` as a full generator column.

    ``rates[i]`` for ``i != state`` is the distorted rate into state ``i``;
    ``rates[state]`` is the negative sum of the others so the column sums
    to zero.  Total off-current mass always equals the original mass.
    """

    rates: np.ndarray
    state: int

    def __post_init__(self):
        r = np.asarray(self.rates, dtype=float)
        r.setflags(write=False)
        object.__setattr__(self, "rates", r)


def distort_rates(z, gen: Generator, t: float, state: int, gamma: float, matrix=None) -> DistortedRates:
    """Reweight the jump rates out of ``state`` toward adverse outcomes.

    Procedure: (1) stable-sort the states by ascending ``z`` (ties by
    index); (2) form the cumulative sum ``G`` of the sorted rates taken with
    positive part, so the current state contributes nothing; (3) map the
    cumulative levels through the concave bend
    ``psi(x) = 1 - (1 - x**(1/(1+gamma)))**(1+gamma)`` rescaled to
    ``[G_first, G_last]``; (4) difference back to individual rates, the
    first slot keeping its raw cumulative value; (5) unsort.  Low-``z``
    states gain rate mass, high-``z`` states lose it, and the total is
    conserved, so the distorted column is again a generator column.

    ``gamma = 0`` is special-cased to return the original positive-part
    rates bit-for-bit, as is the degenerate case where all cumulative
    levels coincide and there is nothing to distort.
    """
    if gamma < 0.0:
        raise InvalidGamma(f"gamma must be >= 0, got {gamma}")
    _check_state(gen, state)
    zv = _check_vector(z, gen.n_states)
    n = gen.n_states
    a = gen.matrix_at(t) if matrix is None else matrix
    col = a[:, state]

    order = np.argsort(zv, kind="stable")
    sorted_rates = np.maximum(col[order], 0.0)
    cum = np.cumsum(sorted_rates)
    span = cum[-1] - cum[0]

    if gamma == 0.0 or span <= 0.0:
        q = sorted_rates
    else:
        x = (cum - cum[0]) / span
        bent = (1.0 - (1.0 - x ** (1.0 / (1.0 + gamma))) ** (1.0 + gamma)) * span + cum[0]
        q = np.empty(n)
        q[0] = cum[0]
        q[1:] = np.diff(bent)
        np.maximum(q, 0.0, out=q)  # guard roundoff; psi is nondecreasing

    rates = np.empty(n)
    rates[order] = q
    rates[state] = 0.0
    rates[state] = -rates.sum()
    return DistortedRates(rates=rates, state=int(state))


def eval_minmaxvar(state, t, z, gen: Generator, gamma: float, matrix=None) -> float:
    """Drift correction from distorting the rates out of the current state.

    Returns ``z . (distorted_column - original_column)``, which is always
    <= 0: the distortion moves rate mass toward low-``z`` states, so the
    correction prices in adverse moves.
    """
    a = gen.matrix_at(t) if matrix is None else matrix
    distorted = distort_rates(z, gen, t, state, gamma, matrix=a)
    zv = np.asarray(z, dtype=float)
    return float(zv @ (distorted.rates - a[:, state]))


@dataclass(frozen=True)
class DriverSpec:
    """Tagged driver with its parameters and a uniform evaluation contract.

    All kinds accept the full ``(state, t, y, z, gen)`` signature even when
    ``y`` is ignored, so the backward-equation machinery can treat drivers
    uniformly.  ``matrix`` optionally overrides the time lookup of the rate
    matrix; integrators use it to pin the active segment at breakpoints.
    """

    kind: str
    alpha: float = 1.0
    gamma: float = 0.0
    y_coef: float = 0.0
    z_coef: float = 0.0
    const: float = 0.0

    def __post_init__(self):
        if self.kind not in DRIVER_KINDS:
            raise ValueError(f"unknown driver kind {self.kind!r}, expected one of {DRIVER_KINDS}")
        if self.kind == "rate_uncertainty" and self.alpha < 1.0:
            raise InvalidAlpha(f"alpha must be >= 1, got {self.alpha}")
        if self.kind == "minmaxvar" and self.gamma < 0.0:
            raise InvalidGamma(f"gamma must be >= 0, got {self.gamma}")

    @classmethod
    def zero(cls) -> "DriverSpec":
        return cls(kind="zero")

    @classmethod
    def affine(cls, y_coef=0.0, z_coef=0.0, const=0.0) -> "DriverSpec":
        return cls(kind="affine", y_coef=y_coef, z_coef=z_coef, const=const)

    @classmethod
    def rate_uncertainty(cls, alpha: float) -> "DriverSpec":
        return cls(kind="rate_uncertainty", alpha=alpha)

    @classmethod
    def minmaxvar(cls, gamma: float) -> "DriverSpec":
        return cls(kind="minmaxvar", gamma=gamma)

    @property
    def ignores_y(self) -> bool:
        return self.kind != "affine" or self.y_coef == 0.0

    def evaluate(self, state, t, y, z, gen: Generator, matrix=None) -> float:
        if self.kind == "zero":
            return 0.0
        if self.kind == "affine":
            return eval_affine(
                state, t, y, z, gen,
                y_coef=self.y_coef, z_coef=self.z_coef, const=self.const, matrix=matrix,
            )
        if self.kind == "rate_uncertainty":
            return eval_rate_uncertainty(state, t, z, gen, self.alpha, matrix=matrix)
        return eval_minmaxvar(state, t, z, gen, self.gamma, matrix=matrix)

    __call__ = evaluate
