"""Payoffs on the price grid and assembly of pricing problems.

A chain state carries a stock price through a :class:`PriceMap`; payoffs
evaluate on those prices to give the terminal vector of the backward
equation.  Knockout barriers are expressed as a set of states whose value
is pinned to zero for all times.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .chain import Generator, validate_generator
from .drivers import DriverSpec

__all__ = [
    "PriceMap",
    "Payoff",
    "PricingProblem",
    "InvalidRange",
    "butterfly",
    "digital_knockout_terminal",
    "build_synthetic_chain",
    "load_table_payoff",
]


class InvalidRange(ValueError):
    """Synthetic chain parameters out of range."""


@dataclass(frozen=True)
class PriceMap:
    """Strictly positive stock price attached to each chain state."""

    prices: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.prices, dtype=float)
        if p.ndim != 1 or len(p) == 0:
            raise ValueError("prices must be a nonempty 1-d vector")
        if not np.all(np.isfinite(p)) or np.any(p <= 0):
            raise ValueError("prices must be finite and strictly positive")
        p.setflags(write=False)
        object.__setattr__(self, "prices", p)

    def __len__(self) -> int:
        return len(self.prices)

    def price(self, state: int) -> float:
        return float(self.prices[state])


def butterfly(s):
    """Butterfly-spread payoff, exactly as quoted on the desk sheet.

    ``s`` on ``[15, 20)``, ``25 - s`` on ``[20, 25)``, ``0`` otherwise.
    Note the first leg pays the full price level, not ``s - 15``; the
    discontinuity at 15 is intentional and kept as printed.  Accepts a
    scalar or an array.
    """
    sv = np.asarray(s, dtype=float)
    out = np.where(
        (sv >= 15.0) & (sv < 20.0), sv,
        np.where((sv >= 20.0) & (sv < 25.0), 25.0 - sv, 0.0),
    )
    return float(out) if np.isscalar(s) or sv.ndim == 0 else out


def digital_knockout_terminal(
    price_map: PriceMap, barrier: float = 25.0, strike_level: float = 15.0
) -> tuple[np.ndarray, tuple[int, ...]]:
    """Digital payoff with an up-and-out barrier.

    Pays 1 when the terminal price is strictly above ``strike_level`` and
    the price never reaches ``barrier``.  States priced at or above the
    barrier are knockout states (value pinned to 0 for all times); the
    boundary state exactly at the barrier is knocked out.  Returns the
    terminal vector and the barrier state indices; their supports are
    disjoint by construction.
    """
    p = price_map.prices
    phi = ((p > strike_level) & (p < barrier)).astype(float)
    barrier_states = tuple(int(i) for i in np.flatnonzero(p >= barrier))
    return phi, barrier_states


def load_table_payoff(path) -> np.ndarray:
    """Read a two-column text file of ``state_index value`` rows."""
    data = np.loadtxt(path, dtype=float, ndmin=2, comments="#")
    if data.shape[1] != 2:
        raise ValueError(f"{path}: expected two columns (state_index, value)")
    idx = data[:, 0].astype(int)
    n = int(idx.max()) + 1
    values = np.zeros(n)
    values[idx] = data[:, 1]
    return values


@dataclass(frozen=True)
class Payoff:
    """Terminal claim: a tagged kind plus its parameters.

    ``custom_table`` carries an explicit per-state vector; the other kinds
    evaluate on a price map.  ``digital_knockout`` also induces barrier
    states.
    """

    kind: str
    barrier: float = 25.0
    strike: float = 15.0
    values: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("butterfly", "digital_knockout", "custom_table"):
            raise ValueError(f"unknown payoff kind {self.kind!r}")
        if self.kind == "custom_table":
            if self.values is None:
                raise ValueError("custom_table payoff requires explicit values")
            v = np.asarray(self.values, dtype=float)
            if not np.all(np.isfinite(v)):
                raise ValueError("payoff table must be finite")
            v.setflags(write=False)
            object.__setattr__(self, "values", v)

    def terminal_vector(self, price_map: PriceMap | None, n_states: int) -> np.ndarray:
        if self.kind == "custom_table":
            if len(self.values) != n_states:
                raise ValueError(
                    f"payoff table has {len(self.values)} entries for {n_states} states"
                )
            return np.array(self.values, dtype=float)
        if price_map is None:
            raise ValueError(f"{self.kind} payoff needs a price map")
        if len(price_map) != n_states:
            raise ValueError("price map length does not match the chain")
        if self.kind == "butterfly":
            return butterfly(price_map.prices)
        phi, _ = digital_knockout_terminal(price_map, self.barrier, self.strike)
        return phi

    def implied_barrier_states(self, price_map: PriceMap | None) -> tuple[int, ...]:
        if self.kind == "digital_knockout":
            if price_map is None:
                raise ValueError("digital_knockout payoff needs a price map")
            _, bs = digital_knockout_terminal(price_map, self.barrier, self.strike)
            return bs
        return ()


@dataclass(frozen=True)
class PricingProblem:
    """Everything needed to value one claim on one chain."""

    gen: Generator
    price_map: PriceMap | None
    payoff: Payoff
    driver: DriverSpec
    barrier_states: tuple[int, ...] = ()
    horizon: float | None = None

    def __post_init__(self):
        T = self.gen.horizon if self.horizon is None else float(self.horizon)
        if not (0 < T <= self.gen.horizon * (1 + 1e-12)):
            raise ValueError(f"problem horizon {T} outside (0, {self.gen.horizon}]")
        object.__setattr__(self, "horizon", T)
        object.__setattr__(self, "barrier_states", tuple(sorted(set(int(i) for i in self.barrier_states))))
        for i in self.barrier_states:
            if not (0 <= i < self.gen.n_states):
                raise ValueError(f"barrier state {i} outside the state space")
        if self.payoff.kind == "digital_knockout":
            implied = self.payoff.implied_barrier_states(self.price_map)
            if self.barrier_states and self.barrier_states != implied:
                raise ValueError(
                    "barrier states inconsistent with the digital_knockout level"
                )
            object.__setattr__(self, "barrier_states", implied)

    @classmethod
    def build(
        cls,
        gen: Generator,
        payoff: Payoff,
        driver: DriverSpec,
        price_map: PriceMap | None = None,
        barrier_states=(),
        horizon: float | None = None,
    ) -> "PricingProblem":
        return cls(
            gen=gen, price_map=price_map, payoff=payoff, driver=driver,
            barrier_states=tuple(barrier_states), horizon=horizon,
        )

    def terminal_vector(self) -> np.ndarray:
        phi = self.payoff.terminal_vector(self.price_map, self.gen.n_states)
        if self.barrier_states:
            phi = phi.copy()
            phi[list(self.barrier_states)] = 0.0
        return phi


def build_synthetic_chain(
    n_states: int,
    price_range: tuple[float, float] = (10.0, 40.0),
    volatility_profile="flat",
    *,
    base_vol: float = 0.06,
    horizon: float = 1.0,
) -> tuple[Generator, PriceMap]:
    """Birth-death chain on a log-spaced price grid, desk-scale stand-in.

    Each interior state jumps one price level up or down at a rate of
    ``(vol_i)^2 / (2 * dlog^2)``, the local-variance scaling of a log-price
    random walk, so the level-dependent volatility profile shows up directly
    in the off-diagonal rates.  ``volatility_profile`` is ``"flat"``,
    ``"increasing"`` (ramps from 0.8x to 1.6x of ``base_vol`` with the price
    level), or an explicit per-state multiplier array.
    """
    if n_states < 2:
        raise InvalidRange(f"need at least 2 states, got {n_states}")
    lo, hi = float(price_range[0]), float(price_range[1])
    if not (0 < lo < hi) or not np.isfinite(hi):
        raise InvalidRange(f"price range must satisfy 0 < lo < hi, got {price_range}")
    if base_vol <= 0:
        raise InvalidRange(f"base_vol must be positive, got {base_vol}")

    prices = np.geomspace(lo, hi, n_states)
    if isinstance(volatility_profile, str):
        if volatility_profile == "flat":
            mult = np.ones(n_states)
        elif volatility_profile == "increasing":
            mult = np.linspace(0.8, 1.6, n_states)
        else:
            raise InvalidRange(f"unknown volatility profile {volatility_profile!r}")
    else:
        mult = np.asarray(volatility_profile, dtype=float)
        if mult.shape != (n_states,) or np.any(mult <= 0):
            raise InvalidRange("volatility profile must be positive with one entry per state")

    dlog = np.log(hi / lo) / (n_states - 1)
    vols = base_vol * mult
    level_rate = vols**2 / (2.0 * dlog**2)

    a = np.zeros((n_states, n_states))
    for j in range(n_states):
        if j + 1 < n_states:
            a[j + 1, j] = level_rate[j]
        if j - 1 >= 0:
            a[j - 1, j] = level_rate[j]
        a[j, j] = -(a[:, j].sum())
    gen = validate_generator(a, horizon=horizon)
    return gen, PriceMap(prices=prices)
