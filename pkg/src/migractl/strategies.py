"""Control synthesis for the projected migration system.

All routines take projections in canonical (descending) order unless noted
and return plans indexed in that order.  N-agent final-cost routines support
budgets ``0 < M <= 1``; the two-agent routine covers ``0 < M <= 2``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from numpy.polynomial import Polynomial
from scipy.optimize import brentq, minimize_scalar

from .dynamics import _phi, propagate_constant
from .model import BudgetOutOfRange, ControlPlan, NonPositiveMean

DEFAULT_MERGE_TOL = 1e-7


def _positive_mean(xi) -> float:
    xibar = float(np.mean(xi))
    if not xibar > 0:
        raise NonPositiveMean(f"mean projection {xibar:.6g} is not positive")
    return xibar


def _require_sorted(xi):
    if np.any(np.diff(xi) > 0):
        raise ValueError("projections must be sorted in descending order")


def _tie_blocks(sorted_xi, tol):
    """Start indices of runs whose consecutive gaps are <= tol."""
    breaks = np.flatnonzero(np.diff(sorted_xi) < -tol) + 1
    return np.concatenate([[0], breaks, [sorted_xi.size]])


def instantaneous_control(xi, budget: float, merge_tol: float = DEFAULT_MERGE_TOL) -> np.ndarray:
    """Control minimizing dV/dt at the current state.

    Agents with positive projection get full control if there are at most
    ``budget`` of them.  Otherwise the budget is poured greedily from the
    largest projection down, and every group of tied projections shares its
    allotment equally.  Accepts any order; the result is indexed like ``xi``.
    """
    xi = np.asarray(xi, dtype=float)
    _positive_mean(xi)
    order = np.argsort(-xi, kind="stable")
    s = xi[order]
    positive = s > 0
    if positive.sum() <= budget:
        a = positive.astype(float)
    else:
        a = np.clip(budget - np.arange(s.size), 0.0, 1.0)
        edges = _tie_blocks(s, merge_tol)
        for lo, hi in zip(edges[:-1], edges[1:]):
            a[lo:hi] = a[lo:hi].mean()
    alpha = np.empty_like(a)
    alpha[order] = a
    return alpha


def integral_cost_control(xi, merge_tol: float = DEFAULT_MERGE_TOL) -> np.ndarray:
    """Unit control split equally over the agents at the current maximum."""
    xi = np.asarray(xi, dtype=float)
    _positive_mean(xi)
    top = xi >= xi.max() - merge_tol
    return top / top.sum()


def instantaneous_rate(xi, alpha) -> float:
    """``dV/dt = -2V + (2/N) xibar sum((1 - alpha) xi)``."""
    xi = np.asarray(xi, dtype=float)
    n = xi.size
    return float(-2.0 * np.mean(xi * xi) + 2.0 / n * xi.mean() * np.sum((1.0 - np.asarray(alpha)) * xi))


# --------------------------------------------------------------------------
# Two agents


@dataclass(frozen=True)
class TwoAgentRegime:
    budget: float
    case_id: str
    thresholds: tuple = (None, None, None)
    tstar: Optional[float] = None

    def __post_init__(self):
        conv = lambda v: None if v is None else float(v)
        object.__setattr__(self, "thresholds", tuple(conv(v) for v in self.thresholds))
        object.__setattr__(self, "tstar", conv(self.tstar))

    def to_dict(self) -> dict:
        t0, t1, t2 = self.thresholds
        return {"budget": self.budget, "case_id": self.case_id,
                "t0": t0, "t1": t1, "t2": t2, "tstar": self.tstar}


TWO_AGENT_CASES = (
    "equal_start", "M_le_1_long", "M_le_1_short", "M2_both_positive", "M2_long", "M2_short",
    "M12_T_lt_t0", "M12_t0_t1", "M12_t1_t2", "M12_T_ge_t2",
)


def _quartic_terms(xi0, xibar0, horizon):
    x1, x2 = float(xi0[0]), float(xi0[1])
    big = np.exp(horizon / 2.0)
    X = Polynomial([0.0, 1.0])
    first = x1 + xibar0 * (X ** 2 - 1)
    second = x2 + xibar0 * (X ** 2 - 1) + 2 * xibar0 * X * (big - X)
    return first, second, big


def inactivation_time_quartic(xi0, xibar0, horizon: float) -> tuple[float, float]:
    """Best switch time for "no control, then (1, 0)" with two agents.

    With ``X = exp(t*/2)``, the final value is a quartic in ``X``:
    ``exp(-2T)/2 * [(xi1 + xb (X^2-1))^2 + (xi2 + xb (X^2-1) + 2 xb X (e^{T/2} - X))^2]``.
    The minimum over ``X in [1, e^{T/2}]`` is found among the real roots of
    its cubic derivative and the endpoints.  Returns ``(t*, V(T))`` where
    ``V`` is the migration functional (mean of squares).
    """
    first, second, big = _quartic_terms(xi0, float(xibar0), horizon)
    quartic = first ** 2 + second ** 2
    roots = quartic.deriv().roots()
    cands = [1.0, big]
    for r in roots:
        if abs(r.imag) <= 1e-9 * max(1.0, abs(r.real)) and 1.0 < r.real < big:
            cands.append(float(r.real))
    cands = np.array(cands)
    vals = quartic(cands)
    best = int(np.argmin(vals))
    xbest = cands[best]
    return 2.0 * np.log(xbest), float(np.exp(-2.0 * horizon) * vals[best] / 2.0)


def quartic_value(xi0, xibar0, horizon: float, X) -> np.ndarray:
    """Migration functional at T after inactivation until ``t* = 2 ln X``."""
    first, second, _ = _quartic_terms(xi0, float(xibar0), horizon)
    X = np.asarray(X, dtype=float)
    return np.exp(-2.0 * horizon) * (first(X) ** 2 + second(X) ** 2) / 2.0


def _inactivation_time_scaled(xi0, budget, horizon):
    """Switch time for "no control, then (budget, 0)" when the quartic form does not apply."""
    xi0 = np.asarray(xi0, dtype=float)
    lead = np.array([budget, 0.0])

    def value(ts):
        ts = np.asarray(ts, dtype=float)
        mid = propagate_constant(xi0, np.zeros(2), ts)
        end = propagate_constant(mid, lead, horizon - ts)
        return np.mean(end * end, axis=-1)

    grid = np.linspace(0.0, horizon, 2001)
    vals = value(grid)
    k = int(np.argmin(vals))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]
    res = minimize_scalar(lambda s: float(value(s)), bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-12})
    cands = [(float(vals[k]), float(grid[k])), (float(res.fun), float(res.x))]
    v, ts = min(cands)
    return ts, v


def two_agent_plan(xi0, budget: float, horizon: float,
                   merge_tol: float = DEFAULT_MERGE_TOL) -> tuple[TwoAgentRegime, ControlPlan]:
    """Classify the two-agent final-cost problem and emit an optimal plan.

    ``xi0`` must satisfy ``xi0[0] >= xi0[1]`` with positive mean.  Where the
    optimum is a class of controls, one representative is returned.
    """
    x1, x2 = (float(v) for v in xi0)
    M, T = float(budget), float(horizon)
    xb = _positive_mean([x1, x2])
    if not 0 < M <= 2:
        raise BudgetOutOfRange(f"two-agent budget must lie in (0, 2], got {M}")
    if x1 < x2 - merge_tol:
        raise ValueError("projections must be sorted in descending order")

    def plan(breaks, alphas):
        return ControlPlan.from_breaks([0.0] + list(breaks) + [T], alphas, M)

    if x1 - x2 <= merge_tol:
        return TwoAgentRegime(M, "equal_start"), plan([], [(M / 2, M / 2)])

    if M <= 1:
        t0 = 2.0 / (2.0 - M) * np.log1p((2.0 - M) / (2.0 * M) * (x1 - x2) / xb)
        if T >= t0:
            return (TwoAgentRegime(M, "M_le_1_long", (t0, None, None)),
                    plan([t0], [(M, 0.0), (M / 2, M / 2)]))
        if M == 1:
            ts, _ = inactivation_time_quartic((x1, x2), xb, T)
        else:
            ts, _ = _inactivation_time_scaled((x1, x2), M, T)
        return (TwoAgentRegime(M, "M_le_1_short", (t0, None, None), ts),
                plan([ts], [(0.0, 0.0), (M, 0.0)]))

    if M == 2:
        if x2 > 0:
            return TwoAgentRegime(M, "M2_both_positive"), plan([], [(1.0, 1.0)])
        t0 = 2.0 * np.log(x1 / (2.0 * xb))
        if T >= t0:
            return (TwoAgentRegime(M, "M2_long", (t0, None, None)),
                    plan([t0], [(1.0, 0.0), (1.0, 1.0)]))
        ts, _ = inactivation_time_quartic((x1, x2), xb, T)
        return (TwoAgentRegime(M, "M2_short", (t0, None, None), ts),
                plan([ts], [(0.0, 0.0), (1.0, 0.0)]))

    ratio = x1 / (2.0 * xb)
    t2 = 2.0 / (2.0 - M) * np.log(x1 / xb)
    if x2 <= 0:
        t0 = 2.0 * np.log(ratio)
        t1 = 2.0 / (2.0 - M) * np.log(ratio)
    else:
        # both start positive: only t2 matters and t0, t1 would be negative
        t0 = t1 = None
    thresholds = (t0, t1, t2)
    partial = (1.0, M - 1.0)
    if t0 is not None and T < t0:
        ts, _ = inactivation_time_quartic((x1, x2), xb, T)
        return (TwoAgentRegime(M, "M12_T_lt_t0", thresholds, ts),
                plan([ts], [(0.0, 0.0), (1.0, 0.0)]))
    if t1 is not None and T <= t1:
        s = _zero_landing_switch((x1, x2), M, T)
        return (TwoAgentRegime(M, "M12_t0_t1", thresholds, None),
                plan([s], [partial, (1.0, 0.0)]))
    if T < t2:
        return TwoAgentRegime(M, "M12_t1_t2", thresholds), plan([], [partial])
    return TwoAgentRegime(M, "M12_T_ge_t2", thresholds), plan([t2], [partial, (M / 2, M / 2)])


def _zero_landing_switch(xi0, budget, horizon):
    """Switch ``s`` so that (1, M-1) on [0, s) then (1, 0) lands xi_2 exactly on 0 at T."""
    xi0 = np.asarray(xi0, dtype=float)
    partial = np.array([1.0, budget - 1.0])
    lead = np.array([1.0, 0.0])

    def second_at_end(s):
        mid = propagate_constant(xi0, partial, s)
        return propagate_constant(mid, lead, horizon - s)[1]

    lo, hi = second_at_end(0.0), second_at_end(horizon)
    if lo <= 0:
        return 0.0
    if hi >= 0:
        return horizon
    return brentq(second_at_end, 0.0, horizon, xtol=1e-14)


# --------------------------------------------------------------------------
# N agents, full strength


def _check_budget(budget):
    if not 0 < budget <= 1:
        raise BudgetOutOfRange(f"N-agent synthesis supports 0 < M <= 1, got {budget}")


def staged_switch_times(xi0, xibar0: Optional[float] = None, n: Optional[int] = None,
                        budget: float = 1.0) -> np.ndarray:
    """Times ``t_1 = 0 <= t_2 <= ... <= t_N`` at which the leading block
    ``{1..l-1}`` under full-strength control catches agent ``l``.

    With ``c = 1 - M/N``:
    ``t_l = ln(1 + (c/M) (l-1) (mean(xi_1..xi_{l-1}) - xi_l) / xibar) / c``.
    """
    xi = np.asarray(xi0, dtype=float)
    if n is not None and n != xi.size:
        raise ValueError(f"n={n} but {xi.size} projections given")
    _require_sorted(xi)
    xibar = _positive_mean(xi) if xibar0 is None else float(xibar0)
    if not xibar > 0:
        raise NonPositiveMean(f"mean projection {xibar:.6g} is not positive")
    _check_budget(budget)
    N = xi.size
    if N == 1:
        return np.zeros(1)
    c = 1.0 - budget / N
    lead = np.arange(1, N)
    gapsum = np.cumsum(xi)[:-1] - lead * xi[1:]
    return np.concatenate([[0.0], np.log1p(c / budget * gapsum / xibar) / c])


@dataclass(frozen=True)
class StagedPlan:
    """Full-strength staged plan, optionally preceded by an inactivation interval.

    ``switch_times[k]`` is the absolute time at which the block grows to
    ``k + 1`` agents; after the last switch the budget is split over all agents.
    """

    switch_times: tuple
    budget: float
    horizon: float
    delay: float = 0.0

    @property
    def n(self) -> int:
        return len(self.switch_times)

    @property
    def active_block_sizes(self) -> list:
        return [k + 1 for k, t in enumerate(self.switch_times) if t < self.horizon]

    def to_control_plan(self) -> ControlPlan:
        N, M, T = self.n, self.budget, self.horizon
        breaks, alphas = [0.0], []
        if self.delay > 0:
            breaks.append(min(self.delay, T))
            alphas.append(np.zeros(N))
        for k in range(N):
            a = np.zeros(N)
            a[:k + 1] = M / (k + 1)
            alphas.append(a)
            if k < N - 1:
                breaks.append(min(self.switch_times[k + 1], T))
        breaks.append(T)
        return ControlPlan.from_breaks(breaks, alphas, M)


def full_control_plan(xi0, horizon: float, budget: float = 1.0) -> StagedPlan:
    """Staged plan: on ``[t_k, t_{k+1})`` the top ``k`` agents share the budget."""
    times = staged_switch_times(xi0, budget=budget)
    return StagedPlan(tuple(float(t) for t in times), float(budget), float(horizon))


def staged_final_state(xi0, horizon, budget: float = 1.0) -> np.ndarray:
    """Exact final state of the staged plan (vectorized over leading axes).

    Inputs must be sorted descending along the last axis with positive mean.
    """
    xi = np.asarray(xi0, dtype=float)
    tau = np.asarray(horizon, dtype=float)
    batch = xi.ndim == 2
    xi2 = np.atleast_2d(xi)
    tau = np.broadcast_to(tau, xi2.shape[:1]).astype(float)
    B, N = xi2.shape
    M = float(budget)
    xb = xi2.mean(axis=1)
    c = 1.0 - M / N
    cums = np.cumsum(xi2, axis=1)
    if N > 1:
        lead = np.arange(1, N)
        gapsum = cums[:, :-1] - lead * xi2[:, 1:]
        t = np.log1p((c / M) * gapsum / xb[:, None]) / c
        block = 1 + np.sum(t <= tau[:, None], axis=1)
    else:
        block = np.ones(B, dtype=int)
    decay = np.exp(-tau)
    grow = _phi(c, tau) * xb
    block_mean = cums[np.arange(B), block - 1] / block
    lead_val = decay * (block_mean + (1.0 - M / block) * grow)
    idx = np.arange(N)[None, :]
    final = np.where(idx < block[:, None], lead_val[:, None], decay[:, None] * (xi2 + grow[:, None]))
    return final if batch else final[0]


def _golden_section(f, a, b, tol):
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    return x, f(x)


class ScanResult(NamedTuple):
    delta: float
    v_delta: float
    v_fc: float


def inactivation_value(xi0, horizon: float, delta, budget: float = 1.0) -> np.ndarray:
    """Final value when the system runs free on ``[0, delta]`` and then follows
    the staged plan recomputed from ``xi(delta)``."""
    xi = np.asarray(xi0, dtype=float)
    delta = np.atleast_1d(np.asarray(delta, dtype=float))
    xb = xi.mean()
    free = xb + (xi[None, :] - xb) * np.exp(-delta)[:, None]
    end = staged_final_state(free, horizon - delta, budget)
    return np.mean(end * end, axis=1)


def inactivation_scan(xi0, horizon: float, grid: int = 512, budget: float = 1.0,
                      tol: float = 1e-8) -> ScanResult:
    """Minimize the inactivation value over ``delta in [0, T]``.

    A uniform scan locates the best grid point, then golden-section search
    refines inside the neighbouring cells.  Ties favour smaller ``delta``.
    """
    xi = np.asarray(xi0, dtype=float)
    _require_sorted(xi)
    _positive_mean(xi)
    _check_budget(budget)
    T = float(horizon)
    if grid < 2:
        raise ValueError("grid needs at least two points")
    deltas = np.linspace(0.0, T, grid)
    vals = inactivation_value(xi, T, deltas, budget)
    k = int(np.argmin(vals))
    v_fc = float(vals[0])
    best_d, best_v = float(deltas[k]), float(vals[k])
    lo, hi = deltas[max(k - 1, 0)], deltas[min(k + 1, grid - 1)]
    d, v = _golden_section(lambda s: float(inactivation_value(xi, T, s, budget)[0]), lo, hi, tol)
    if v < best_v:
        best_d, best_v = float(d), float(v)
    if v_fc <= best_v:
        best_d, best_v = 0.0, v_fc
    return ScanResult(best_d, best_v, v_fc)


def inactivation_plan(xi0, horizon: float, delta: float, budget: float = 1.0) -> StagedPlan:
    """Free evolution on ``[0, delta]``, then the staged plan from ``xi(delta)``."""
    xi = np.asarray(xi0, dtype=float)
    xb = xi.mean()
    free = xb + (xi - xb) * np.exp(-delta)
    times = staged_switch_times(free, budget=budget) + delta
    return StagedPlan(tuple(float(t) for t in times), float(budget), float(horizon), float(delta))


def variance_ratio(xi) -> float:
    """``R = variance / mean^2`` of the projections."""
    xi = np.asarray(xi, dtype=float)
    xb = xi.mean()
    return float(np.mean((xi - xb) ** 2) / (xb * xb))
