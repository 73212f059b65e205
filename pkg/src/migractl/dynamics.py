"""Forward and backward integration of the migration dynamics.

Projected system: ``d xi_i/dt = -xi_i + (1 - alpha_i) * mean(xi)``.
Full system (velocities relative to the target):
``dv_i/dt = -(v_i - V) + (1 - alpha_i) (vbar - V)``, ``dx_i/dt = v_i``.

Integration is classical RK4 with controls held over each step.  Plan
breakpoints are grid points; for feedback pieces, instants where a trailing
agent catches the controlled block are located inside the step and inserted
into the grid as well, so bang-bang switches are never smeared.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import brentq

from .model import (
    CONSTANT,
    ControlPlan,
    Ensemble,
    NonFiniteState,
    ProjectedState,
    UnsupportedSchedule,
    check_admissible,
    feedback_law,
    project,
)

DEFAULT_STEP = 1e-3
DEFAULT_MERGE_TOL = 1e-7


def rhs_projected(xi, alpha):
    xi = np.asarray(xi, dtype=float)
    return -xi + (1.0 - alpha) * xi.mean(axis=-1, keepdims=True)


def _rk4(f, y, h):
    k1 = f(y)
    k2 = f(y + 0.5 * h * k1)
    k3 = f(y + 0.5 * h * k2)
    k4 = f(y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step_projected(xi, alpha, h: float, budget: Optional[float] = None) -> np.ndarray:
    """One RK4 step of the projected system with ``alpha`` frozen."""
    xi = np.asarray(xi, dtype=float)
    if not h > 0:
        raise ValueError("step must be positive")
    alpha = check_admissible(alpha, xi.shape[-1] if budget is None else budget)
    return _rk4(lambda y: rhs_projected(y, alpha), xi, h)


def step_full(ensemble: Ensemble, alpha, h: float, budget: Optional[float] = None) -> Ensemble:
    """One RK4 step of positions and velocities with ``alpha`` frozen."""
    if not h > 0:
        raise ValueError("step must be positive")
    alpha = check_admissible(alpha, ensemble.n if budget is None else budget)
    target = ensemble.target
    n = ensemble.n
    a = (1.0 - alpha)[:, None]

    def f(y):
        v = y[n:]
        u = v - target
        return np.concatenate([v, -u + a * u.mean(axis=0)])

    y = np.concatenate([ensemble.positions, ensemble.velocities])
    y = _rk4(f, y, h)
    return Ensemble(y[:n], y[n:], target)


def _phi(c, t):
    """``(exp(c t) - 1) / c`` with the c -> 0 limit."""
    c = np.asarray(c, dtype=float)
    t = np.asarray(t, dtype=float)
    ct = c * t
    small = np.abs(ct) < 1e-8
    safe_c = np.where(small, 1.0, c)
    return np.where(small, t * (1.0 + ct / 2.0 + ct * ct / 6.0), np.expm1(ct) / safe_c)


def propagate_constant(xi, alpha, t):
    """Exact state after time ``t`` under constant ``alpha``.

    Broadcasts over leading axes; ``t`` broadcasts against ``xi[..., 0]``.
    """
    xi = np.asarray(xi, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    t = np.asarray(t, dtype=float)[..., None]
    xibar = xi.mean(axis=-1, keepdims=True)
    c = 1.0 - alpha.mean(axis=-1, keepdims=True)
    return np.exp(-t) * (xi + (1.0 - alpha) * xibar * _phi(c, t))


def _constant_pieces(schedule):
    if isinstance(schedule, ControlPlan):
        out = []
        for p in schedule.pieces:
            if p.rule != CONSTANT:
                raise UnsupportedSchedule(f"piece [{p.t0}, {p.t1}) uses feedback rule {p.rule!r}")
            out.append((p.t0, p.t1, np.array(p.alpha)))
        return out
    out = []
    for item in schedule:
        if len(item) != 3 or isinstance(item[2], str):
            raise UnsupportedSchedule(f"not a constant piece: {item!r}")
        out.append((float(item[0]), float(item[1]), np.asarray(item[2], dtype=float)))
    return out


def closed_form_piecewise(xi0, schedule):
    """Exact trajectory evaluator for a schedule of constant-control pieces.

    ``schedule`` is a :class:`ControlPlan` or a sequence of ``(t0, t1, alpha)``.
    Returns ``evaluate(t)`` giving the state at scalar ``t`` (shape ``(N,)``) or
    at an array of times (shape ``(len(t), N)``).  Times past the last piece
    keep the last control.
    """
    pieces = _constant_pieces(schedule)
    starts = [np.asarray(xi0, dtype=float)]
    for t0, t1, a in pieces:
        starts.append(propagate_constant(starts[-1], a, t1 - t0))
    t_start = np.array([p[0] for p in pieces])
    alphas = np.array([p[2] for p in pieces])
    starts = np.array(starts[:-1])

    def evaluate(t):
        tt = np.asarray(t, dtype=float)
        idx = np.clip(np.searchsorted(t_start, tt, side="right") - 1, 0, len(pieces) - 1)
        return propagate_constant(starts[idx], alphas[idx], tt - t_start[idx])

    return evaluate


# --------------------------------------------------------------------------
# Trajectories


@dataclass
class Trajectory:
    times: np.ndarray
    xi: np.ndarray
    controls: np.ndarray
    budget: float
    refined: tuple = ()
    positions: Optional[np.ndarray] = None
    velocities: Optional[np.ndarray] = None
    target: Optional[np.ndarray] = None

    @property
    def values(self) -> np.ndarray:
        return np.mean(self.xi * self.xi, axis=1)

    @property
    def xibar(self) -> np.ndarray:
        return self.xi.mean(axis=1)

    @property
    def n(self) -> int:
        return self.xi.shape[1]

    @property
    def final(self) -> np.ndarray:
        return self.xi[-1]

    def state(self, k: int) -> ProjectedState:
        return ProjectedState(self.xi[k])

    def ensemble(self, k: int) -> Ensemble:
        if self.velocities is None:
            raise ValueError("trajectory has no full-state snapshots")
        return Ensemble(self.positions[k], self.velocities[k], self.target)


def _step_bounds(t0: float, t1: float, h: float) -> np.ndarray:
    n = max(1, int(np.ceil((t1 - t0) / h - 1e-9)))
    pts = t0 + h * np.arange(n + 1)
    pts[-1] = t1
    return pts


def _locate_event(xi, alpha, dt, trial, merge_tol, watch_sign):
    """Earliest time in ``(0, dt]`` at which the control structure changes.

    Watches adjacent pairs (in current order) with different controls that
    are not yet merged, and optionally sign changes of individual ``xi_i``.
    Returns ``None`` if nothing happens within the step.
    """
    order = np.argsort(-xi, kind="stable")
    a, b = order[:-1], order[1:]
    gap0 = xi[a] - xi[b]
    gap1 = trial[a] - trial[b]
    pairs = (gap0 > merge_tol) & (gap1 < 0) & (alpha[a] != alpha[b])
    funcs = []
    for i, j in zip(a[pairs], b[pairs]):
        funcs.append(lambda s, i=i, j=j: np.subtract(*propagate_constant(xi, alpha, s)[[i, j]]))
    if watch_sign:
        flips = np.flatnonzero((np.abs(xi) > merge_tol) & (np.sign(trial) != np.sign(xi)))
        for i in flips:
            funcs.append(lambda s, i=i: propagate_constant(xi, alpha, s)[i])
    best = None
    for g in funcs:
        if g(0.0) * g(dt) > 0:
            continue
        tau = brentq(g, 0.0, dt, xtol=1e-15, rtol=4 * np.finfo(float).eps)
        best = tau if best is None else min(best, tau)
    return best


def simulate(initial, plan: ControlPlan, h: float = DEFAULT_STEP,
             merge_tol: float = DEFAULT_MERGE_TOL) -> Trajectory:
    """Integrate the projected system under ``plan`` with fixed-step RK4.

    ``initial`` is a :class:`ProjectedState` or an array of projections.
    Feedback rules are evaluated at the start of each step.
    """
    xi = np.array(initial.xi if isinstance(initial, ProjectedState) else initial, dtype=float)
    budget = plan.budget
    times, states, controls, refined = [0.0], [xi.copy()], [], []
    law = None
    for piece in plan.pieces:
        law = feedback_law(piece, budget, merge_tol)
        grid = _step_bounds(piece.t0, piece.t1, h)
        t = piece.t0
        k = 1
        while k < len(grid):
            dt = grid[k] - t
            alpha = check_admissible(law(xi), budget)
            f = lambda y, alpha=alpha: rhs_projected(y, alpha)
            new = _rk4(f, xi, dt)
            if piece.is_feedback:
                tau = _locate_event(xi, alpha, dt, new, merge_tol, piece.rule == "instant")
                if tau is not None and tau < dt * (1 - 1e-12):
                    dt = max(tau, 1e-15)
                    new = _rk4(f, xi, dt)
                    refined.append(t + dt)
            if not np.all(np.isfinite(new)):
                raise NonFiniteState(f"non-finite state at t={t + dt}")
            if dt == grid[k] - t:
                t = grid[k]
                k += 1
            else:
                t = t + dt
            xi = new
            times.append(t)
            states.append(xi.copy())
            controls.append(alpha)
    controls.append(check_admissible(law(xi), budget))
    return Trajectory(np.array(times), np.array(states), np.array(controls), budget, tuple(refined))


def simulate_full(ensemble: Ensemble, plan: ControlPlan, h: float = DEFAULT_STEP,
                  merge_tol: float = DEFAULT_MERGE_TOL) -> Trajectory:
    """Integrate positions and velocities; controls index agents as in ``ensemble``.

    Feedback rules see the projected state of the current ensemble.  No event
    location is done here; use :func:`simulate` for switch-accurate feedback.
    """
    budget = plan.budget
    ens = ensemble
    times, xs, vs, xis, controls = [0.0], [ens.positions], [ens.velocities], [], []
    law = None
    for piece in plan.pieces:
        law = feedback_law(piece, budget, merge_tol)
        grid = _step_bounds(piece.t0, piece.t1, h)
        for t0, t1 in zip(grid[:-1], grid[1:]):
            xi = project(ens).xi
            xis.append(xi)
            alpha = check_admissible(law(xi), budget)
            ens = step_full(ens, alpha, t1 - t0, budget)
            if not np.all(np.isfinite(ens.velocities)):
                raise NonFiniteState(f"non-finite state at t={t1}")
            times.append(t1)
            xs.append(ens.positions)
            vs.append(ens.velocities)
            controls.append(alpha)
    xi = project(ens).xi
    xis.append(xi)
    controls.append(check_admissible(law(xi), budget))
    return Trajectory(np.array(times), np.array(xis), np.array(controls), budget,
                      positions=np.array(xs), velocities=np.array(vs), target=ensemble.target)


# --------------------------------------------------------------------------
# Costates


@dataclass
class Costate:
    times: np.ndarray
    lam: np.ndarray
    variant: str

    @property
    def n(self) -> int:
        return self.lam.shape[1]


def integrate_costate_final(traj: Trajectory) -> Costate:
    """Backward RK4 for the final-cost adjoint from ``lambda(T) = (2/N) xi(T)``.

    ``d lambda_i/dt = mean(alpha * lambda) - mean(lambda) + lambda_i``.
    """
    n = traj.n
    lam = np.empty_like(traj.xi)
    lam[-1] = 2.0 * traj.xi[-1] / n
    for k in range(len(traj.times) - 2, -1, -1):
        alpha = traj.controls[k]
        dt = traj.times[k + 1] - traj.times[k]
        f = lambda y, alpha=alpha: np.mean(alpha * y) - y.mean() + y
        lam[k] = _rk4(f, lam[k + 1], -dt)
    return Costate(traj.times.copy(), lam, "final")


def integrate_costate_integral(traj: Trajectory) -> Costate:
    """Backward RK4 for the integral-cost adjoint with ``lambda(T) = 0``.

    ``d lambda_i/dt = lambda_i - mean((1 - alpha) * lambda) - 2 xi_i``.  The
    state at step midpoints comes from the exact constant-control solution.
    """
    lam = np.zeros_like(traj.xi)
    for k in range(len(traj.times) - 2, -1, -1):
        alpha = traj.controls[k]
        dt = traj.times[k + 1] - traj.times[k]
        x0, x1 = traj.xi[k], traj.xi[k + 1]
        xm = propagate_constant(x0, alpha, 0.5 * dt)

        def f(y, x):
            return y - np.mean((1.0 - alpha) * y) - 2.0 * x

        y = lam[k + 1]
        k1 = f(y, x1)
        k2 = f(y - 0.5 * dt * k1, xm)
        k3 = f(y - 0.5 * dt * k2, xm)
        k4 = f(y - dt * k3, x0)
        lam[k] = y - (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return Costate(traj.times.copy(), lam, "integral")


def best_hamiltonian_weight(lam, budget: float) -> np.ndarray:
    """``max sum(alpha * lam)`` over ``alpha in [0,1]^N, sum(alpha) <= budget``
    (row-wise for 2-D input)."""
    lam = np.atleast_2d(lam)
    s = -np.sort(-lam, axis=1)
    w = np.clip(budget - np.arange(lam.shape[1]), 0.0, 1.0)
    return np.sum(w * np.maximum(s, 0.0), axis=1)


@dataclass
class PMPReport:
    max_violation: float
    worst_time: float
    worst_index: int
    violations: np.ndarray = field(repr=False)
    tolerance: float = 1e-6

    @property
    def consistent(self) -> bool:
        return self.max_violation < self.tolerance

    def to_dict(self) -> dict:
        return {
            "max_violation": self.max_violation,
            "worst_time": self.worst_time,
            "worst_index": self.worst_index,
            "tolerance": self.tolerance,
            "consistent": self.consistent,
        }


def check_pmp_consistency(traj: Trajectory, costate: Costate, tolerance: float = 1e-6,
                          budget: Optional[float] = None) -> PMPReport:
    """Check that the applied control minimizes ``-xibar * sum(alpha * lambda)``.

    Each control interval is checked against the costate at both of its ends.
    The violation is the gap between the applied and the optimal Hamiltonian
    value.
    """
    if costate.lam.shape != traj.xi.shape or not np.allclose(costate.times, traj.times):
        raise ValueError("costate and trajectory grids differ")
    budget = traj.budget if budget is None else budget
    alpha = traj.controls[:-1]
    viol = np.zeros(len(traj.times) - 1)
    for end in (0, 1):
        lam = costate.lam[end:len(costate.lam) - 1 + end]
        xibar = traj.xibar[end:len(traj.xibar) - 1 + end]
        applied = np.sum(alpha * lam, axis=1)
        gap = xibar * (best_hamiltonian_weight(lam, budget) - applied)
        viol = np.maximum(viol, gap)
    k = int(np.argmax(viol))
    return PMPReport(float(viol[k]), float(traj.times[k]), k, viol, tolerance)


# --------------------------------------------------------------------------
# CSV export


def trajectory_to_csv(traj: Trajectory, perm: Optional[Sequence[int]] = None) -> str:
    """CSV with header ``t, xi_1..xi_N, alpha_1..alpha_N, V`` at 17 significant digits.

    If ``perm`` is given (canonical -> original, as from ``canonical_order``),
    columns are written in original agent order.
    """
    xi, alpha = traj.xi, traj.controls
    if perm is not None:
        inv = np.empty(len(perm), dtype=int)
        inv[np.asarray(perm)] = np.arange(len(perm))
        xi, alpha = xi[:, inv], alpha[:, inv]
    n = traj.n
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["t"] + [f"xi_{i + 1}" for i in range(n)] + [f"alpha_{i + 1}" for i in range(n)] + ["V"])
    for t, x, a, v in zip(traj.times, xi, alpha, traj.values):
        writer.writerow([f"{t:.17g}"] + [f"{y:.17g}" for y in x] + [f"{y:.17g}" for y in a] + [f"{v:.17g}"])
    return buf.getvalue()


def trajectory_from_csv(text: str, budget: Optional[float] = None) -> Trajectory:
    rows = list(csv.reader(io.StringIO(text)))
    header = [h.strip() for h in rows[0]]
    n = sum(h.startswith("xi_") for h in header)
    if header[0] != "t" or len(header) != 2 * n + 2:
        raise ValueError("unexpected trajectory header")
    data = np.array([[float(x) for x in r] for r in rows[1:] if r], dtype=float)
    controls = data[:, 1 + n:1 + 2 * n]
    if budget is None:
        budget = float(np.max(controls.sum(axis=1)))
        budget = max(budget, 1e-12)
    return Trajectory(data[:, 0], data[:, 1:1 + n], controls, budget)
