"""Monte Carlo harnesses and brute-force oracles.

Every trial draws from its own generator seeded by ``(seed, n, trial)`` so
serial and parallel runs agree bit for bit.
"""
from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import strategies
from .dynamics import Trajectory, closed_form_piecewise, propagate_constant, simulate
from .model import ControlPlan, Piece

INACTIVATION_THRESHOLD = 1e-3  # relative to the horizon


def trial_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, keys)])


def sample_initial(n: int, rng_seed=0) -> np.ndarray:
    """I.i.d. uniform projections on [-1, 1] with strictly positive mean, sorted descending.

    ``rng_seed`` may be an int, a sequence of ints, or a ``numpy`` Generator.
    """
    if n < 2:
        raise ValueError("need at least two agents")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    while True:
        xi = rng.uniform(-1.0, 1.0, size=n)
        if xi.mean() > 1e-12:
            return np.sort(xi)[::-1].copy()


def default_threads() -> int:
    env = os.environ.get("MIGRACTL_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass
class ExperimentReport:
    n_agents: int
    horizon: float
    trials: int
    seed: int
    grid: int
    threshold: float
    records: np.ndarray = field(repr=False)  # columns: delta, V_fc, V_delta, R

    @property
    def deltas(self) -> np.ndarray:
        return self.records[:, 0]

    @property
    def inactive(self) -> np.ndarray:
        return self.deltas > self.threshold * self.horizon

    @property
    def inactivation_fraction(self) -> float:
        return float(np.mean(self.inactive))

    @property
    def stderr(self) -> float:
        p = self.inactivation_fraction
        return float(np.sqrt(p * (1 - p) / self.trials))

    @property
    def relative_improvements(self) -> np.ndarray:
        v_fc, v_delta = self.records[:, 1], self.records[:, 2]
        return (v_fc - v_delta) / v_fc

    @property
    def mean_relative_improvement(self) -> float:
        """Mean over all trials."""
        return float(np.mean(self.relative_improvements))

    @property
    def mean_relative_improvement_inactive(self) -> Optional[float]:
        """Mean over trials where inactivation occurred; ``None`` if there are none."""
        mask = self.inactive
        if not mask.any():
            return None
        return float(np.mean(self.relative_improvements[mask]))

    def summary(self) -> dict:
        return {
            "n_agents": self.n_agents,
            "horizon": self.horizon,
            "trials": self.trials,
            "seed": self.seed,
            "grid": self.grid,
            "threshold": self.threshold,
            "inactivation_fraction": self.inactivation_fraction,
            "stderr": self.stderr,
            "mean_relative_improvement": self.mean_relative_improvement,
            "mean_relative_improvement_inactive": self.mean_relative_improvement_inactive,
        }

    def to_dict(self) -> dict:
        d = self.summary()
        d["per_trial_records"] = [
            {"delta": r[0], "V_fc": r[1], "V_delta": r[2], "R": r[3]} for r in self.records.tolist()
        ]
        return d


def run_cell(n: int, horizon: float, trials: int, seed: int, grid: int = 512,
             threshold: float = INACTIVATION_THRESHOLD) -> ExperimentReport:
    records = np.empty((trials, 4))
    for k in range(trials):
        xi = sample_initial(n, trial_rng(seed, n, k))
        res = strategies.inactivation_scan(xi, horizon, grid)
        records[k] = (res.delta, res.v_fc, res.v_delta, strategies.variance_ratio(xi))
    return ExperimentReport(n, float(horizon), trials, seed, grid, threshold, records)


def _run_cell_args(args):
    return run_cell(*args)


def run_grid(agents: Sequence[int], horizons: Sequence[float], trials: int, seed: int,
             grid: int = 512, threads: Optional[int] = None) -> list:
    """One report per ``(N, T)`` cell, ordered by horizon then agent count."""
    cells = [(n, float(T), trials, seed, grid) for T in horizons for n in agents]
    threads = default_threads() if threads is None else threads
    if threads <= 1 or len(cells) == 1:
        return [run_cell(*c) for c in cells]
    with ProcessPoolExecutor(max_workers=min(threads, len(cells))) as pool:
        return list(pool.map(_run_cell_args, cells))


def table1_experiment(agents, horizons, trials: int, seed: int, grid: int = 512,
                      threads: Optional[int] = None) -> list:
    """Inactivation frequency per cell."""
    return run_grid(agents, horizons, trials, seed, grid, threads)


def table2_experiment(agents, horizons, trials: int, seed: int, grid: int = 512,
                      threads: Optional[int] = None) -> list:
    """Relative improvement of the optimized delay over immediate full control."""
    return run_grid(agents, horizons, trials, seed, grid, threads)


TABLE_COLUMNS = {
    "table1": ["n_agents", "horizon", "trials", "seed", "inactivation_percent", "stderr_percent"],
    "table2": ["n_agents", "horizon", "trials", "seed", "mean_improvement_percent",
               "mean_improvement_inactive_percent", "inactive_trials"],
}


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.17g}"


def reports_to_csv(reports, kind: str = "table1") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS[kind])
    for r in reports:
        base = [r.n_agents, r.horizon, r.trials, r.seed]
        if kind == "table1":
            row = base + [100 * r.inactivation_fraction, 100 * r.stderr]
        else:
            cond = r.mean_relative_improvement_inactive
            row = base + [100 * r.mean_relative_improvement, None if cond is None else 100 * cond,
                          int(r.inactive.sum())]
        w.writerow([_fmt(x) for x in row])
    return buf.getvalue()


def reports_from_csv(text: str) -> list:
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for row in rows:
        out.append({k: (float(v) if v not in ("", None) else None) for k, v in row.items()})
    return out


def reports_to_json(reports, kind: str = "table1") -> str:
    return json.dumps({"kind": kind, "cells": [r.to_dict() for r in reports]}, indent=2)


def ratio_study(n: int, horizon: float, trials: int, seed: int, grid: int = 512) -> np.ndarray:
    """Per-trial ``(R, delta)`` with ``R`` the initial variance/mean^2 ratio."""
    rep = run_cell(n, horizon, trials, seed, grid)
    return rep.records[:, [3, 0]].copy()


# --------------------------------------------------------------------------
# Random control families and the brute-force oracle


def sample_admissible(rng, size: int, n: int, budget: float) -> np.ndarray:
    """Uniform draws from ``{alpha in [0,1]^n : sum(alpha) <= budget}``.

    Proposals come from the scaled simplex when the budget is small relative
    to ``n`` and from the unit cube otherwise; rejection keeps them uniform.
    """
    use_simplex = budget <= n / 2
    out = np.empty((0, n))
    while out.shape[0] < size:
        need = size - out.shape[0]
        m = max(64, 2 * need)
        if use_simplex:
            batch = budget * rng.dirichlet(np.ones(n + 1), size=m)[:, :n]
            keep = np.all(batch <= 1.0, axis=1)
        else:
            batch = rng.uniform(size=(m, n))
            keep = batch.sum(axis=1) <= budget
        out = np.concatenate([out, batch[keep][:need]])
    return out


def sample_vertices(rng, size: int, n: int, budget: float) -> np.ndarray:
    """Random vertices of the admissible polytope (bang-bang controls)."""
    whole = int(np.floor(min(budget, n)))
    levels = np.arange(whole + 1, dtype=float)
    if budget < n and budget > whole:
        levels = np.append(levels, budget)
    fill = rng.choice(levels, size=size)
    ramp = np.clip(fill[:, None] - np.arange(n)[None, :], 0.0, 1.0)
    perm = np.argsort(rng.uniform(size=(size, n)), axis=1)
    out = np.empty_like(ramp)
    np.put_along_axis(out, perm, ramp, axis=1)
    return out


def sample_full_strength(rng, size: int, n: int) -> np.ndarray:
    """Uniform draws from the unit simplex ``sum(alpha) = 1``."""
    return rng.dirichlet(np.ones(n), size=size)


def piecewise_final(xi0, alphas, horizon: float) -> np.ndarray:
    """Exact final states for a batch of controls constant on equal intervals.

    ``alphas`` has shape ``(B, K, N)``.
    """
    alphas = np.asarray(alphas, dtype=float)
    B, K, N = alphas.shape
    dt = horizon / K
    xi = np.broadcast_to(np.asarray(xi0, dtype=float), (B, N))
    for k in range(K):
        xi = propagate_constant(xi, alphas[:, k], dt)
    return xi


def piecewise_integral(xi0, alphas, horizon: float, points_per_piece: int = 200) -> np.ndarray:
    """Trapezoidal integral of ``V(t)`` for a batch of piecewise-constant controls."""
    alphas = np.asarray(alphas, dtype=float)
    B, K, N = alphas.shape
    dt = horizon / K
    s = np.linspace(0.0, dt, points_per_piece + 1)
    xi = np.broadcast_to(np.asarray(xi0, dtype=float), (B, N))
    total = np.zeros(B)
    for k in range(K):
        path = propagate_constant(xi[:, None, :], alphas[:, k][:, None, :], s[None, :])
        v = np.mean(path * path, axis=2)
        total += np.trapezoid(v, s, axis=1)
        xi = path[:, -1, :]
    return total


def _plan_from_pieces(alphas, horizon, budget):
    K = len(alphas)
    breaks = [horizon * k / K for k in range(K + 1)]
    return ControlPlan.from_breaks(breaks, [tuple(a) for a in alphas], budget)


def analytic_candidates(xi0, budget: float, horizon: float) -> dict:
    """Plans from the synthesis module that apply to this instance."""
    xi = np.asarray(xi0, dtype=float)
    n = xi.size
    T = float(horizon)
    out = {"zero": ControlPlan(budget, T, (Piece(0.0, T, "constant", (0.0,) * n),))}
    if n == 2 and budget <= 2:
        _, out["two_agent"] = strategies.two_agent_plan(xi, budget, T)
    if budget <= 1:
        out["full_control"] = strategies.full_control_plan(xi, T, budget).to_control_plan()
        scan = strategies.inactivation_scan(xi, T, budget=budget)
        out["inactivation"] = strategies.inactivation_plan(xi, T, scan.delta, budget).to_control_plan()
    out["instant"] = ControlPlan(budget, T, (Piece(0.0, T, "instant"),))
    return out


def evaluate_plan(xi0, plan: ControlPlan, h: float = 1e-3) -> float:
    """Final migration functional: exact for constant pieces, RK4 otherwise."""
    if all(not p.is_feedback for p in plan.pieces):
        end = closed_form_piecewise(xi0, plan)(plan.horizon)
    else:
        end = simulate(xi0, plan, h).final
    return float(np.mean(end * end))


@dataclass
class OracleResult:
    best_value: float
    best_plan: ControlPlan
    best_source: str
    candidate_values: dict
    random_best: Optional[float]

    def to_dict(self) -> dict:
        return {
            "best_value": self.best_value,
            "best_source": self.best_source,
            "random_best": self.random_best,
            "candidate_values": self.candidate_values,
            "best_plan": self.best_plan.to_dict(),
        }


ORACLE_CHUNK = 1024


def random_piecewise_controls(n: int, budget: float, k_pieces: int, samples: int,
                              seed: int = 0) -> np.ndarray:
    """Random controls of shape ``(samples, k_pieces, n)``.

    Even-indexed samples are uniform on the admissible set in every piece,
    odd-indexed ones are random polytope vertices.  Draws come in chunks with
    their own generators, so a smaller request is a prefix of a larger one.
    """
    out = []
    for j in range(-(-samples // ORACLE_CHUNK)):
        rng = trial_rng(seed, j)
        half = ORACLE_CHUNK // 2
        uni = sample_admissible(rng, half * k_pieces, n, budget).reshape(half, k_pieces, n)
        vert = sample_vertices(rng, half * k_pieces, n, budget).reshape(half, k_pieces, n)
        chunk = np.empty((ORACLE_CHUNK, k_pieces, n))
        chunk[0::2], chunk[1::2] = uni, vert
        out.append(chunk)
    if not out:
        return np.empty((0, k_pieces, n))
    return np.concatenate(out)[:samples]


def brute_force_oracle(xi0, budget: float, horizon: float, k_pieces: int = 6,
                       samples: int = 10_000, seed: int = 0) -> OracleResult:
    """Best final value over random piecewise-constant controls and analytic plans."""
    xi = np.asarray(xi0, dtype=float)
    n = xi.size
    T = float(horizon)
    cands = analytic_candidates(xi, budget, T)
    values = {name: evaluate_plan(xi, plan) for name, plan in cands.items()}
    source = min(values, key=values.get)
    best_v, best_plan = values[source], cands[source]
    random_best = None
    if samples > 0:
        alphas = random_piecewise_controls(n, budget, k_pieces, samples, seed)
        end = piecewise_final(xi, alphas, T)
        vals = np.mean(end * end, axis=1)
        j = int(np.argmin(vals))
        random_best = float(vals[j])
        if random_best < best_v:
            best_v, source = random_best, "random"
            best_plan = _plan_from_pieces(alphas[j], T, budget)
    return OracleResult(best_v, best_plan, source, values, random_best)


def integral_cost_eval(traj: Trajectory) -> float:
    """Trapezoidal integral of the stored ``V(t)`` samples."""
    return float(np.trapezoid(traj.values, traj.times))
