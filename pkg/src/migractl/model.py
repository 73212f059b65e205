"""Domain types for the controlled migration model.

Agents move with velocities ``v_i`` and may either align to a target velocity
``V`` or follow the group mean.  Everything downstream works on the scalar
projections ``xi_i`` of ``v_i - V`` onto the invariant mean direction.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DEGENERACY_TOL = 1e-12
BUDGET_SLACK = 1e-9


class MigrationError(Exception):
    """Base class for domain errors."""


class DegenerateMean(MigrationError):
    """Mean velocity coincides with the target; the system is uncontrollable."""


class NonPositiveMean(MigrationError):
    """Projected mean is not strictly positive."""


class InadmissibleControl(MigrationError):
    """Control outside [0, 1]^N or above the total budget."""


class NonFiniteState(MigrationError):
    """Integration produced NaN or inf."""


class UnsupportedSchedule(MigrationError):
    """Schedule contains a piece the requested evaluator cannot handle."""


class BudgetOutOfRange(MigrationError):
    """Budget outside the range a synthesis routine supports."""


@dataclass(frozen=True)
class Ensemble:
    positions: np.ndarray
    velocities: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        x = np.array(self.positions, dtype=float)
        v = np.array(self.velocities, dtype=float)
        target = np.array(self.target, dtype=float).reshape(-1)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError("velocities must be an (N, d) array with N, d >= 1")
        if x.shape != v.shape:
            raise ValueError(f"positions shape {x.shape} != velocities shape {v.shape}")
        if target.shape != (v.shape[1],):
            raise ValueError(f"target must have length {v.shape[1]}")
        for arr in (x, v, target):
            arr.setflags(write=False)
        object.__setattr__(self, "positions", x)
        object.__setattr__(self, "velocities", v)
        object.__setattr__(self, "target", target)

    @property
    def n(self) -> int:
        return self.velocities.shape[0]

    @property
    def dim(self) -> int:
        return self.velocities.shape[1]

    @property
    def mean_velocity(self) -> np.ndarray:
        return self.velocities.mean(axis=0)


@dataclass(frozen=True)
class ProjectedState:
    """Projections ``xi`` along the unit direction ``e`` plus orthogonal residuals ``w``."""

    xi: np.ndarray
    e: Optional[np.ndarray] = None
    w: Optional[np.ndarray] = None

    def __post_init__(self):
        xi = np.array(self.xi, dtype=float).reshape(-1)
        if xi.size < 1:
            raise ValueError("xi must be nonempty")
        xi.setflags(write=False)
        object.__setattr__(self, "xi", xi)
        if self.e is not None:
            e = np.array(self.e, dtype=float)
            e.setflags(write=False)
            object.__setattr__(self, "e", e)
        if self.w is not None:
            w = np.array(self.w, dtype=float)
            w.setflags(write=False)
            object.__setattr__(self, "w", w)

    @property
    def n(self) -> int:
        return self.xi.size

    @property
    def xibar(self) -> float:
        return float(self.xi.mean())

    @property
    def is_sorted(self) -> bool:
        return bool(np.all(np.diff(self.xi) <= 0))

    def reconstruct(self, target) -> np.ndarray:
        """Velocities ``V + xi_i e + w_i``."""
        if self.e is None or self.w is None:
            raise ValueError("state carries no direction/residuals")
        return np.asarray(target, dtype=float) + self.xi[:, None] * self.e[None, :] + self.w


def project(ensemble: Ensemble) -> ProjectedState:
    """Project velocities onto ``e = (vbar - V) / |vbar - V|``.

    Raises
    ------
    DegenerateMean
        If ``|vbar - V| <= 1e-12``.
    """
    u = ensemble.velocities - ensemble.target
    ubar = u.mean(axis=0)
    norm = float(np.linalg.norm(ubar))
    if not norm > DEGENERACY_TOL:
        raise DegenerateMean(f"|vbar - V| = {norm:.3e} <= {DEGENERACY_TOL}")
    e = ubar / norm
    xi = u @ e
    w = u - xi[:, None] * e[None, :]
    return ProjectedState(xi=xi, e=e, w=w)


def migration_functional(xi) -> tuple[float, float, float]:
    """Return ``(V, mean_part, variance_part)`` with ``V = mean(xi**2)``."""
    xi = np.asarray(xi, dtype=float)
    if xi.size == 0:
        raise ValueError("xi must be nonempty")
    xibar = xi.mean()
    total = float(np.mean(xi * xi))
    return total, float(xibar * xibar), float(np.mean((xi - xibar) ** 2))


def canonical_order(state) -> tuple[ProjectedState, np.ndarray]:
    """Sort ``xi`` descending (stable).  Returns the sorted state and the
    0-based permutation ``perm`` with ``sorted.xi == state.xi[perm]``."""
    if not isinstance(state, ProjectedState):
        state = ProjectedState(xi=state)
    perm = np.argsort(-state.xi, kind="stable")
    w = None if state.w is None else state.w[perm]
    return ProjectedState(xi=state.xi[perm], e=state.e, w=w), perm


def check_admissible(alpha, budget: float) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    if not np.all(np.isfinite(alpha)):
        raise InadmissibleControl("control contains non-finite entries")
    if np.any(alpha < -BUDGET_SLACK) or np.any(alpha > 1 + BUDGET_SLACK):
        raise InadmissibleControl(f"control {alpha} leaves [0, 1]")
    total = float(alpha.sum())
    if total > budget + BUDGET_SLACK:
        raise InadmissibleControl(f"sum(alpha) = {total:.12g} exceeds budget {budget:.12g}")
    return alpha


# --------------------------------------------------------------------------
# Control plans

CONSTANT = "constant"
FEEDBACK_RULES = ("instant", "integral", "merged")


@dataclass(frozen=True)
class Piece:
    t0: float
    t1: float
    rule: str = CONSTANT
    alpha: Optional[tuple] = None
    block: Optional[int] = None

    def __post_init__(self):
        if self.rule == CONSTANT:
            if self.alpha is None:
                raise ValueError("constant piece needs alpha")
            object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        elif self.rule not in FEEDBACK_RULES:
            raise ValueError(f"unknown rule {self.rule!r}")
        if self.rule == "merged" and (self.block is None or self.block < 1):
            raise ValueError("merged rule needs a positive block size")

    @property
    def is_feedback(self) -> bool:
        return self.rule != CONSTANT


@dataclass(frozen=True)
class ControlPlan:
    """Piecewise description of alpha(t) tiling ``[0, horizon]``.

    Feedback rules are evaluated on the current projected state:

    * ``instant``  -- instantaneous-decrease control with the plan budget;
    * ``integral`` -- equal split of ``min(budget, 1)`` over the argmax block;
    * ``merged``   -- equal split of the budget over the ``block`` agents with
      the largest current projections.
    """

    budget: float
    horizon: float
    pieces: tuple = field(default_factory=tuple)

    def __post_init__(self):
        pieces = tuple(self.pieces)
        object.__setattr__(self, "pieces", pieces)
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if not self.budget > 0:
            raise ValueError("budget must be positive")
        if not pieces:
            raise ValueError("plan has no pieces")
        tol = 1e-12 * max(1.0, self.horizon)
        if abs(pieces[0].t0) > tol or abs(pieces[-1].t1 - self.horizon) > tol:
            raise ValueError("pieces must start at 0 and end at the horizon")
        for a, b in zip(pieces, pieces[1:]):
            if abs(a.t1 - b.t0) > tol:
                raise ValueError(f"gap or overlap between pieces at t={a.t1}")
        for p in pieces:
            if not p.t1 > p.t0:
                raise ValueError(f"empty piece [{p.t0}, {p.t1})")
            if p.rule == CONSTANT:
                check_admissible(p.alpha, self.budget)

    @classmethod
    def constant(cls, alpha, horizon: float, budget: Optional[float] = None) -> "ControlPlan":
        alpha = tuple(float(a) for a in alpha)
        if budget is None:
            budget = float(len(alpha))
        return cls(budget, horizon, (Piece(0.0, horizon, CONSTANT, alpha),))

    @classmethod
    def from_breaks(cls, breaks: Sequence[float], alphas: Sequence, budget: float) -> "ControlPlan":
        """Constant pieces between consecutive ``breaks``; zero-length pieces are dropped."""
        pieces = []
        for t0, t1, a in zip(breaks[:-1], breaks[1:], alphas):
            if t1 - t0 > 1e-15 * max(1.0, abs(t1)):
                pieces.append(Piece(float(t0), float(t1), CONSTANT, tuple(a)))
        # re-tile exactly after dropping degenerate pieces
        fixed = []
        for i, p in enumerate(pieces):
            t0 = 0.0 if i == 0 else fixed[-1].t1
            t1 = float(breaks[-1]) if i == len(pieces) - 1 else p.t1
            fixed.append(Piece(t0, t1, p.rule, p.alpha, p.block))
        return cls(float(budget), float(breaks[-1]), tuple(fixed))

    @property
    def breakpoints(self) -> list:
        return [p.t0 for p in self.pieces] + [self.pieces[-1].t1]

    def piece_at(self, t: float) -> Piece:
        for p in self.pieces:
            if t < p.t1:
                return p
        return self.pieces[-1]

    def to_dict(self) -> dict:
        out = []
        for p in self.pieces:
            d = {"t0": p.t0, "t1": p.t1, "rule": p.rule}
            if p.alpha is not None:
                d["alpha"] = list(p.alpha)
            if p.block is not None:
                d["block"] = p.block
            out.append(d)
        return {"budget": self.budget, "horizon": self.horizon, "pieces": out}

    @classmethod
    def from_dict(cls, d: dict) -> "ControlPlan":
        pieces = tuple(
            Piece(float(p["t0"]), float(p["t1"]), p.get("rule", CONSTANT),
                  None if p.get("alpha") is None else tuple(p["alpha"]), p.get("block"))
            for p in d["pieces"]
        )
        return cls(float(d["budget"]), float(d["horizon"]), pieces)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ControlPlan":
        return cls.from_dict(json.loads(text))


def feedback_law(piece: Piece, budget: float, merge_tol: float = 1e-7) -> Callable[[np.ndarray], np.ndarray]:
    """Return ``xi -> alpha`` for the piece (constant pieces ignore the state)."""
    if piece.rule == CONSTANT:
        alpha = np.array(piece.alpha, dtype=float)
        return lambda xi: alpha
    # imported lazily: strategies depends on this module
    from . import strategies

    if piece.rule == "instant":
        return lambda xi: strategies.instantaneous_control(xi, budget, merge_tol=merge_tol)
    if piece.rule == "integral":
        strength = min(budget, 1.0)
        return lambda xi: strength * strategies.integral_cost_control(xi, merge_tol)
    k = piece.block

    def merged(xi):
        xi = np.asarray(xi, dtype=float)
        if k > xi.size:
            raise InadmissibleControl(f"block {k} larger than N={xi.size}")
        alpha = np.zeros_like(xi)
        alpha[np.argsort(-xi, kind="stable")[:k]] = min(budget / k, 1.0)
        return alpha

    return merged
