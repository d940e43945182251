"""Nonmonotone accelerated proximal gradient (nmAPG) with BB-initialized backtracking.

Minimizes ``F(d) = f(x0 + d) + lambda * R(d) + I_[l,u](d)`` where ``R`` is the
l0 count or the group l2,0 count. Each iteration extrapolates, takes a
line-searched proximal step from the extrapolated point, and falls back to a
step from the current iterate whenever the extrapolated candidate fails the
nonmonotone sufficient-descent test. An optional truncation hook caps the
number of nonzero entries (or groups) of every accepted iterate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .prox import ProxParams, prox_group_l20_box, prox_l0_box
from .tensor_core import (
    BoxBounds,
    GroupPartition,
    project_box,
    truncate_top_k,
    truncate_top_k_groups,
)

__all__ = [
    "NmapgParams",
    "TruncationPolicy",
    "CompositeObjective",
    "LineSearchResult",
    "NmapgResult",
    "SolverInvariantError",
    "bb_step",
    "line_search_prox_step",
    "nmapg_solve",
]


class SolverInvariantError(AssertionError):
    """An accepted iterate broke feasibility or the truncation bound."""


@dataclass(frozen=True)
class NmapgParams:
    eta: float = 0.8
    descent_delta: float = 1e-5
    rho: float = 0.5
    max_iter: int = 50
    step_init: float = 1.0
    step_min: float = 1e-8
    step_max: float = 1e8
    max_shrinks: int = 60
    tol: float = 1e-9

    def __post_init__(self):
        if not 0 <= self.eta < 1:
            raise ValueError("eta must be in [0, 1)")
        if not 0 < self.rho < 1:
            raise ValueError("rho must be in (0, 1)")
        if not self.descent_delta > 0:
            raise ValueError("descent_delta must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be a positive integer")
        if not 0 < self.step_min <= self.step_max:
            raise ValueError("need 0 < step_min <= step_max")
        if not self.step_init > 0:
            raise ValueError("step_init must be positive")

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class TruncationPolicy:
    """Keep at most ``base_l0 + budget`` nonzero entries (or groups, with a partition)."""

    base_l0: int
    budget: int
    group_partition: GroupPartition | None = None

    def __post_init__(self):
        if self.base_l0 < 0 or self.budget < 0:
            raise ValueError("base_l0 and budget must be nonnegative")

    @property
    def limit(self) -> int:
        return self.base_l0 + self.budget

    def count(self, delta: np.ndarray) -> int:
        if self.group_partition is None:
            return int(np.count_nonzero(delta))
        return self.group_partition.count_nonzero(delta)

    def apply(self, delta: np.ndarray, tiebreak: np.ndarray | None = None) -> np.ndarray:
        if self.group_partition is None:
            return truncate_top_k(delta, self.limit, tiebreak)
        return truncate_top_k_groups(delta, self.group_partition, self.limit, tiebreak)


class CompositeObjective:
    """``f(x0 + d) + lam * R(d) + I_[l,u](d)`` bound to one oracle.

    Smooth-part evaluations are memoized on the exact bytes of ``d``; the
    oracle is deterministic, so repeated points (common in the monitor branch)
    cost nothing.
    """

    _CACHE_SIZE = 16

    def __init__(self, oracle, lam: float, bounds: BoxBounds, partition: GroupPartition | None = None):
        if not lam >= 0:
            raise ValueError("lambda must be nonnegative")
        if bounds.shape != oracle.shape:
            raise ValueError(f"box shape {bounds.shape} does not match oracle shape {oracle.shape}")
        if partition is not None:
            partition.check_covers(int(np.prod(bounds.shape)))
        self.oracle = oracle
        self.lam = float(lam)
        self.bounds = bounds
        self.partition = partition
        self._cache: dict[bytes, list] = {}

    def with_lambda(self, lam: float) -> "CompositeObjective":
        other = CompositeObjective(self.oracle, lam, self.bounds, self.partition)
        other._cache = self._cache
        return other

    def _entry(self, delta: np.ndarray) -> list:
        key = delta.tobytes()
        entry = self._cache.get(key)
        if entry is None:
            if len(self._cache) >= self._CACHE_SIZE:
                self._cache.pop(next(iter(self._cache)))
            entry = self._cache[key] = [None, None]
        return entry

    def smooth_value(self, delta: np.ndarray) -> float:
        entry = self._entry(delta)
        if entry[0] is None:
            entry[0] = self.oracle.value(delta)
        return entry[0]

    def smooth_value_and_grad(self, delta: np.ndarray) -> tuple[float, np.ndarray]:
        entry = self._entry(delta)
        if entry[1] is None:
            entry[0], entry[1] = self.oracle.evaluate(delta)
        return entry[0], entry[1]

    def sparsity(self, delta: np.ndarray) -> int:
        if self.partition is None:
            return int(np.count_nonzero(delta))
        return self.partition.count_nonzero(delta)

    def value(self, delta: np.ndarray) -> float:
        if not self.bounds.contains(delta):
            return math.inf
        return self.smooth_value(delta) + self.lam * self.sparsity(delta)

    def keep_gain(self, s: np.ndarray) -> np.ndarray:
        """Per-entry ``s^2 - (P(s) - s)^2``: how much keeping an entry lowers the prox subproblem."""
        return s * s - (project_box(s, self.bounds) - s) ** 2

    def prox(self, s: np.ndarray, step: float) -> np.ndarray:
        params = ProxParams(self.lam, step)
        if self.partition is None:
            return prox_l0_box(s, self.bounds, params)
        return prox_group_l20_box(s, self.bounds, self.partition, params)


def bb_step(dx: np.ndarray, dg: np.ndarray, params: NmapgParams) -> float:
    """First Barzilai-Borwein step ``<dx,dx>/<dx,dg>`` clamped to ``[step_min, step_max]``."""
    sxx = float(np.vdot(dx, dx))
    sxg = float(np.vdot(dx, dg))
    if sxx == 0.0 or sxg <= 0.0 or not np.any(dg):
        return params.step_init
    return min(max(sxx / sxg, params.step_min), params.step_max)


@dataclass
class LineSearchResult:
    candidate: np.ndarray
    step: float
    value: float
    anchor: float
    dist_sq: float
    shrinks: int
    stalled: bool
    gain: np.ndarray | None = None

    @property
    def accepted(self) -> bool:
        return not self.stalled


def line_search_prox_step(
    point: np.ndarray,
    objective: CompositeObjective,
    anchor_value: float,
    params: NmapgParams,
    step0: float | None = None,
) -> LineSearchResult:
    """Backtrack ``step0 * rho**j`` until ``F(c) <= anchor - descent_delta * ||c - point||^2``.

    ``c = prox(point - step * grad f(point))``. After ``max_shrinks`` failed
    shrinks the candidate with the lowest ``F`` seen is returned with
    ``stalled=True``.
    """
    _, grad = objective.smooth_value_and_grad(point)
    step = params.step_init if step0 is None else step0
    best = best_shifted = None
    for j in range(params.max_shrinks + 1):
        shifted = point - step * grad
        cand = objective.prox(shifted, step)
        dist_sq = float(np.sum((cand - point) ** 2))
        value = objective.value(cand)
        if value <= anchor_value - params.descent_delta * dist_sq:
            res = LineSearchResult(cand, step, value, anchor_value, dist_sq, j, False)
            best_shifted = shifted
            break
        if best is None or value < best.value:
            best = LineSearchResult(cand, step, value, anchor_value, dist_sq, j, True)
            best_shifted = shifted
        step *= params.rho
    else:
        res = best
    res.gain = objective.keep_gain(best_shifted)
    return res


@dataclass
class NmapgResult:
    delta: np.ndarray
    value: float
    smooth_value: float
    iterations: int
    trace: list = field(default_factory=list)

    @property
    def l0(self) -> int:
        return int(np.count_nonzero(self.delta))


def nmapg_solve(
    delta0: np.ndarray,
    objective: CompositeObjective,
    params: NmapgParams,
    trunc: TruncationPolicy | None = None,
    max_iter: int | None = None,
) -> NmapgResult:
    """Run nmAPG from ``delta0``; see the module docstring.

    Each trace record holds ``iteration, F, f, l0, groups, step, branch, c,
    candidate_F, anchor, dist_sq, stalled, limit``; ``candidate_F`` is the
    objective of the accepted candidate before truncation, which satisfies
    ``candidate_F <= anchor - descent_delta * dist_sq`` unless ``stalled``. ``branch`` is ``"z"`` when the
    extrapolated candidate passed the monitor and ``"v"`` otherwise.
    """
    max_iter = params.max_iter if max_iter is None else max_iter
    bounds = objective.bounds
    x = np.asarray(delta0, dtype=np.float64).copy()
    if not bounds.contains(x):
        raise ValueError("initial perturbation is not feasible")
    if trunc is not None and trunc.count(x) > trunc.base_l0:
        raise ValueError(f"initial sparsity {trunc.count(x)} exceeds base_l0 {trunc.base_l0}")

    x_prev = x.copy()
    z = x.copy()
    t, t_prev = 1.0, 0.0
    c = objective.value(x)
    q = 1.0
    y_prev = None
    grad_y_prev = None
    trace = []
    k = 0
    for k in range(1, max_iter + 1):
        y = x + (t_prev / t) * (z - x) + ((t_prev - 1.0) / t) * (x - x_prev)
        _, grad_y = objective.smooth_value_and_grad(y)
        if y_prev is None:
            step_y = params.step_init
        else:
            step_y = bb_step(y - y_prev, grad_y - grad_y_prev, params)
        f_y = objective.value(y)
        z_res = line_search_prox_step(y, objective, max(f_y, c), params, step_y)
        z_new = z_res.candidate

        if z_res.value <= c - params.descent_delta * float(np.sum((z_new - y) ** 2)):
            branch, chosen, ls = "z", z_new, z_res
            anchor, dist_sq = c, float(np.sum((z_new - y) ** 2))
        else:
            _, grad_x = objective.smooth_value_and_grad(x)
            if y_prev is None:
                step_x = params.step_init
            else:
                step_x = bb_step(x - y_prev, grad_x - grad_y_prev, params)
            v_res = line_search_prox_step(x, objective, c, params, step_x)
            branch = "v"
            if z_res.value <= v_res.value:
                chosen, ls = z_new, z_res
            else:
                chosen, ls = v_res.candidate, v_res
            anchor, dist_sq = ls.anchor, ls.dist_sq

        x_next = chosen
        if trunc is not None:
            # clamped entries tie at the box edge; prefer the ones the prox wanted most
            x_next = trunc.apply(x_next, ls.gain)
        if not bounds.contains(x_next):
            raise SolverInvariantError(f"iterate {k} left the box")
        if trunc is not None and trunc.count(x_next) > trunc.limit:
            raise SolverInvariantError(f"iterate {k} exceeds the truncation limit {trunc.limit}")
        f_next = objective.smooth_value(x_next)
        F_next = f_next + objective.lam * objective.sparsity(x_next)

        t_prev, t = t, (math.sqrt(4.0 * t * t + 1.0) + 1.0) / 2.0
        q_next = params.eta * q + 1.0
        c = (params.eta * q * c + F_next) / q_next
        q = q_next

        trace.append(
            {
                "iteration": k,
                "F": F_next,
                "f": f_next,
                "l0": int(np.count_nonzero(x_next)),
                "groups": objective.sparsity(x_next),
                "step": ls.step,
                "branch": branch,
                "c": c,
                "candidate_F": ls.value,
                "anchor": anchor,
                "dist_sq": dist_sq,
                "stalled": ls.stalled,
                "limit": None if trunc is None else trunc.limit,
            }
        )

        change = float(np.max(np.abs(x_next - x))) if x.size else 0.0
        y_prev, grad_y_prev = y, grad_y
        z = z_new
        x_prev, x = x, x_next
        if change < params.tol:
            break

    f_final = objective.smooth_value(x)
    return NmapgResult(
        delta=x,
        value=f_final + objective.lam * objective.sparsity(x),
        smooth_value=f_final,
        iterations=k,
        trace=trace,
    )
