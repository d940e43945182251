"""Homotopy attack driver.

Runs nmAPG stages over a decreasing sequence of l0 (or l2,0) weights, starting
from a weight found by a coarse-then-fine search. Each stage may add at most
``v`` new nonzeros. When a stage ends with a support whose mean magnitude is
far below ``epsilon`` (the trigger), the next stage gets a smaller budget and a
support-restricted gradient push is applied first.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .nmapg import CompositeObjective, NmapgParams, TruncationPolicy, nmapg_solve
from .oracle.losses import AttackGoal, LossOracle
from .oracle.model import Model
from .tensor_core import (
    BoxBounds,
    GroupPartition,
    NormReport,
    compute_box_bounds,
    lp_norms,
    project_box,
)

__all__ = [
    "MODES",
    "HomotopyParams",
    "PostAttackParams",
    "AttackReport",
    "DegenerateOracleError",
    "coarse_lambda",
    "lambda_search",
    "trigger_check",
    "post_attack",
    "homotopy_attack",
]

MODES = ("full", "pure_homotopy", "nmapg_only")


class DegenerateOracleError(RuntimeError):
    """The loss gives no usable signal at the benign point."""


@dataclass(frozen=True)
class HomotopyParams:
    c: float = 10.0
    v: int = 3
    beta: float = 1e-3
    gamma: float = 0.8
    lambda_decay: float = 0.9
    fine_decay: float = 0.5
    v_small: int = 1
    max_outer: int = 400
    bisection_steps: int = 20

    def __post_init__(self):
        if not self.c >= 1:
            raise ValueError("c must be at least 1")
        if self.v < 1 or self.v_small < 1 or self.v_small > self.v:
            raise ValueError("need 1 <= v_small <= v")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must be in (0, 1)")
        if not 0 < self.lambda_decay < 1 or not 0 < self.fine_decay < 1:
            raise ValueError("decay factors must be in (0, 1)")
        if self.max_outer < 1 or self.bisection_steps < 0:
            raise ValueError("max_outer must be positive and bisection_steps nonnegative")

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class PostAttackParams:
    w1: float = 1.0
    w2: float = 0.01
    p: float = 2
    step_size: float = 0.01
    iters_per_l0: float = 1.0

    def __post_init__(self):
        if not (self.w1 > 0 and self.w2 > 0):
            raise ValueError("w1 and w2 must be positive")
        if self.w1 / self.w2 < 100:
            raise ValueError("post-attack needs w1 >= 100 * w2")
        if self.p not in (1, 2, math.inf):
            raise ValueError("p must be 1, 2 or inf")
        if not (self.step_size > 0 and self.iters_per_l0 > 0):
            raise ValueError("step_size and iters_per_l0 must be positive")

    def as_dict(self) -> dict:
        d = dict(self.__dict__)
        d["p"] = "inf" if self.p == math.inf else int(self.p)
        return d


@dataclass
class AttackReport:
    success: bool
    delta: np.ndarray
    norms: NormReport
    outer_iterations: int
    lambda_path: list
    post_attack_invocations: int
    wall_time: float
    mode: str = "full"
    goal: AttackGoal | None = None
    epsilon: float = 0.0
    predicted: int = -1
    groups: int | None = None
    stages: list = field(default_factory=list)
    traces: list = field(default_factory=list)

    def to_record(self, include_timing: bool = False) -> dict:
        """JSON-ready dict; the perturbation is stored sparsely with exact float reprs."""
        flat = self.delta.ravel()
        idx = np.flatnonzero(flat)
        rec = {
            "success": self.success,
            "mode": self.mode,
            "goal": None if self.goal is None else self.goal.as_dict(),
            "epsilon": self.epsilon,
            "predicted": self.predicted,
            "norms": self.norms.as_dict(),
            "groups": self.groups,
            "outer_iterations": self.outer_iterations,
            "lambda_path": list(self.lambda_path),
            "post_attack_invocations": self.post_attack_invocations,
            "stages": self.stages,
            "delta": {
                "shape": list(self.delta.shape),
                "indices": idx.tolist(),
                "values": flat[idx].tolist(),
            },
        }
        if include_timing:
            rec["wall_time"] = self.wall_time
        return rec

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_record(include_timing), sort_keys=True)

    @staticmethod
    def delta_from_record(rec: dict) -> np.ndarray:
        d = rec["delta"]
        out = np.zeros(int(np.prod(d["shape"])))
        out[np.asarray(d["indices"], dtype=np.int64)] = d["values"]
        return out.reshape(d["shape"])


def _single_step(objective: CompositeObjective, nparams: NmapgParams, v: int | None, partition):
    zero = np.zeros(objective.bounds.shape)
    trunc = None if v is None else TruncationPolicy(0, v, partition)
    return nmapg_solve(zero, objective, nparams, trunc, max_iter=1).delta


def coarse_lambda(objective: CompositeObjective, hp: HomotopyParams, nparams: NmapgParams,
                  v: int | None = None) -> float:
    """Smallest multiple of ``beta`` at which one nmAPG iteration from zero stays at zero."""
    _, g0 = objective.smooth_value_and_grad(np.zeros(objective.bounds.shape))
    if not np.any(g0):
        raise DegenerateOracleError("loss gradient vanishes at the benign point")
    cap = 1e6 * hp.beta
    k = 1
    while True:
        lam = k * hp.beta
        if lam > cap:
            raise DegenerateOracleError(f"coarse weight search exceeded {cap:g} without zeroing")
        d1 = _single_step(objective.with_lambda(lam), nparams, v, objective.partition)
        if not np.any(d1):
            return lam
        k += 1


def lambda_search(objective: CompositeObjective, hp: HomotopyParams, nparams: NmapgParams,
                  v: int | None = None) -> float:
    """Initial homotopy weight.

    Grows the weight in ``beta`` increments until one nmAPG iteration from zero
    leaves zero untouched, shrinks it by ``fine_decay`` until that iteration
    first moves, and returns ``c`` times the weight at which it moved.
    """
    lam = coarse_lambda(objective, hp, nparams, v)
    while True:
        lam *= hp.fine_decay
        if lam <= 0:
            raise DegenerateOracleError("fine weight search underflowed")
        d1 = _single_step(objective.with_lambda(lam), nparams, v, objective.partition)
        if np.any(d1):
            return hp.c * lam


def trigger_check(delta, epsilon: float, gamma: float) -> bool:
    """``l1 / l0 <= epsilon * gamma`` on a nonzero perturbation."""
    norms = lp_norms(delta)
    if norms.l0 == 0:
        return False
    return norms.l1 <= norms.l0 * epsilon * gamma


def _norm_subgradient(delta: np.ndarray, p) -> np.ndarray:
    if p == 1:
        return np.sign(delta)
    if p == 2:
        nrm = float(np.sqrt(np.sum(delta * delta)))
        return delta / nrm if nrm > 0 else np.zeros_like(delta)
    g = np.zeros(delta.size)
    a = np.abs(delta.ravel())
    if a.size and a.max() > 0:
        j = int(np.argmax(a))
        g[j] = np.sign(delta.ravel()[j])
    return g.reshape(delta.shape)


def post_attack(delta, oracle, bounds: BoxBounds, params: PostAttackParams) -> np.ndarray:
    """Projected gradient descent on ``w1 f + w2 ||d||_p`` restricted to the support of ``delta``."""
    delta = np.asarray(delta, dtype=np.float64)
    mask = delta != 0
    l0 = int(np.count_nonzero(mask))
    if l0 == 0:
        return delta.copy()
    out = delta.copy()
    for _ in range(math.ceil(params.iters_per_l0 * l0)):
        _, g = oracle.evaluate(out)
        g = params.w1 * g + params.w2 * _norm_subgradient(out, params.p)
        out = project_box(np.where(mask, out - params.step_size * g, 0.0), bounds)
    if np.any(out[~mask]):
        raise AssertionError("post-attack enlarged the support")
    return out


def _count(delta, partition):
    return int(np.count_nonzero(delta)) if partition is None else partition.count_nonzero(delta)


def homotopy_attack(
    model: Model,
    x0,
    goal: AttackGoal,
    epsilon: float,
    hp: HomotopyParams | None = None,
    nparams: NmapgParams | None = None,
    pp: PostAttackParams | None = None,
    mode: str = "full",
    partition: GroupPartition | None = None,
    keep_traces: bool = False,
) -> AttackReport:
    """Find a sparse perturbation ``delta`` with ``||delta||_inf <= epsilon`` meeting ``goal``.

    Modes: ``full`` (budgeted stages, trigger and post-attack), ``pure_homotopy``
    (weight continuation only) and ``nmapg_only`` (a single weight, the largest
    that still succeeds, found by bisection).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    hp = hp or HomotopyParams()
    nparams = nparams or NmapgParams()
    pp = pp or PostAttackParams()
    started = time.perf_counter()
    x0 = np.asarray(x0, dtype=np.float64)
    bounds = compute_box_bounds(x0, epsilon)
    oracle = LossOracle(model, x0, goal)
    base = CompositeObjective(oracle, 0.0, bounds, partition)
    delta = np.zeros(x0.shape)

    def report(delta, success, outer, lambdas, posts, stages, traces):
        return AttackReport(
            success=success,
            delta=delta,
            norms=lp_norms(delta),
            outer_iterations=outer,
            lambda_path=lambdas,
            post_attack_invocations=posts,
            wall_time=time.perf_counter() - started,
            mode=mode,
            goal=goal,
            epsilon=epsilon,
            predicted=oracle.predict(x0 + delta),
            groups=None if partition is None else partition.count_nonzero(delta),
            stages=stages,
            traces=traces,
        )

    if oracle.is_success(delta):
        return report(delta, True, 0, [], 0, [], [])

    if mode == "nmapg_only":
        return _nmapg_only(base, hp, nparams, report, keep_traces)

    budgeted = mode == "full"
    lam = lambda_search(base, hp, nparams, hp.v if budgeted else None)
    v = hp.v
    lambdas, stages, traces = [], [], []
    posts = 0
    best, best_f = delta, math.inf
    success = False
    outer = 0
    for outer in range(1, hp.max_outer + 1):
        r = _count(delta, partition)
        trunc = TruncationPolicy(r, v, partition) if budgeted else None
        res = nmapg_solve(delta, base.with_lambda(lam), nparams, trunc)
        delta = res.delta
        lambdas.append(lam)
        if keep_traces:
            traces.append(res.trace)
        stage = {
            "lambda": lam,
            "base": r,
            "budget": v if budgeted else None,
            "max_inner": max((t["groups"] for t in res.trace), default=r),
            "out": _count(delta, partition),
            "iterations": res.iterations,
            "triggered": False,
        }
        stages.append(stage)
        v = hp.v
        success = oracle.is_success(delta)
        if not success and res.smooth_value < best_f:
            best, best_f = delta, res.smooth_value
        if success:
            break
        if budgeted and trigger_check(delta, epsilon, hp.gamma):
            stage["triggered"] = True
            v = hp.v_small
            delta = post_attack(delta, oracle, bounds, pp)
            posts += 1
            success = oracle.is_success(delta)
            if success:
                break
        lam *= hp.lambda_decay
    final = delta if success else best
    return report(final, success, outer, lambdas, posts, stages, traces)


def _nmapg_only(base: CompositeObjective, hp, nparams, report, keep_traces):
    """Bisect the weight in ``[0, coarse threshold]`` for the largest one that still succeeds."""
    oracle = base.oracle
    zero = np.zeros(base.bounds.shape)
    lo, hi = 0.0, coarse_lambda(base, hp, nparams, None)
    best = None
    lambdas, traces, stages = [], [], []

    def run(lam):
        res = nmapg_solve(zero, base.with_lambda(lam), nparams, None)
        lambdas.append(lam)
        stages.append({"lambda": lam, "out": base.sparsity(res.delta), "iterations": res.iterations})
        if keep_traces:
            traces.append(res.trace)
        return res.delta, oracle.is_success(res.delta)

    for _ in range(hp.bisection_steps):
        mid = 0.5 * (lo + hi)
        delta, ok = run(mid)
        if ok:
            lo, best = mid, delta
        else:
            hi = mid
    success = best is not None
    if not success:
        best, success = run(0.0)
    return report(best, success, len(lambdas), lambdas, 0, stages, traces)
