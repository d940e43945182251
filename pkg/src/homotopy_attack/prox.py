"""Closed-form proximal maps of ``lambda * ||.||_0 + I_[l,u]`` and its group (l2,0) variant.

Both solve

    argmin_d  (L/2) ||d - s||^2 + lambda * R(d) + I_[l,u](d)

with ``L = 1 / step_len``. Because ``0`` is always feasible, every coordinate
(or group) picks the cheaper of two branches: zero, or the box projection of
``s``. Keeping the projection costs ``lambda + (L/2)||P(s) - s||^2`` against
``(L/2)||s||^2`` for zero, so it is kept exactly when

    ||s||^2 - ||P(s) - s||^2 > 2 * lambda / L.

Ties go to zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import BoxBounds, GroupPartition, as_tensor, project_box

__all__ = ["ProxParams", "shifted_point", "prox_l0_box", "prox_group_l20_box", "prox_objective"]


@dataclass(frozen=True)
class ProxParams:
    lam: float
    step_len: float

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if not self.step_len > 0:
            raise ValueError(f"step_len must be positive, got {self.step_len}")

    @property
    def lipschitz(self) -> float:
        return 1.0 / self.step_len


def shifted_point(delta, grad, step_len: float) -> np.ndarray:
    """Gradient step ``delta - step_len * grad``."""
    delta = as_tensor(delta)
    grad = as_tensor(grad)
    if delta.shape != grad.shape:
        raise ValueError(f"shape mismatch: delta {delta.shape} vs grad {grad.shape}")
    return delta - step_len * grad


def _keep_gain(s: np.ndarray, projected: np.ndarray) -> np.ndarray:
    return s * s - (projected - s) ** 2


def prox_l0_box(s, bounds: BoxBounds, params: ProxParams) -> np.ndarray:
    """Elementwise minimizer of ``(L/2)||d - s||^2 + lambda ||d||_0 + I_[l,u](d)``.

    Every output entry is either exactly ``0`` or ``clip(s_i, l_i, u_i)``.
    """
    s = as_tensor(s)
    projected = project_box(s, bounds)
    # 2*lambda/L == 2*lambda*step_len
    keep = _keep_gain(s, projected) > 2.0 * params.lam * params.step_len
    return np.where(keep, projected, 0.0)


def prox_group_l20_box(
    s, bounds: BoxBounds, partition: GroupPartition, params: ProxParams
) -> np.ndarray:
    """Group-wise minimizer with the l2,0 penalty: each group is all-zero or ``P(s)`` on it."""
    s = as_tensor(s)
    partition.check_covers(s.size)
    projected = project_box(s, bounds)
    gain = np.bincount(
        partition.labels, weights=_keep_gain(s, projected).ravel(), minlength=partition.m
    )
    keep = gain > 2.0 * params.lam * params.step_len
    return np.where(keep[partition.labels].reshape(s.shape), projected, 0.0)


def prox_objective(
    d, s, bounds: BoxBounds, params: ProxParams, partition: GroupPartition | None = None
) -> float:
    """Value of the proximal subproblem at ``d`` (``inf`` outside the box)."""
    d = as_tensor(d)
    s = as_tensor(s)
    if not bounds.contains(d):
        return float("inf")
    if partition is None:
        count = np.count_nonzero(d)
    else:
        count = partition.count_nonzero(d)
    return 0.5 / params.step_len * float(np.sum((d - s) ** 2)) + params.lam * count
