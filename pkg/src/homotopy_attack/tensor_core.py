"""Flat tensor helpers: box bounds, projections, norms, top-k truncation, TSR1 I/O.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Every function
here is pure: inputs are never modified in place.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "BoxBounds",
    "NormReport",
    "GroupPartition",
    "TensorFormatError",
    "DEFAULT_ZERO_TOL",
    "as_tensor",
    "compute_box_bounds",
    "project_box",
    "lp_norms",
    "truncate_top_k",
    "truncate_top_k_groups",
    "save_tensor",
    "load_tensor",
    "encode_tensor",
    "decode_tensor",
]

DEFAULT_ZERO_TOL = 1e-12
TENSOR_MAGIC = b"TSR1"


class TensorFormatError(ValueError):
    """Raised when a TSR1 blob is truncated or malformed."""


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a float64 array (no copy when already float64)."""
    return np.asarray(x, dtype=np.float64)


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "operands") -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch between {what}: {a.shape} vs {b.shape}")


@dataclass(frozen=True)
class BoxBounds:
    """Per-entry interval ``[lower, upper]`` containing zero."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = as_tensor(self.lower)
        upper = as_tensor(self.upper)
        _check_same_shape(lower, upper, "lower and upper bounds")
        if np.any(lower > upper):
            raise ValueError("box has lower > upper for some entry")
        if np.any(lower > 0) or np.any(upper < 0):
            raise ValueError("box must contain zero in every coordinate")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.lower.shape

    def contains(self, delta: np.ndarray, tol: float = 0.0) -> bool:
        delta = as_tensor(delta)
        return bool(np.all(delta >= self.lower - tol) and np.all(delta <= self.upper + tol))


@dataclass(frozen=True)
class NormReport:
    l0: int
    l1: float
    l2: float
    linf: float

    def as_dict(self) -> dict:
        return {"l0": self.l0, "l1": self.l1, "l2": self.l2, "linf": self.linf}


class GroupPartition:
    """Disjoint, exactly covering index groups over a flat index space of size ``n``.

    Parameters
    ----------
    groups : sequence of sequences of int
        Flat (row-major) indices for each group. Validated for nonemptiness,
        disjointness and exact cover of ``range(n)``.
    n : int, optional
        Size of the index space; inferred from the largest index when omitted.
    """

    def __init__(self, groups: Sequence[Sequence[int]], n: int | None = None):
        arrays = [np.asarray(g, dtype=np.int64).ravel() for g in groups]
        if not arrays:
            raise ValueError("partition needs at least one group")
        if any(a.size == 0 for a in arrays):
            raise ValueError("partition groups must be nonempty")
        flat = np.concatenate(arrays)
        if n is None:
            n = int(flat.max()) + 1
        if flat.min() < 0 or flat.max() >= n:
            raise ValueError(f"group index out of range [0, {n})")
        counts = np.bincount(flat, minlength=n)
        if np.any(counts > 1):
            raise ValueError("groups overlap")
        if np.any(counts == 0):
            raise ValueError("groups do not cover every index")
        labels = np.empty(n, dtype=np.int64)
        for gid, a in enumerate(arrays):
            labels[a] = gid
        self.groups = tuple(arrays)
        self.n = n
        self.labels = labels
        self.labels.flags.writeable = False

    @classmethod
    def singletons(cls, n: int) -> "GroupPartition":
        return cls([[i] for i in range(n)], n)

    @property
    def m(self) -> int:
        return len(self.groups)

    def __len__(self) -> int:
        return len(self.groups)

    def group_sq_norms(self, values: np.ndarray) -> np.ndarray:
        """Per-group sum of squares of a flat array."""
        return np.bincount(self.labels, weights=np.square(values.ravel()), minlength=self.m)

    def check_covers(self, size: int) -> None:
        if size != self.n:
            raise ValueError(f"partition covers {self.n} entries, tensor has {size}")

    def count_nonzero(self, delta: np.ndarray) -> int:
        """Number of groups with nonzero l2 norm (the l2,0 count)."""
        self.check_covers(delta.size)
        return int(np.count_nonzero(self.group_sq_norms(delta)))


def compute_box_bounds(x0, epsilon: float) -> BoxBounds:
    """Merge ``||delta||_inf <= epsilon`` and ``0 <= x0 + delta <= 1`` into one box."""
    x0 = as_tensor(x0)
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if not np.all(np.isfinite(x0)) or np.any(x0 < 0) or np.any(x0 > 1):
        raise ValueError("x0 entries must lie in [0, 1]")
    lower = np.maximum(-epsilon, -x0)
    upper = np.minimum(epsilon, 1.0 - x0)
    return BoxBounds(lower, upper)


def project_box(v, bounds: BoxBounds) -> np.ndarray:
    v = as_tensor(v)
    _check_same_shape(v, bounds.lower, "tensor and box")
    return np.minimum(np.maximum(v, bounds.lower), bounds.upper)


def lp_norms(delta, zero_tol: float = DEFAULT_ZERO_TOL) -> NormReport:
    a = np.abs(as_tensor(delta)).ravel()
    if a.size == 0:
        return NormReport(0, 0.0, 0.0, 0.0)
    return NormReport(
        l0=int(np.count_nonzero(a > zero_tol)),
        l1=float(a.sum()),
        l2=float(np.sqrt(np.dot(a, a))),
        linf=float(a.max()),
    )


def _top_k_mask(scores: np.ndarray, k: int, tiebreak: np.ndarray | None = None) -> np.ndarray:
    # rank by score, then tiebreak (both descending), then ascending index
    if tiebreak is None:
        order = np.argsort(-scores, kind="stable")
    else:
        order = np.lexsort((np.arange(scores.size), -tiebreak, -scores))
    mask = np.zeros(scores.size, dtype=bool)
    mask[order[:k]] = True
    return mask


def truncate_top_k(delta, k: int, tiebreak=None) -> np.ndarray:
    """Keep the ``k`` largest-magnitude entries, zero the rest.

    Equal magnitudes are ordered by ``tiebreak`` (larger first) when given,
    then by lowest index.
    """
    delta = as_tensor(delta)
    if k < 0:
        raise ValueError("k must be nonnegative")
    flat = delta.ravel()
    if k >= flat.size:
        return delta.copy()
    if np.count_nonzero(flat) <= k:
        return delta.copy()
    tb = None if tiebreak is None else as_tensor(tiebreak).ravel()
    mask = _top_k_mask(np.abs(flat), k, tb)
    return np.where(mask, flat, 0.0).reshape(delta.shape)


def truncate_top_k_groups(delta, partition: GroupPartition, k: int, tiebreak=None) -> np.ndarray:
    """Keep the ``k`` groups with the largest l2 norm verbatim, zero every other group.

    ``tiebreak`` is per entry; groups with equal norms are ordered by its
    group sum (larger first), then by lowest group index.
    """
    delta = as_tensor(delta)
    if k < 0:
        raise ValueError("k must be nonnegative")
    partition.check_covers(delta.size)
    if k >= partition.m:
        return delta.copy()
    sq = partition.group_sq_norms(delta)
    if np.count_nonzero(sq) <= k:
        return delta.copy()
    tb = None
    if tiebreak is not None:
        tb = np.bincount(partition.labels, weights=as_tensor(tiebreak).ravel(), minlength=partition.m)
    keep = _top_k_mask(sq, k, tb)
    flat = delta.ravel()
    return np.where(keep[partition.labels], flat, 0.0).reshape(delta.shape)


def encode_tensor(t) -> bytes:
    t = np.ascontiguousarray(as_tensor(t))
    header = TENSOR_MAGIC + struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    return header + t.astype("<f8").tobytes(order="C")


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < 8 or blob[:4] != TENSOR_MAGIC:
        raise TensorFormatError("not a TSR1 tensor (bad magic)")
    (rank,) = struct.unpack_from("<I", blob, 4)
    off = 8 + 4 * rank
    if len(blob) < off:
        raise TensorFormatError("truncated TSR1 header")
    shape = struct.unpack_from(f"<{rank}I", blob, 8)
    count = int(np.prod(shape, dtype=np.int64))
    if len(blob) != off + 8 * count:
        raise TensorFormatError(
            f"TSR1 payload has {len(blob) - off} bytes, expected {8 * count}"
        )
    return np.frombuffer(blob, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape)


def save_tensor(path, t) -> None:
    Path(path).write_bytes(encode_tensor(t))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())
