"""Structured sparsity constraints, Euclidean projections, and binary masks.

A constraint keeps the top-k structural groups of a conv weight tensor by
group Frobenius norm (k given directly or as a keep rate) and zeroes the
rest. Masks are plain boolean arrays mirroring the weight shape.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensors import GroupBy, group_norms


class ConstraintKind(enum.Enum):
    FILTER_KEEP = "filter_keep"
    CHANNEL_KEEP = "channel_keep"
    SHAPE_KEEP = "shape_keep"


_GROUP_FOR_KIND = {
    ConstraintKind.FILTER_KEEP: GroupBy.FILTER,
    ConstraintKind.CHANNEL_KEEP: GroupBy.CHANNEL,
    ConstraintKind.SHAPE_KEEP: GroupBy.SHAPE_POSITION,
}


@dataclass(frozen=True)
class SparsityConstraint:
    """Keep a bounded number of structural groups along one dimension.

    Exactly one of ``keep_count`` / ``keep_rate`` must be given. A rate is
    converted with a ceiling, so a 0.5 rate on 3 groups keeps 2.
    """

    kind: ConstraintKind
    keep_count: int | None = None
    keep_rate: float | None = None

    def __post_init__(self):
        if (self.keep_count is None) == (self.keep_rate is None):
            raise ShapeError("specify exactly one of keep_count or keep_rate")
        if self.keep_count is not None and self.keep_count < 1:
            raise ShapeError(f"keep_count must be positive, got {self.keep_count}")
        if self.keep_rate is not None and not (0.0 < self.keep_rate <= 1.0):
            raise ShapeError(f"keep_rate must lie in (0, 1], got {self.keep_rate}")

    def resolve(self, group_count: int) -> int:
        if self.keep_count is not None:
            k = int(self.keep_count)
        else:
            k = int(math.ceil(self.keep_rate * group_count))
        if k > group_count:
            raise ShapeError(
                f"{self.kind.value}: keep_count {k} exceeds group count {group_count}"
            )
        return k


def _kept_group_indices(norms: np.ndarray, keep: int) -> np.ndarray:
    # Stable sort on descending norm keeps the lower index on ties.
    order = np.argsort(-norms, kind="stable")
    return np.sort(order[:keep])


def project(t: np.ndarray, constraint: SparsityConstraint) -> np.ndarray:
    """Euclidean projection onto the constraint set.

    Keeps the ``keep_count`` groups with the largest Frobenius norm (lower
    index wins ties) and zeroes the rest; surviving entries are untouched.
    """
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 4:
        raise ShapeError(f"projection needs a rank-4 tensor, got rank {t.ndim}")
    group = _GROUP_FOR_KIND[constraint.kind]
    norms = group_norms(t, group)
    keep = constraint.resolve(norms.size)
    kept = _kept_group_indices(norms, keep)

    out = np.zeros_like(t)
    if constraint.kind is ConstraintKind.FILTER_KEEP:
        out[kept] = t[kept]
    elif constraint.kind is ConstraintKind.CHANNEL_KEEP:
        out[:, kept] = t[:, kept]
    else:
        col_mask = np.zeros(t.shape[1] * t.shape[2] * t.shape[3], dtype=bool)
        col_mask[kept] = True
        out = t * col_mask.reshape(1, *t.shape[1:])
    return out


def project_composite(t: np.ndarray, constraints: list[SparsityConstraint]) -> np.ndarray:
    """Apply several constraints sequentially, in the order given.

    Constraints must target distinct dimensions. The kept support can in
    principle depend on the application order when group norms interact;
    the listed order is the definition used throughout.
    """
    kinds = [c.kind for c in constraints]
    if len(set(kinds)) != len(kinds):
        raise ShapeError(f"duplicate constraint kinds: {[k.value for k in kinds]}")
    out = np.asarray(t, dtype=np.float64).copy()
    for c in constraints:
        out = project(out, c)
    return out


def extract_mask(t: np.ndarray) -> np.ndarray:
    """Binary support mask: bit k is set iff |t[k]| > 0."""
    return np.abs(np.asarray(t, dtype=np.float64)) > 0.0


def mask_drift(prev: np.ndarray, cur: np.ndarray) -> float:
    """Fraction of bits that differ between two masks of equal shape."""
    if prev.shape != cur.shape:
        raise ShapeError(f"mask shape mismatch: {prev.shape} vs {cur.shape}")
    return float(np.mean(prev != cur))


def write_mask_csv(path, mask: np.ndarray) -> None:
    """Dump a mask as 0/1 CSV rows under a shape header comment.

    Rank-4 masks are rendered as a (c_out) x (c_in * kh * kw) matrix so
    pruned filters show as zero rows and pruned channels as zero column
    blocks; rank-2 masks render directly.
    """
    bits = np.asarray(mask, dtype=np.uint8)
    rows = bits.reshape(bits.shape[0], -1)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# shape: " + ",".join(str(d) for d in mask.shape) + "\n")
        for row in rows:
            fh.write(",".join(str(int(b)) for b in row) + "\n")
