"""Dense multi-head attention arithmetic shared by the toy model and policies.

All arithmetic is 64-bit. Gathering a kept set preserves ascending original
position order, so attending over a kept set that covers every position is
bit-identical to full attention (same reduction order). That property is what
lets the engine verify "no permanent information loss" configurations exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels


@dataclass(frozen=True)
class HeadConfig:
    num_heads: int
    head_dim: int

    def __post_init__(self):
        if self.num_heads < 1 or self.head_dim < 1:
            raise ValueError("num_heads and head_dim must be >= 1")

    @property
    def hidden_dim(self) -> int:
        return self.num_heads * self.head_dim


@dataclass
class AttentionWeights:
    """Per-head attention rows plus their arithmetic mean across heads."""

    per_head: np.ndarray  # (num_heads, context_len)
    head_avg: np.ndarray  # (context_len,)

    def validate(self, tol: float = 1e-9):
        if self.per_head.ndim != 2:
            raise ValueError("per_head must be 2-D")
        if np.any(self.per_head < 0) or np.any(self.per_head > 1):
            raise ValueError("attention weights outside [0, 1]")
        row_sums = self.per_head.sum(axis=1)
        if np.any(np.abs(row_sums - 1.0) > tol):
            raise ValueError("per-head row does not sum to 1")
        if not np.allclose(self.head_avg, self.per_head.mean(axis=0), rtol=0, atol=tol):
            raise ValueError("head_avg is not the mean of per-head rows")


def softmax(scores) -> np.ndarray:
    """Numerically stabilized softmax of a 1-D score vector."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise ValueError("empty score vector")
    if not np.all(np.isfinite(scores)):
        raise ValueError("non-finite score")
    shifted = scores - scores.max()
    e = np.exp(shifted)
    return e / e.sum()


def head_average(per_head) -> np.ndarray:
    """Elementwise mean of per-head weight rows."""
    per_head = np.asarray(per_head, dtype=np.float64)
    if per_head.ndim != 2 or per_head.size == 0:
        raise ValueError("per_head must be a non-empty 2-D array")
    return per_head.mean(axis=0)


def _check_context(query, keys, values, cfg: HeadConfig):
    query = np.ascontiguousarray(query, dtype=np.float64)
    keys = np.ascontiguousarray(keys, dtype=np.float64)
    values = np.ascontiguousarray(values, dtype=np.float64)
    if keys.ndim != 2 or values.ndim != 2:
        raise ValueError("keys and values must be 2-D (context, hidden)")
    if len(keys) == 0:
        raise ValueError("zero-length context")
    if len(keys) != len(values):
        raise ValueError("length mismatch between keys and values")
    h = cfg.hidden_dim
    if query.shape != (h,) or keys.shape[1] != h or values.shape[1] != h:
        raise ValueError("dimension mismatch with head config")
    return query, keys, values


def attend_full(query, keys, values, cfg: HeadConfig):
    """Full attention of one query over the whole context.

    Returns (output (h,), AttentionWeights). Weights are returned because the
    pruning policies consume the head-averaged row.
    """
    query, keys, values = _check_context(query, keys, values, cfg)
    out, per_head = kernels.mha_attend(query, keys, values, cfg.num_heads)
    return out, AttentionWeights(per_head=per_head, head_avg=head_average(per_head))


def normalize_positions(kept_positions, context_len: int) -> np.ndarray:
    """Sorted unique position array; errors on empty or out-of-range input."""
    pos = np.unique(np.asarray(list(kept_positions), dtype=np.int64))
    if pos.size == 0:
        raise ValueError("empty attention context")
    if pos[0] < 0 or pos[-1] >= context_len:
        raise ValueError(f"position out of range: context has {context_len} entries")
    return pos


def attend_gathered(query, keys, values, kept_positions, cfg: HeadConfig):
    """Attention restricted to a kept set, gathered in ascending position order.

    Equivalent to attend_full on the gathered sub-sequence; when the kept set
    covers all positions the result is bit-identical to attend_full.
    """
    query, keys, values = _check_context(query, keys, values, cfg)
    pos = normalize_positions(kept_positions, len(keys))
    return attend_full(query, keys[pos], values[pos], cfg)
