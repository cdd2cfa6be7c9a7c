"""Dense GQA attention over embedding blocks, with log-sum-exp partials.

This is the numeric substrate for the ring protocols: embedding blocks carry
their own global positions, sequence ids and validity bits, so causal masking
never depends on which rank a block currently sits on. Attention over a block
of keys returns a :class:`PartialAttention` (output + per-row log-sum-exp)
that can later be combined with partials from other key blocks via
:func:`merge_attention`.

Numerics: inputs are stored as float32, all dot products, softmax sums and
merges accumulate in float64, and attention outputs stay in float64. Invalid
(padding) key rows are physically dropped before any reduction, which makes
padding invisible bit-for-bit, not just within tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "EmbeddingBlock",
    "GqaConfig",
    "PartialAttention",
    "admitted_pair_count",
    "gqa_attention",
    "merge_attention",
]


def _frozen_array(values, dtype=None):
    out = np.array(values, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class GqaConfig:
    """Head geometry for grouped-query attention.

    ``n_query_heads`` must be a multiple of ``n_kv_heads``; query head ``h``
    reads kv head ``(h * n_kv_heads) // n_query_heads``. ``scale`` defaults to
    ``1/sqrt(head_dim)``.
    """

    n_query_heads: int
    n_kv_heads: int
    head_dim: int
    scale: float | None = None

    def __post_init__(self):
        if self.n_query_heads < 1 or self.n_kv_heads < 1 or self.head_dim < 1:
            raise ValueError("head counts and head_dim must be positive")
        if self.n_query_heads % self.n_kv_heads != 0:
            raise ValueError(
                f"n_query_heads={self.n_query_heads} not divisible by "
                f"n_kv_heads={self.n_kv_heads}"
            )
        if self.scale is None:
            object.__setattr__(self, "scale", 1.0 / math.sqrt(self.head_dim))

    @property
    def query_to_kv_head(self) -> np.ndarray:
        return (np.arange(self.n_query_heads) * self.n_kv_heads) // self.n_query_heads


@dataclass(frozen=True)
class EmbeddingBlock:
    """A block of per-token head embeddings plus masking metadata.

    data: [tokens, heads, head_dim]; positions: global token positions
    (-1 for padding); valid: False marks padding rows that must never reach
    a result; seq_ids: sequence identity for fused variable-length batches
    (-1 for padding). Blocks are immutable after construction and safe to
    share between concurrently executing ranks.
    """

    data: np.ndarray
    positions: np.ndarray
    valid: np.ndarray
    seq_ids: np.ndarray

    def __post_init__(self):
        data = _frozen_array(self.data)
        positions = _frozen_array(self.positions, dtype=np.int64)
        valid = _frozen_array(self.valid, dtype=bool)
        seq_ids = _frozen_array(self.seq_ids, dtype=np.int64)
        if data.ndim != 3:
            raise ValueError(f"data must be [tokens, heads, head_dim], got shape {data.shape}")
        n = data.shape[0]
        if positions.shape != (n,) or valid.shape != (n,) or seq_ids.shape != (n,):
            raise ValueError("positions/valid/seq_ids must be 1-d arrays matching token count")
        if n and not np.isfinite(data[valid]).all():
            raise ValueError("non-finite embedding data in valid rows")
        if np.any(positions[valid] < 0):
            raise ValueError("valid tokens must have non-negative positions")
        for sid in np.unique(seq_ids[valid]):
            pos = positions[valid & (seq_ids == sid)]
            if np.any(np.diff(pos) <= 0):
                raise ValueError(f"positions not strictly increasing within sequence {sid}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "valid", valid)
        object.__setattr__(self, "seq_ids", seq_ids)

    @classmethod
    def from_tokens(cls, data, positions, seq_id: int = 0) -> "EmbeddingBlock":
        """Block of all-valid tokens belonging to one sequence."""
        data = np.asarray(data)
        n = data.shape[0]
        return cls(
            data=data,
            positions=np.asarray(positions, dtype=np.int64),
            valid=np.ones(n, dtype=bool),
            seq_ids=np.full(n, seq_id, dtype=np.int64),
        )

    @classmethod
    def padding(cls, n_tokens: int, n_heads: int, head_dim: int, dtype=np.float32) -> "EmbeddingBlock":
        return cls(
            data=np.zeros((n_tokens, n_heads, head_dim), dtype=dtype),
            positions=np.full(n_tokens, -1, dtype=np.int64),
            valid=np.zeros(n_tokens, dtype=bool),
            seq_ids=np.full(n_tokens, -1, dtype=np.int64),
        )

    @staticmethod
    def concat(blocks: list["EmbeddingBlock"]) -> "EmbeddingBlock":
        if not blocks:
            raise ValueError("cannot concatenate zero blocks")
        return EmbeddingBlock(
            data=np.concatenate([b.data for b in blocks], axis=0),
            positions=np.concatenate([b.positions for b in blocks]),
            valid=np.concatenate([b.valid for b in blocks]),
            seq_ids=np.concatenate([b.seq_ids for b in blocks]),
        )

    @property
    def n_tokens(self) -> int:
        return self.data.shape[0]

    @property
    def n_heads(self) -> int:
        return self.data.shape[1]

    @property
    def head_dim(self) -> int:
        return self.data.shape[2]

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def valid_only(self) -> "EmbeddingBlock":
        keep = self.valid
        return EmbeddingBlock(
            data=self.data[keep],
            positions=self.positions[keep],
            valid=self.valid[keep],
            seq_ids=self.seq_ids[keep],
        )

    def pad_to(self, n_tokens: int) -> "EmbeddingBlock":
        if n_tokens < self.n_tokens:
            raise ValueError(f"cannot pad {self.n_tokens} tokens down to {n_tokens}")
        if n_tokens == self.n_tokens:
            return self
        pad = EmbeddingBlock.padding(
            n_tokens - self.n_tokens, self.n_heads, self.head_dim, dtype=self.data.dtype
        )
        return EmbeddingBlock.concat([self, pad])


@dataclass(frozen=True)
class PartialAttention:
    """Attention output over one key block, plus per-(token, head) log-sum-exp.

    ``lse[i, h]`` is the natural log of the sum over admitted keys of
    ``exp(scale * q_i . k_j)``; it is exactly -inf when token i admitted no
    keys (the matching output row is zero). This is the unit merged across
    ring steps.
    """

    output: EmbeddingBlock
    lse: np.ndarray

    def __post_init__(self):
        lse = _frozen_array(self.lse, dtype=np.float64)
        if lse.shape != (self.output.n_tokens, self.output.n_heads):
            raise ValueError(
                f"lse shape {lse.shape} does not match output "
                f"[{self.output.n_tokens}, {self.output.n_heads}]"
            )
        object.__setattr__(self, "lse", lse)


def _admissible(q: EmbeddingBlock, kv_valid, kv_positions, kv_seq_ids) -> np.ndarray:
    """Boolean [Tq, Tk] mask: same sequence, causal by global position, both valid."""
    return (
        q.valid[:, None]
        & kv_valid[None, :]
        & (q.seq_ids[:, None] == kv_seq_ids[None, :])
        & (kv_positions[None, :] <= q.positions[:, None])
    )


def admitted_pair_count(q: EmbeddingBlock, k: EmbeddingBlock) -> int:
    """Number of (query, admitted key) pairs under the causal-by-position mask."""
    return int(_admissible(q, k.valid, k.positions, k.seq_ids).sum())


def _check_kv_pair(k: EmbeddingBlock, v: EmbeddingBlock, cfg: GqaConfig):
    if k.data.shape != v.data.shape:
        raise ValueError(f"k/v shape mismatch: {k.data.shape} vs {v.data.shape}")
    if not (
        np.array_equal(k.positions, v.positions)
        and np.array_equal(k.valid, v.valid)
        and np.array_equal(k.seq_ids, v.seq_ids)
    ):
        raise ValueError("k and v must carry identical positions/valid/seq_ids")
    if k.n_heads != cfg.n_kv_heads or k.head_dim != cfg.head_dim:
        raise ValueError(
            f"kv blocks are [{k.n_heads} x {k.head_dim}] but config wants "
            f"[{cfg.n_kv_heads} x {cfg.head_dim}]"
        )


def gqa_attention(q: EmbeddingBlock, k: EmbeddingBlock, v: EmbeddingBlock, cfg: GqaConfig) -> PartialAttention:
    """Causal GQA attention of a query block against one key/value block.

    Query head h reads kv head ``(h * n_kv_heads) // n_query_heads``. Key j is
    admitted for query i iff both rows are valid, belong to the same sequence,
    and ``positions[j] <= positions[i]``. Rows that admit no key come back
    with a zero output and ``lse = -inf``, which lets ranks that saw no
    admissible keys still contribute a partial to the merge.

    Invalid key rows are dropped before any arithmetic, so inserting padding
    anywhere in k/v cannot change a single output bit.
    """
    if q.n_heads != cfg.n_query_heads or q.head_dim != cfg.head_dim:
        raise ValueError(
            f"query block is [{q.n_heads} x {q.head_dim}] but config wants "
            f"[{cfg.n_query_heads} x {cfg.head_dim}]"
        )
    _check_kv_pair(k, v, cfg)

    tq = q.n_tokens
    out = np.zeros((tq, cfg.n_query_heads, cfg.head_dim), dtype=np.float64)
    lse = np.full((tq, cfg.n_query_heads), -np.inf, dtype=np.float64)

    keep = k.valid
    kd = k.data[keep].astype(np.float64)
    vd = v.data[keep].astype(np.float64)
    if tq > 0 and kd.shape[0] > 0:
        kpos = k.positions[keep]
        kseq = k.seq_ids[keep]
        qd = q.data.astype(np.float64)
        groups = cfg.query_to_kv_head
        kh = kd[:, groups, :]
        vh = vd[:, groups, :]
        scores = np.einsum("ihd,jhd->hij", qd, kh, optimize=True) * cfg.scale
        admit = _admissible(q, np.ones(kd.shape[0], dtype=bool), kpos, kseq)
        scores = np.where(admit[None, :, :], scores, -np.inf)
        row_max = scores.max(axis=2)  # [H, Tq]
        has_keys = np.isfinite(row_max)
        safe_max = np.where(has_keys, row_max, 0.0)
        weights = np.exp(scores - safe_max[:, :, None])
        weights = np.where(admit[None, :, :], weights, 0.0)
        denom = weights.sum(axis=2)  # [H, Tq]
        raw = np.einsum("hij,jhd->ihd", weights, vh, optimize=True)
        raw /= np.where(has_keys, denom, 1.0).T[:, :, None]
        out = np.where(has_keys.T[:, :, None], raw, 0.0)
        lse = np.where(
            has_keys, safe_max + np.log(np.where(has_keys, denom, 1.0)), -np.inf
        ).T

    out_block = EmbeddingBlock(
        data=out, positions=q.positions, valid=q.valid, seq_ids=q.seq_ids
    )
    return PartialAttention(output=out_block, lse=lse)


def _check_same_query_geometry(a: PartialAttention, b: PartialAttention):
    if a.output.data.shape != b.output.data.shape:
        raise ValueError(
            f"partials are not query-shaped alike: {a.output.data.shape} vs "
            f"{b.output.data.shape}"
        )
    if not (
        np.array_equal(a.output.positions, b.output.positions)
        and np.array_equal(a.output.valid, b.output.valid)
        and np.array_equal(a.output.seq_ids, b.output.seq_ids)
    ):
        raise ValueError("partials disagree on query positions/valid/seq_ids")


def _merge_pair(a: PartialAttention, b: PartialAttention) -> PartialAttention:
    la, lb = a.lse, b.lse
    row_max = np.maximum(la, lb)
    has = ~np.isneginf(row_max)
    safe_max = np.where(has, row_max, 0.0)
    total = np.exp(la - safe_max) + np.exp(lb - safe_max)
    lse = np.where(has, safe_max + np.log(np.where(has, total, 1.0)), -np.inf)
    safe_lse = np.where(has, lse, 0.0)
    wa = np.where(np.isneginf(la), 0.0, np.exp(la - safe_lse))[:, :, None]
    wb = np.where(np.isneginf(lb), 0.0, np.exp(lb - safe_lse))[:, :, None]
    data = a.output.data * wa + b.output.data * wb
    merged = EmbeddingBlock(
        data=data,
        positions=a.output.positions,
        valid=a.output.valid,
        seq_ids=a.output.seq_ids,
    )
    return PartialAttention(output=merged, lse=lse)


def merge_attention(parts: list[PartialAttention]) -> PartialAttention:
    """Combine partial attentions over disjoint key blocks.

    merged lse = log sum_s exp(lse_s), merged output row = sum_s of
    output_s weighted by exp(lse_s - merged lse). Implemented as a left fold
    of stable pairwise merges, so merging a list in one call is bit-identical
    to nesting pairwise merges in the same order; callers must order parts
    by ascending source rank.
    """
    if not parts:
        raise ValueError("cannot merge an empty list of partials")
    acc = parts[0]
    for part in parts[1:]:
        _check_same_query_geometry(acc, part)
        acc = _merge_pair(acc, part)
    return acc
