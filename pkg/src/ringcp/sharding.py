"""Load-balanced context-parallel shard plans.

A sequence's new tokens are split into ``2N`` equal (padded) chunks
``C_0 .. C_{2N-1}`` and rank ``i`` takes the pair ``(C_i, C_{2N-1-i})``, which
equalizes causal-attention work and KV footprint across ranks. Fused batches
shard each sequence independently; previously cached tokens are never
re-sharded. Decode is balanced separately by round-robin over batch index with
a per-iteration offset, so consecutive decode steps land on different ranks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from ringcp.attention import EmbeddingBlock

__all__ = [
    "DecodePlan",
    "SequenceSharding",
    "SequenceSpec",
    "ShardPlan",
    "materialize_rank_block",
    "plan_decode",
    "plan_full_prefill",
    "plan_partial_prefill",
]


@dataclass(frozen=True)
class SequenceSpec:
    """One sequence's sizes for a turn: cached history and new tokens."""

    seq_id: int
    cached_len: int
    new_len: int

    def __post_init__(self):
        if self.cached_len < 0 or self.new_len < 0:
            raise ValueError("cached_len and new_len must be non-negative")


@dataclass(frozen=True)
class SequenceSharding:
    """Chunk table for one sequence: 2N contiguous ranges over its new tokens."""

    spec: SequenceSpec
    chunk_len: int
    # Per chunk, the [start, stop) range of valid local token indices; the
    # remaining chunk_len - (stop - start) slots are trailing padding.
    chunk_bounds: tuple[tuple[int, int], ...]

    def chunk_valid_count(self, chunk: int) -> int:
        start, stop = self.chunk_bounds[chunk]
        return stop - start


@dataclass(frozen=True)
class ShardPlan:
    """Assignment of every sequence's 2N chunks to N ranks for one fused batch.

    Rank i owns chunks (C_i, C_{2N-1-i}) of each sequence, in that order, so
    all ranks hold the same number of padded query slots per sequence.
    ``cached_layout[i][j]`` records how many cached tokens of sequence i
    already live on rank j (zero everywhere for full prefill).
    """

    n_ranks: int
    sequences: tuple[SequenceSharding, ...]
    cached_layout: tuple[tuple[int, ...], ...]

    @property
    def n_sequences(self) -> int:
        return len(self.sequences)

    def rank_chunk_indices(self, rank: int) -> tuple[int, int]:
        if not 0 <= rank < self.n_ranks:
            raise ValueError(f"rank {rank} out of range for {self.n_ranks} ranks")
        return (rank, 2 * self.n_ranks - 1 - rank)

    def new_token_count(self, seq_index: int, rank: int) -> int:
        sh = self.sequences[seq_index]
        lo, hi = self.rank_chunk_indices(rank)
        return sh.chunk_valid_count(lo) + sh.chunk_valid_count(hi)

    def query_slots(self, seq_index: int) -> int:
        return 2 * self.sequences[seq_index].chunk_len

    def total_query_slots(self) -> int:
        return sum(self.query_slots(i) for i in range(self.n_sequences))

    def padded_len(self, seq_index: int) -> int:
        """Per-sequence KV message length: max over ranks of cached + new tokens."""
        return max(
            self.cached_layout[seq_index][j] + self.new_token_count(seq_index, j)
            for j in range(self.n_ranks)
        )

    def message_token_slots(self) -> int:
        return sum(self.padded_len(i) for i in range(self.n_sequences))

    def rank_local_indices(self, seq_index: int, rank: int) -> np.ndarray:
        """Local new-token indices in this rank's slot order; -1 marks padding."""
        sh = self.sequences[seq_index]
        slots = np.full(2 * sh.chunk_len, -1, dtype=np.int64)
        offset = 0
        for chunk in self.rank_chunk_indices(rank):
            start, stop = sh.chunk_bounds[chunk]
            n = stop - start
            slots[offset : offset + n] = np.arange(start, stop)
            offset += sh.chunk_len
        return slots

    def to_json_dict(self) -> dict:
        return {
            "n_ranks": self.n_ranks,
            "assignment": [
                list(self.rank_chunk_indices(r)) for r in range(self.n_ranks)
            ],
            "sequences": [
                {
                    "seq_id": sh.spec.seq_id,
                    "cached_len": sh.spec.cached_len,
                    "new_len": sh.spec.new_len,
                    "chunk_len": sh.chunk_len,
                    "chunks": [list(b) for b in sh.chunk_bounds],
                    "padded_len": self.padded_len(i),
                    "rank_new_counts": [
                        self.new_token_count(i, j) for j in range(self.n_ranks)
                    ],
                    "rank_cached_counts": list(self.cached_layout[i]),
                }
                for i, sh in enumerate(self.sequences)
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n"


def _chunk_sequence(spec: SequenceSpec, n_ranks: int) -> SequenceSharding:
    n_chunks = 2 * n_ranks
    chunk_len = math.ceil(spec.new_len / n_chunks)
    bounds = tuple(
        (min(m * chunk_len, spec.new_len), min((m + 1) * chunk_len, spec.new_len))
        for m in range(n_chunks)
    )
    return SequenceSharding(spec=spec, chunk_len=chunk_len, chunk_bounds=bounds)


def _validate_prefill_seqs(seqs, n_ranks):
    if n_ranks < 1:
        raise ValueError("n_ranks must be >= 1")
    if not seqs:
        raise ValueError("cannot plan an empty sequence list")
    if len({s.seq_id for s in seqs}) != len(seqs):
        raise ValueError("duplicate seq_id in batch")
    for s in seqs:
        if s.new_len < 1:
            raise ValueError(
                f"sequence {s.seq_id} has no new tokens; decode turns use plan_decode"
            )


def plan_full_prefill(seqs: list[SequenceSpec], n_ranks: int) -> ShardPlan:
    """Shard a first-turn batch (no cached history) across ranks."""
    _validate_prefill_seqs(seqs, n_ranks)
    for s in seqs:
        if s.cached_len != 0:
            raise ValueError(
                f"sequence {s.seq_id} has cached tokens; use plan_partial_prefill"
            )
    layout = tuple(tuple(0 for _ in range(n_ranks)) for _ in seqs)
    return ShardPlan(
        n_ranks=n_ranks,
        sequences=tuple(_chunk_sequence(s, n_ranks) for s in seqs),
        cached_layout=layout,
    )


def plan_partial_prefill(
    seqs: list[SequenceSpec], n_ranks: int, cached_layout: list[list[int]]
) -> ShardPlan:
    """Shard a follow-up turn: new tokens get fresh balanced chunks, cached
    tokens stay wherever earlier turns placed them."""
    _validate_prefill_seqs(seqs, n_ranks)
    if len(cached_layout) != len(seqs):
        raise ValueError("cached_layout must have one row per sequence")
    rows = []
    for s, row in zip(seqs, cached_layout):
        if len(row) != n_ranks:
            raise ValueError("cached_layout rows must have one entry per rank")
        if any(c < 0 for c in row):
            raise ValueError("cached counts must be non-negative")
        if sum(row) != s.cached_len:
            raise ValueError(
                f"cached_layout for sequence {s.seq_id} sums to {sum(row)}, "
                f"expected cached_len={s.cached_len}"
            )
        rows.append(tuple(int(c) for c in row))
    return ShardPlan(
        n_ranks=n_ranks,
        sequences=tuple(_chunk_sequence(s, n_ranks) for s in seqs),
        cached_layout=tuple(rows),
    )


def materialize_rank_block(
    plan: ShardPlan, rank: int, per_seq_data: list[np.ndarray]
) -> EmbeddingBlock:
    """Build one rank's fused new-token block from per-sequence dense arrays.

    ``per_seq_data[i]`` is the full [new_len, heads, head_dim] array for
    sequence i; this slices out the rank's two chunks per sequence, inserts
    zeroed padding slots, and sets global positions continuing after the
    cached history.
    """
    if len(per_seq_data) != plan.n_sequences:
        raise ValueError("per_seq_data must align with the plan's sequences")
    pieces = []
    for i, sh in enumerate(plan.sequences):
        arr = np.asarray(per_seq_data[i])
        if arr.shape[0] != sh.spec.new_len:
            raise ValueError(
                f"sequence {sh.spec.seq_id}: array has {arr.shape[0]} rows, "
                f"expected new_len={sh.spec.new_len}"
            )
        local = plan.rank_local_indices(i, rank)
        valid = local >= 0
        data = np.zeros((local.size,) + arr.shape[1:], dtype=arr.dtype)
        data[valid] = arr[local[valid]]
        positions = np.where(valid, sh.spec.cached_len + local, -1)
        seq_ids = np.where(valid, sh.spec.seq_id, -1)
        pieces.append(
            EmbeddingBlock(data=data, positions=positions, valid=valid, seq_ids=seq_ids)
        )
    return EmbeddingBlock.concat(pieces)


@dataclass(frozen=True)
class DecodePlan:
    """Round-robin decode assignment for one iteration.

    Batch index ``b`` goes to rank ``(b + iteration) % n_ranks``; that rank
    computes the sequence's query and appends the fresh K/V to its cache.
    ``assignments[r]`` lists (seq_id, batch_index) pairs in ascending batch
    order; every rank pads its query block to ``slots_per_rank``.
    """

    n_ranks: int
    batch: tuple[int, ...]
    iteration: int
    assignments: tuple[tuple[tuple[int, int], ...], ...]

    @property
    def slots_per_rank(self) -> int:
        return math.ceil(len(self.batch) / self.n_ranks)

    def owner(self, batch_index: int) -> int:
        return (batch_index + self.iteration) % self.n_ranks


def plan_decode(batch: list[int], n_ranks: int, iteration: int) -> DecodePlan:
    """Assign one decode token per sequence to ranks, rotating by iteration."""
    if n_ranks < 1:
        raise ValueError("n_ranks must be >= 1")
    if not batch:
        raise ValueError("decode batch must be non-empty")
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    if len(set(batch)) != len(batch):
        raise ValueError("duplicate seq_id in decode batch")
    per_rank = [[] for _ in range(n_ranks)]
    for b, seq_id in enumerate(batch):
        per_rank[(b + iteration) % n_ranks].append((seq_id, b))
    return DecodePlan(
        n_ranks=n_ranks,
        batch=tuple(batch),
        iteration=iteration,
        assignments=tuple(tuple(entries) for entries in per_rank),
    )
