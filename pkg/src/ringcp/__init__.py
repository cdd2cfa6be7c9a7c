"""Desk-scale executable model of context-parallel GQA inference."""

from ringcp.attention import (
    EmbeddingBlock,
    GqaConfig,
    PartialAttention,
    gqa_attention,
    merge_attention,
)

__version__ = "0.1.0"

__all__ = [
    "EmbeddingBlock",
    "GqaConfig",
    "PartialAttention",
    "gqa_attention",
    "merge_attention",
    "__version__",
]
