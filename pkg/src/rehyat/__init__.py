"""Chunked hybrid softmax/linear attention with a streaming recurrent form."""

from .attention import FeatureMap, ProjectionWeights, linear_attention, softmax_attention
from .chunking import ChunkLayout, hybrid_attention_chunk, hybrid_attention_full, make_layout, partition_tokens
from .numerics import Rng, count_flops
from .recurrent import open_session, step, stream_run

__all__ = [
    "ChunkLayout", "FeatureMap", "ProjectionWeights", "Rng", "count_flops", "hybrid_attention_chunk",
    "hybrid_attention_full", "linear_attention", "make_layout", "open_session", "partition_tokens",
    "softmax_attention", "step", "stream_run",
]
