"""Temporal chunk geometry and the chunked hybrid softmax/linear attention.

Tokens are flattened from a ``(T, H, W)`` latent in row-major order, so a
run of ``T_c`` temporal slices is a contiguous block of ``T_c*H*W`` token
indices. Chunk ``t`` takes queries from its own block; its softmax set also
reaches ``T_o`` slices into the past, and every other token that the variant
allows (all of them non-causally, only earlier ones causally) goes through
the kernelized linear branch. The two branches share one normalizer.

The softmax branch is shifted by ``c_t``, the per-query maximum scaled logit
over the softmax set; the linear branch is not shifted. Because of that
asymmetry ``c_t`` changes the softmax/linear balance whenever the linear set
is non-empty, so it is a fixed part of the definition (``C_POLICY``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attention import (
    MAX_CLAMP_FRACTION,
    FeatureMap,
    ProjectionWeights,
    feature_map_apply,
    guarded_divide,
    kv_sums,
    linear_readout,
    merge_heads,
    project_qkv,
    split_heads,
)
from .errors import LayoutError, ShapeError
from .numerics import check_finite, matmul, precision_of, record_flops, stable_row_softmax_terms

C_POLICY = "rowmax-over-softmax-set"

Ranges = tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class ChunkLayout:
    T: int
    H: int
    W: int
    D: int
    T_c: int
    T_o: int = 0

    def __post_init__(self) -> None:
        for name in ("T", "H", "W", "D", "T_c"):
            if getattr(self, name) < 1:
                raise LayoutError(f"{name} must be positive, got {getattr(self, name)}")
        if self.T_c > self.T:
            raise LayoutError(f"chunk size T_c={self.T_c} exceeds T={self.T}")
        if self.T_o < 0:
            raise LayoutError("overlap T_o must be non-negative")
        if self.T_o > self.T_c:
            raise LayoutError(f"overlap T_o={self.T_o} exceeds chunk size T_c={self.T_c}")

    @property
    def slice_tokens(self) -> int:
        return self.H * self.W

    @property
    def N(self) -> int:
        return self.T * self.H * self.W

    @property
    def N_chunk(self) -> int:
        """Nominal tokens per chunk (``N'``)."""
        return self.T_c * self.H * self.W

    @property
    def n_chunks(self) -> int:
        """``T' = ceil(T / T_c)``; the last chunk may be partial."""
        return -(-self.T // self.T_c)

    @property
    def overlap_tokens(self) -> int:
        return self.T_o * self.H * self.W

    def chunk_range(self, t: int) -> tuple[int, int]:
        self._check_t(t)
        return t * self.N_chunk, min((t + 1) * self.N_chunk, self.N)

    def softmax_start(self, t: int) -> int:
        return max(t * self.N_chunk - self.overlap_tokens, 0)

    def _check_t(self, t: int) -> None:
        if not 0 <= t < self.n_chunks:
            raise LayoutError(f"chunk index {t} outside [0, {self.n_chunks})")

    def with_T(self, T: int) -> "ChunkLayout":
        return ChunkLayout(T, self.H, self.W, self.D, self.T_c, self.T_o)


def make_layout(T: int, H: int, W: int, D: int, T_c: int, T_o: int = 0) -> ChunkLayout:
    return ChunkLayout(T, H, W, D, T_c, T_o)


def _clean(ranges: Sequence[tuple[int, int]]) -> Ranges:
    return tuple((a, b) for a, b in ranges if b > a)


def range_size(ranges: Ranges) -> int:
    return sum(b - a for a, b in ranges)


def range_indices(ranges: Ranges) -> np.ndarray:
    if not ranges:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([np.arange(a, b) for a, b in ranges])


@dataclass(frozen=True)
class Partition:
    t: int
    softmax: Ranges
    linear: Ranges
    causal: bool

    @property
    def softmax_size(self) -> int:
        return range_size(self.softmax)

    @property
    def linear_size(self) -> int:
        return range_size(self.linear)


def partition_tokens(layout: ChunkLayout, t: int, causal: bool) -> Partition:
    start, end = layout.chunk_range(t)
    s0 = layout.softmax_start(t)
    if causal:
        linear = _clean([(0, s0)])
    else:
        linear = _clean([(0, s0), (end, layout.N)])
    return Partition(t, _clean([(s0, end)]), linear, causal)


@dataclass
class HybridChunkOutput:
    """Per-head softmax and linear terms of one chunk.

    Arrays carry a leading head axis: ``a_S, a_L`` are ``heads x N'_t x D``;
    ``n_S, n_L, c_t`` are ``heads x N'_t x 1``. ``y`` is the head-merged
    output ``N'_t x (heads*D)``.
    """

    a_S: np.ndarray
    n_S: np.ndarray
    a_L: np.ndarray
    n_L: np.ndarray
    c_t: np.ndarray
    y: np.ndarray
    meta: dict = field(default_factory=lambda: {"c_policy": C_POLICY})


def softmax_partial(q_t: np.ndarray, k_s: np.ndarray, v_s: np.ndarray, scale: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shifted exponential sums over the softmax set.

    Returns ``(a_S, n_S, c_t)`` where ``c_t`` is the per-row maximum of the
    scaled logits.
    """
    if k_s.shape[0] == 0:
        raise ShapeError("softmax set is empty; route the chunk through the linear path")
    logits = matmul(q_t, k_s.T, "scores") * scale
    record_flops("scores", logits.size)
    w, c = stable_row_softmax_terms(logits)
    a = matmul(w, v_s, "weighted_sum")
    n = w.sum(axis=1, keepdims=True)
    record_flops("softmax", w.size)
    return a, n, c


def linear_partial(q_t: np.ndarray, k_l: np.ndarray, v_l: np.ndarray, phi_q: FeatureMap, phi_k: FeatureMap) -> tuple[np.ndarray, np.ndarray]:
    """``(phi_q(Q) S, phi_q(Q) z)`` with ``S, z`` summed over the given keys."""
    d_prime = phi_q.out_dim
    dt = q_t.dtype
    fq = feature_map_apply(phi_q, q_t)
    if k_l.shape[0] == 0:
        s = np.zeros((d_prime, v_l.shape[1]), dt)
        z = np.zeros(d_prime, dt)
    else:
        s, z = kv_sums(feature_map_apply(phi_k, k_l), v_l)
    return linear_readout(fq, s, z)


def combine(a_S, n_S, a_L, n_L, precision: str, max_clamp_fraction: float = MAX_CLAMP_FRACTION) -> np.ndarray:
    num = a_S + a_L
    den = n_S + n_L
    record_flops("normalizers", num.size + den.size)
    out, _ = guarded_divide(num, den, precision, max_clamp_fraction)
    return out


def _as_head_maps(phi: FeatureMap | Sequence[FeatureMap], n_heads: int) -> list[FeatureMap]:
    if isinstance(phi, FeatureMap):
        maps = [phi] * n_heads
    else:
        maps = list(phi)
    if len(maps) != n_heads:
        raise ShapeError(f"{len(maps)} feature maps for {n_heads} heads")
    return maps


def n_heads_for(layout: ChunkLayout, weights: ProjectionWeights) -> int:
    if weights.dim % layout.D:
        raise ShapeError(f"model width {weights.dim} is not a multiple of head dim {layout.D}")
    return weights.dim // layout.D


def _hybrid_head_chunk(q, k, v, fq, fk, part: Partition, rows: tuple[int, int], scale: float):
    """One head, one chunk, given precomputed projections."""
    lo, hi = rows
    q_t = q[lo:hi]
    dt = q.dtype
    if part.softmax_size:
        idx = range_indices(part.softmax)
        a_S, n_S, c = softmax_partial(q_t, k[idx], v[idx], scale)
    else:
        a_S = np.zeros((hi - lo, v.shape[1]), dt)
        n_S = np.zeros((hi - lo, 1), dt)
        c = np.zeros((hi - lo, 1), dt)
    lidx = range_indices(part.linear)
    a_L, n_L = linear_partial(q_t, k[lidx], v[lidx], fq, fk)
    return a_S, n_S, a_L, n_L, c


def hybrid_attention_chunk(
    x: np.ndarray,
    weights: ProjectionWeights,
    phi_q: FeatureMap | Sequence[FeatureMap],
    phi_k: FeatureMap | Sequence[FeatureMap],
    layout: ChunkLayout,
    t: int,
    causal: bool,
    partition: Partition | None = None,
    scale: float | None = None,
) -> HybridChunkOutput:
    """Hybrid attention output of chunk ``t``.

    ``partition`` overrides the token sets; tests use it to reach limits the
    layout cannot express (e.g. an empty softmax set).
    """
    if x.shape[0] != layout.N:
        raise ShapeError(f"x has {x.shape[0]} tokens, layout expects {layout.N}")
    heads = n_heads_for(layout, weights)
    maps_q = _as_head_maps(phi_q, heads)
    maps_k = _as_head_maps(phi_k, heads)
    scale = 1.0 / math.sqrt(layout.D) if scale is None else scale
    part = partition_tokens(layout, t, causal) if partition is None else partition
    rows = layout.chunk_range(t)
    q, k, v = (split_heads(a, heads) for a in project_qkv(x, weights))
    terms = [_hybrid_head_chunk(q[h], k[h], v[h], maps_q[h], maps_k[h], part, rows, scale) for h in range(heads)]
    a_S, n_S, a_L, n_L, c = (np.stack(z) for z in zip(*terms))
    prec = precision_of(x)
    y = merge_heads([combine(a_S[h], n_S[h], a_L[h], n_L[h], prec) for h in range(heads)])
    return HybridChunkOutput(a_S, n_S, a_L, n_L, c, check_finite(y, "hybrid chunk output"))


def hybrid_attention_full(
    x: np.ndarray,
    weights: ProjectionWeights,
    phi_q: FeatureMap | Sequence[FeatureMap],
    phi_k: FeatureMap | Sequence[FeatureMap],
    layout: ChunkLayout,
    causal: bool,
    scale: float | None = None,
) -> np.ndarray:
    """All chunks, concatenated. ``N x D_model``.

    Feature maps are evaluated once per token and the linear-set sums are
    built incrementally (prefix sums, plus suffix sums when non-causal).
    """
    if x.shape[0] != layout.N:
        raise ShapeError(f"x has {x.shape[0]} tokens, layout expects {layout.N}")
    heads = n_heads_for(layout, weights)
    maps_q = _as_head_maps(phi_q, heads)
    maps_k = _as_head_maps(phi_k, heads)
    scale = 1.0 / math.sqrt(layout.D) if scale is None else scale
    prec = precision_of(x)
    q, k, v = (split_heads(a, heads) for a in project_qkv(x, weights))
    nt = layout.n_chunks
    out_heads = []
    for h in range(heads):
        fq = feature_map_apply(maps_q[h], q[h])
        fk = feature_map_apply(maps_k[h], k[h])
        d_prime = fq.shape[1]
        zero_s = np.zeros((d_prime, layout.D), x.dtype)
        zero_z = np.zeros(d_prime, x.dtype)
        suffix = [(zero_s, zero_z)] * nt
        if not causal:
            for t in range(nt - 2, -1, -1):
                lo, hi = layout.chunk_range(t + 1)
                ds, dz = kv_sums(fk[lo:hi], v[h][lo:hi])
                ps, pz = suffix[t + 1]
                suffix[t] = (ps + ds, pz + dz)
                record_flops("linear", ds.size + dz.size)
        s, z = zero_s, zero_z
        folded = 0
        rows = []
        for t in range(nt):
            lo, hi = layout.chunk_range(t)
            s0 = layout.softmax_start(t)
            if s0 > folded:
                ds, dz = kv_sums(fk[folded:s0], v[h][folded:s0])
                s, z = s + ds, z + dz
                record_flops("linear", ds.size + dz.size)
                folded = s0
            a_S, n_S, _ = softmax_partial(q[h][lo:hi], k[h][s0:hi], v[h][s0:hi], scale)
            if causal:
                a_L, n_L = linear_readout(fq[lo:hi], s, z)
            else:
                ss, sz = suffix[t]
                record_flops("linear", ss.size + sz.size)
                a_L, n_L = linear_readout(fq[lo:hi], s + ss, z + sz)
            rows.append(combine(a_S, n_S, a_L, n_L, prec))
        out_heads.append(np.concatenate(rows, axis=0))
    return check_finite(merge_heads(out_heads), "hybrid attention output")
