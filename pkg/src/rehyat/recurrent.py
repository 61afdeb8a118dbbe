"""Chunk-by-chunk streaming form of causal hybrid attention.

The session keeps, per head, the running key/value sum ``s`` and key sum
``z`` over tokens that no future chunk will attend to with softmax, plus the
keys/values of the trailing ``T_o`` slices that the next chunk's softmax
window still needs. After chunk ``t`` it folds exactly the tokens that leave
the window, ``[max(tN' - T_oHW, 0), max((t+1)N' - T_oHW, 0))``, so before
chunk ``t`` the state equals the sum over that chunk's causal linear set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .attention import FeatureMap, ProjectionWeights, feature_map_apply, kv_sums, linear_readout, merge_heads, project_qkv, split_heads
from .chunking import ChunkLayout, _as_head_maps, combine, n_heads_for, softmax_partial
from .errors import ShapeError, StreamOrderError
from .numerics import check_finite, dtype_for, load_blob, precision_of, save_blob

_ITEMSIZE = {"single": 4, "double": 8}


@dataclass
class RecurrentState:
    """Per-head ``s`` (heads x D' x D) and ``z`` (heads x D')."""

    s: np.ndarray
    z: np.ndarray
    absorbed: int = 0
    t: int = 0

    @property
    def nbytes(self) -> int:
        return self.s.nbytes + self.z.nbytes

    def copy(self) -> "RecurrentState":
        return RecurrentState(self.s.copy(), self.z.copy(), self.absorbed, self.t)


def init_state(d_prime: int, d: int, heads: int = 1, precision: str = "double") -> RecurrentState:
    if d_prime < 1 or d < 1 or heads < 1:
        raise ValueError("state dimensions must be positive")
    dt = dtype_for(precision)
    return RecurrentState(np.zeros((heads, d_prime, d), dt), np.zeros((heads, d_prime), dt))


@dataclass
class ChunkStats:
    t: int
    window_tokens: int
    folded_tokens: int
    transient_bytes: int


@dataclass
class StreamSession:
    layout: ChunkLayout
    weights: ProjectionWeights
    phi_q: list[FeatureMap]
    phi_k: list[FeatureMap]
    state: RecurrentState
    cache_k: np.ndarray
    cache_v: np.ndarray
    keep_log: bool = True
    log: list[ChunkStats] = field(default_factory=list)
    peak_transient_bytes: int = 0

    @property
    def heads(self) -> int:
        return len(self.phi_q)

    @property
    def precision(self) -> str:
        return precision_of(self.state.s)

    def snapshot(self) -> "StreamSession":
        return replace(self, state=self.state.copy(), cache_k=self.cache_k.copy(),
                       cache_v=self.cache_v.copy(), log=list(self.log))


def open_session(
    layout: ChunkLayout,
    weights: ProjectionWeights,
    phi_q: FeatureMap | Sequence[FeatureMap],
    phi_k: FeatureMap | Sequence[FeatureMap],
    precision: str | None = None,
    keep_log: bool = True,
) -> StreamSession:
    heads = n_heads_for(layout, weights)
    maps_q = _as_head_maps(phi_q, heads)
    maps_k = _as_head_maps(phi_k, heads)
    precision = precision or precision_of(weights.w_q)
    dt = dtype_for(precision)
    state = init_state(maps_q[0].out_dim, layout.D, heads, precision)
    empty = np.zeros((heads, 0, layout.D), dt)
    return StreamSession(layout, weights, maps_q, maps_k, state, empty, empty.copy(), keep_log)


def step(session: StreamSession, chunk_x: np.ndarray, t: int | None = None) -> np.ndarray:
    """Consume chunk ``session.state.t`` and return its ``N'_t x D_model`` output."""
    lay = session.layout
    st = session.state
    if t is not None and t != st.t:
        raise StreamOrderError(f"expected chunk {st.t}, got chunk {t}")
    if st.t >= lay.n_chunks:
        raise StreamOrderError(f"stream already consumed all {lay.n_chunks} chunks")
    lo, hi = lay.chunk_range(st.t)
    if chunk_x.ndim != 2 or chunk_x.shape != (hi - lo, session.weights.dim):
        raise ShapeError(f"chunk {st.t} needs shape {(hi - lo, session.weights.dim)}, got {chunk_x.shape}")
    prec = session.precision
    scale = 1.0 / math.sqrt(lay.D)
    window_start = lay.softmax_start(st.t)
    next_start = max((st.t + 1) * lay.N_chunk - lay.overlap_tokens, 0)
    n_fold = next_start - window_start
    q, k, v = (split_heads(a, session.heads) for a in project_qkv(chunk_x, session.weights))

    outs, new_k, new_v = [], [], []
    for h in range(session.heads):
        wk = np.concatenate([session.cache_k[h], k[h]], axis=0)
        wv = np.concatenate([session.cache_v[h], v[h]], axis=0)
        a_S, n_S, _ = softmax_partial(q[h], wk, wv, scale)
        fq = feature_map_apply(session.phi_q[h], q[h])
        a_L, n_L = linear_readout(fq, st.s[h], st.z[h])
        outs.append(combine(a_S, n_S, a_L, n_L, prec))
        if n_fold > 0:
            ds, dz = kv_sums(feature_map_apply(session.phi_k[h], wk[:n_fold]), wv[:n_fold])
            st.s[h] += ds
            st.z[h] += dz
        new_k.append(wk[n_fold:])
        new_v.append(wv[n_fold:])

    session.cache_k = np.stack(new_k)
    session.cache_v = np.stack(new_v)
    st.absorbed += max(n_fold, 0)
    window = hi - window_start
    transient = session.heads * _ITEMSIZE[prec] * (
        window * 2 * lay.D + (hi - lo) * (window + 2 * lay.D)
    ) + st.nbytes
    session.peak_transient_bytes = max(session.peak_transient_bytes, transient)
    if session.keep_log:
        session.log.append(ChunkStats(st.t, window, max(n_fold, 0), transient))
    st.t += 1
    return check_finite(merge_heads(outs), "stream output")


def stream_run(session: StreamSession, full_x: np.ndarray) -> np.ndarray:
    lay = session.layout
    if full_x.shape[0] != lay.N:
        raise ShapeError(f"input has {full_x.shape[0]} tokens, layout expects {lay.N}")
    outs = []
    while session.state.t < lay.n_chunks:
        lo, hi = lay.chunk_range(session.state.t)
        outs.append(step(session, full_x[lo:hi]))
    return np.concatenate(outs, axis=0)


def peak_memory_report(layout: ChunkLayout, precision: str = "double", d_prime: int | None = None,
                       heads: int = 1) -> dict[str, int]:
    """Closed-form byte counts for one streaming session.

    ``state_bytes``: ``s`` and ``z``. ``window_bytes``: keys and values of a
    full ``(T_c + T_o)`` slice softmax window. ``cache_bytes``: the retained
    overlap keys/values. ``per_chunk_transient_bytes`` adds the queries, the
    score matrix and the output of one full chunk.
    """
    d_prime = 2 * layout.D if d_prime is None else d_prime
    b = _ITEMSIZE[precision]
    d = layout.D
    window = (layout.T_c + layout.T_o) * layout.slice_tokens
    n_chunk = layout.N_chunk
    state = heads * (d_prime * d + d_prime) * b
    window_bytes = heads * window * 2 * d * b
    transient = window_bytes + heads * n_chunk * (window + 2 * d) * b + state
    return {
        "state_bytes": state,
        "window_bytes": window_bytes,
        "cache_bytes": heads * layout.overlap_tokens * 2 * d * b,
        "per_chunk_transient_bytes": transient,
    }


# --- checkpoints -----------------------------------------------------------

def save_session(session: StreamSession, stem: str | Path) -> None:
    lay = session.layout
    meta = {
        "layout": {"T": lay.T, "H": lay.H, "W": lay.W, "D": lay.D, "T_c": lay.T_c, "T_o": lay.T_o},
        "absorbed": session.state.absorbed,
        "t": session.state.t,
        "heads": session.heads,
        "precision": session.precision,
    }
    arrays = {"s": session.state.s, "z": session.state.z, "cache_k": session.cache_k, "cache_v": session.cache_v}
    save_blob(stem, arrays, meta)


def load_session(stem: str | Path, weights: ProjectionWeights, phi_q, phi_k) -> StreamSession:
    arrays, meta = load_blob(stem)
    layout = ChunkLayout(**meta["layout"])
    session = open_session(layout, weights, phi_q, phi_k, meta["precision"])
    if arrays["s"].shape != session.state.s.shape:
        raise ShapeError("checkpoint state does not match the supplied feature maps")
    session.state = RecurrentState(arrays["s"], arrays["z"], meta["absorbed"], meta["t"])
    session.cache_k = arrays["cache_k"]
    session.cache_v = arrays["cache_v"]
    return session
