"""Reference softmax attention, kernelized linear attention and the feature map.

All kernels here act on a single head: ``q, k, v`` are ``N x D`` with ``D``
the per-head width. Multi-head callers slice columns with :func:`split_heads`
and keep one :class:`FeatureMap` per head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DenominatorUnderflowError, ShapeError
from .numerics import (
    Rng,
    check_finite,
    dtype_for,
    load_blob,
    matmul,
    precision_of,
    random_tensor,
    record_flops,
    save_blob,
    stable_row_softmax_terms,
)

# Denominator floor per precision.
EPS_DEN = {"single": 1e-6, "double": 1e-12}
# Fraction of clamped rows above which a linear readout is rejected.
MAX_CLAMP_FRACTION = 0.1


@dataclass(frozen=True)
class AttentionConfig:
    n_heads: int
    head_dim: int
    scale: float | None = None

    def __post_init__(self) -> None:
        if self.n_heads < 1 or self.head_dim < 1:
            raise ValueError("n_heads and head_dim must be positive")
        if self.scale is None:
            object.__setattr__(self, "scale", 1.0 / math.sqrt(self.head_dim))
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    @property
    def model_dim(self) -> int:
        return self.n_heads * self.head_dim


@dataclass(frozen=True)
class ProjectionWeights:
    """Query/key/value projections, each ``D_model x D_model``."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    def __post_init__(self) -> None:
        d = self.w_q.shape[0]
        for name in ("w_q", "w_k", "w_v"):
            w = getattr(self, name)
            if w.ndim != 2 or w.shape != (d, d):
                raise ShapeError(f"{name} must be square {d}x{d}, got {w.shape}")

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def identity(cls, d: int, precision: str = "double") -> "ProjectionWeights":
        eye = np.eye(d, dtype=dtype_for(precision))
        return cls(eye, eye.copy(), eye.copy())

    @classmethod
    def random(cls, rng: Rng, d: int, precision: str = "double") -> "ProjectionWeights":
        std = 1.0 / math.sqrt(d)
        ws = [random_tensor(rng, (d, d), "normal", precision) * std for _ in range(3)]
        return cls(*ws)

    def astype(self, precision: str) -> "ProjectionWeights":
        dt = dtype_for(precision)
        return ProjectionWeights(*(w.astype(dt) for w in (self.w_q, self.w_k, self.w_v)))


def project_qkv(x: np.ndarray, w: ProjectionWeights) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if x.ndim != 2 or x.shape[1] != w.dim:
        raise ShapeError(f"x has shape {x.shape}, projections expect {w.dim} columns")
    return matmul(x, w.w_q, "projection"), matmul(x, w.w_k, "projection"), matmul(x, w.w_v, "projection")


def split_heads(a: np.ndarray, n_heads: int) -> list[np.ndarray]:
    n, d = a.shape
    if d % n_heads:
        raise ShapeError(f"width {d} is not divisible by {n_heads} heads")
    hd = d // n_heads
    return [np.ascontiguousarray(a[:, h * hd:(h + 1) * hd]) for h in range(n_heads)]


def merge_heads(parts: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate(list(parts), axis=1)


def _check_qkv(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> None:
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("q, k, v must be 2-D")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"query width {q.shape[1]} != key width {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"{k.shape[0]} keys but {v.shape[0]} values")


def softmax_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float | AttentionConfig | None = None) -> np.ndarray:
    _check_qkv(q, k, v)
    if isinstance(scale, AttentionConfig):
        scale = scale.scale
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[1])
    logits = matmul(q, k.T, "scores") * scale
    record_flops("scores", logits.size)
    expvals, _ = stable_row_softmax_terms(logits)
    weighted = matmul(expvals, v, "weighted_sum")
    norm = expvals.sum(axis=1, keepdims=True)
    record_flops("softmax", expvals.size)
    out = weighted / norm
    record_flops("normalizers", out.size)
    return check_finite(out, "softmax attention output")


# --- feature map -----------------------------------------------------------

def _softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# name -> (activation, derivative)
ACTIVATIONS = {
    "identity": (lambda z: z, lambda z: np.ones_like(z)),
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
    "softplus": (_softplus, _sigmoid),
}

NONNEG_MODES = ("shifted-elu", "none")


def shifted_elu(z: np.ndarray) -> np.ndarray:
    """``1 + elu(z)``: ``1 + z`` for ``z >= 0`` and ``exp(z)`` otherwise."""
    return np.where(z >= 0, 1.0 + z, np.exp(np.minimum(z, 0.0)))


def shifted_elu_grad(z: np.ndarray) -> np.ndarray:
    return np.where(z >= 0, 1.0, np.exp(np.minimum(z, 0.0)))


@dataclass
class FeatureMap:
    """Learnable map ``R^D -> R^{D'}`` for one head.

    A two-layer embedding ``e = act(x w1 + b1) w2 + b2`` produces ``D_e``
    values, optionally passed through ``1 + elu``; the result is split into
    ``degree`` equal slices and slice ``i`` (1-based) is raised to power ``i``.
    The output width ``D'`` equals ``D_e``.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    degree: int = 2
    nonneg_mode: str = "shifted-elu"
    activation: str = "tanh"
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        d, dh = self.w1.shape
        if self.b1.shape != (dh,) or self.w2.shape[0] != dh or self.b2.shape != (self.w2.shape[1],):
            raise ShapeError("inconsistent feature-map layer shapes")
        if self.degree < 1:
            raise ValueError("degree must be a positive integer")
        if self.out_dim % self.degree:
            raise ValueError(f"D_e={self.out_dim} is not divisible by degree {self.degree}")
        if self.nonneg_mode not in NONNEG_MODES:
            raise ValueError(f"nonneg_mode must be one of {NONNEG_MODES}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[1]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params().values())

    def params(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def with_params(self, params: dict[str, np.ndarray]) -> "FeatureMap":
        return FeatureMap(
            params["w1"], params["b1"], params["w2"], params["b2"],
            self.degree, self.nonneg_mode, self.activation, self.seed, dict(self.meta),
        )

    def copy(self) -> "FeatureMap":
        return self.with_params({k: v.copy() for k, v in self.params().items()})

    def astype(self, precision: str) -> "FeatureMap":
        dt = dtype_for(precision)
        return self.with_params({k: v.astype(dt) for k, v in self.params().items()})

    @property
    def precision(self) -> str:
        return precision_of(self.w1)

    @classmethod
    def init(
        cls,
        rng: Rng,
        d: int,
        hidden: int | None = None,
        out: int | None = None,
        degree: int = 2,
        nonneg_mode: str = "shifted-elu",
        activation: str = "tanh",
        precision: str = "double",
    ) -> "FeatureMap":
        # weights ~ normal(0, 1/sqrt(fan_in)), zero biases
        hidden = 2 * d if hidden is None else hidden
        out = 2 * d if out is None else out
        dt = dtype_for(precision)
        w1 = random_tensor(rng, (d, hidden), "normal", precision) / math.sqrt(d)
        w2 = random_tensor(rng, (hidden, out), "normal", precision) / math.sqrt(hidden)
        return cls(w1, np.zeros(hidden, dt), w2, np.zeros(out, dt), degree, nonneg_mode, activation,
                   seed=rng.seed)

    @classmethod
    def identity(cls, d: int, degree: int = 2, nonneg_mode: str = "none", precision: str = "double") -> "FeatureMap":
        """Embedding stubbed to the identity, so ``D' = D``."""
        dt = dtype_for(precision)
        eye = np.eye(d, dtype=dt)
        return cls(eye, np.zeros(d, dt), eye.copy(), np.zeros(d, dt), degree, nonneg_mode, "identity")

    @classmethod
    def constant(cls, d: int, value: float = 1.0, out: int = 1, precision: str = "double") -> "FeatureMap":
        """Map every input to ``value`` in each of ``out`` coordinates."""
        dt = dtype_for(precision)
        return cls(
            np.zeros((d, 1), dt), np.zeros(1, dt), np.zeros((1, out), dt), np.full(out, value, dt),
            1, "none", "identity",
        )


def feature_map_preactivation(fm: FeatureMap, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(hidden pre-activation, hidden, embedding)`` for rows of ``x``."""
    if x.ndim != 2 or x.shape[1] != fm.in_dim:
        raise ShapeError(f"feature map expects {fm.in_dim} columns, got shape {x.shape}")
    act = ACTIVATIONS[fm.activation][0]
    pre = matmul(x, fm.w1, "phi") + fm.b1
    hidden = act(pre)
    emb = matmul(hidden, fm.w2, "phi") + fm.b2
    record_flops("phi", 2 * pre.size + emb.size)
    return pre, hidden, emb


def feature_map_apply(fm: FeatureMap, x: np.ndarray) -> np.ndarray:
    _, _, emb = feature_map_preactivation(fm, x)
    base = shifted_elu(emb) if fm.nonneg_mode == "shifted-elu" else emb
    if fm.nonneg_mode == "shifted-elu":
        record_flops("phi", emb.size)
    out = polynomial_expand(base, fm.degree)
    return check_finite(out, "feature map output")


def polynomial_expand(base: np.ndarray, degree: int) -> np.ndarray:
    width = base.shape[1] // degree
    parts = []
    for i in range(degree):
        part = base[:, i * width:(i + 1) * width]
        parts.append(part ** (i + 1) if i else part)
        record_flops("phi", i * part.size)
    return np.concatenate(parts, axis=1)


def linear_readout(phi_q: np.ndarray, state: np.ndarray, norm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(phi_q @ S, phi_q @ z)`` for key/value sums ``S`` (D' x D) and ``z`` (D')."""
    from . import faults

    a = matmul(phi_q, state, "linear")
    n = matmul(phi_q, norm.reshape(-1, 1), "linear")
    if faults.active("linear_partial_sign"):
        a = -a
    return a, n


def kv_sums(phi_k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(sum_j phi_k[j] v[j]^T, sum_j phi_k[j])``."""
    s = matmul(phi_k.T, v, "linear")
    z = phi_k.sum(axis=0)
    record_flops("linear", phi_k.size)
    return s, z


def guarded_divide(num: np.ndarray, den: np.ndarray, precision: str,
                   max_clamp_fraction: float = MAX_CLAMP_FRACTION) -> tuple[np.ndarray, np.ndarray]:
    """Row-broadcast division with the denominator floored at ``EPS_DEN``.

    Returns the quotient and the boolean mask of clamped rows.
    """
    eps = EPS_DEN[precision]
    clamped = den < eps
    if den.size and clamped.mean() > max_clamp_fraction:
        raise DenominatorUnderflowError(
            f"{int(clamped.sum())} of {den.size} denominators below {eps:g}"
        )
    out = num / np.where(clamped, eps, den)
    record_flops("normalizers", num.size)
    return out, clamped


def linear_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, phi_q: FeatureMap, phi_k: FeatureMap,
                     max_clamp_fraction: float = MAX_CLAMP_FRACTION) -> np.ndarray:
    _check_qkv(q, k, v)
    if phi_q.out_dim != phi_k.out_dim:
        raise ShapeError("query and key feature maps must share D'")
    fq = feature_map_apply(phi_q, q)
    fk = feature_map_apply(phi_k, k)
    s, z = kv_sums(fk, v)
    a, n = linear_readout(fq, s, z)
    out, _ = guarded_divide(a, n, precision_of(q), max_clamp_fraction)
    return check_finite(out, "linear attention output")


# --- serialization ---------------------------------------------------------

def save_feature_map(fm: FeatureMap, stem: str | Path) -> None:
    meta = {
        "D": fm.in_dim,
        "D_h": fm.hidden_dim,
        "D_e": fm.out_dim,
        "P": fm.degree,
        "nonneg_mode": fm.nonneg_mode,
        "activation": fm.activation,
        "seed": fm.seed,
        "precision": fm.precision,
        **fm.meta,
    }
    save_blob(stem, fm.params(), meta)


def load_feature_map(stem: str | Path) -> FeatureMap:
    arrays, meta = load_blob(stem)
    extra = {k: v for k, v in meta.items()
             if k not in {"D", "D_h", "D_e", "P", "nonneg_mode", "activation", "seed", "precision"}}
    fm = FeatureMap(arrays["w1"], arrays["b1"], arrays["w2"], arrays["b2"], meta["P"],
                    meta["nonneg_mode"], meta["activation"], meta["seed"], extra)
    if (fm.in_dim, fm.hidden_dim, fm.out_dim) != (meta["D"], meta["D_h"], meta["D_e"]):
        raise ShapeError("sidecar dimensions disagree with stored arrays")
    return fm
