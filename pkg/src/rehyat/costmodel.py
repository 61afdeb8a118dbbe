"""Analytic FLOP and memory accounting for the attention variants.

Convention: a multiply and an add are one FLOP each (a multiply-add is 2);
``exp`` and division count 1. Every count is per head and summed over heads,
with ``D`` the per-head width. The instrumented kernels report through
:func:`rehyat.numerics.count_flops` using the same convention.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .chunking import ChunkLayout, make_layout

FLOP_CONVENTION = "multiply=1,add=1,exp=1,div=1 (multiply-add=2)"
CSV_COLUMNS = [
    "variant", "T", "H", "W", "D", "heads", "Tc", "To", "Dprime",
    "flops", "flops_scores", "flops_linear", "flops_phi", "peak_bytes", "state_bytes",
]
_ITEMSIZE = {"single": 4, "double": 8}


@dataclass
class CostReport:
    variant: str
    breakdown: dict[str, int]
    peak_activation_bytes: int
    state_bytes: int
    params: dict = field(default_factory=dict)

    @property
    def flops(self) -> int:
        return sum(self.breakdown.values())

    @property
    def flops_scores(self) -> int:
        b = self.breakdown
        return b.get("scores", 0) + b.get("weighted_sum", 0) + b.get("softmax", 0)

    @property
    def flops_linear(self) -> int:
        return self.breakdown.get("linear", 0) + self.breakdown.get("normalizers", 0)

    @property
    def flops_phi(self) -> int:
        return self.breakdown.get("phi", 0)


def phi_flops_per_token(d: int, hidden: int, out: int, degree: int, nonneg: bool = True) -> int:
    """Two dense layers with biases and activation, optional 1+elu, powers."""
    f = 2 * d * hidden + 2 * hidden + 2 * hidden * out + out
    if nonneg:
        f += out
    width = out // degree
    f += sum(i * width for i in range(degree))
    return f


def flops_softmax(N: int, D: int, heads: int = 1, precision: str = "double") -> CostReport:
    if N < 1 or D < 1 or heads < 1:
        raise ValueError("N, D and heads must be positive")
    b = _ITEMSIZE[precision]
    breakdown = {
        "projection": heads * 6 * N * D * D,
        "scores": heads * 2 * N * N * D,
        "weighted_sum": heads * 2 * N * N * D,
        "softmax": heads * 5 * N * N,
    }
    # one head resident at a time: q,k,v, the score matrix and the output
    peak = (4 * N * D + N * N) * b
    return CostReport("softmax", breakdown, peak, heads * 2 * N * D * b,
                      {"N": N, "D": D, "heads": heads})


def flops_linear(N: int, D: int, d_prime: int, heads: int = 1, include_phi_cost: bool = True,
                 hidden: int | None = None, degree: int = 2, precision: str = "double") -> CostReport:
    hidden = 2 * D if hidden is None else hidden
    b = _ITEMSIZE[precision]
    breakdown = {
        "projection": heads * 6 * N * D * D,
        # key/value sums, then the per-query readout of numerator and normalizer
        "linear": heads * (2 * N * d_prime * D + N * d_prime + 2 * N * d_prime * D + 2 * N * d_prime),
        "normalizers": heads * N * D,
        "phi": heads * 2 * N * phi_flops_per_token(D, hidden, d_prime, degree) if include_phi_cost else 0,
    }
    peak = (4 * N * D + 2 * N * d_prime) * b
    return CostReport("linear", breakdown, peak, heads * (d_prime * D + d_prime) * b,
                      {"N": N, "D": D, "heads": heads, "Dprime": d_prime})


def flops_hybrid(layout: ChunkLayout, d_prime: int, heads: int = 1, causal: bool = True,
                 include_phi_cost: bool = True, hidden: int | None = None, degree: int = 2,
                 precision: str = "double", fold_accounting: str = "uniform") -> CostReport:
    """Chunked hybrid attention.

    Softmax terms use each chunk's actual window, clipped at the sequence
    start and end. The readout is charged for every query.

    ``fold_accounting="uniform"`` charges one state fold per query token (and,
    non-causal, one suffix fold plus the prefix+suffix merge per chunk), so the
    count is nondecreasing in every layout parameter. ``"exact"`` charges the
    folds the batch kernel performs: each token once when it leaves the
    softmax window, and non-causal suffix sums over chunks ``1..T'-1``. The
    two differ by at most the last window's folds.
    """
    if fold_accounting not in ("uniform", "exact"):
        raise ValueError(f"unknown fold accounting {fold_accounting!r}")
    D = layout.D
    N = layout.N
    hidden = 2 * D if hidden is None else hidden
    b = _ITEMSIZE[precision]
    scores = weighted = softmax = linear = norm = 0
    peak = 0
    folded = 0

    def fold(n: int) -> int:
        return 2 * n * d_prime * D + n * d_prime

    for t in range(layout.n_chunks):
        lo, hi = layout.chunk_range(t)
        nq = hi - lo
        s0 = layout.softmax_start(t)
        m = hi - s0
        scores += 2 * nq * m * D
        weighted += 2 * nq * m * D
        softmax += 5 * nq * m
        linear += 2 * nq * d_prime * D + 2 * nq * d_prime
        if fold_accounting == "uniform":
            linear += fold(nq)
            if not causal:
                linear += fold(nq) + d_prime * D + d_prime
        else:
            if s0 > folded:
                linear += fold(s0 - folded) + d_prime * D + d_prime
                folded = s0
            if not causal:
                if t + 1 < layout.n_chunks:
                    nlo, nhi = layout.chunk_range(t + 1)
                    linear += fold(nhi - nlo) + d_prime * D + d_prime
                linear += d_prime * D + d_prime
        norm += 2 * nq * D + nq
        peak = max(peak, (2 * m * D + nq * (m + 2 * D + d_prime)) * b)
    state = (d_prime * D + d_prime) * b
    if causal:
        state_bytes = heads * state
    else:
        # every key and value must be resident before any chunk can finish
        state_bytes = heads * 2 * N * D * b
    breakdown = {
        "projection": heads * 6 * N * D * D,
        "scores": heads * scores,
        "weighted_sum": heads * weighted,
        "softmax": heads * softmax,
        "linear": heads * linear,
        "normalizers": heads * norm,
        "phi": heads * 2 * N * phi_flops_per_token(D, hidden, d_prime, degree) if include_phi_cost else 0,
    }
    variant = "hybrid-causal" if causal else "hybrid"
    return CostReport(variant, breakdown, peak + state, state_bytes, {
        "T": layout.T, "H": layout.H, "W": layout.W, "D": D, "heads": heads,
        "Tc": layout.T_c, "To": layout.T_o, "Dprime": d_prime, "fold_accounting": fold_accounting,
    })


# --- sweeps ----------------------------------------------------------------

@dataclass(frozen=True)
class CostConfig:
    H: int = 30
    W: int = 52
    head_dim: int = 128
    heads: int = 12
    T_c: int = 3
    T_o: int = 1
    d_prime: int = 256
    hidden: int | None = None
    degree: int = 2
    causal: bool = True
    include_phi_cost: bool = True
    precision: str = "double"
    variants: tuple[str, ...] = ("softmax", "linear", "hybrid")


def report_for(cfg: CostConfig, variant: str, T: int) -> CostReport:
    N = T * cfg.H * cfg.W
    if variant == "softmax":
        return flops_softmax(N, cfg.head_dim, cfg.heads, cfg.precision)
    if variant == "linear":
        return flops_linear(N, cfg.head_dim, cfg.d_prime, cfg.heads, cfg.include_phi_cost, cfg.hidden,
                            cfg.degree, cfg.precision)
    if variant == "hybrid":
        lay = make_layout(T, cfg.H, cfg.W, cfg.head_dim, cfg.T_c, cfg.T_o)
        return flops_hybrid(lay, cfg.d_prime, cfg.heads, cfg.causal, cfg.include_phi_cost, cfg.hidden,
                            cfg.degree, cfg.precision)
    raise ValueError(f"unknown variant {variant!r}")


def _row(cfg: CostConfig, variant: str, T: int, rep: CostReport) -> dict:
    chunked = variant == "hybrid"
    return {
        "variant": rep.variant, "T": T, "H": cfg.H, "W": cfg.W, "D": cfg.head_dim, "heads": cfg.heads,
        "Tc": cfg.T_c if chunked else "", "To": cfg.T_o if chunked else "",
        "Dprime": cfg.d_prime if variant != "softmax" else "",
        "flops": rep.flops, "flops_scores": rep.flops_scores, "flops_linear": rep.flops_linear,
        "flops_phi": rep.flops_phi, "peak_bytes": rep.peak_activation_bytes, "state_bytes": rep.state_bytes,
    }


def sweep_durations(cfg: CostConfig, durations: Sequence[int]) -> list[dict]:
    if not durations:
        raise ValueError("durations must be non-empty")
    rows = [_row(cfg, v, T, report_for(cfg, v, T)) for v in cfg.variants for T in durations]
    rows.sort(key=lambda r: (r["variant"], r["T"]))
    return rows


def loglog_slope(ns: Iterable[float], values: Iterable[float]) -> float:
    slope, _ = np.polyfit(np.log(np.asarray(list(ns), float)), np.log(np.asarray(list(values), float)), 1)
    return float(slope)


def fitted_slopes(rows: Sequence[dict]) -> dict[str, float]:
    out = {}
    for variant in sorted({r["variant"] for r in rows}):
        sel = [r for r in rows if r["variant"] == variant]
        ns = [r["T"] * r["H"] * r["W"] for r in sel]
        out[variant] = loglog_slope(ns, [r["flops"] for r in sel])
    return out


def crossover_tokens(cfg: CostConfig, T_max: int = 64) -> int | None:
    """Smallest N on the scanned grid from which hybrid stays below softmax."""
    best = None
    for T in range(T_max, cfg.T_c - 1, -1):
        if report_for(cfg, "hybrid", T).flops < report_for(cfg, "softmax", T).flops:
            best = T * cfg.H * cfg.W
        else:
            break
    return best


def saving_ratio(cfg: CostConfig, T: int = 21) -> float:
    return report_for(cfg, "softmax", T).flops / report_for(cfg, "hybrid", T).flops


def write_csv(rows: Sequence[dict], path: str | Path, precision: str = "double") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# flop_convention={FLOP_CONVENTION}; precision={precision}\n")
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return path


def param_budget(head_dim: int, heads: int, hidden: int | None = None, out: int | None = None) -> int:
    """Feature-map parameters per block (query and key maps, all heads)."""
    hidden = 2 * head_dim if hidden is None else hidden
    out = 2 * head_dim if out is None else out
    per_map = head_dim * hidden + hidden + hidden * out + out
    return 2 * heads * per_map


def slope_summary(rows: Sequence[dict]) -> str:
    parts = [f"{k}: {v:.3f}" for k, v in fitted_slopes(rows).items()]
    return ", ".join(parts)

