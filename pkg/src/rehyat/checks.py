"""Randomized property checks shared by the CLI verifier and the test suite."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import oracles
from .attention import (
    FeatureMap,
    ProjectionWeights,
    feature_map_apply,
    linear_attention,
    project_qkv,
    softmax_attention,
    split_heads,
)
from .chunking import ChunkLayout, hybrid_attention_chunk, hybrid_attention_full, make_layout, partition_tokens, range_indices
from .costmodel import CostConfig, flops_hybrid, flops_linear, flops_softmax, fitted_slopes, sweep_durations
from .distill import DistillSample, ToySetup, build_toy, distill_loss, grad_phi
from .numerics import Rng, count_flops, matmul, random_tensor, stable_row_softmax_terms
from .recurrent import open_session, peak_memory_report, step, stream_run


@dataclass
class Instance:
    layout: ChunkLayout
    weights: ProjectionWeights
    phi_q: list[FeatureMap]
    phi_k: list[FeatureMap]
    x: np.ndarray

    @property
    def heads(self) -> int:
        return len(self.phi_q)


def random_instance(rng: Rng, precision: str = "double", T_max: int = 12, HW_max: int = 3, D_max: int = 8,
                    heads_max: int = 2, nonneg_mode: str = "shifted-elu") -> Instance:
    g = rng.generator
    T = int(g.integers(1, T_max + 1))
    H = int(g.integers(1, HW_max + 1))
    W = int(g.integers(1, HW_max + 1))
    D = int(g.integers(1, D_max + 1))
    T_c = int(g.integers(1, T + 1))
    T_o = int(g.integers(0, T_c + 1))
    heads = int(g.integers(1, heads_max + 1))
    layout = make_layout(T, H, W, D, T_c, T_o)
    weights = ProjectionWeights.random(rng, D * heads, precision)
    maps = [FeatureMap.init(rng, D, nonneg_mode=nonneg_mode, precision=precision) for _ in range(2 * heads)]
    x = random_tensor(rng, (layout.N, D * heads), "normal", precision)
    return Instance(layout, weights, maps[:heads], maps[heads:], x)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    value: float | None = None


# --- equivalence and oracle checks -----------------------------------------

def stream_batch_gap(inst: Instance) -> float:
    batch = hybrid_attention_full(inst.x, inst.weights, inst.phi_q, inst.phi_k, inst.layout, causal=True)
    stream = stream_run(open_session(inst.layout, inst.weights, inst.phi_q, inst.phi_k), inst.x)
    return float(np.max(np.abs(batch - stream)))


def equivalence_sweep(seed: int, n: int, precision: str = "double") -> float:
    worst = 0.0
    for i in range(n):
        worst = max(worst, stream_batch_gap(random_instance(Rng(seed, 1000 + i), precision)))
    return worst


def bruteforce_gap(inst: Instance, t: int, causal: bool) -> float:
    lay = inst.layout
    out = hybrid_attention_chunk(inst.x, inst.weights, inst.phi_q, inst.phi_k, lay, t, causal).y
    q, k, v = (split_heads(a, inst.heads) for a in project_qkv(inst.x, inst.weights))
    s_set, l_set = oracles.causal_sets(lay.T, lay.H, lay.W, lay.T_c, lay.T_o, t, causal)
    rows = lay.chunk_range(t)
    ref = np.concatenate([
        oracles.hybrid_chunk_loop(q[h], k[h], v[h], inst.phi_q[h], inst.phi_k[h], rows, s_set, l_set)
        for h in range(inst.heads)
    ], axis=1)
    return float(np.max(np.abs(out - ref)))


def single_chunk_gap(inst: Instance) -> float:
    lay = inst.layout
    single = make_layout(lay.T, lay.H, lay.W, lay.D, lay.T, 0)
    hybrid = hybrid_attention_full(inst.x, inst.weights, inst.phi_q, inst.phi_k, single, causal=False)
    q, k, v = (split_heads(a, inst.heads) for a in project_qkv(inst.x, inst.weights))
    ref = np.concatenate([softmax_attention(q[h], k[h], v[h]) for h in range(inst.heads)], axis=1)
    return float(np.max(np.abs(hybrid - ref)))


def causality_violation(inst: Instance, rng: Rng) -> float:
    """Largest change in chunks ``<= t`` after perturbing chunk ``t + 1``; 0 means causal."""
    lay = inst.layout
    worst = 0.0
    base_b = hybrid_attention_full(inst.x, inst.weights, inst.phi_q, inst.phi_k, lay, causal=True)
    base_s = stream_run(open_session(lay, inst.weights, inst.phi_q, inst.phi_k), inst.x)
    for t in range(lay.n_chunks - 1):
        lo, hi = lay.chunk_range(t + 1)
        j = int(rng.generator.integers(lo, hi))
        x2 = inst.x.copy()
        x2[j] += random_tensor(rng, (x2.shape[1],), "normal", "double").astype(x2.dtype) * 3.0
        end = lay.chunk_range(t)[1]
        yb = hybrid_attention_full(x2, inst.weights, inst.phi_q, inst.phi_k, lay, causal=True)
        ys = stream_run(open_session(lay, inst.weights, inst.phi_q, inst.phi_k), x2)
        worst = max(worst, float(np.max(np.abs(yb[:end] - base_b[:end]))),
                    float(np.max(np.abs(ys[:end] - base_s[:end]))))
    return worst


def state_induction_gap(inst: Instance) -> float:
    """Compare the session state after each step with brute-force sums."""
    lay = inst.layout
    sess = open_session(lay, inst.weights, inst.phi_q, inst.phi_k)
    _, k, v = (split_heads(a, inst.heads) for a in project_qkv(inst.x, inst.weights))
    worst = 0.0
    for t in range(lay.n_chunks):
        lo, hi = lay.chunk_range(t)
        step(sess, inst.x[lo:hi])
        upto = max((t + 1) * lay.N_chunk - lay.overlap_tokens, 0)
        for h in range(inst.heads):
            if upto:
                fk = np.array([oracles.phi_row(inst.phi_k[h], r) for r in k[h][:upto]])
                s_ref, z_ref = fk.T @ v[h][:upto], fk.sum(axis=0)
            else:
                s_ref, z_ref = np.zeros_like(sess.state.s[h]), np.zeros_like(sess.state.z[h])
            worst = max(worst, float(np.max(np.abs(sess.state.s[h] - s_ref))),
                        float(np.max(np.abs(sess.state.z[h] - z_ref))))
    return worst


# --- gradient check --------------------------------------------------------

@dataclass
class GradRow:
    instance: int
    side: str
    head: int
    param: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradcheckReport:
    rows: list[GradRow] = field(default_factory=list)
    skipped_kinks: int = 0

    @property
    def worst(self) -> float:
        return max((r.rel_error for r in self.rows), default=0.0)


def rel_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradcheck(seed: int, instances: int = 5, params_per_instance: int = 20, h: float = 1e-5,
              setup: ToySetup | None = None, match: str = "block") -> GradcheckReport:
    """Central differences against :func:`grad_phi` on random parameters.

    A coordinate whose ``+h``/``-h`` evaluations flip the sign of any
    teacher-student difference straddles a kink of the absolute value, where
    no finite difference is meaningful; it is redrawn and counted.
    """
    setup = setup or ToySetup()
    report = GradcheckReport()
    for inst in range(instances):
        teacher, student = build_toy(setup, seed + inst)
        sample = DistillSample.draw(seed, inst, 0, student.layout.N, teacher.weights.dim, setup.precision)
        y_t = teacher.output(sample.x, match)
        _, grads = grad_phi(student, sample.x, y_t, match)
        pick = Rng(seed, 50_000 + inst).generator
        done = 0
        while done < params_per_instance:
            side = "q" if pick.integers(2) == 0 else "k"
            head = int(pick.integers(student.n_heads))
            name = ("w1", "b1", "w2", "b2")[int(pick.integers(4))]
            fm = (student.phi_q if side == "q" else student.phi_k)[head]
            arr = fm.params()[name]
            idx = tuple(int(pick.integers(n)) for n in arr.shape)
            old = arr[idx]
            arr[idx] = old + h
            y_plus = student.output(sample.x, match)
            arr[idx] = old - h
            y_minus = student.output(sample.x, match)
            arr[idx] = old
            if np.any(np.sign(y_plus - y_t) != np.sign(y_minus - y_t)):
                report.skipped_kinks += 1
                continue
            numeric = (distill_loss(y_t, y_plus) - distill_loss(y_t, y_minus)) / (2 * h)
            analytic = float((grads.q if side == "q" else grads.k)[head][name][idx])
            report.rows.append(GradRow(inst, side, head, name, idx, analytic, numeric, rel_error(analytic, numeric)))
            done += 1
    return report


# --- cost-model checks -----------------------------------------------------

def counter_vs_model(layout: ChunkLayout, seed: int = 0, causal: bool = True,
                     fold_accounting: str = "exact") -> tuple[int, int]:
    """Instrumented flops of the batch hybrid kernel vs the analytic count (one head)."""
    rng = Rng(seed)
    weights = ProjectionWeights.random(rng, layout.D)
    fq = FeatureMap.init(rng, layout.D)
    fk = FeatureMap.init(rng, layout.D)
    x = random_tensor(rng, (layout.N, layout.D))
    with count_flops() as counter:
        hybrid_attention_full(x, weights, fq, fk, layout, causal)
    return counter.total, flops_hybrid(layout, fq.out_dim, 1, causal, fold_accounting=fold_accounting).flops


def softmax_counter_vs_model(N: int, D: int, seed: int = 0) -> tuple[int, int]:
    rng = Rng(seed)
    weights = ProjectionWeights.random(rng, D)
    x = random_tensor(rng, (N, D))
    with count_flops() as counter:
        q, k, v = project_qkv(x, weights)
        softmax_attention(q, k, v)
    return counter.total, flops_softmax(N, D, 1).flops


def linear_counter_vs_model(N: int, D: int, seed: int = 0) -> tuple[int, int]:
    rng = Rng(seed)
    weights = ProjectionWeights.random(rng, D)
    fq = FeatureMap.init(rng, D)
    fk = FeatureMap.init(rng, D)
    x = random_tensor(rng, (N, D))
    with count_flops() as counter:
        q, k, v = project_qkv(x, weights)
        linear_attention(q, k, v, fq, fk)
    return counter.total, flops_linear(N, D, fq.out_dim, 1).flops


# --- verifier suite --------------------------------------------------------

def c_shift_sensitivity(inst: Instance, delta: float = 1.0, causal: bool = True) -> tuple[float, float]:
    """Output change when the stabilizer is moved from ``c_t`` to ``c_t + delta``.

    Only the softmax partials carry the shift, so this is
    ``(e^-d a_S + a_L) / (e^-d n_S + n_L)`` against the canonical output.
    Returns ``(change on chunks with an empty linear set, change elsewhere)``;
    the first must be rounding-level, the second is the policy's real effect.
    """
    lay = inst.layout
    g = np.exp(-delta)
    flat, mixed = 0.0, 0.0
    for t in range(lay.n_chunks):
        out = hybrid_attention_chunk(inst.x, inst.weights, inst.phi_q, inst.phi_k, lay, t, causal)
        y0 = (out.a_S + out.a_L) / (out.n_S + out.n_L)
        y1 = (g * out.a_S + out.a_L) / (g * out.n_S + out.n_L)
        gap = float(np.max(np.abs(y1 - y0)))
        if np.all(out.n_L == 0):
            flat = max(flat, gap)
        else:
            mixed = max(mixed, gap)
    return flat, mixed


def _check(name: str, fn: Callable[[], tuple[bool, str, float | None]]) -> CheckResult:
    try:
        ok, detail, value = fn()
    except Exception as exc:  # a crash is a failed property, reported by name
        return CheckResult(name, False, f"{type(exc).__name__}: {exc}")
    return CheckResult(name, bool(ok), detail, value)


def verify_suite(seed: int = 0, quick: bool = True) -> list[CheckResult]:
    n = 12 if quick else 100
    results = []

    def matmul_oracle():
        r = Rng(seed, 1)
        a, b = random_tensor(r, (5, 4)), random_tensor(r, (4, 3))
        gap = float(np.max(np.abs(matmul(a, b) - oracles.naive_matmul(a, b))))
        return gap <= 1e-12, f"max diff {gap:.2e}", gap

    def softmax_terms():
        logits = np.array([[700.0, -700.0, 0.0], [100.0, 99.0, 98.0]])
        e, m = stable_row_softmax_terms(logits)
        ok = bool(np.all(np.isfinite(e)) and np.allclose(e.max(axis=1), 1.0) and m[0, 0] == 700.0)
        return ok, "finite, row max 1", None

    def rng_determinism():
        a = random_tensor(Rng(seed, 3), (4, 4))
        b = random_tensor(Rng(seed, 3), (4, 4))
        c = random_tensor(Rng(seed, 4), (4, 4))
        return bool(np.array_equal(a, b) and not np.array_equal(a, c)), "same stream equal, streams differ", None

    def softmax_loop():
        r = Rng(seed, 5)
        q, k, v = (random_tensor(r, (6, 4)) for _ in range(3))
        gap = float(np.max(np.abs(softmax_attention(q, k, v) - oracles.softmax_attention_loop(q, k, v))))
        return gap <= 1e-12, f"max diff {gap:.2e}", gap

    def linear_loop():
        r = Rng(seed, 6)
        q, k, v = (random_tensor(r, (8, 4)) for _ in range(3))
        fq = FeatureMap.init(r, 4, out=6, degree=2)
        fk = FeatureMap.init(r, 4, out=6, degree=2)
        gap = float(np.max(np.abs(linear_attention(q, k, v, fq, fk) - oracles.linear_attention_loop(q, k, v, fq, fk))))
        return gap <= 1e-10, f"max diff {gap:.2e}", gap

    def phi_positive():
        r = Rng(seed, 7)
        fm = FeatureMap.init(r, 4)
        out = feature_map_apply(fm, random_tensor(r, (10_000, 4)) * 3)
        return bool(np.all(out > 0)), f"min {out.min():.3e}", float(out.min())

    def partitions():
        r = Rng(seed, 8)
        for _ in range(50):
            lay = random_instance(r, T_max=16, HW_max=4).layout
            for t in range(lay.n_chunks):
                for causal in (True, False):
                    p = partition_tokens(lay, t, causal)
                    s, l2 = set(range_indices(p.softmax)), set(range_indices(p.linear))
                    cover = set(range(lay.chunk_range(t)[1] if causal else lay.N))
                    if s & l2 or (s | l2) != cover:
                        return False, f"bad partition {lay} t={t} causal={causal}", None
        return True, "disjoint and covering", None

    def bruteforce():
        worst = 0.0
        for i in range(max(n // 3, 3)):
            inst = random_instance(Rng(seed, 200 + i), T_max=6, HW_max=2, D_max=4)
            t = int(Rng(seed, 300 + i).generator.integers(inst.layout.n_chunks))
            worst = max(worst, bruteforce_gap(inst, t, causal=bool(i % 2)))
        return worst <= 1e-10, f"max diff {worst:.2e}", worst

    def softmax_limit():
        worst = max(single_chunk_gap(random_instance(Rng(seed, 400 + i))) for i in range(n))
        return worst <= 1e-9, f"max diff {worst:.2e}", worst

    def causality():
        worst = max(causality_violation(random_instance(Rng(seed, 500 + i)), Rng(seed, 600 + i)) for i in range(4))
        return worst == 0.0, f"max change {worst:.2e}", worst

    def equivalence():
        worst = equivalence_sweep(seed, n)
        return worst <= 1e-9, f"max diff {worst:.2e} over {n} instances", worst

    def induction():
        worst = max(state_induction_gap(random_instance(Rng(seed, 700 + i), T_max=8, HW_max=2)) for i in range(4))
        return worst <= 1e-10, f"max diff {worst:.2e}", worst

    def constant_state():
        lay = make_layout(21, 2, 2, 4, 3, 1)
        sizes = {peak_memory_report(lay.with_T(T))["state_bytes"] for T in (21, 42, 84, 168)}
        return len(sizes) == 1, f"state bytes {sorted(sizes)}", None

    def grads():
        rep = gradcheck(seed, instances=1 if quick else 5, params_per_instance=20)
        return rep.worst <= 1e-4, f"worst rel err {rep.worst:.2e}", rep.worst

    def counter():
        got, model = counter_vs_model(make_layout(12, 2, 2, 4, 1, 0), seed)
        rel = abs(got - model) / model
        return rel <= 0.05, f"counter {got} vs model {model} ({rel:.1%})", rel

    def c_policy():
        flat, mixed = 0.0, 0.0
        for i in range(4):
            f, m = c_shift_sensitivity(random_instance(Rng(seed, 800 + i)))
            flat, mixed = max(flat, f), max(mixed, m)
        return flat <= 1e-12, f"shift 1.0: change {flat:.1e} without linear set, {mixed:.2e} with", mixed

    def slopes():
        rows = sweep_durations(CostConfig(), [21, 42, 84, 168])
        s = fitted_slopes(rows)
        ok = abs(s["softmax"] - 2.0) <= 0.15 and abs(s["hybrid-causal"] - 1.0) <= 0.15
        return ok, ", ".join(f"{k}={v:.3f}" for k, v in s.items()), None

    for name, fn in [
        ("numerics.matmul_oracle", matmul_oracle),
        ("numerics.softmax_terms_stable", softmax_terms),
        ("numerics.rng_determinism", rng_determinism),
        ("attention.softmax_vs_loop", softmax_loop),
        ("attention.linear_vs_loop", linear_loop),
        ("attention.phi_positive", phi_positive),
        ("chunking.partition_invariants", partitions),
        ("chunking.hybrid_vs_bruteforce", bruteforce),
        ("chunking.softmax_reduction", softmax_limit),
        ("chunking.causality", causality),
        ("chunking.c_policy_sensitivity", c_policy),
        ("recurrent.stream_equals_batch", equivalence),
        ("recurrent.state_induction", induction),
        ("recurrent.constant_state_bytes", constant_state),
        ("distill.gradcheck", grads),
        ("costmodel.counter_agreement", counter),
        ("costmodel.loglog_slopes", slopes),
    ]:
        results.append(_check(name, fn))
    return results

