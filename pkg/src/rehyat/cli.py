"""Command-line entry point: ``rehyat <command> [flags]``.

Exit codes: 0 all properties hold, 1 a property failed, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import checks, faults
from .attention import FeatureMap, ProjectionWeights, save_feature_map
from .chunking import make_layout
from .config import ConfigError, ExperimentConfig, load_config
from .costmodel import CostConfig, FLOP_CONVENTION, crossover_tokens, fitted_slopes, param_budget, saving_ratio, sweep_durations, write_csv
from .distill import DistillConfig, ToySetup, build_toy, train_distill, write_trace
from .errors import DivergenceError
from .numerics import Rng, random_tensor
from .recurrent import open_session, step

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 already; keep the message terse
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config (unknown keys are rejected)")
    common.add_argument("--seed", type=_u64, help="override config seed")
    common.add_argument("--precision", choices=("single", "double"), help="override config precision")
    common.add_argument("--json", action="store_true", help="print a machine-readable report")
    common.add_argument("--out", help="output directory (overrides config)")
    p = _Parser(prog="rehyat", description="chunked hybrid attention toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("verify", parents=[common], help="run every module's property suite")
    sub.add_parser("equivalence", parents=[common], help="streaming vs batch causal outputs")
    sub.add_parser("distill", parents=[common], help="toy feature-map distillation")
    sub.add_parser("bench", parents=[common], help="analytic cost sweep")
    sub.add_parser("stream", parents=[common], help="long streaming session, memory report")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient table")
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.precision is not None:
        cfg.precision = args.precision
    if args.out is not None:
        cfg.out = args.out
    return cfg.validate()


def _emit(report: dict, as_json: bool, lines: list[str]) -> None:
    if as_json:
        print(json.dumps(report, indent=2, sort_keys=True))
    else:
        print("\n".join(lines))


def _toy_setup(cfg: ExperimentConfig, precision: str | None = None) -> ToySetup:
    lay, phi = cfg.layout, cfg.phi
    return ToySetup(lay.T, lay.H, lay.W, lay.D_model, lay.heads, lay.Tc, lay.To, phi.P, phi.D_h, phi.D_e,
                    phi.nonneg_mode, phi.activation, precision or cfg.precision)


def _cost_config(cfg: ExperimentConfig, d_prime: int | None = None) -> CostConfig:
    s = cfg.sweep
    return CostConfig(H=s.H, W=s.W, head_dim=s.head_dim, heads=s.heads, T_c=s.Tc, T_o=s.To,
                      d_prime=s.Dprime if d_prime is None else d_prime, degree=cfg.phi.P,
                      causal=cfg.layout.causal, include_phi_cost=s.include_phi_cost,
                      precision=cfg.precision, variants=tuple(s.variants))


# --- commands --------------------------------------------------------------

def cmd_verify(cfg: ExperimentConfig, as_json: bool = False) -> int:
    # the suite's thresholds are pinned for double precision
    with faults.inject(cfg.fault):
        results = checks.verify_suite(cfg.seed)
    failed = [r.name for r in results if not r.passed]
    report = {
        "command": "verify", "seed": cfg.seed, "fault": cfg.fault, "passed": not failed, "failed": failed,
        "properties": [{"name": r.name, "passed": r.passed, "detail": r.detail} for r in results],
    }
    lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.name}  {r.detail}" for r in results]
    lines.append(f"{len(results) - len(failed)}/{len(results)} properties hold"
                 + (f"; failed: {', '.join(failed)}" if failed else ""))
    _emit(report, as_json, lines)
    return EXIT_FAIL if failed else EXIT_OK


EQUIV_THRESHOLD = {"double": 1e-9, "single": 1e-4}


def cmd_equivalence(cfg: ExperimentConfig, as_json: bool = False) -> int:
    if not cfg.layout.causal:
        raise ConfigError("equivalence needs a causal layout")
    n = cfg.equivalence.instances
    threshold = EQUIV_THRESHOLD[cfg.precision]
    with faults.inject(cfg.fault):
        worst = checks.equivalence_sweep(cfg.seed, n, cfg.precision)
        # plus the configured layout itself
        lay = cfg.layout
        layout = make_layout(lay.T, lay.H, lay.W, cfg.head_dim, lay.Tc, lay.To)
        rng = Rng(cfg.seed, 77)
        weights = ProjectionWeights.random(rng, lay.D_model, cfg.precision)
        maps = [FeatureMap.init(rng, cfg.head_dim, cfg.phi.D_h, cfg.phi.D_e, cfg.phi.P, cfg.phi.nonneg_mode,
                                cfg.phi.activation, cfg.precision) for _ in range(2 * lay.heads)]
        x = random_tensor(rng, (layout.N, lay.D_model), "normal", cfg.precision)
        gap = checks.stream_batch_gap(checks.Instance(layout, weights, maps[:lay.heads], maps[lay.heads:], x))
    worst_all = max(worst, gap)
    ok = worst_all <= threshold
    report = {"command": "equivalence", "seed": cfg.seed, "precision": cfg.precision, "instances": n + 1,
              "max_abs_diff": worst_all, "random_max_abs_diff": worst, "config_layout_diff": gap,
              "threshold": threshold, "passed": ok}
    _emit(report, as_json, [
        f"random instances: {n}, max |stream - batch| = {worst:.3e}",
        f"configured layout: max |stream - batch| = {gap:.3e}",
        f"{'PASS' if ok else 'FAIL'}  threshold {threshold:g} ({cfg.precision})",
    ])
    return EXIT_OK if ok else EXIT_FAIL


def cmd_distill(cfg: ExperimentConfig, as_json: bool = False) -> int:
    d = cfg.distill
    dcfg = DistillConfig(lr=d.lr, steps=d.steps, batch_size=d.batch_size, seed=d.seed, optimizer=d.optimizer,
                         match=d.match, n_heldout=d.n_heldout, eval_every=d.eval_every)
    teacher, student = build_toy(_toy_setup(cfg), d.seed)
    out = Path(cfg.out)
    try:
        result = train_distill(teacher, student, dcfg)
    except DivergenceError as exc:
        _emit({"command": "distill", "passed": False, "diverged_at": exc.step, "error": str(exc)}, as_json,
              [f"FAIL  diverged at step {exc.step}: {exc}"])
        return EXIT_FAIL
    trace = write_trace(result, out / "distill_loss.csv", cfg.precision)
    blobs = []
    for side, maps in (("q", result.phi_q), ("k", result.phi_k)):
        for h, fm in enumerate(maps):
            stem = out / "phi" / f"phi_{side}_head{h}"
            save_feature_map(fm, stem)
            blobs.append(str(stem))
    ratio = result.final_heldout / result.initial_heldout
    report = {"command": "distill", "seed": d.seed, "steps": d.steps, "lr": d.lr, "optimizer": d.optimizer,
              "initial_heldout": result.initial_heldout, "final_heldout": result.final_heldout,
              "ratio": ratio, "trace": str(trace), "phi_blobs": blobs, "passed": True}
    _emit(report, as_json, [
        f"initial held-out L1 loss: {result.initial_heldout:.6f}",
        f"final held-out L1 loss:   {result.final_heldout:.6f}  (ratio {ratio:.4f})",
        f"wrote {trace} and {len(blobs)} feature-map blobs under {out / 'phi'}",
    ])
    return EXIT_OK


def bench_summary(cfg: ExperimentConfig) -> dict:
    cc = _cost_config(cfg)
    rows = sweep_durations(cc, cfg.sweep.durations)
    slopes = fitted_slopes(rows)
    hybrid_name = "hybrid-causal" if cc.causal else "hybrid"
    state = sorted({r["state_bytes"] for r in rows if r["variant"] == hybrid_name})
    return {
        "rows": rows,
        "slopes": slopes,
        "ratio_T21": saving_ratio(replace(cc, variants=("softmax", "hybrid")), 21),
        "dprime_sensitivity": {str(dp): saving_ratio(_cost_config(cfg, dp), 21) for dp in cfg.sweep.Dprime_sensitivity},
        "crossover_tokens": crossover_tokens(cc),
        "phi_params_per_block": param_budget(cc.head_dim, cc.heads, cfg.phi.D_h, cfg.phi.D_e),
        "hybrid_state_bytes": state,
        "hybrid_name": hybrid_name,
    }


def cmd_bench(cfg: ExperimentConfig, as_json: bool = False) -> int:
    s = bench_summary(cfg)
    out = Path(cfg.out)
    path = write_csv(s["rows"], out / "bench.csv", cfg.precision)
    slopes = s["slopes"]
    checks_ = {}
    if "softmax" in slopes:
        checks_["softmax_slope"] = abs(slopes["softmax"] - 2.0) <= 0.15
    if s["hybrid_name"] in slopes:
        checks_["hybrid_slope"] = abs(slopes[s["hybrid_name"]] - 1.0) <= 0.15
        checks_["constant_state"] = len(s["hybrid_state_bytes"]) == 1
    checks_["ratio_at_least_2"] = s["ratio_T21"] >= 2.0
    summary = {k: v for k, v in s.items() if k != "rows"}
    summary.update({"flop_convention": FLOP_CONVENTION, "precision": cfg.precision, "checks": checks_})
    (out / "bench_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    ok = all(checks_.values())
    report = dict(summary, command="bench", csv=str(path), passed=ok)
    lines = [f"wrote {path}", "log-log slopes: " + ", ".join(f"{k}={v:.3f}" for k, v in slopes.items()),
             f"softmax/hybrid flops at T=21: {s['ratio_T21']:.3f}",
             "D' sensitivity: " + ", ".join(f"{k}->{v:.2f}" for k, v in s["dprime_sensitivity"].items()),
             f"crossover: hybrid cheaper from N={s['crossover_tokens']} tokens",
             f"feature-map parameters per block: {s['phi_params_per_block']}",
             f"hybrid state bytes across sweep: {s['hybrid_state_bytes']}"]
    lines += [f"{'PASS' if v else 'FAIL'}  {k}" for k, v in checks_.items()]
    _emit(report, as_json, lines)
    return EXIT_OK if ok else EXIT_FAIL


def stream_durations(cfg: ExperimentConfig) -> list[dict]:
    """One streaming session per duration on synthetic chunks.

    Chunk ``t`` is drawn from its own stream, so shorter runs are exact
    prefixes of longer ones. Nothing beyond the running output count is kept.
    """
    lay = cfg.layout
    rng = Rng(cfg.seed, 88)
    weights = ProjectionWeights.random(rng, lay.D_model, cfg.precision)
    maps = [FeatureMap.init(rng, cfg.head_dim, cfg.phi.D_h, cfg.phi.D_e, cfg.phi.P, cfg.phi.nonneg_mode,
                            cfg.phi.activation, cfg.precision) for _ in range(2 * lay.heads)]
    rows = []
    for T in cfg.stream.durations:
        layout = make_layout(T, lay.H, lay.W, cfg.head_dim, lay.Tc, lay.To)
        sess = open_session(layout, weights, maps[:lay.heads], maps[lay.heads:], cfg.precision, keep_log=False)
        state_sizes = {sess.state.nbytes}
        out_bytes = 0
        peak_cache = 0
        for t in range(layout.n_chunks):
            lo, hi = layout.chunk_range(t)
            x = random_tensor(Rng(cfg.seed, 90_000 + t), (hi - lo, lay.D_model), "normal", cfg.precision)
            y = step(sess, x, t)
            out_bytes += y.nbytes
            state_sizes.add(sess.state.nbytes)
            peak_cache = max(peak_cache, sess.cache_k.nbytes + sess.cache_v.nbytes)
        rows.append({"T": T, "chunks": layout.n_chunks, "tokens": layout.N,
                     "peak_state_bytes": max(state_sizes), "state_bytes_constant": len(state_sizes) == 1,
                     "peak_cache_bytes": peak_cache, "peak_transient_bytes": sess.peak_transient_bytes,
                     "output_bytes": out_bytes})
    return rows


def cmd_stream(cfg: ExperimentConfig, as_json: bool = False) -> int:
    if not cfg.layout.causal:
        raise ConfigError("streaming needs a causal layout")
    rows = stream_durations(cfg)
    bytes_per_token = {r["output_bytes"] / r["tokens"] for r in rows}
    constant = len({r["peak_state_bytes"] for r in rows}) == 1 and all(r["state_bytes_constant"] for r in rows)
    linear = len(bytes_per_token) == 1
    ok = constant and linear
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "stream.csv", "w", newline="") as fh:
        fh.write(f"# precision={cfg.precision}\n")
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    report = {"command": "stream", "precision": cfg.precision, "rows": rows, "state_constant": constant,
              "output_linear": linear, "passed": ok}
    lines = [f"T={r['T']:>6}  chunks={r['chunks']:>5}  peak_state_bytes={r['peak_state_bytes']}  "
             f"peak_transient_bytes={r['peak_transient_bytes']}  output_bytes={r['output_bytes']}" for r in rows]
    lines.append(f"{'PASS' if constant else 'FAIL'}  peak state bytes identical across durations")
    lines.append(f"{'PASS' if linear else 'FAIL'}  output bytes grow linearly with tokens")
    _emit(report, as_json, lines)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_gradcheck(cfg: ExperimentConfig, as_json: bool = False) -> int:
    if cfg.precision != "double":
        raise ConfigError("gradcheck runs in double precision only")
    g = cfg.gradcheck
    with faults.inject(cfg.fault):
        rep = checks.gradcheck(cfg.seed, g.instances, g.params_per_instance, g.h, _toy_setup(cfg, "double"),
                               cfg.distill.match)
    ok = rep.worst <= g.threshold
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "gradcheck.csv", "w", newline="") as fh:
        fh.write("# precision=double\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance", "side", "head", "param", "index", "analytic", "numeric", "rel_error"])
        for r in rep.rows:
            w.writerow([r.instance, r.side, r.head, r.param, "x".join(map(str, r.index)),
                        repr(r.analytic), repr(r.numeric), repr(r.rel_error)])
    report = {"command": "gradcheck", "seed": cfg.seed, "checked": len(rep.rows), "skipped_kinks": rep.skipped_kinks,
              "worst_rel_error": rep.worst, "threshold": g.threshold, "passed": ok}
    lines = [f"{'inst':>4} {'side':>4} {'head':>4} {'param':>5} {'index':>7} {'analytic':>13} {'numeric':>13} {'rel':>9}"]
    lines += [f"{r.instance:>4} {r.side:>4} {r.head:>4} {r.param:>5} {'x'.join(map(str, r.index)):>7} "
              f"{r.analytic:>13.6e} {r.numeric:>13.6e} {r.rel_error:>9.2e}" for r in rep.rows]
    lines.append(f"{'PASS' if ok else 'FAIL'}  worst relative error {rep.worst:.2e} (threshold {g.threshold:g}, "
                 f"{rep.skipped_kinks} kink coordinates redrawn)")
    _emit(report, as_json, lines)
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {
    "verify": cmd_verify, "equivalence": cmd_equivalence, "distill": cmd_distill,
    "bench": cmd_bench, "stream": cmd_stream, "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args.json)
    except ConfigError as exc:
        print(f"rehyat: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
