"""Analytic cost sweep at Wan-like width: CSV plus slopes, saving ratio, D' sensitivity.

    python3 scripts/scaling_sweep.py --out out/sweep.csv [--durations 21 42 84 168] [--noncausal]
"""

import argparse

from rehyat.costmodel import CostConfig, crossover_tokens, fitted_slopes, saving_ratio, sweep_durations, write_csv


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--out", default="out/sweep.csv")
    p.add_argument("--durations", type=int, nargs="+", default=[21, 42, 84, 168])
    p.add_argument("--dprime", type=int, default=256)
    p.add_argument("--Tc", type=int, default=3)
    p.add_argument("--To", type=int, default=1)
    p.add_argument("--noncausal", action="store_true")
    p.add_argument("--no-phi-cost", action="store_true")
    args = p.parse_args()

    cfg = CostConfig(T_c=args.Tc, T_o=args.To, d_prime=args.dprime, causal=not args.noncausal,
                     include_phi_cost=not args.no_phi_cost)
    rows = sweep_durations(cfg, args.durations)
    write_csv(rows, args.out)
    for k, v in fitted_slopes(rows).items():
        print(f"slope {k:14s} {v:.3f}")
    print(f"softmax/hybrid at T=21: {saving_ratio(cfg, 21):.3f}")
    for dp in (64, 128, 256, 512, 1024):
        c = CostConfig(T_c=args.Tc, T_o=args.To, d_prime=dp, causal=cfg.causal, include_phi_cost=cfg.include_phi_cost)
        print(f"  D'={dp:5d}: {saving_ratio(c, 21):.3f}")
    print(f"crossover N* = {crossover_tokens(cfg)}")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
