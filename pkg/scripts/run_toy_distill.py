"""Pinned toy distillation run; writes the loss trace and trained feature maps.

    python3 scripts/run_toy_distill.py --out out/toy [--steps 500] [--lr 1e-3] [--optimizer sgd]
"""

import argparse
from pathlib import Path

from rehyat.attention import save_feature_map
from rehyat.distill import DistillConfig, ToySetup, build_toy, train_distill, write_trace


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--out", default="out/toy")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--optimizer", choices=("sgd", "adamw"), default="sgd")
    p.add_argument("--match", choices=("block", "attention"), default="block")
    p.add_argument("--seed", type=int, default=7)
    args = p.parse_args()

    teacher, student = build_toy(ToySetup(), args.seed)
    cfg = DistillConfig(lr=args.lr, steps=args.steps, seed=args.seed, optimizer=args.optimizer, match=args.match)
    res = train_distill(teacher, student, cfg)
    out = Path(args.out)
    write_trace(res, out / "distill_loss.csv")
    for side, maps in (("q", res.phi_q), ("k", res.phi_k)):
        for h, fm in enumerate(maps):
            save_feature_map(fm, out / "phi" / f"phi_{side}_head{h}")
    print(f"held-out L1: {res.initial_heldout:.6f} -> {res.final_heldout:.6f} "
          f"(ratio {res.final_heldout / res.initial_heldout:.4f})")


if __name__ == "__main__":
    main()
