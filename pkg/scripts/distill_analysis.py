"""How far can the toy student get? Step-size sweep plus a causal-softmax floor.

The floor student replaces the learned kernel on the linear set by the exact
exponential kernel, i.e. every chunk runs softmax over all tokens up to its
end. No feature map can beat it in expectation on this teacher, so its
held-out ratio bounds what distillation can reach under the causal mask.

    python3 scripts/distill_analysis.py [--steps 500]
"""

import argparse

import numpy as np

from rehyat.attention import merge_heads, project_qkv, softmax_attention, split_heads
from rehyat.distill import DistillConfig, ToySetup, build_toy, distill_loss, heldout_samples, train_distill


def causal_softmax_block(teacher, layout, x):
    q, k, v = (split_heads(a, teacher.n_heads) for a in project_qkv(x, teacher.weights))
    heads = []
    for h in range(teacher.n_heads):
        rows = []
        for t in range(layout.n_chunks):
            lo, hi = layout.chunk_range(t)
            rows.append(softmax_attention(q[h][lo:hi], k[h][:hi], v[h][:hi]))
        heads.append(np.concatenate(rows))
    a = merge_heads(heads)
    return teacher.ffn(a + x)


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--steps", type=int, default=500)
    args = p.parse_args()

    teacher, student = build_toy(ToySetup(), 7)
    cfg = DistillConfig(steps=args.steps)
    held = heldout_samples(cfg, student.layout.N, teacher.weights.dim, "double")
    init = np.mean([distill_loss(teacher.output(s.x), student.output(s.x)) for s in held])
    floor = np.mean([distill_loss(teacher.output(s.x), causal_softmax_block(teacher, student.layout, s.x)) for s in held])
    print(f"initial held-out L1 {init:.4f}; causal-softmax floor {floor:.4f} (ratio {floor / init:.3f})")

    for opt, lrs in (("sgd", (1e-3, 1e-2, 1e-1, 1.0, 10.0)), ("adamw", (1e-3, 1e-2))):
        for lr in lrs:
            res = train_distill(teacher, student, DistillConfig(lr=lr, steps=args.steps, optimizer=opt,
                                                                eval_every=args.steps))
            print(f"{opt:5s} lr={lr:<6g} held-out ratio {res.final_heldout / res.initial_heldout:.3f}")


if __name__ == "__main__":
    main()
