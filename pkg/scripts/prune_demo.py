#!/usr/bin/env python3
"""Progressive ADMM pruning on the built-in teacher-student task.

Prints the per-round trace (fraction, step, validation loss, pass/fail)
and the final compression, then checks that the pruned model still matches
the dense reference on a fresh input.
"""

import argparse

import numpy as np

from csb.format import BlockShape, csb_mvm, decode
from csb.pruning import PruneConfig, SgdConfig, make_task, progressive_prune

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--teacher-fraction", type=float, default=0.75)
    ap.add_argument("--noise", type=float, default=0.01)
    args = ap.parse_args()

    shape = BlockShape(8, 8)
    task = make_task(
        seed=args.seed,
        input_dim=args.dim,
        output_dim=args.dim,
        noise_sigma=args.noise,
        teacher_prune=(shape, args.teacher_fraction),
    )
    cfg = PruneConfig(block_shape=shape, sgd=SgdConfig())
    report = progressive_prune(task, cfg)

    print(f"baseline val loss {report.baseline_loss:.5g}, target {report.target_loss:.5g}")
    for i, r in enumerate(report.rounds):
        mark = "pass" if r.passed else "FAIL"
        print(f"  round {i}: fraction {r.fraction:.4f} step {r.step:.4f} "
              f"loss {r.loss:.5g} {mark}")
    print(f"final fraction {report.final_fraction:.4f} "
          f"(compression {report.compression_ratio:.2f}x), loss {report.final_loss:.5g}")

    x = np.random.default_rng(0).uniform(-1.0, 1.0, report.model.cols)
    err = np.max(np.abs(csb_mvm(report.model, x) - decode(report.model) @ x))
    print(f"encoded model MVM check: max abs err {err:.2e}")
