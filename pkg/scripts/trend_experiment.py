#!/usr/bin/env python3
"""Utilization and index-overhead trends on the synthetic imbalance suite.

Runs every sharing mode over the suite, prints per-mode mean utilization
(the no-sharing / single-dimension / 2D progression), then the NIO decay
from block 16 to block 32 at a fixed prune fraction.
"""

import argparse

import numpy as np

from csb.engine import simulate_mvm, utilization_report
from csb.format import BlockShape, csr_index_count, encode, nio
from csb.pruning import project_csb
from csb.scheduler import SHARING_MODES, EngineConfig, compile_micro
from csb.workloads import imbalance_suite


def utilization_trend(seed: int, count: int) -> None:
    rows = []
    for idx, (mid, matrix) in enumerate(imbalance_suite(seed, count)):
        x = np.random.default_rng(idx).uniform(-1.0, 1.0, matrix.cols)
        for mode in SHARING_MODES:
            cfg = EngineConfig(2, 2, 2, 2, sharing_mode=mode)
            res = simulate_mvm(compile_micro(matrix, cfg), matrix, x)
            rows.append(
                {
                    "mode": mode,
                    "utilization": res.utilization,
                    "cycles": res.stats.total_cycles,
                    "nio": nio(matrix),
                }
            )
    print(f"mean PE utilization over {count} matrices:")
    for mode, stats in utilization_report(rows).items():
        print(f"  {mode:<12}{stats['utilization']:.3f}  ({stats['cycles']:.0f} cycles avg)")


def nio_trend(seed: int, count: int, fraction: float) -> None:
    rng = np.random.default_rng(seed)
    print(f"\nindex overhead at prune fraction {fraction}:")
    for block in (16, 32, 64):
        shape = BlockShape(block, block)
        nios, csr_ratios = [], []
        for _ in range(count):
            w = project_csb(rng.standard_normal((128, 128)), shape, fraction)
            m = encode(w, shape)
            nios.append(nio(m))
            csr_ratios.append(csr_index_count(w) / m.nnz)
        print(
            f"  block {block:>3}: NIO {np.mean(nios):.3f}   "
            f"(CSR baseline {np.mean(csr_ratios):.2f} indices per value)"
        )


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--count", type=int, default=56)
    ap.add_argument("--fraction", type=float, default=0.75)
    args = ap.parse_args()
    utilization_trend(args.seed, args.count)
    nio_trend(args.seed, max(8, args.count // 4), args.fraction)
