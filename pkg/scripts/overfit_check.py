#!/usr/bin/env python3
"""
Overfit Check Script

Trains the tiny network (c=8, depths 1,1,1) for 500 steps on 4 synthetic
32x32 pairs, once per seed, and reports the loss drop and training PSNR.
A seed passes when the final L1 is below 0.1x the initial L1 and the PSNR
on the training pairs reaches 30 dB; the check passes when 4 of 5 seeds do.

  python3 scripts/overfit_check.py [steps] [seeds...]
"""

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))
from train import overfit_check

RATIO_TARGET = 0.1
PSNR_TARGET = 30.0
REQUIRED = 4


def run_overfit_checks(steps=500, seeds=(0, 1, 2, 3, 4)):
    print("=" * 70)
    print(f"OVERFIT CHECK: {steps} steps, seeds {list(seeds)}")
    print("=" * 70)

    passed = 0
    for seed in seeds:
        result = overfit_check(seed, steps)
        ok = result["ratio"] < RATIO_TARGET and result["psnr"] >= PSNR_TARGET
        passed += ok
        print(f"  seed {seed}: L1 {result['initial_loss']:.5f} -> {result['final_loss']:.5f} "
              f"(x{result['ratio']:.3f})  PSNR {result['psnr']:.2f} dB  {'✅' if ok else '❌'}")

    needed = min(REQUIRED, len(seeds))
    print(f"\n{'✅' if passed >= needed else '❌'} {passed}/{len(seeds)} seeds passed (need {needed})")
    return 0 if passed >= needed else 1


if __name__ == "__main__":
    steps = int(sys.argv[1]) if len(sys.argv) > 1 else 500
    seeds = tuple(int(s) for s in sys.argv[2:]) or (0, 1, 2, 3, 4)
    sys.exit(run_overfit_checks(steps, seeds))
