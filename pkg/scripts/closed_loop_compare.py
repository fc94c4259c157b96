"""Exact-flow vs PINN prediction inside the same controller on the reversal reference.

    python scripts/closed_loop_compare.py [--checkpoint path] [--t-end 16]
"""
import argparse
import time

import numpy as np

from pinnmpc import netcore
from pinnmpc.cli import DEFAULT_CHECKPOINT, REFERENCE_MPC
from pinnmpc.dynamics import default_manipulator
from pinnmpc.mpc import ExactFlowPredictor, MpcConfig, SurrogatePredictor, closed_loop, reference_generator


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--checkpoint", default=str(DEFAULT_CHECKPOINT))
    ap.add_argument("--t-end", type=float, default=16.0)
    args = ap.parse_args()

    cfg = MpcConfig()
    plant = default_manipulator()
    refs = reference_generator("reversal", args.t_end, cfg.tau)
    predictors = {
        "exact": ExactFlowPredictor(plant, cfg.tau),
        "pinn": SurrogatePredictor(netcore.load_checkpoint(args.checkpoint), cfg.tau),
    }
    print(f"{'':8s}{'MAE alpha':>12s}{'MAE beta':>12s}{'solve mean':>12s}{'solve max':>12s}{'wall':>8s}")
    for name, pred in predictors.items():
        t0 = time.perf_counter()
        res = closed_loop(plant, pred, refs, cfg, args.t_end)
        wall = time.perf_counter() - t0
        st = np.asarray(res.solve_times)
        print(f"{name:8s}{res.mae[0]:12.3e}{res.mae[1]:12.3e}{st.mean():12.3e}{st.max():12.3e}{wall:8.1f}")
    ref = REFERENCE_MPC
    print(f"{'ref':8s}{ref['mae_alpha_rad']:12.3e}{ref['mae_beta_rad']:12.3e}{ref['mean_solve_time_s']:12.3e}")


if __name__ == "__main__":
    main()
