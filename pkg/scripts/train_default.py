"""Train the shipped surrogate: default manipulator, default box, desk schedule.

    python scripts/train_default.py [--out src/pinnmpc/data/default_checkpoint.json] [--epochs N]

Writes the checkpoint, a history CSV next to it (not packaged) and prints the
one-step error over 1000 random in-domain points.
"""
import argparse
import logging
import time
from pathlib import Path

import numpy as np

from pinnmpc import netcore
from pinnmpc.dynamics import default_manipulator
from pinnmpc.integrators import flow
from pinnmpc.pinn import SamplingDomain, TrainingConfig, train, write_history_csv

ROOT = Path(__file__).resolve().parents[1]


def one_step_error(surrogate, model, domain, n=1000, seed=2024, tau=0.2):
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(domain.x_lower, domain.x_upper, (n, 4))
    u = rng.uniform(domain.u_lower, domain.u_upper, (n, 2))
    err = np.abs(surrogate(tau, x0, u) - flow(model, tau, u, x0)) / surrogate.net.normalizer.state_half_width
    return err.max(axis=0), err.mean(axis=0)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(ROOT / "src" / "pinnmpc" / "data" / "default_checkpoint.json"))
    ap.add_argument("--epochs", type=int, help="shorten the schedule (resampling moves to the midpoint)")
    ap.add_argument("--log-every", type=int, default=500)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    over = {} if args.epochs is None else {"epochs": args.epochs, "resample_at": args.epochs // 2 or None}
    cfg = TrainingConfig.desk(**over)
    model, domain = default_manipulator(), SamplingDomain()
    t0 = time.perf_counter()
    res = train(model, domain, cfg, log_every=args.log_every)
    elapsed = time.perf_counter() - t0
    res.model.metadata["model"] = {"kind": "manipulator", **{k: list(v) if isinstance(v, tuple) else v
                                                           for k, v in vars(model.params).items()}}
    res.model.metadata["train_seconds"] = round(elapsed, 1)
    out = Path(args.out)
    netcore.save_checkpoint(out, res.model)
    write_history_csv(ROOT / "scripts" / "default_history.csv", res.history)
    mx, mean = one_step_error(res.model, model, domain)
    print(f"trained {res.model.metadata['epochs_run']} epochs in {elapsed:.0f} s -> {out}")
    print("one-step normalized error  max", np.array2string(mx, precision=4), " mean", np.array2string(mean, precision=4))


if __name__ == "__main__":
    main()
