"""Command-line entry point: simulate, sample, train, predict, control, bench.

Every command takes ``--config file.json`` (sections model, domain, training,
mpc, bench, output) plus ``--set section.key=value`` overrides, and writes the
merged effective config next to its outputs. Exit codes: 0 ok, 2 usage or
config error, 3 numerical failure, 1 failed ``--assert-ordering``.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import netcore
from .dynamics import LinearTestModel, Manipulator, ManipulatorParams
from .integrators import (ORACLE, Trajectory, demo_controls, read_controls_csv, simulate_zoh,
                          write_trajectory_csv)
from .mpc import REFERENCE_KINDS, ExactFlowPredictor, MpcConfig, SurrogatePredictor, closed_loop, reference_generator
from .pinn import (DESK_SCHEDULE, PAPER_SCHEDULE, SamplingDomain, TrainingConfig, TrainingDivergedError, anchor_dataset, latin_hypercube, self_loop_predict,
                   train, write_history_csv)

OUTPUT_ENV = "PINNMPC_OUTPUT_DIR"
EXIT_OK, EXIT_ASSERT, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
DEFAULT_CHECKPOINT = Path(__file__).with_name("data") / "default_checkpoint.json"

# reference values of the original experiments, printed next to achieved numbers
REFERENCE_MPC = {"mae_alpha_rad": 7.53e-3, "mae_beta_rad": 2.56e-2, "mean_solve_time_s": 3.65e-2}
REFERENCE_BENCH = {"pinn": 4.14e-4, "rkf45": 8.62e-3}

MODEL_KINDS = ("manipulator", "linear-test")
PRESETS = {"desk": DESK_SCHEDULE, "paper": PAPER_SCHEDULE}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MpcSection:
    mpc: MpcConfig = field(default_factory=MpcConfig)
    reference: str = "reversal"
    t_end: float = 16.0
    predictor: str = "pinn"


@dataclass(frozen=True)
class BenchConfig:
    reps: int = 1000
    warmup: int = 100
    seed: int = 0
    runs: int = 3
    euler_seeds: int = 10
    euler_steps: int = 50


@dataclass
class RunConfig:
    model: dict
    domain: SamplingDomain
    training: TrainingConfig
    mpc: MpcSection
    bench: BenchConfig
    output: dict

    def build_model(self):
        kw = {k: v for k, v in self.model.items() if k != "kind"}
        if self.model["kind"] == "linear-test":
            return LinearTestModel(**kw)
        return Manipulator(ManipulatorParams(**kw))

    def to_dict(self) -> dict:
        mpc = _plain(dataclasses.asdict(self.mpc.mpc))
        mpc.update(reference=self.mpc.reference, t_end=self.mpc.t_end, predictor=self.mpc.predictor)
        return {
            "model": _plain(dict(self.model)),
            "domain": _plain(dataclasses.asdict(self.domain)),
            "training": _plain(dataclasses.asdict(self.training)),
            "mpc": mpc,
            "bench": _plain(dataclasses.asdict(self.bench)),
            "output": dict(self.output),
        }


def _plain(d):
    if isinstance(d, dict):
        return {k: _plain(v) for k, v in d.items()}
    if isinstance(d, (tuple, list, np.ndarray)):
        return [_plain(v) for v in d]
    if isinstance(d, np.generic):
        return d.item()
    return d


def _field_names(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


def _build(cls, section: str, values: dict):
    unknown = set(values) - _field_names(cls)
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {sorted(unknown)}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


SECTIONS = ("model", "domain", "training", "mpc", "bench", "output")


def parse_config(raw: dict | None, preset: str = "desk") -> RunConfig:
    """Validate and merge a raw config dict onto the defaults; nothing is computed here."""
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    for name, sec in raw.items():
        if not isinstance(sec, dict):
            raise ConfigError(f"[{name}] must be an object")

    model = dict(raw.get("model", {}))
    kind = model.setdefault("kind", "manipulator")
    if kind not in MODEL_KINDS:
        raise ConfigError(f"[model] kind must be one of {MODEL_KINDS}")
    params_cls = LinearTestModel if kind == "linear-test" else ManipulatorParams
    built = _build(params_cls, "model", {k: v for k, v in model.items() if k != "kind"})
    model = {"kind": kind, **_plain(dataclasses.asdict(built))}

    domain = _build(SamplingDomain, "domain", raw.get("domain", {}))
    tr = dict(raw.get("training", {}))
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    tr = {**PRESETS[preset], **tr}
    training = _build(TrainingConfig, "training", tr)

    mpc_raw = dict(raw.get("mpc", {}))
    extra = {k: mpc_raw.pop(k) for k in ("reference", "t_end", "predictor") if k in mpc_raw}
    mpc = MpcSection(_build(MpcConfig, "mpc", mpc_raw), **extra)
    if mpc.reference not in REFERENCE_KINDS:
        raise ConfigError(f"[mpc] reference must be one of {REFERENCE_KINDS}")
    if mpc.predictor not in ("pinn", "exact"):
        raise ConfigError("[mpc] predictor must be 'pinn' or 'exact'")
    if not mpc.t_end > 0:
        raise ConfigError("[mpc] t_end must be positive")

    bench = _build(BenchConfig, "bench", raw.get("bench", {}))
    output = dict(raw.get("output", {}))
    if set(output) - {"dir"}:
        raise ConfigError(f"[output] unknown keys: {sorted(set(output) - {'dir'})}")
    output.setdefault("dir", "runs")
    return RunConfig(model, domain, training, mpc, bench, output)


def apply_overrides(raw: dict, overrides) -> dict:
    raw = json.loads(json.dumps(raw))
    for item in overrides or ():
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        raw.setdefault(section, {})[name] = parsed
    return raw


def load_config(path, overrides=(), preset: str = "desk") -> RunConfig:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
    return parse_config(apply_overrides(raw, overrides), preset)


def output_dir(cfg: RunConfig, flag: str | None) -> Path:
    out = Path(flag or os.environ.get(OUTPUT_ENV) or cfg.output["dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_effective_config(cfg: RunConfig, out: Path) -> Path:
    path = out / "effective_config.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def _vector(text: str | None, n: int, what: str) -> np.ndarray:
    if text is None:
        return np.zeros(n)
    try:
        v = np.array([float(s) for s in text.split(",")])
    except ValueError:
        raise ConfigError(f"{what} must be {n} comma-separated numbers") from None
    if v.shape != (n,) or not np.all(np.isfinite(v)):
        raise ConfigError(f"{what} must be {n} finite comma-separated numbers")
    return v


def _controls(path: str | None, required: bool) -> np.ndarray:
    if path is None:
        if required:
            raise ConfigError("a control file is required (--controls, CSV with header u1,u2)")
        return demo_controls()
    try:
        return read_controls_csv(path)
    except FileNotFoundError:
        raise ConfigError(f"control file not found: {path}") from None
    except ValueError as exc:
        raise ConfigError(f"control file {path}: {exc}") from None


def _load_checkpoint(path: str | None) -> netcore.NetworkModel:
    path = Path(path) if path else DEFAULT_CHECKPOINT
    try:
        return netcore.load_checkpoint(path)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {path}") from None
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"checkpoint {path} unreadable: {exc}") from None


# commands -----------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig, args, out: Path) -> int:
    x0 = _vector(args.x0, 4, "--x0")
    u = _controls(args.controls, required=True)
    tau = args.tau if args.tau is not None else cfg.mpc.mpc.tau
    traj = simulate_zoh(cfg.build_model(), x0, u, tau, ORACLE)
    path = out / "trajectory.csv"
    write_trajectory_csv(path, traj)
    print(f"wrote {path} ({len(traj.times)} rows)")
    if traj.diverged:
        print(f"plant diverged after {traj.n_intervals} intervals", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_sample(cfg: RunConfig, args, out: Path) -> int:
    seq = np.random.SeedSequence(cfg.training.seed)
    s_data, s_phys = seq.spawn(2)
    coll = latin_hypercube(cfg.training.n_phys, cfg.domain, s_phys)
    data = anchor_dataset(cfg.training.n_data, cfg.domain, s_data)
    cols = "t,alpha0,beta0,dalpha0,dbeta0,u1,u2"
    np.savetxt(out / "collocation.csv", coll.points, delimiter=",", header=cols, comments="", fmt="%.17g")
    data_arr = np.column_stack([data.t, data.x0, data.u, data.target])
    np.savetxt(out / "data.csv", data_arr, delimiter=",", header=cols + ",alpha,beta,dalpha,dbeta", comments="", fmt="%.17g")
    print(f"wrote {len(coll)} collocation points and {len(data)} data points to {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args, out: Path) -> int:
    if args.dry_run:
        print(json.dumps(cfg.to_dict()["training"], sort_keys=True))
        return EXIT_OK
    try:
        res = train(cfg.build_model(), cfg.domain, cfg.training, log_every=args.log_every)
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    res.model.metadata["model"] = cfg.to_dict()["model"]
    ckpt = out / "checkpoint.json"
    netcore.save_checkpoint(ckpt, res.model)
    write_history_csv(out / "history.csv", res.history)
    fl = res.model.metadata["final_losses"]
    print(f"wrote {ckpt}; epochs {res.model.metadata['epochs_run']}  L_data={fl['L_data']:.3e}  L_phys={fl['L_phys']:.3e}")
    return EXIT_OK


def self_loop_comparison(surrogate: netcore.NetworkModel, plant_model, x0, controls, tau: float):
    """Run surrogate and oracle on identical inputs; returns both trajectories and the error table."""
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        pred = self_loop_predict(surrogate, x0, controls, tau)
    plant = simulate_zoh(plant_model, x0, controls, tau, ORACLE)
    n = min(len(pred.states), len(plant.states))
    err = np.abs(pred.states[:n] - plant.states[:n])
    hw = surrogate.net.normalizer.state_half_width
    nerr = err / hw
    running = np.maximum.accumulate(nerr.max(axis=1))
    return pred, plant, err, nerr, running, [str(w.message) for w in caught]


def cmd_predict(cfg: RunConfig, args, out: Path) -> int:
    model = _load_checkpoint(args.checkpoint)
    x0 = _vector(args.x0, 4, "--x0")
    u = _controls(args.controls, required=False)
    tau = args.tau if args.tau is not None else cfg.mpc.mpc.tau
    if tau > model.tau_tilde + 1e-12:
        raise ConfigError(f"tau={tau} exceeds the checkpoint interval {model.tau_tilde}")
    pred, plant, err, nerr, running, msgs = self_loop_comparison(model, cfg.build_model(), x0, u, tau)
    write_trajectory_csv(out / "surrogate.csv", pred)
    write_trajectory_csv(out / "plant.csv", plant)
    n = len(err)
    with open(out / "errors.csv", "w") as fh:
        fh.write("k,t,err_alpha,err_beta,err_dalpha,err_dbeta,max_normalized,running_max_normalized\n")
        for k in range(n):
            row = [k, pred.times[k], *err[k], nerr[k].max(), running[k]]
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
    if pred.out_of_domain:
        msgs.append(f"surrogate left the training box at steps {pred.out_of_domain_steps}")
    for m in msgs:
        print(f"warning: {m}", file=sys.stderr)
    summary = {
        "iterations": n - 1,
        "tau": tau,
        "max_abs_error": err.max(axis=0).tolist(),
        "final_running_max_normalized": float(running[-1]),
        "out_of_domain_steps": pred.out_of_domain_steps,
        "warnings": msgs,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"{n - 1} iterations, max normalized error {running[-1]:.3e}; outputs in {out}")
    if plant.diverged:
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_control(cfg: RunConfig, args, out: Path) -> int:
    mc = cfg.mpc.mpc
    plant = cfg.build_model()
    predictor_kind = args.predictor or cfg.mpc.predictor
    if predictor_kind == "exact":
        predictor = ExactFlowPredictor(plant, mc.tau)
    else:
        surrogate = _load_checkpoint(args.checkpoint)
        if mc.tau > surrogate.tau_tilde + 1e-12:
            raise ConfigError(f"tau={mc.tau} exceeds the checkpoint interval {surrogate.tau_tilde}")
        predictor = SurrogatePredictor(surrogate, mc.tau)
    refs = reference_generator(cfg.mpc.reference, cfg.mpc.t_end, mc.tau)
    res = closed_loop(plant, predictor, refs, mc, cfg.mpc.t_end)
    send = len(res.trajectory.times)
    u_cmd = np.vstack([res.controls, np.full((1, 2), np.nan)])[:send]
    extra = {
        "u1_cmd": u_cmd[:, 0],
        "u2_cmd": u_cmd[:, 1],
        "solve_time_s": np.append(res.solve_times[: send - 1], np.nan),
        "ref_alpha": res.references[:send, 0],
        "ref_beta": res.references[:send, 1],
    }
    write_trajectory_csv(out / "closed_loop.csv", res.trajectory, extra)
    metrics = res.metrics(mc)
    metrics.update(predictor=predictor_kind, reference=cfg.mpc.reference, out_of_domain_steps=res.out_of_domain_steps)
    metrics["reference_values"] = REFERENCE_MPC
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    print(f"{'':22s}{'achieved':>12s}{'reference':>12s}")
    for key, ref in REFERENCE_MPC.items():
        print(f"{key:22s}{metrics[key]:12.3e}{ref:12.3e}")
    if res.out_of_domain_steps:
        print(f"warning: plant left the surrogate box at steps {res.out_of_domain_steps}", file=sys.stderr)
    if res.diverged:
        print("plant diverged", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_bench(cfg: RunConfig, args, out: Path) -> int:
    surrogate = _load_checkpoint(args.checkpoint)
    plant = cfg.build_model()
    b = cfg.bench
    tau = cfg.mpc.mpc.tau
    ordered = True
    for run in range(b.runs):
        report = bench_mod.run_benchmark(plant, surrogate, tau, b.reps, b.seed + run, b.warmup, cfg.domain)
        bench_mod.write_csv(out / f"bench_run{run + 1}.csv", report)
        print(f"run {run + 1}/{b.runs}")
        print(bench_mod.format_table(report))
        ordered &= report.row("pinn").mean_s < report.row("rkf45").mean_s
    print("reference means: " + "  ".join(f"{k} {v:.2e} s" for k, v in REFERENCE_BENCH.items()))
    eul = bench_mod.euler_instability_experiment(plant, tau, range(b.euler_seeds), b.euler_steps, domain=cfg.domain)
    with open(out / "euler.csv", "w") as fh:
        fh.write("seed,first_divergence_step,fine_max_norm,rkf45_max_norm\n")
        for s, k, fn, rn in zip(eul.seeds, eul.first_divergence, eul.fine_max_norm, eul.rkf45_max_norm):
            fh.write(f"{s},{'' if k is None else k},{fn:.6g},{rn:.6g}\n")
    n_div = sum(k is not None for k in eul.first_divergence)
    print(f"euler h={tau:g}: diverged in {n_div}/{len(eul.seeds)} seeds within {b.euler_steps} steps; "
          f"h={bench_mod.FIXED_STEP:g} bounded: {eul.fine_bounded}")
    if args.assert_ordering and not ordered:
        print("ordering pinn < rkf45 violated", file=sys.stderr)
        return EXIT_ASSERT
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "sample": cmd_sample,
    "train": cmd_train,
    "predict": cmd_predict,
    "control": cmd_control,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="pinnmpc",
        description="PINN surrogate of the manipulator flow map and MPC built on it.",
        epilog="Defaults: tau=0.2, H=5, Q=diag(1,1,0,0), R=1e-6 I, 64x3 tanh network, U=[-0.5,0.5]^2 are published values; "
               "n_phys, epochs, resample_at and friction d are desk-scale (see README).",
    )
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config with sections model, domain, training, mpc, bench, output")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config entry (JSON value)")
    common.add_argument("--out-dir", help=f"output directory (overrides ${OUTPUT_ENV} and output.dir; default runs)")

    s = sub.add_parser("simulate", parents=[common], help="plant trajectory under ZOH inputs (rkf45, tol 1e-10)")
    s.add_argument("--x0", help="initial state alpha,beta,dalpha,dbeta (default 0,0,0,0)")
    s.add_argument("--controls", help="CSV with header u1,u2, one row per interval (required)")
    s.add_argument("--tau", type=float, help="hold interval in s (default mpc.tau = 0.2, published)")

    sub.add_parser("sample", parents=[common], help="write LHS collocation points and t=0 data anchors")

    t = sub.add_parser("train", parents=[common], help="train the PINN; writes checkpoint.json and history.csv")
    t.add_argument("--preset", choices=("desk", "paper"), default="desk",
                   help="desk: the shipped-checkpoint schedule, ~25 min (default); paper: 800000 epochs, resample at 400000 (published)")
    t.add_argument("--dry-run", action="store_true", help="resolve and write the effective config only")
    t.add_argument("--log-every", type=int, default=0, help="log losses every N epochs")

    pr = sub.add_parser("predict", parents=[common], help="self-loop surrogate vs plant on the same inputs")
    pr.add_argument("--checkpoint", help="network checkpoint (default: shipped one)")
    pr.add_argument("--x0", help="initial state (default 0,0,0,0)")
    pr.add_argument("--controls", help="control CSV (default: built-in 20-interval staircase)")
    pr.add_argument("--tau", type=float, help="hold interval (default 0.2, published)")

    c = sub.add_parser("control", parents=[common], help="closed-loop MPC tracking run")
    c.add_argument("--checkpoint", help="network checkpoint (default: shipped one)")
    c.add_argument("--predictor", choices=("pinn", "exact"), help="prediction model (default mpc.predictor = pinn)")

    b = sub.add_parser("bench", parents=[common], help="one-step timings of PINN/Euler/RK4/RKF45 and the Euler h=tau check")
    b.add_argument("--checkpoint", help="network checkpoint (default: shipped one)")
    b.add_argument("--assert-ordering", action="store_true", help="exit 1 unless PINN mean < RKF45 mean in every run")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.set, getattr(args, "preset", "desk"))
        out = output_dir(cfg, args.out_dir)
        write_effective_config(cfg, out)
        return COMMANDS[args.command](cfg, args, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
