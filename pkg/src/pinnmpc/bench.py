"""One-interval execution times (surrogate vs classical integrators) and the explicit-Euler stability check."""
from __future__ import annotations

import csv
import platform
import time
from dataclasses import dataclass, field

import numpy as np

from . import netcore
from .integrators import IntegratorSpec, NonFiniteStateError, flow, simulate_zoh
from .pinn import SamplingDomain

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None

METHODS = ("pinn", "euler", "rk4", "rkf45")
FIXED_STEP = 0.02
RKF45_BENCH = IntegratorSpec(kind="rkf45", abs_tol=1e-8, rel_tol=1e-8)


class ParallelTimingError(RuntimeError):
    """Raised when timing is requested with batch parallelism switched on."""


@dataclass
class BenchRow:
    method: str
    mean_s: float
    median_s: float
    min_s: float
    max_s: float
    reps: int
    diverged: bool = False
    samples: np.ndarray = field(default=None, repr=False)


@dataclass
class BenchReport:
    rows: list
    tau: float
    machine: str = field(default_factory=lambda: f"{platform.machine()} {platform.processor() or platform.system()} python {platform.python_version()}")

    def row(self, method: str) -> BenchRow:
        return next(r for r in self.rows if r.method == method)


def _spec(method: str) -> IntegratorSpec:
    if method == "rkf45":
        return RKF45_BENCH
    return IntegratorSpec(kind=method, step_size=FIXED_STEP)


def random_inputs(n: int, domain: SamplingDomain, seed) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    x = rng.uniform(domain.x_lower, domain.x_upper, size=(n, 4))
    u = rng.uniform(domain.u_lower, domain.u_upper, size=(n, 2))
    return x, u


def time_one_step(method: str, target, tau: float = 0.2, reps: int = 1000, seed=0, warmup: int = 100,
                  domain: SamplingDomain = SamplingDomain(), workers: int = 1) -> BenchRow:
    """Wall time of computing x_{k+1} from random in-domain (x_k, u_k).

    ``target`` is a :class:`netcore.NetworkModel` for ``pinn`` and a dynamics
    model otherwise. ``warmup`` leading evaluations are discarded.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if workers != 1:
        raise ParallelTimingError("timing must run single-threaded; batch parallelism is enabled")
    if reps < 1:
        raise ValueError("reps must be positive")
    xs, us = random_inputs(reps + warmup, domain, seed)
    if method == "pinn":
        net, omega = target.net, target.omega

        def one(x, u):
            return netcore.forward(net, omega, tau, x, u)
    else:
        spec = _spec(method)

        def one(x, u):
            return flow(target, tau, u, x, spec)

    samples = np.empty(reps)
    diverged = False
    clock = time.perf_counter
    for i in range(reps + warmup):
        x, u = xs[i], us[i]
        t0 = clock()
        try:
            one(x, u)
        except NonFiniteStateError:
            diverged = True
        dt = clock() - t0
        if i >= warmup:
            samples[i - warmup] = dt
    return BenchRow(method, float(np.mean(samples)), float(np.median(samples)), float(samples.min()), float(samples.max()),
                    reps, diverged, samples)


def run_benchmark(plant, surrogate, tau: float = 0.2, reps: int = 1000, seed=0, warmup: int = 100,
                  domain: SamplingDomain = SamplingDomain(), workers: int = 1) -> BenchReport:
    """All four methods on identical seeded inputs, BLAS pinned to one thread."""
    if workers != 1:
        raise ParallelTimingError("timing must run single-threaded; batch parallelism is enabled")
    ctx = threadpool_limits(1) if threadpool_limits is not None else _Null()
    with ctx:
        rows = [time_one_step(m, surrogate if m == "pinn" else plant, tau, reps, seed, warmup, domain) for m in METHODS]
    return BenchReport(rows, tau)


class _Null:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def format_table(report: BenchReport) -> str:
    head = f"{'':8s}" + "".join(f"{r.method.upper():>12s}" for r in report.rows)
    mean = f"{'mean(s)':8s}" + "".join(f"{r.mean_s:12.2e}" for r in report.rows)
    med = f"{'median(s)':8s}" + "".join(f"{r.median_s:12.2e}" for r in report.rows)
    return "\n".join([f"one-step times, tau={report.tau:g} s, h={FIXED_STEP:g} s for euler/rk4 ({report.machine})", head, mean, med])


def write_csv(path, report: BenchReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "mean_s", "median_s", "reps", "diverged"])
        for r in report.rows:
            w.writerow([r.method, f"{r.mean_s:.6e}", f"{r.median_s:.6e}", r.reps, int(r.diverged)])


@dataclass
class EulerInstabilityReport:
    tau: float
    seeds: list
    first_divergence: list  # step index per seed for h = tau, None when bounded
    fine_max_norm: list  # max ||x|| with h = FIXED_STEP over the check horizon
    rkf45_max_norm: list
    threshold: float = 1e3

    @property
    def any_diverged(self) -> bool:
        return any(k is not None for k in self.first_divergence)

    @property
    def fine_bounded(self) -> bool:
        return all(n < 50.0 for n in self.fine_max_norm)

    @property
    def rkf45_bounded(self) -> bool:
        return all(np.isfinite(n) and n < self.threshold for n in self.rkf45_max_norm)


def _first_blowup(traj, threshold):
    with np.errstate(over="ignore", invalid="ignore"):
        norms = np.linalg.norm(traj.states, axis=1)
    over = np.nonzero(~(norms <= threshold))[0]
    if len(over):
        return int(over[0])
    if traj.diverged:
        return traj.n_intervals + 1
    return None


def euler_instability_experiment(model, tau: float = 0.2, seeds=range(10), n_steps: int = 50, check_horizon: float = 4.0,
                                 domain: SamplingDomain = SamplingDomain(), threshold: float = 1e3) -> EulerInstabilityReport:
    """Explicit Euler with step tau against step 0.02 and rkf45 from random starts under a held input."""
    first, fine, adaptive = [], [], []
    n_check = int(round(check_horizon / tau))
    for seed in seeds:
        x, u = random_inputs(1, domain, seed)
        x, u = x[0], u[0]
        coarse = simulate_zoh(model, x, np.tile(u, (n_steps, 1)), tau, IntegratorSpec(kind="euler", step_size=tau))
        first.append(_first_blowup(coarse, threshold))
        fine_tr = simulate_zoh(model, x, np.tile(u, (n_check, 1)), tau, IntegratorSpec(kind="euler", step_size=FIXED_STEP))
        fine.append(np.inf if fine_tr.diverged else float(np.max(np.linalg.norm(fine_tr.states, axis=1))))
        ref_tr = simulate_zoh(model, x, np.tile(u, (n_check, 1)), tau, RKF45_BENCH)
        adaptive.append(np.inf if ref_tr.diverged else float(np.max(np.linalg.norm(ref_tr.states, axis=1))))
    return EulerInstabilityReport(tau, list(seeds), first, fine, adaptive, threshold)
