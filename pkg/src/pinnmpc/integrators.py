"""Explicit time integration under a zero-order-hold input.

Three schemes are provided: explicit Euler and classical RK4 with a fixed inner
step, and the Runge-Kutta-Fehlberg 4(5) pair with adaptive substepping. All of
them advance a state (or a batch of states sharing one step size) across one
hold interval of length ``dt``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dynamics import rhs

KINDS = ("euler", "rk4", "rkf45")
CSV_HEADER = ["t", "alpha", "beta", "dalpha", "dbeta", "u1", "u2"]


class StepSizeUnderflowError(ArithmeticError):
    pass


class NonFiniteStateError(ArithmeticError):
    pass


@dataclass(frozen=True)
class IntegratorSpec:
    kind: str = "rkf45"
    step_size: float = 0.02
    abs_tol: float = 1e-8
    rel_tol: float = 1e-8
    min_step: float = 1e-12
    max_step: float = np.inf

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown integrator kind {self.kind!r}")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if not (self.abs_tol > 0 and self.rel_tol > 0):
            raise ValueError("tolerances must be positive")
        if not (0 < self.min_step <= self.max_step):
            raise ValueError("need 0 < min_step <= max_step")


#: Project-wide ground truth.
ORACLE = IntegratorSpec(kind="rkf45", abs_tol=1e-10, rel_tol=1e-10)

# Fehlberg 4(5) tableau
_C = np.array([0.0, 1 / 4, 3 / 8, 12 / 13, 1.0, 1 / 2])
_A = [
    [],
    [1 / 4],
    [3 / 32, 9 / 32],
    [1932 / 2197, -7200 / 2197, 7296 / 2197],
    [439 / 216, -8.0, 3680 / 513, -845 / 4104],
    [-8 / 27, 2.0, -3544 / 2565, 1859 / 4104, -11 / 40],
]
_B4 = np.array([25 / 216, 0.0, 1408 / 2565, 2197 / 4104, -1 / 5, 0.0])
_B5 = np.array([16 / 135, 0.0, 6656 / 12825, 28561 / 56430, -9 / 50, 2 / 55])
_BERR = tuple(float(v) for v in np.subtract(_B5, _B4))
_SAFETY = 0.9
_SHRINK, _GROW = 0.2, 5.0


def _check_finite(x):
    if not np.all(np.isfinite(x)):
        raise NonFiniteStateError("state became nonfinite")


def _euler(f, x, h):
    return x + h * f(x)


def _rk4(f, x, h):
    k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _fixed(f, x, dt, h, scheme):
    n = max(1, int(np.ceil(dt / h - 1e-9)))
    hh = dt / n
    for _ in range(n):
        x = scheme(f, x, hh)
        _check_finite(x)
    return x


def fehlberg_step(f, x, h):
    """One RKF45 trial step: returns (5th-order solution, error estimate).

    The 5th-order result is propagated (local extrapolation); the difference to
    the embedded 4th-order result is the error estimate.
    """
    ks = []
    for i in range(6):
        xi = x
        for a, k in zip(_A[i], ks):
            xi = xi + (h * a) * k
        ks.append(f(xi))
    # explicit sums over the nonzero weights beat stack + tensordot for small states
    incr, err = 0.0, 0.0
    for b5, be, k in zip(_B5, _BERR, ks):
        if b5:
            incr = incr + b5 * k
        if be:
            err = err + be * k
    return x + h * incr, h * err


def _error_ratio(x, x_new, err, spec, imag_scale):
    if imag_scale is None:
        scale = spec.abs_tol + spec.rel_tol * np.maximum(np.abs(x), np.abs(x_new))
        return float(np.max(np.abs(err) / scale))
    # complex-step run: the imaginary parts are imag_scale * sensitivities and get the same tolerances
    sr = spec.abs_tol + spec.rel_tol * np.maximum(np.abs(x.real), np.abs(x_new.real))
    si = imag_scale * spec.abs_tol + spec.rel_tol * np.maximum(np.abs(x.imag), np.abs(x_new.imag))
    return float(max(np.max(np.abs(err.real) / sr), np.max(np.abs(err.imag) / si)))


def _rkf45(f, x, dt, spec: IntegratorSpec, h0=None, imag_scale=None):
    t = 0.0
    h = min(dt, spec.max_step) if h0 is None else min(h0, dt, spec.max_step)
    while t < dt:
        last = h >= dt - t
        if last:
            h = dt - t
        x_new, err = fehlberg_step(f, x, h)
        with np.errstate(invalid="ignore", over="ignore"):
            e = _error_ratio(x, x_new, err, spec, imag_scale)
        if not np.isfinite(e):
            e = np.inf
        if e <= 1.0:
            t = dt if last else t + h
            x = x_new
            _check_finite(x)
        factor = _GROW if e == 0 else min(_GROW, max(_SHRINK, _SAFETY * e ** -0.2))
        h = min(h * factor, spec.max_step)
        if h < spec.min_step and t < dt:
            raise StepSizeUnderflowError(f"rkf45 needs substep {h:.3e} < min_step {spec.min_step:.3e}")
    return x


def integrate(f: Callable[[np.ndarray], np.ndarray], x, dt: float, spec: IntegratorSpec, imag_scale=None) -> np.ndarray:
    """Advance an autonomous field ``f`` over ``dt``.

    For complex-step differentiation pass a complex ``x`` and the size of the
    imaginary perturbation as ``imag_scale``; rkf45 then controls the error of
    the carried derivatives as well as of the state.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x)
    # complex states are allowed so the whole integrator can be differentiated by complex step
    x = x.astype(complex if np.iscomplexobj(x) else float, copy=False)
    with np.errstate(over="ignore", invalid="ignore"):
        if spec.kind == "euler":
            return _fixed(f, x, dt, spec.step_size, _euler)
        if spec.kind == "rk4":
            return _fixed(f, x, dt, spec.step_size, _rk4)
        return _rkf45(f, x, dt, spec, imag_scale=imag_scale)


def step(model, x, u, dt: float, spec: IntegratorSpec = ORACLE) -> np.ndarray:
    """Advance ``x`` over one hold interval ``dt`` with ``u`` constant.

    Fixed-step kinds use ``ceil(dt / step_size)`` equal inner steps, so a
    ``dt`` shorter than ``step_size`` is a single step of length ``dt``.
    """
    u = np.asarray(u, dtype=float)
    return integrate(lambda y: rhs(y, u, model), x, dt, spec)


def flow(model, tau: float, u, x0, spec: IntegratorSpec = ORACLE) -> np.ndarray:
    """Flow map phi(tau, u, x0) under a held input."""
    return step(model, x0, u, tau, spec)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    source: str = "plant"
    diverged: bool = False
    out_of_domain: bool = False
    out_of_domain_steps: list = field(default_factory=list)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float).reshape(len(self.times), -1)
        self.controls = np.asarray(self.controls, dtype=float).reshape(-1, 2)
        if self.source not in ("plant", "surrogate"):
            raise ValueError("source must be 'plant' or 'surrogate'")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    @property
    def n_intervals(self) -> int:
        return len(self.times) - 1


def simulate_zoh(model, x0, controls: Sequence, tau: float, spec: IntegratorSpec = ORACLE, t0: float = 0.0) -> Trajectory:
    """Iterate x_{k+1} = phi(tau, u_k, x_k) over a sequence of held controls.

    A nonfinite state ends the run early; the partial trajectory is returned
    with ``diverged=True``.
    """
    controls = np.asarray(controls, dtype=float).reshape(-1, 2)
    if len(controls) == 0:
        raise ValueError("controls must be nonempty")
    states = [np.asarray(x0, dtype=float)]
    diverged = False
    for u in controls:
        try:
            states.append(flow(model, tau, u, states[-1], spec))
        except NonFiniteStateError:
            diverged = True
            break
    n = len(states)
    return Trajectory(
        times=t0 + tau * np.arange(n),
        states=np.array(states),
        controls=controls[: n - 1] if diverged else controls,
        source="plant",
        diverged=diverged,
    )


def convergence_order(model, kind: str, steps: Sequence[float], t_end: float, x0, u, exact=None) -> float:
    """Least-squares slope of log(error) against log(step size) at ``t_end``.

    ``exact`` defaults to ``model.exact_flow`` when present, else the rkf45 oracle.
    """
    steps = list(steps)
    if len(steps) < 3:
        raise ValueError("need at least three step sizes")
    if exact is None:
        exact = model.exact_flow(t_end, u, x0) if hasattr(model, "exact_flow") else flow(model, t_end, u, x0)
    errs = []
    for h in steps:
        approx = step(model, x0, u, t_end, IntegratorSpec(kind=kind, step_size=h))
        errs.append(np.max(np.abs(approx - exact)))
    slope, _ = np.polyfit(np.log(steps), np.log(errs), 1)
    return float(slope)


def controls_per_row(traj: Trajectory) -> np.ndarray:
    """Controls aligned with ``traj.times``; the last row repeats the final held value."""
    if len(traj.controls) == 0:
        return np.full((len(traj.times), 2), np.nan)
    return np.vstack([traj.controls, traj.controls[-1:]])[: len(traj.times)]


def write_trajectory_csv(path, traj: Trajectory, extra: dict | None = None) -> None:
    """Write one row per grid point with 17 significant digits.

    ``extra`` maps further column names to per-row arrays.
    """
    extra = extra or {}
    u = controls_per_row(traj)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER + list(extra))
        for i, t in enumerate(traj.times):
            row = [t, *traj.states[i], *u[i]] + [np.asarray(v)[i] for v in extra.values()]
            w.writerow([f"{float(v):.17g}" for v in row])


def read_trajectory_csv(path, source: str = "plant") -> Trajectory:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0][: len(CSV_HEADER)] != CSV_HEADER:
        raise ValueError(f"unexpected header {rows[0]}")
    data = np.array([[float(v) for v in r[: len(CSV_HEADER)]] for r in rows[1:]])
    return Trajectory(times=data[:, 0], states=data[:, 1:5], controls=data[:-1, 5:7], source=source)


# piecewise-constant excitation on 20 intervals, used for self-loop comparisons
_DEMO_LEVELS = np.array([[0.2, 0.0], [-0.3, 0.25], [0.4, -0.25], [0.0, 0.4], [-0.4, -0.1]])


def demo_controls(n_intervals: int = 20, hold: int = 4) -> np.ndarray:
    """Staircase input: each level of ``_DEMO_LEVELS`` held for ``hold`` intervals, cycled."""
    idx = (np.arange(n_intervals) // hold) % len(_DEMO_LEVELS)
    return _DEMO_LEVELS[idx].copy()


def read_controls_csv(path) -> np.ndarray:
    """Control file: header ``u1,u2`` then one held value per interval."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows or [c.strip() for c in rows[0]] != ["u1", "u2"]:
        raise ValueError("control file must start with header 'u1,u2'")
    try:
        u = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
    except ValueError as exc:
        raise ValueError(f"non-numeric control value: {exc}") from None
    if u.ndim != 2 or u.shape[1] != 2 or len(u) == 0:
        raise ValueError("control file needs at least one row of two values")
    if not np.all(np.isfinite(u)):
        raise ValueError("control values must be finite")
    return u


def write_controls_csv(path, controls) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["u1", "u2"])
        for u in np.asarray(controls, dtype=float).reshape(-1, 2):
            w.writerow([f"{v:.17g}" for v in u])
