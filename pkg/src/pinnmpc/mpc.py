"""Receding-horizon tracking with a one-interval prediction model.

The prediction model is anything exposing ``predict(x, u)`` and
``vjp(x, u, covector) -> (grad_x, grad_u)`` for a fixed hold interval: the PINN
surrogate (:class:`SurrogatePredictor`) or the integrated plant
(:class:`ExactFlowPredictor`). The inner problem is solved by projected
gradient descent with Armijo backtracking on the input box.
"""
from __future__ import annotations

import time
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import netcore
from .dynamics import rhs, rhs_jacobian
from .integrators import ORACLE, IntegratorSpec, NonFiniteStateError, Trajectory, flow, integrate
from .netcore import NetworkModel


@dataclass(frozen=True)
class MpcConfig:
    tau: float = 0.2
    horizon: int = 5
    q_diag: tuple = (1.0, 1.0, 0.0, 0.0)
    r_diag: tuple = (1e-6, 1e-6)
    u_lower: tuple = (-0.5, -0.5)
    u_upper: tuple = (0.5, 0.5)
    max_iter: int = 50
    gtol: float = 1e-6
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 30

    def __post_init__(self):
        for name in ("q_diag", "r_diag", "u_lower", "u_upper"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if min(self.q_diag) < 0:
            raise ValueError("Q must be positive semidefinite")
        if min(self.r_diag) <= 0:
            raise ValueError("R must be positive definite")
        if np.any(np.array(self.u_upper) < np.array(self.u_lower)):
            raise ValueError("control box is empty")
        if not (0 < self.backtrack < 1 and 0 < self.armijo < 1):
            raise ValueError("line-search constants out of range")

    @property
    def Q(self) -> np.ndarray:
        return np.diag(self.q_diag)

    @property
    def R(self) -> np.ndarray:
        return np.diag(self.r_diag)

    def project(self, u) -> np.ndarray:
        return np.clip(u, self.u_lower, self.u_upper)


# prediction models -------------------------------------------------------------

class SurrogatePredictor:
    """phi_hat(tau, x, u) of a trained network."""

    def __init__(self, model: NetworkModel, tau: float):
        if tau > model.tau_tilde + 1e-12:
            raise ValueError(f"tau={tau} exceeds the trained interval {model.tau_tilde}")
        self.model = model
        self.tau = tau
        self.lower, self.upper = model.state_lower, model.state_upper

    def predict(self, x, u):
        return netcore.forward(self.model.net, self.model.omega, self.tau, x, u)

    def vjp(self, x, u, covector):
        return netcore.input_gradient(self.model.net, self.model.omega, self.tau, x, u, covector)

    def in_domain(self, x) -> bool:
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))


_CS_STEP = 1e-30


def flow_sensitivity(model, tau: float, u, x0, spec: IntegratorSpec = ORACLE, method: str = "complex-step"):
    """``(phi, dphi/dx0, dphi/du)`` of the integrated flow.

    ``complex-step`` pushes six imaginary perturbations through one batched
    integration with error control on both the state and the carried
    derivatives. ``variational`` integrates the sensitivity equations alongside
    the state. Both control the error of all 28 entries.
    """
    x0 = np.asarray(x0, dtype=float)
    u = np.asarray(u, dtype=float)
    if method == "complex-step":
        dx = np.zeros((6, 4), dtype=complex)
        du = np.zeros((6, 2), dtype=complex)
        dx[:4, :4] = 1j * _CS_STEP * np.eye(4)
        du[4:, :2] = 1j * _CS_STEP * np.eye(2)
        zu = u + du
        z = integrate(lambda y: rhs(y, zu, model), x0 + dx, tau, spec, imag_scale=_CS_STEP)
        J = z.imag.T / _CS_STEP
        return z[0].real.copy(), J[:, :4], J[:, 4:]
    if method != "variational":
        raise ValueError(f"unknown sensitivity method {method!r}")

    def aug(z):
        x = z[:4]
        Sx = z[4:20].reshape(4, 4)
        Su = z[20:28].reshape(4, 2)
        A, Bm = rhs_jacobian(x, u, model)
        return np.concatenate([rhs(x, u, model), (A @ Sx).ravel(), (A @ Su + Bm).ravel()])

    z0 = np.concatenate([x0, np.eye(4).ravel(), np.zeros(8)])
    z = integrate(aug, z0, tau, spec)
    return z[:4], z[4:20].reshape(4, 4), z[20:28].reshape(4, 2)


# flow errors near 1e-8, far below tracking errors, at about 14 ms per sensitivity integration
EXACT_SPEC = IntegratorSpec(kind="rkf45", abs_tol=1e-7, rel_tol=1e-7)


class ExactFlowPredictor:
    """The integrated plant as prediction model; gradients from forward sensitivities."""

    def __init__(self, model, tau: float, spec: IntegratorSpec = EXACT_SPEC,
                 cache_size: int = 256, method: str = "complex-step"):
        self.dynamics = model
        self.tau = tau
        self.spec = spec
        self.method = method
        self._cache: OrderedDict = OrderedDict()
        self._cache_size = cache_size

    def _sens(self, x, u):
        key = (np.asarray(x, float).tobytes(), np.asarray(u, float).tobytes())
        hit = self._cache.get(key)
        if hit is None:
            hit = flow_sensitivity(self.dynamics, self.tau, u, x, self.spec, self.method)
            self._cache[key] = hit
            if len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)
        return hit

    def predict(self, x, u):
        # the state comes out of the sensitivity run, so a later vjp at (x, u) is a cache hit
        return self._sens(x, u)[0].copy()

    def vjp(self, x, u, covector):
        _, Sx, Su = self._sens(x, u)
        v = np.asarray(covector, dtype=float)
        return v @ Sx, v @ Su

    def in_domain(self, x) -> bool:
        return True


# cost and gradient --------------------------------------------------------------

def stage_cost(x_ref, x, u, Q, R) -> float:
    """||x_ref - x||_Q^2 + ||u||_R^2."""
    e = np.asarray(x_ref, dtype=float) - np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    return float(e @ np.asarray(Q) @ e + u @ np.asarray(R) @ u)


def _rollout(u_seq, x_rho, predictor):
    xs = [np.asarray(x_rho, dtype=float)]
    for k in range(len(u_seq) - 1):
        xs.append(predictor.predict(xs[-1], u_seq[k]))
    return xs


def ocp_objective(u_seq, x_rho, refs, predictor, config: MpcConfig) -> float:
    """Sum of stage costs over the horizon, starting at the measured state.

    Only states x_rho .. x_{rho+H-1} enter the cost, so ``H - 1`` predictions are made.
    """
    u_seq = np.asarray(u_seq, dtype=float).reshape(config.horizon, 2)
    xs = _rollout(u_seq, x_rho, predictor)
    Q, R = config.Q, config.R
    return sum(stage_cost(refs[k], xs[k], u_seq[k], Q, R) for k in range(config.horizon))


def ocp_value_and_gradient(u_seq, x_rho, refs, predictor, config: MpcConfig):
    """Exact ``(J, dJ/du_seq)`` by reverse accumulation through the rollout."""
    u_seq = np.asarray(u_seq, dtype=float).reshape(config.horizon, 2)
    H = config.horizon
    xs = _rollout(u_seq, x_rho, predictor)
    Q, R = config.Q, config.R
    J = sum(stage_cost(refs[k], xs[k], u_seq[k], Q, R) for k in range(H))
    grad = 2.0 * u_seq @ R
    lam = -2.0 * (np.asarray(refs[H - 1]) - xs[H - 1]) @ Q
    for k in range(H - 2, -1, -1):
        gx, gu = predictor.vjp(xs[k], u_seq[k], lam)
        grad[k] += gu
        lam = gx - 2.0 * (np.asarray(refs[k]) - xs[k]) @ Q
    if not np.all(np.isfinite(grad)):
        raise netcore.NonFiniteGradientError("OCP gradient has nonfinite entries")
    return float(J), grad


def ocp_gradient(u_seq, x_rho, refs, predictor, config: MpcConfig) -> np.ndarray:
    return ocp_value_and_gradient(u_seq, x_rho, refs, predictor, config)[1]


@dataclass
class OcpSolution:
    u: np.ndarray
    J: float
    iterations: int
    status: str
    J_start: float


def solve_ocp(x_rho, refs, predictor, config: MpcConfig, warm_start=None) -> OcpSolution:
    """Projected gradient descent with Armijo backtracking on the box U.

    The first trial step of each iteration is a Barzilai-Borwein step from the
    previous iterate; the result never exceeds the objective of the (projected)
    starting point.
    """
    H = config.horizon
    u = np.zeros((H, 2)) if warm_start is None else config.project(np.asarray(warm_start, dtype=float).reshape(H, 2))
    refs = np.asarray(refs, dtype=float)
    J, g = ocp_value_and_gradient(u, x_rho, refs, predictor, config)
    J_start = J
    width = np.max(np.array(config.u_upper) - np.array(config.u_lower))
    step = None
    status = "max_iter"
    it = 0
    for it in range(1, config.max_iter + 1):
        pg = u - config.project(u - g)
        if np.max(np.abs(pg)) <= config.gtol:
            status = "converged"
            it -= 1
            break
        if step is None:
            gmax = np.max(np.abs(g))
            step = 0.5 * width / gmax if gmax > 0 and width > 0 else 1.0
        accepted = False
        for _ in range(config.max_backtracks):
            u_try = config.project(u - step * g)
            d = u_try - u
            J_try = ocp_objective(u_try, x_rho, refs, predictor, config)
            if np.isfinite(J_try) and J_try <= J + config.armijo * np.sum(g * d):
                accepted = True
                break
            step *= config.backtrack
        if not accepted or np.max(np.abs(d)) == 0.0:
            status = "step_collapse"
            break
        J_new, g_new = ocp_value_and_gradient(u_try, x_rho, refs, predictor, config)
        s, y = (u_try - u).ravel(), (g_new - g).ravel()
        sy = s @ y
        step = (s @ s) / sy if sy > 0 else step / config.backtrack
        u, J, g = u_try, J_new, g_new
    return OcpSolution(u=u, J=J, iterations=it, status=status, J_start=J_start)


def shift_warm_start(u_prev) -> np.ndarray:
    """Drop the applied stage and duplicate the last one."""
    u_prev = np.asarray(u_prev, dtype=float)
    return np.vstack([u_prev[1:], u_prev[-1:]])


# references ---------------------------------------------------------------------

@dataclass
class ReferenceTrajectory:
    times: np.ndarray
    states: np.ndarray

    def window(self, k: int, H: int) -> np.ndarray:
        """Reference states for k .. k+H-1, holding the last sample past the end."""
        idx = np.minimum(np.arange(k, k + H), len(self.states) - 1)
        return self.states[idx]


def _smoothstep(s):
    return s**3 * (10 - 15 * s + 6 * s**2), 30 * s**2 * (1 - s) ** 2


REFERENCE_KINDS = ("reversal", "equilibrium")
_ALPHA_WAYPOINTS = (0.0, 0.8, -0.4, 0.6, 0.0)
_BETA_WAYPOINTS = (0.0, -0.3, 0.35, -0.2, 0.0)


def reference_generator(kind: str = "reversal", t_end: float = 16.0, tau: float = 0.2) -> ReferenceTrajectory:
    """Grid-aligned references built from rest-to-rest quintic segments.

    ``reversal`` visits waypoints that reverse the direction of motion of both
    joints; ``equilibrium`` stays at the hanging rest position.
    """
    n = int(round(t_end / tau))
    if abs(n * tau - t_end) > 1e-9 * max(1.0, t_end):
        raise ValueError("t_end must be a multiple of tau")
    times = tau * np.arange(n + 1)
    states = np.zeros((n + 1, 4))
    if kind == "equilibrium":
        return ReferenceTrajectory(times, states)
    if kind != "reversal":
        raise ValueError(f"unknown reference kind {kind!r}")
    for j, wps in enumerate((_ALPHA_WAYPOINTS, _BETA_WAYPOINTS)):
        seg = t_end / (len(wps) - 1)
        i = np.minimum((times // seg).astype(int), len(wps) - 2)
        s = np.clip((times - i * seg) / seg, 0.0, 1.0)
        pos, vel = _smoothstep(s)
        delta = np.diff(wps)[i]
        states[:, j] = np.array(wps)[i] + delta * pos
        states[:, 2 + j] = delta * vel / seg
    return ReferenceTrajectory(times, states)


# closed loop --------------------------------------------------------------------

@dataclass
class ClosedLoopResult:
    trajectory: Trajectory
    controls: np.ndarray
    solve_times: np.ndarray
    iterations: np.ndarray
    statuses: list
    mae: np.ndarray  # per angle, rad
    prediction_errors: np.ndarray  # one-step |predicted - plant| per step
    references: np.ndarray
    out_of_domain_steps: list = field(default_factory=list)
    diverged: bool = False

    def metrics(self, config: MpcConfig) -> dict:
        status = "diverged" if self.diverged else ("ok" if all(s == "converged" for s in self.statuses) else "partial")
        return {
            "mae_alpha_rad": float(self.mae[0]),
            "mae_beta_rad": float(self.mae[1]),
            "mean_solve_time_s": float(np.mean(self.solve_times)) if len(self.solve_times) else 0.0,
            "max_solve_time_s": float(np.max(self.solve_times)) if len(self.solve_times) else 0.0,
            "steps": int(len(self.solve_times)),
            "status": status,
            "converged_fraction": float(np.mean([s == "converged" for s in self.statuses])) if self.statuses else 1.0,
            "H": config.horizon,
            "tau": config.tau,
        }


def closed_loop(plant, predictor, refs: ReferenceTrajectory, config: MpcConfig, t_end: float, x0=None,
                plant_spec: IntegratorSpec = ORACLE) -> ClosedLoopResult:
    """Measure, solve, apply the first input over one interval, repeat.

    The plant is advanced with ``plant_spec`` (rkf45 by default). Mean absolute
    errors are taken over every grid point of the run, including the start.
    """
    n = int(round(t_end / config.tau))
    x = np.array(refs.states[0] if x0 is None else x0, dtype=float)
    states, controls, times, iters, statuses, pred_err, ood = [x], [], [], [], [], [], []
    warm = None
    diverged = False
    for rho in range(n):
        window = refs.window(rho, config.horizon)
        t0 = time.perf_counter()
        sol = solve_ocp(x, window, predictor, config, warm_start=warm)
        times.append(time.perf_counter() - t0)
        iters.append(sol.iterations)
        statuses.append(sol.status)
        u = sol.u[0]
        x_pred = predictor.predict(x, u)
        try:
            x = flow(plant, config.tau, u, x, plant_spec)
        except NonFiniteStateError:
            diverged = True
            break
        if hasattr(predictor, "in_domain") and not predictor.in_domain(x):
            ood.append(rho + 1)
        pred_err.append(np.abs(x_pred - x))
        states.append(x)
        controls.append(u)
        warm = shift_warm_start(sol.u)
    states = np.array(states)
    ref_states = refs.states[: len(states)]
    mae = np.mean(np.abs(states[:, :2] - ref_states[:, :2]), axis=0)
    traj = Trajectory(times=config.tau * np.arange(len(states)), states=states, controls=np.array(controls).reshape(-1, 2),
                      source="plant", diverged=diverged, out_of_domain=bool(ood), out_of_domain_steps=ood)
    return ClosedLoopResult(
        trajectory=traj,
        controls=np.array(controls).reshape(-1, 2),
        solve_times=np.array(times),
        iterations=np.array(iters),
        statuses=statuses,
        mae=mae,
        prediction_errors=np.array(pred_err).reshape(-1, 4),
        references=ref_states,
        out_of_domain_steps=ood,
        diverged=diverged,
    )
