"""Physics-informed training of the one-interval flow map and self-loop prediction."""
from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import netcore
from .dynamics import residual, residual_vjp
from .integrators import Trajectory
from .lbfgs import LbfgsConfig, lbfgs_minimize
from .netcore import BatchPlan, InputNormalizer, Network, NetworkModel, NetworkTopology

log = logging.getLogger(__name__)


class TrainingDivergedError(ArithmeticError):
    def __init__(self, epoch: int):
        super().__init__(f"nonfinite loss at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class SamplingDomain:
    t_max: float = 0.25
    x_lower: tuple = (-np.pi, -np.pi, -2.5, -2.5)
    x_upper: tuple = (np.pi, np.pi, 2.5, 2.5)
    u_lower: tuple = (-0.5, -0.5)
    u_upper: tuple = (0.5, 0.5)

    def __post_init__(self):
        for name in ("x_lower", "x_upper", "u_lower", "u_upper"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if not self.t_max > 0:
            raise ValueError("t_max must be positive")
        if len(self.x_lower) != 4 or len(self.x_upper) != 4 or len(self.u_lower) != 2 or len(self.u_upper) != 2:
            raise ValueError("state box needs 4 and control box 2 bounds")
        if np.any(np.array(self.x_upper) <= np.array(self.x_lower)) or np.any(np.array(self.u_upper) <= np.array(self.u_lower)):
            raise ValueError("boxes must be nonempty")

    @property
    def lower(self) -> np.ndarray:
        return np.concatenate([[0.0], self.x_lower, self.u_lower])

    @property
    def upper(self) -> np.ndarray:
        return np.concatenate([[self.t_max], self.x_upper, self.u_upper])

    def normalizer(self) -> InputNormalizer:
        return InputNormalizer.from_box(self.t_max, self.x_lower, self.x_upper, self.u_lower, self.u_upper)

    def contains_state(self, x) -> np.ndarray:
        x = np.asarray(x)
        return np.all((x >= np.array(self.x_lower)) & (x <= np.array(self.x_upper)), axis=-1)


@dataclass
class CollocationSet:
    points: np.ndarray  # (n, 7) rows of (t, x0, u)
    seed: object = None

    @property
    def t(self):
        return self.points[:, 0]

    @property
    def x0(self):
        return self.points[:, 1:5]

    @property
    def u(self):
        return self.points[:, 5:7]

    def __len__(self):
        return len(self.points)


@dataclass
class DataSet:
    t: np.ndarray
    x0: np.ndarray
    u: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.target)):
            raise ValueError("targets must be finite")

    def __len__(self):
        return len(self.t)


def latin_hypercube(n: int, domain: SamplingDomain, seed) -> CollocationSet:
    """One sample per equal-width stratum in every coordinate of [0, t_max] x X x U."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    lo, hi = domain.lower, domain.upper
    dim = len(lo)
    perms = np.stack([rng.permutation(n) for _ in range(dim)], axis=1)
    unit = (perms + rng.uniform(size=(n, dim))) / n
    unit = np.minimum(unit, np.nextafter((perms + 1) / n, 0))
    return CollocationSet(lo + unit * (hi - lo), seed)


def anchor_dataset(n: int, domain: SamplingDomain, seed) -> DataSet:
    """Initial-condition anchors: t = 0 and target equal to x0."""
    pts = latin_hypercube(n, domain, seed).points
    return DataSet(np.zeros(n), pts[:, 1:5].copy(), pts[:, 5:7].copy(), pts[:, 1:5].copy())


def physics_row_weights(domain_or_normalizer, force_weights=(1.0, 1.0)) -> np.ndarray:
    """Per-equation residual scaling: 1/half-width on kinematic rows, ``force_weights`` on force rows."""
    if isinstance(domain_or_normalizer, SamplingDomain):
        hw = 0.5 * (np.array(domain_or_normalizer.x_upper) - np.array(domain_or_normalizer.x_lower))
    else:
        hw = domain_or_normalizer.state_half_width
    return np.array([1.0 / hw[0], 1.0 / hw[1], float(force_weights[0]), float(force_weights[1])])


# losses -----------------------------------------------------------------------

def _data_evaluator(net: Network, data: DataSet, n_total: int):
    hw = net.normalizer.state_half_width

    def ev(x, xdot, rows):
        r = (x - data.target[rows]) / hw
        return float(np.sum(r * r)) / n_total, 2.0 * r / hw / n_total, None

    return ev


def _physics_evaluator(net: Network, coll: CollocationSet, model, n_total: int, row_w):
    w2 = row_w**2

    def ev(x, xdot, rows):
        u = coll.u[rows]
        F = residual(x, xdot, u, model)
        val = float(np.sum(w2 * F * F)) / n_total
        gx, gxd = residual_vjp(x, xdot, u, model, 2.0 * w2 * F / n_total)
        return val, gx, gxd

    return ev


def data_loss(net: Network, omega, data: DataSet) -> float:
    if len(data) == 0:
        raise ValueError("dataset is empty")
    x = netcore.forward(net, omega, data.t, data.x0, data.u)
    r = (x - data.target) / net.normalizer.state_half_width
    return float(np.sum(r * r)) / len(data)


def data_loss_and_grad(net: Network, omega, data: DataSet, plan: BatchPlan | None = None):
    return netcore.loss_weight_gradient(
        net, omega, data.t, data.x0, data.u, _data_evaluator(net, data, len(data)), needs_time=False, plan=plan
    )


def physics_residuals(net: Network, omega, coll: CollocationSet, model, row_w=None) -> np.ndarray:
    """Scaled residuals W F_hat at every collocation point, shape (n, 4)."""
    row_w = physics_row_weights(net.normalizer) if row_w is None else row_w
    x, xdot = netcore.forward_with_time_derivative(net, omega, coll.t, coll.x0, coll.u)
    return row_w * residual(x, xdot, coll.u, model)


def physics_loss(net: Network, omega, coll: CollocationSet, model, row_w=None) -> float:
    if len(coll) == 0:
        raise ValueError("collocation set is empty")
    F = physics_residuals(net, omega, coll, model, row_w)
    return float(np.sum(F * F)) / len(coll)


def physics_loss_and_grad(net: Network, omega, coll: CollocationSet, model, row_w=None, plan: BatchPlan | None = None):
    row_w = physics_row_weights(net.normalizer) if row_w is None else row_w
    return netcore.loss_weight_gradient(
        net, omega, coll.t, coll.x0, coll.u, _physics_evaluator(net, coll, model, len(coll), row_w), plan=plan
    )


def total_loss(net: Network, omega, data: DataSet, coll: CollocationSet, model, lam_phys: float = 1.0) -> float:
    return data_loss(net, omega, data) + lam_phys * physics_loss(net, omega, coll, model)


def total_loss_and_grad(net, omega, data, coll, model, lam_phys=1.0, plan=None, row_w=None):
    """Returns ``(L, grad, L_data, L_phys)``."""
    ld, gd = data_loss_and_grad(net, omega, data, plan)
    lp, gp = physics_loss_and_grad(net, omega, coll, model, row_w=row_w, plan=plan)
    return ld + lam_phys * lp, gd + lam_phys * gp, ld, lp


# training ---------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingConfig:
    n_data: int = 100
    n_phys: int = 20000
    epochs: int = 20000
    resample_at: int | None = 10000
    lam_phys: float = 1.0
    history_size: int = 10
    c1: float = 1e-4
    c2: float = 0.9
    gtol: float = 1e-9
    seed: int = 0
    hidden: tuple = (64, 64, 64)
    hard_ic: bool = False
    force_weights: tuple = (1.0, 1.0)
    chunk_size: int | None = None
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        object.__setattr__(self, "force_weights", tuple(float(w) for w in self.force_weights))
        if len(self.force_weights) != 2 or min(self.force_weights) <= 0:
            raise ValueError("force_weights must be two positive numbers")
        if min(self.n_data, self.n_phys, self.epochs, self.history_size) < 1:
            raise ValueError("counts must be positive")
        if self.resample_at is not None and not (0 < self.resample_at < self.epochs):
            raise ValueError("resample_at must lie strictly inside (0, epochs) or be None")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @classmethod
    def paper(cls, **overrides) -> "TrainingConfig":
        """Full-length schedule: 800000 epochs with fresh samples after 400000."""
        return cls(**{**PAPER_SCHEDULE, **overrides})

    @classmethod
    def desk(cls, **overrides) -> "TrainingConfig":
        """The schedule behind the shipped checkpoint, about 25 min on one core."""
        return cls(**{**DESK_SCHEDULE, **overrides})

    def lbfgs(self, max_iter: int) -> LbfgsConfig:
        return LbfgsConfig(max_iter=max_iter, history_size=self.history_size, c1=self.c1, c2=self.c2, gtol=self.gtol)


PAPER_SCHEDULE = {"epochs": 800000, "resample_at": 400000}
# fewer collocation points, more L-BFGS memory and the hard initial condition buy most of the
# accuracy the long schedule would give, in a budget a workstation can spend
DESK_SCHEDULE = {"n_phys": 4000, "epochs": 20000, "resample_at": 10000, "history_size": 50, "hard_ic": True}


@dataclass
class TrainingResult:
    model: NetworkModel
    history: list = field(default_factory=list)  # (epoch, L, L_data, L_phys)
    status: list = field(default_factory=list)


def _sample_sets(domain, config, seq: np.random.SeedSequence):
    s_data, s_phys = seq.spawn(2)
    return anchor_dataset(config.n_data, domain, s_data), latin_hypercube(config.n_phys, domain, s_phys)


def train(model, domain: SamplingDomain, config: TrainingConfig, seed: int | None = None, log_every: int = 0) -> TrainingResult:
    """Fit phi_hat on [0, t_max] x X x U by L-BFGS on L_data + lam * L_phys.

    At ``resample_at`` the data and collocation sets are drawn afresh and the
    L-BFGS memory restarts from the current weights.
    """
    seed = config.seed if seed is None else seed
    root = np.random.SeedSequence(seed)
    s_init, s_round0, s_round1 = root.spawn(3)
    topo = NetworkTopology(hidden=config.hidden, hard_ic=config.hard_ic)
    net = Network(topo, domain.normalizer())
    omega = netcore.init_weights(topo, s_init)
    plan = BatchPlan(chunk_size=config.chunk_size, workers=config.workers)
    row_w = physics_row_weights(net.normalizer, config.force_weights)

    rounds = [(s_round0, config.epochs if config.resample_at is None else config.resample_at)]
    if config.resample_at is not None:
        rounds.append((s_round1, config.epochs - config.resample_at))

    history, statuses = [], []
    epoch0 = 0
    for seq, budget in rounds:
        data, coll = _sample_sets(domain, config, seq)
        last = {}

        def objective(w):
            L, g, ld, lp = total_loss_and_grad(net, w, data, coll, model, config.lam_phys, plan, row_w)
            last.update(L=L, ld=ld, lp=lp)
            if not np.isfinite(L):
                return np.inf, g
            return L, g

        L0, _ = objective(omega)
        if not np.isfinite(L0):
            raise TrainingDivergedError(epoch0)
        if epoch0 == 0:
            history.append((0, last["L"], last["ld"], last["lp"]))

        def on_accept(it, w, f, g):
            if not np.isfinite(f):
                raise TrainingDivergedError(epoch0 + it)
            history.append((epoch0 + it, last["L"], last["ld"], last["lp"]))
            if log_every and (epoch0 + it) % log_every == 0:
                log.info("epoch %d  L=%.3e  L_data=%.3e  L_phys=%.3e", epoch0 + it, last["L"], last["ld"], last["lp"])

        res = lbfgs_minimize(objective, omega, config.lbfgs(budget), callback=on_accept)
        omega = res.x
        statuses.append(res.status)
        epoch0 += res.iterations

    meta = {
        "seed": seed,
        "epochs": config.epochs,
        "resample_at": config.resample_at,
        "epochs_run": epoch0,
        "status": statuses,
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(config).items()},
        "final_losses": {"L": history[-1][1], "L_data": history[-1][2], "L_phys": history[-1][3]},
    }
    return TrainingResult(NetworkModel(net, omega, domain.t_max, meta), history, statuses)


def write_history_csv(path, history) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,L,L_data,L_phys\n")
        for e, L, ld, lp in history:
            fh.write(f"{e},{L:.17g},{ld:.17g},{lp:.17g}\n")


# prediction -------------------------------------------------------------------

def self_loop_predict(model: NetworkModel, x0, controls, tau: float, t0: float = 0.0) -> Trajectory:
    """Chain one-interval predictions x_{k+1} = phi_hat(tau, x_k, u_k).

    Iterates outside the training state box are flagged on the trajectory
    (``out_of_domain``), never clamped.
    """
    if tau > model.tau_tilde + 1e-12:
        raise ValueError(f"tau={tau} exceeds the trained interval {model.tau_tilde}")
    controls = np.asarray(controls, dtype=float).reshape(-1, 2)
    norm = model.net.normalizer
    u_lo = norm.center[5:7] - norm.half_width[5:7]
    u_hi = norm.center[5:7] + norm.half_width[5:7]
    if np.any(controls < u_lo - 1e-12) or np.any(controls > u_hi + 1e-12):
        warnings.warn("controls outside the trained input box", RuntimeWarning, stacklevel=2)
    lo, hi = model.state_lower, model.state_upper
    states = [np.asarray(x0, dtype=float)]
    outside = []
    for k, u in enumerate(controls):
        states.append(model(tau, states[-1], u))
        if np.any(states[-1] < lo) or np.any(states[-1] > hi):
            outside.append(k + 1)
    return Trajectory(
        times=t0 + tau * np.arange(len(states)),
        states=np.array(states),
        controls=controls,
        source="surrogate",
        out_of_domain=bool(outside),
        out_of_domain_steps=outside,
    )
