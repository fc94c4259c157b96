"""Fixed-structure tanh network phi_hat(t, x0, u; omega) and its derivatives.

Everything is written as explicit layer recursions. The forward pass can carry
a tangent along the time input, so losses that contain d phi_hat / dt can be
differentiated with respect to the weights by running the reverse sweep over
both the primal and tangent streams.

Weight layout: for each layer in order, the ``(fan_out, fan_in)`` weight matrix
in row-major order followed by its bias vector.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

FORMAT_VERSION = 1
STATE_SLICE = slice(1, 5)
CONTROL_SLICE = slice(5, 7)


class DimensionMismatchError(ValueError):
    pass


class NonFiniteGradientError(ArithmeticError):
    pass


@dataclass(frozen=True)
class NetworkTopology:
    hidden: tuple[int, ...] = (64, 64, 64)
    input_dim: int = 7
    output_dim: int = 4
    activation: str = "tanh"
    hard_ic: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        if not self.hidden or min(self.hidden) <= 0:
            raise ValueError("hidden widths must be positive")
        if self.activation != "tanh":
            raise ValueError("only the tanh activation is supported")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden, self.output_dim)
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes)


@dataclass(frozen=True, eq=False)
class InputNormalizer:
    """Affine map of (t, x0, u) onto [-1, 1]^7; the state block doubles as the output scaling."""

    center: np.ndarray
    half_width: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(-1)
        hw = np.asarray(self.half_width, dtype=float).reshape(-1)
        if c.shape != hw.shape:
            raise DimensionMismatchError("center and half_width differ in length")
        if np.any(hw <= 0):
            raise ValueError("half widths must be positive")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_width", hw)

    @classmethod
    def from_box(cls, t_max, x_lo, x_hi, u_lo, u_hi) -> "InputNormalizer":
        lo = np.concatenate([[0.0], x_lo, u_lo])
        hi = np.concatenate([[t_max], x_hi, u_hi])
        return cls(0.5 * (lo + hi), 0.5 * (hi - lo))

    @property
    def t_max(self) -> float:
        return float(self.center[0] + self.half_width[0])

    @property
    def state_center(self) -> np.ndarray:
        return self.center[STATE_SLICE]

    @property
    def state_half_width(self) -> np.ndarray:
        return self.half_width[STATE_SLICE]

    def normalize(self, z):
        return (np.asarray(z) - self.center) / self.half_width

    def denormalize(self, s):
        return np.asarray(s) * self.half_width + self.center


@dataclass(frozen=True, eq=False)
class Network:
    topology: NetworkTopology
    normalizer: InputNormalizer

    def __post_init__(self):
        if self.normalizer.center.shape != (self.topology.input_dim,):
            raise DimensionMismatchError("normalizer does not match the input dimension")


def unflatten(topology: NetworkTopology, omega) -> list[tuple[np.ndarray, np.ndarray]]:
    omega = np.asarray(omega, dtype=float)
    if omega.shape != (topology.n_params,):
        raise DimensionMismatchError(f"expected {topology.n_params} weights, got {omega.shape}")
    layers, pos = [], 0
    for o, i in topology.layer_shapes:
        W = omega[pos : pos + o * i].reshape(o, i)
        pos += o * i
        b = omega[pos : pos + o]
        pos += o
        layers.append((W, b))
    return layers


def flatten(layers) -> np.ndarray:
    return np.concatenate([np.concatenate([W.ravel(), b.ravel()]) for W, b in layers])


def init_weights(topology: NetworkTopology, seed) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for o, i in topology.layer_shapes:
        limit = np.sqrt(6.0 / (i + o))
        layers.append((rng.uniform(-limit, limit, size=(o, i)), np.zeros(o)))
    return flatten(layers)


def _stack_inputs(net: Network, t, x0, u) -> tuple[np.ndarray, tuple, np.ndarray]:
    x0 = np.asarray(x0, dtype=float)
    u = np.asarray(u, dtype=float)
    if x0.shape[-1:] != (4,) or u.shape[-1:] != (2,):
        raise DimensionMismatchError("x0 must end in 4 and u in 2 entries")
    batch = np.broadcast_shapes(np.shape(t), x0.shape[:-1], u.shape[:-1])
    z = np.concatenate(
        [
            np.broadcast_to(np.asarray(t, dtype=float), batch)[..., None],
            np.broadcast_to(x0, batch + (4,)),
            np.broadcast_to(u, batch + (2,)),
        ],
        axis=-1,
    ).reshape(-1, 7)
    return net.normalizer.normalize(z), batch, z


@dataclass
class _Pass:
    s: np.ndarray
    acts: list  # a_0 = s, a_1..a_L-1 hidden activations
    dacts: list  # time tangents of hidden activations (None when not requested)
    dz: list
    y: np.ndarray
    dy: np.ndarray | None


def _run(layers, s, dt_in, tangent: bool) -> _Pass:
    a = s
    acts, dacts, dzs = [s], [None], [None]
    da = None
    for li, (W, b) in enumerate(layers[:-1]):
        z = a @ W.T + b
        a_new = np.tanh(z)
        if tangent:
            dz = (W[:, 0] * dt_in)[None, :] if li == 0 else da @ W.T
            da = (1.0 - a_new * a_new) * dz
            dzs.append(dz)
            dacts.append(da)
        a = a_new
        acts.append(a)
    W, b = layers[-1]
    y = a @ W.T + b
    dy = da @ W.T if tangent else None
    return _Pass(s, acts, dacts, dzs, y, dy)


def _outputs(net: Network, p: _Pass, tangent: bool, z: np.ndarray):
    norm = net.normalizer
    hw, c = norm.state_half_width, norm.state_center
    if net.topology.hard_ic:
        # x0 taken unnormalized so that t = 0 returns it bit for bit
        tn = (p.s[:, :1] + 1.0) * 0.5
        x = z[:, STATE_SLICE] + hw * (tn * p.y)
        xdot = hw * (p.y / norm.t_max + tn * p.dy) if tangent else None
        return x, xdot
    x = c + hw * p.y
    xdot = hw * p.dy if tangent else None
    return x, xdot


def forward(net: Network, omega, t, x0, u) -> np.ndarray:
    """phi_hat(t, x0, u; omega); batch dimensions broadcast across the arguments."""
    s, batch, z = _stack_inputs(net, t, x0, u)
    p = _run(unflatten(net.topology, omega), s, 0.0, tangent=False)
    x, _ = _outputs(net, p, False, z)
    return x.reshape(batch + (4,))


def forward_with_time_derivative(net: Network, omega, t, x0, u) -> tuple[np.ndarray, np.ndarray]:
    s, batch, z = _stack_inputs(net, t, x0, u)
    p = _run(unflatten(net.topology, omega), s, 1.0 / net.normalizer.half_width[0], tangent=True)
    x, xdot = _outputs(net, p, True, z)
    return x.reshape(batch + (4,)), xdot.reshape(batch + (4,))


def time_derivative(net: Network, omega, t, x0, u) -> np.ndarray:
    """Exact d phi_hat / dt through a forward tangent along the time input."""
    return forward_with_time_derivative(net, omega, t, x0, u)[1]


def _weight_backward(net: Network, layers, p: _Pass, gx, gxdot) -> np.ndarray:
    norm = net.normalizer
    hw = norm.state_half_width
    tangent = gxdot is not None
    go = gx * hw
    god = gxdot * hw if tangent else None
    if net.topology.hard_ic:
        tn = (p.s[:, :1] + 1.0) * 0.5
        gy = tn * go + (god / norm.t_max if tangent else 0.0)
        gdy = tn * god if tangent else None
    else:
        gy, gdy = go, god

    grads = []
    W, _ = layers[-1]
    a_prev, da_prev = p.acts[-1], p.dacts[-1]
    gW = gy.T @ a_prev
    if tangent:
        gW += gdy.T @ da_prev
    grads.append((gW, gy.sum(axis=0)))
    ga = gy @ W
    gda = gdy @ W if tangent else None
    dt_in = 1.0 / norm.half_width[0]

    for li in range(len(layers) - 2, -1, -1):
        W, _ = layers[li]
        a = p.acts[li + 1]
        d = 1.0 - a * a
        gz = ga * d
        if tangent:
            gz -= 2.0 * (gda * p.dz[li + 1]) * (a * d)
            gdz = gda * d
        a_prev = p.acts[li]
        gW = gz.T @ a_prev
        if tangent:
            if li == 0:
                gW[:, 0] += gdz.sum(axis=0) * dt_in
            else:
                gW += gdz.T @ p.dacts[li]
        grads.append((gW, gz.sum(axis=0)))
        if li > 0:
            ga = gz @ W
            gda = gdz @ W if tangent else None
    grads.reverse()
    return flatten(grads)


LossEvaluator = Callable[[np.ndarray, np.ndarray | None, slice], tuple[float, np.ndarray, np.ndarray | None]]


@dataclass
class BatchPlan:
    """How a batch gradient is split: fixed contiguous chunks, reduced in index order."""

    chunk_size: int | None = None
    workers: int = 1

    def chunks(self, n: int) -> list[slice]:
        size = n if not self.chunk_size else self.chunk_size
        return [slice(i, min(n, i + size)) for i in range(0, n, max(size, 1))]


def loss_weight_gradient(
    net: Network,
    omega,
    t,
    x0,
    u,
    loss_evaluator: LossEvaluator,
    needs_time: bool = True,
    plan: BatchPlan | None = None,
) -> tuple[float, np.ndarray]:
    """Value and exact weight gradient of an additive batch loss.

    ``loss_evaluator(x_hat, xdot_hat, rows)`` receives the network output (and
    its time derivative when ``needs_time``) for the rows ``rows`` of the batch
    and returns ``(partial value, dL/dx_hat, dL/dxdot_hat)``. Partial values of
    the chunks are summed in chunk order, so the loss must be a sum over points.
    """
    plan = plan or BatchPlan()
    layers = unflatten(net.topology, omega)
    s_all, _, z_all = _stack_inputs(net, t, x0, u)
    n = len(s_all)
    if n == 0:
        return 0.0, np.zeros(net.topology.n_params)
    dt_in = 1.0 / net.normalizer.half_width[0]

    def work(rows: slice):
        p = _run(layers, s_all[rows], dt_in, tangent=needs_time)
        x, xdot = _outputs(net, p, needs_time, z_all[rows])
        val, gx, gxdot = loss_evaluator(x, xdot, rows)
        return val, _weight_backward(net, layers, p, gx, gxdot if needs_time else None)

    chunks = plan.chunks(n)
    if plan.workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(plan.workers) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    value = 0.0
    grad = np.zeros(net.topology.n_params)
    for v, g in parts:
        value += v
        grad += g
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError("weight gradient has nonfinite entries")
    return float(value), grad


def input_gradient(net: Network, omega, t, x0, u, seed_covector) -> tuple[np.ndarray, np.ndarray]:
    """Vector-Jacobian product v^T d phi_hat / d(x0, u) by a reverse sweep."""
    v = np.asarray(seed_covector, dtype=float)
    s, batch, _ = _stack_inputs(net, t, x0, u)
    if v.shape[-1:] != (4,):
        raise DimensionMismatchError("seed covector must have 4 entries")
    v = np.broadcast_to(v, batch + (4,)).reshape(-1, 4)
    layers = unflatten(net.topology, omega)
    p = _run(layers, s, 0.0, tangent=False)
    norm = net.normalizer
    go = v * norm.state_half_width
    gs_direct = np.zeros_like(s)
    if net.topology.hard_ic:
        tn = (s[:, :1] + 1.0) * 0.5
        gs_direct[:, STATE_SLICE] = go
        gy = tn * go
    else:
        gy = go
    ga = gy @ layers[-1][0]
    for li in range(len(layers) - 2, -1, -1):
        a = p.acts[li + 1]
        ga = (ga * (1.0 - a * a)) @ layers[li][0]
    gin = (ga + gs_direct) / norm.half_width
    gx0 = gin[:, STATE_SLICE].reshape(batch + (4,))
    gu = gin[:, CONTROL_SLICE].reshape(batch + (2,))
    return gx0, gu


@dataclass
class NetworkModel:
    """A trained surrogate: architecture, scaling, weights and bookkeeping."""

    net: Network
    omega: np.ndarray
    tau_tilde: float
    metadata: dict = field(default_factory=dict)

    def __call__(self, t, x0, u):
        return forward(self.net, self.omega, t, x0, u)

    def input_gradient(self, t, x0, u, seed_covector):
        return input_gradient(self.net, self.omega, t, x0, u, seed_covector)

    @property
    def state_lower(self) -> np.ndarray:
        return self.net.normalizer.state_center - self.net.normalizer.state_half_width

    @property
    def state_upper(self) -> np.ndarray:
        return self.net.normalizer.state_center + self.net.normalizer.state_half_width


def _fmt(v: float) -> str:
    return f"{float(v):.17g}"


def dumps_checkpoint(model: NetworkModel) -> str:
    topo = model.net.topology
    norm = model.net.normalizer
    header = {
        "format_version": FORMAT_VERSION,
        "topology": {
            "hidden": list(topo.hidden),
            "input_dim": topo.input_dim,
            "output_dim": topo.output_dim,
            "hard_ic": topo.hard_ic,
        },
        "activation": topo.activation,
        "normalizer": {"center": "@C", "half_width": "@H"},
        "tau_tilde": "@T",
        "training": model.metadata,
        "weights": "@W",
    }
    text = json.dumps(header, indent=1, sort_keys=False)
    arr = lambda a: "[" + ", ".join(_fmt(v) for v in a) + "]"  # noqa: E731
    return (
        text.replace('"@C"', arr(norm.center))
        .replace('"@H"', arr(norm.half_width))
        .replace('"@T"', _fmt(model.tau_tilde))
        .replace('"@W"', arr(model.omega))
        + "\n"
    )


def loads_checkpoint(text: str) -> NetworkModel:
    data = json.loads(text)
    if data.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {data.get('format_version')!r}")
    topo = NetworkTopology(activation=data["activation"], **{**data["topology"], "hidden": tuple(data["topology"]["hidden"])})
    norm = InputNormalizer(np.array(data["normalizer"]["center"]), np.array(data["normalizer"]["half_width"]))
    omega = np.array(data["weights"], dtype=float)
    if omega.shape != (topo.n_params,):
        raise DimensionMismatchError("checkpoint weights do not match topology")
    return NetworkModel(Network(topo, norm), omega, float(data["tau_tilde"]), data.get("training", {}))


def save_checkpoint(path, model: NetworkModel) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_checkpoint(model))


def load_checkpoint(path) -> NetworkModel:
    with open(path) as fh:
        return loads_checkpoint(fh.read())
