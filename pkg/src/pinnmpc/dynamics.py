"""Rigid-body models of the form M(q) q'' + k(q, q') = h(q, q') + B u.

States are stacked as x = [alpha, beta, dalpha, dbeta]; every function accepts
leading batch dimensions (``q`` of shape ``(..., 2)``, ``x`` of shape ``(..., 4)``).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STATE_DIM = 4
CONTROL_DIM = 2

_COMPLEX_STEP = 1e-30


class SingularMassMatrixError(ArithmeticError):
    """The 2x2 mass-matrix solve is numerically singular."""


@dataclass(frozen=True)
class GeneralizedState:
    q: np.ndarray
    qdot: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float).reshape(2))
        object.__setattr__(self, "qdot", np.asarray(self.qdot, dtype=float).reshape(2))
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.qdot))):
            raise ValueError("state entries must be finite")

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.qdot])

    @classmethod
    def from_vector(cls, x) -> "GeneralizedState":
        x = np.asarray(x, dtype=float)
        return cls(x[:2], x[2:4])


@dataclass(frozen=True)
class ControlInput:
    u: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "u", np.asarray(self.u, dtype=float).reshape(2))
        if not np.all(np.isfinite(self.u)):
            raise ValueError("control entries must be finite")

    def within(self, lower, upper) -> bool:
        return bool(np.all(self.u >= np.asarray(lower)) and np.all(self.u <= np.asarray(upper)))


@dataclass(frozen=True)
class ManipulatorParams:
    """Physical constants of the rotary-arm / hanging-pendulum manipulator.

    ``J_A`` is the arm inertia about the vertical joint-A axis, ``r_A`` the
    distance from that axis to joint B, ``l_B`` the distance from joint B to the
    centre of mass of link B, ``J_B`` the link-B inertia about its centre of mass.
    ``mu`` enables a smooth Coulomb term ``mu * tanh(qdot / coulomb_eps)``.

    The viscous default ``d = (2, 2)`` keeps velocities reached from the
    training box under held inputs within a few rad/s; with light friction
    they exceed 20 rad/s within one interval.
    """

    J_A: float = 0.05
    m_B: float = 1.0
    r_A: float = 0.3
    l_B: float = 0.25
    J_B: float = 0.01
    d: tuple[float, float] = (2.0, 2.0)
    k_m: tuple[float, float] = (10.0, 10.0)
    g: float = 9.81
    mu: tuple[float, float] = (0.0, 0.0)
    coulomb_eps: float = 1e-2

    def __post_init__(self):
        object.__setattr__(self, "d", tuple(float(v) for v in self.d))
        object.__setattr__(self, "k_m", tuple(float(v) for v in self.k_m))
        object.__setattr__(self, "mu", tuple(float(v) for v in self.mu))
        for name in ("J_A", "m_B", "r_A", "l_B", "J_B", "coulomb_eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if len(self.d) != 2 or min(self.d) < 0:
            raise ValueError("friction pair d must be two nonnegative numbers")
        if len(self.k_m) != 2 or min(self.k_m) <= 0:
            raise ValueError("motor constants k_m must be two positive numbers")
        if len(self.mu) != 2 or min(self.mu) < 0:
            raise ValueError("Coulomb pair mu must be two nonnegative numbers")
        if self.g < 0:
            raise ValueError("gravity must be nonnegative")

    @property
    def J1(self) -> float:
        return self.J_A + self.m_B * self.r_A**2

    @property
    def J2(self) -> float:
        return self.J_B + self.m_B * self.l_B**2

    @property
    def coupling(self) -> float:
        return self.m_B * self.r_A * self.l_B


def mass_matrix(q, p: ManipulatorParams) -> np.ndarray:
    q = np.asarray(q)
    beta = q[..., 1]
    s, c = np.sin(beta), np.cos(beta)
    M = np.empty(beta.shape + (2, 2), dtype=np.result_type(beta, float))
    M[..., 0, 0] = p.J1 + p.J2 * s * s
    M[..., 0, 1] = M[..., 1, 0] = p.coupling * c
    M[..., 1, 1] = p.J2
    return M


def mass_matrix_grad(q, p: ManipulatorParams) -> np.ndarray:
    """``dM[..., i, j, k] = dM_ij / dq_k``."""
    q = np.asarray(q)
    beta = q[..., 1]
    s, c = np.sin(beta), np.cos(beta)
    out = np.zeros(beta.shape + (2, 2, 2), dtype=np.result_type(beta, float))
    out[..., 0, 0, 1] = 2.0 * p.J2 * s * c
    out[..., 0, 1, 1] = -p.coupling * s
    out[..., 1, 0, 1] = -p.coupling * s
    return out


def christoffel_bias(dM: np.ndarray, qdot) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(C, k)`` with ``k = C qdot`` from Christoffel symbols of the first kind.

    ``Gamma_ijk = (dM_ij/dq_k + dM_ik/dq_j - dM_jk/dq_i) / 2`` and
    ``C_ij = sum_k Gamma_ijk qdot_k``; this choice makes ``Mdot - 2C`` skew.
    """
    qdot = np.asarray(qdot)
    gamma = 0.5 * (dM + np.swapaxes(dM, -1, -2) - np.moveaxis(dM, -1, -3))
    C = (gamma @ qdot[..., None, :, None])[..., 0]
    k = (C @ qdot[..., :, None])[..., 0]
    return C, k


def bias_forces(q, qdot, p: ManipulatorParams) -> np.ndarray:
    return christoffel_bias(mass_matrix_grad(q, p), qdot)[1]


def coriolis_matrix(q, qdot, p: ManipulatorParams) -> np.ndarray:
    return christoffel_bias(mass_matrix_grad(q, p), qdot)[0]


def applied_forces(q, qdot, p: ManipulatorParams) -> np.ndarray:
    q = np.asarray(q)
    qdot = np.asarray(qdot)
    gravity = np.zeros(np.broadcast_shapes(q.shape, qdot.shape), dtype=np.result_type(q, qdot, float))
    gravity[..., 1] = -p.m_B * p.g * p.l_B * np.sin(q[..., 1])
    h = gravity - np.asarray(p.d) * qdot
    if any(p.mu):
        h = h - np.asarray(p.mu) * np.tanh(qdot / p.coulomb_eps)
    return h


@dataclass(frozen=True)
class Manipulator:
    """Two-link rotary manipulator (arm about a vertical axis, pendulum link B)."""

    params: ManipulatorParams = field(default_factory=ManipulatorParams)
    state_dim: int = STATE_DIM
    control_dim: int = CONTROL_DIM

    def mass_matrix(self, q):
        return mass_matrix(q, self.params)

    def mass_matrix_grad(self, q):
        return mass_matrix_grad(q, self.params)

    def bias_forces(self, q, qdot):
        return bias_forces(q, qdot, self.params)

    def applied_forces(self, q, qdot):
        return applied_forces(q, qdot, self.params)

    @property
    def input_matrix(self) -> np.ndarray:
        return np.diag(self.params.k_m)

    def closed_form_rhs(self, x, u) -> np.ndarray:
        """f(x, u) with M, k, h written out; same result as the generic path, a few times cheaper."""
        p = self.params
        J1, J2, cpl = p.J1, p.J2, p.coupling
        x = np.asarray(x)
        u = np.asarray(u)
        beta, a, b = x[..., 1], x[..., 2], x[..., 3]
        s, c = np.sin(beta), np.cos(beta)
        m00 = J1 + J2 * (s * s)
        m01 = cpl * c
        det = J2 * m00 - m01 * m01
        # for real angles det >= J1 J2 - cpl^2 > 0; complex-step inputs stay within 1e-8 of real
        if J1 * J2 <= cpl * cpl * (1.0 + 1e-12) or (
            np.iscomplexobj(beta) and np.max(np.abs(beta.imag), initial=0.0) > 1e-8
        ):
            if np.any(np.abs(det) <= 1e-12 * np.maximum(np.abs(m00), J2) ** 2):
                raise SingularMassMatrixError("mass matrix is numerically singular")
        # bias k = Mdot qdot - 1/2 d/dq (qdot' M qdot)
        sa = s * a
        f0 = p.k_m[0] * u[..., 0] - p.d[0] * a - (2.0 * J2 * c * b) * sa + (cpl * b * b) * s
        f1 = p.k_m[1] * u[..., 1] - p.d[1] * b + (J2 * c * a * a - p.m_B * p.g * p.l_B) * s
        if p.mu[0] or p.mu[1]:
            f0 = f0 - p.mu[0] * np.tanh(a / p.coulomb_eps)
            f1 = f1 - p.mu[1] * np.tanh(b / p.coulomb_eps)
        inv = 1.0 / det
        return np.stack([a, b, (J2 * f0 - m01 * f1) * inv, (m00 * f1 - m01 * f0) * inv], axis=-1)

    def energy(self, x) -> np.ndarray:
        """Kinetic plus gravitational energy, zero at the hanging rest position."""
        x = np.asarray(x)
        q, qd = x[..., :2], x[..., 2:]
        kinetic = 0.5 * np.einsum("...i,...ij,...j->...", qd, self.mass_matrix(q), qd)
        p = self.params
        return kinetic + p.m_B * p.g * p.l_B * (1.0 - np.cos(q[..., 1]))


@dataclass(frozen=True)
class LinearTestModel:
    """Two decoupled damped oscillators with unit mass; closed-form ZOH flow."""

    omega0: tuple[float, float] = (1.0, 1.0)
    damping: tuple[float, float] = (0.0, 0.0)
    gain: tuple[float, float] = (1.0, 1.0)
    state_dim: int = STATE_DIM
    control_dim: int = CONTROL_DIM

    def __post_init__(self):
        for name in ("omega0", "damping", "gain"):
            v = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (2,))
            object.__setattr__(self, name, tuple(float(a) for a in v))
        if min(self.omega0) <= 0:
            raise ValueError("omega0 must be positive")

    def mass_matrix(self, q):
        q = np.asarray(q)
        return np.broadcast_to(np.eye(2), q.shape[:-1] + (2, 2)).astype(np.result_type(q, float))

    def mass_matrix_grad(self, q):
        q = np.asarray(q)
        return np.zeros(q.shape[:-1] + (2, 2, 2), dtype=np.result_type(q, float))

    def bias_forces(self, q, qdot):
        return np.zeros(np.broadcast_shapes(np.shape(q), np.shape(qdot)), dtype=np.result_type(q, qdot, float))

    def applied_forces(self, q, qdot):
        w2 = np.square(self.omega0)
        return -w2 * np.asarray(q) - np.asarray(self.damping) * np.asarray(qdot)

    @property
    def input_matrix(self) -> np.ndarray:
        return np.diag(self.gain)

    def energy(self, x) -> np.ndarray:
        x = np.asarray(x)
        return 0.5 * np.sum(np.square(self.omega0) * x[..., :2] ** 2 + x[..., 2:] ** 2, axis=-1)

    def exact_flow(self, t, u, x0) -> np.ndarray:
        """Closed-form solution under a held input (underdamped or critically/overdamped)."""
        x0 = np.asarray(x0, dtype=float)
        u = np.asarray(u, dtype=float)
        t = np.asarray(t, dtype=float)[..., None]
        w2 = np.square(self.omega0)
        c = np.asarray(self.damping)
        # shift to the forced equilibrium q* = b u / w^2, then free response
        qs = np.asarray(self.gain) * u / w2
        y0 = x0[..., :2] - qs
        v0 = x0[..., 2:]
        sigma = c / 2.0
        disc = w2 - sigma**2
        wd = np.sqrt(np.abs(disc))
        e = np.exp(-sigma * t)
        with np.errstate(divide="ignore", invalid="ignore"):
            osc = disc > 0
            cosf = np.where(osc, np.cos(wd * t), np.cosh(wd * t))
            sinc = np.where(wd > 0, np.where(osc, np.sin(wd * t), np.sinh(wd * t)) / np.where(wd > 0, wd, 1.0), t)
            dsinc = np.where(osc, -wd * np.sin(wd * t), wd * np.sinh(wd * t))
        a = y0
        b = v0 + sigma * y0
        y = e * (a * cosf + b * sinc)
        dy = -sigma * y + e * (a * dsinc + b * cosf)
        return np.concatenate([y + qs, dy], axis=-1)


def linear_test_model(omega0=1.0, damping=0.0, gain=1.0) -> LinearTestModel:
    return LinearTestModel(omega0=omega0, damping=damping, gain=gain)


def default_manipulator() -> Manipulator:
    return Manipulator(ManipulatorParams())


def _check_solvable(M: np.ndarray) -> np.ndarray:
    """Determinant of each 2x2 block; raises when it is negligible against the entries."""
    m00, m01, m10, m11 = M[..., 0, 0], M[..., 0, 1], M[..., 1, 0], M[..., 1, 1]
    det = m00 * m11 - m01 * m10
    scale = np.maximum(np.maximum(np.abs(m00), np.abs(m11)), np.maximum(np.abs(m01), np.abs(m10))) ** 2
    if np.any(np.abs(det) <= 1e-12 * np.maximum(scale, 1e-300)):
        raise SingularMassMatrixError("mass matrix is numerically singular")
    return det


def generalized_forces(x, u, model) -> np.ndarray:
    """Right-hand side ``h - k + B u`` of the second-order equations."""
    x = np.asarray(x)
    q, qd = x[..., :2], x[..., 2:]
    Bu = np.asarray(u) @ model.input_matrix.T
    return model.applied_forces(q, qd) - model.bias_forces(q, qd) + Bu


def rhs(x, u, model) -> np.ndarray:
    """First-order vector field f(x, u) = [qdot; M(q)^-1 (h - k + B u)].

    The 2x2 system is solved by Cramer's rule (no inverse is formed), which is
    cheaper than a LAPACK call for single points and complex-step inputs.
    """
    fast = getattr(model, "closed_form_rhs", None)
    if fast is not None:
        return fast(x, u)
    return generic_rhs(x, u, model)


def generic_rhs(x, u, model) -> np.ndarray:
    """rhs assembled from mass_matrix, bias_forces and applied_forces."""
    x = np.asarray(x)
    M = model.mass_matrix(x[..., :2])
    det = _check_solvable(M)
    f = generalized_forces(x, u, model)
    a0 = (M[..., 1, 1] * f[..., 0] - M[..., 0, 1] * f[..., 1]) / det
    a1 = (M[..., 0, 0] * f[..., 1] - M[..., 1, 0] * f[..., 0]) / det
    return np.concatenate([x[..., 2:], a0[..., None], a1[..., None]], axis=-1)


def residual(x, xdot, u, model) -> np.ndarray:
    """Mass-matrix form residual blkdiag(I, M(q)) xdot - [qdot; h - k + B u]."""
    x = np.asarray(x)
    xdot = np.asarray(xdot)
    M = model.mass_matrix(x[..., :2])
    kin = xdot[..., :2] - x[..., 2:]
    dyn = np.einsum("...ij,...j->...i", M, xdot[..., 2:]) - generalized_forces(x, u, model)
    return np.concatenate([kin, dyn], axis=-1)


def residual_vjp(x, xdot, u, model, cotangent) -> tuple[np.ndarray, np.ndarray]:
    """Pull a cotangent on the residual back to ``(x, xdot)``.

    The state Jacobian is taken by complex-step differentiation, which is exact
    to rounding for analytic models (all model pieces here are analytic).
    """
    x = np.asarray(x, dtype=float)
    xdot = np.asarray(xdot, dtype=float)
    cot = np.asarray(cotangent, dtype=float)
    M = model.mass_matrix(x[..., :2])
    g_xdot = np.concatenate([cot[..., :2], np.einsum("...ji,...j->...i", M, cot[..., 2:])], axis=-1)
    # all four complex-step directions in one batched residual call
    n = x.shape[-1]
    xc = np.broadcast_to(x[..., None, :], x.shape[:-1] + (n, n)).astype(complex)
    xc += 1j * _COMPLEX_STEP * np.eye(n)
    dF = residual(xc, xdot[..., None, :], np.asarray(u)[..., None, :], model).imag / _COMPLEX_STEP
    g_x = np.einsum("...ji,...i->...j", dF, cot)
    return g_x, g_xdot


def rhs_jacobian(x, u, model) -> tuple[np.ndarray, np.ndarray]:
    """``(df/dx, df/du)`` by complex step; shapes ``(..., 4, 4)`` and ``(..., 4, 2)``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    n, m = x.shape[-1], u.shape[-1]
    batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    # directions 0..n-1 perturb x, n..n+m-1 perturb u; one batched rhs call
    xc = np.broadcast_to(x[..., None, :], batch + (n + m, n)).astype(complex)
    uc = np.broadcast_to(u[..., None, :], batch + (n + m, m)).astype(complex)
    xc[..., :n, :] += 1j * _COMPLEX_STEP * np.eye(n)
    uc[..., n:, :] += 1j * _COMPLEX_STEP * np.eye(m)
    J = rhs(xc, uc, model).imag / _COMPLEX_STEP  # (..., n + m, n): row j is df/dz_j
    J = np.swapaxes(J, -1, -2)
    return J[..., :n].copy(), J[..., n:].copy()
