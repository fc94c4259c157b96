import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pinnmpc import netcore
from pinnmpc.dynamics import default_manipulator, linear_test_model
from pinnmpc.integrators import flow
from pinnmpc.mpc import (REFERENCE_KINDS, ExactFlowPredictor, MpcConfig, SurrogatePredictor, closed_loop,
                         flow_sensitivity, ocp_gradient, ocp_objective, ocp_value_and_gradient, reference_generator,
                         shift_warm_start, solve_ocp, stage_cost)
from pinnmpc.netcore import Network, NetworkModel, NetworkTopology, init_weights
from pinnmpc.pinn import SamplingDomain

DOMAIN = SamplingDomain()
CFG = MpcConfig()


def random_surrogate(seed=0, hidden=(16, 16), zero=False):
    topo = NetworkTopology(hidden=hidden)
    w = init_weights(topo, seed)
    if zero:
        w = np.zeros_like(w)
    return NetworkModel(Network(topo, DOMAIN.normalizer()), w, DOMAIN.t_max)


class LinearPredictor:
    """x_{k+1} = A x_k + B u_k, a stand-in with a closed-form optimum."""

    def __init__(self, A, B):
        self.A, self.B = np.asarray(A, float), np.asarray(B, float)

    def predict(self, x, u):
        return self.A @ x + self.B @ u

    def vjp(self, x, u, v):
        return v @ self.A, v @ self.B

    def in_domain(self, x):
        return True


def test_config_validation():
    with pytest.raises(ValueError):
        MpcConfig(horizon=0)
    with pytest.raises(ValueError):
        MpcConfig(r_diag=(0.0, 1.0))
    with pytest.raises(ValueError):
        MpcConfig(q_diag=(-1.0, 0, 0, 0))
    assert CFG.tau == 0.2 and CFG.horizon == 5
    assert np.array_equal(CFG.Q, np.diag([1.0, 1.0, 0.0, 0.0]))


def test_stage_cost_examples():
    Q, R = CFG.Q, CFG.R
    x = np.array([0.3, -0.1, 1.0, 2.0])
    assert stage_cost(x, x, np.zeros(2), Q, R) == 0.0
    assert stage_cost([1, 0, 0, 0], np.zeros(4), np.zeros(2), Q, R) == 1.0
    assert stage_cost(np.zeros(4), [0, 0, 1, 1], [0.5, 0.5], Q, R) == pytest.approx(5e-7, rel=1e-12)


def test_objective_single_stage():
    sur = SurrogatePredictor(random_surrogate(), 0.2)
    cfg = MpcConfig(horizon=1)
    x, r, u = np.array([0.1, 0.2, 0, 0]), np.array([[0.5, -0.5, 0, 0]]), np.array([[0.3, -0.2]])
    assert ocp_objective(u, x, r, sur, cfg) == stage_cost(r[0], x, u[0], cfg.Q, cfg.R)


def test_objective_zero_on_own_rollout():
    sur = SurrogatePredictor(random_surrogate(1), 0.2)
    x = np.array([0.2, -0.1, 0.3, 0.0])
    refs = [x]
    for _ in range(4):
        refs.append(sur.predict(refs[-1], np.zeros(2)))
    assert ocp_objective(np.zeros((5, 2)), x, np.array(refs), sur, CFG) == 0.0


def test_objective_two_stage_hand_unrolled():
    sur = SurrogatePredictor(random_surrogate(2), 0.2)
    cfg = MpcConfig(horizon=2)
    rng = np.random.default_rng(0)
    x, refs, u = rng.normal(size=4) * 0.5, rng.normal(size=(2, 4)), rng.uniform(-0.5, 0.5, (2, 2))
    x1 = sur.predict(x, u[0])
    manual = stage_cost(refs[0], x, u[0], cfg.Q, cfg.R) + stage_cost(refs[1], x1, u[1], cfg.Q, cfg.R)
    assert ocp_objective(u, x, refs, sur, cfg) == pytest.approx(manual, rel=1e-14)


def fd_gradient(u, x, refs, pred, cfg, eps=1e-6):
    g = np.zeros_like(u)
    for k in range(u.shape[0]):
        for j in range(2):
            e = np.zeros_like(u)
            e[k, j] = eps
            g[k, j] = (ocp_objective(u + e, x, refs, pred, cfg) - ocp_objective(u - e, x, refs, pred, cfg)) / (2 * eps)
    return g


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gradient_matches_fd(seed):
    rng = np.random.default_rng(seed)
    sur = SurrogatePredictor(random_surrogate(seed % 7), 0.2)
    cfg = MpcConfig(r_diag=(1e-2, 1e-2))
    x = rng.uniform(DOMAIN.x_lower, DOMAIN.x_upper) * 0.5
    refs = rng.normal(size=(5, 4))
    u = rng.uniform(-0.5, 0.5, (5, 2))
    g = ocp_gradient(u, x, refs, sur, cfg)
    fd = fd_gradient(u, x, refs, sur, cfg)
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-8 * max(1.0, np.max(np.abs(fd))))


def test_gradient_pure_control_penalty():
    sur = SurrogatePredictor(random_surrogate(3), 0.2)
    cfg = MpcConfig(q_diag=(0, 0, 0, 0), r_diag=(1, 1))
    u = np.random.default_rng(1).uniform(-0.5, 0.5, (5, 2))
    g = ocp_gradient(u, np.zeros(4), np.ones((5, 4)), sur, cfg)
    assert np.array_equal(g, 2 * u)


def test_gradient_zero_network():
    sur = SurrogatePredictor(random_surrogate(zero=True), 0.2)
    u = np.random.default_rng(2).uniform(-0.5, 0.5, (5, 2))
    g = ocp_gradient(u, np.array([0.3, 0.1, 0, 0]), np.ones((5, 4)), sur, CFG)
    np.testing.assert_allclose(g, 2 * u @ CFG.R, rtol=0, atol=1e-15)


def test_solve_zero_optimal_on_own_rollout():
    sur = SurrogatePredictor(random_surrogate(4), 0.2)
    x = np.array([0.2, -0.1, 0.3, 0.0])
    refs = [x]
    for _ in range(4):
        refs.append(sur.predict(refs[-1], np.zeros(2)))
    sol = solve_ocp(x, np.array(refs), sur, CFG)
    assert np.array_equal(sol.u, np.zeros((5, 2))) and sol.J == 0.0 and sol.status == "converged"


def test_solve_pure_penalty_goes_to_zero():
    sur = SurrogatePredictor(random_surrogate(5), 0.2)
    cfg = MpcConfig(q_diag=(0, 0, 0, 0), r_diag=(1, 1))
    sol = solve_ocp(np.zeros(4), np.ones((5, 4)), sur, cfg, warm_start=np.full((5, 2), 0.4))
    np.testing.assert_allclose(sol.u, 0.0, atol=1e-6)


def test_solve_linear_stub_matches_least_squares():
    rng = np.random.default_rng(3)
    A = np.eye(4) + 0.1 * rng.normal(size=(4, 4))
    B = rng.normal(size=(4, 2))
    pred = LinearPredictor(A, B)
    cfg = MpcConfig(q_diag=(1, 1, 1, 1), r_diag=(0.1, 0.1), u_lower=(-1e3, -1e3), u_upper=(1e3, 1e3), max_iter=5000, gtol=1e-10)
    H = cfg.horizon
    x0 = rng.normal(size=4)
    refs = rng.normal(size=(H, 4)) * 0.3
    # stacked prediction x_k = A^k x0 + sum_j A^(k-1-j) B u_j, then normal equations
    G = np.zeros((4 * H, 2 * H))
    c = np.zeros(4 * H)
    for k in range(H):
        c[4 * k:4 * k + 4] = np.linalg.matrix_power(A, k) @ x0
        for j in range(k):
            G[4 * k:4 * k + 4, 2 * j:2 * j + 2] = np.linalg.matrix_power(A, k - 1 - j) @ B
    Qb = np.kron(np.eye(H), cfg.Q)
    Rb = np.kron(np.eye(H), cfg.R)
    u_star = np.linalg.solve(G.T @ Qb @ G + Rb, G.T @ Qb @ (refs.ravel() - c)).reshape(H, 2)
    sol = solve_ocp(x0, refs, pred, cfg)
    np.testing.assert_allclose(sol.u, u_star, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_solution_feasible_and_no_worse_than_warm_start(seed):
    rng = np.random.default_rng(seed)
    sur = SurrogatePredictor(random_surrogate(seed % 5), 0.2)
    cfg = MpcConfig(max_iter=15)
    x = rng.uniform(DOMAIN.x_lower, DOMAIN.x_upper) * 0.5
    refs = rng.normal(size=(5, 4))
    warm = rng.uniform(-0.8, 0.8, (5, 2))
    sol = solve_ocp(x, refs, sur, cfg, warm_start=warm)
    assert np.all(sol.u >= -0.5) and np.all(sol.u <= 0.5)
    assert sol.J <= ocp_objective(cfg.project(warm), x, refs, sur, cfg)
    assert sol.J <= sol.J_start


def test_shift_warm_start():
    u = np.arange(10.0).reshape(5, 2)
    assert np.array_equal(shift_warm_start(u), np.array([[2, 3], [4, 5], [6, 7], [8, 9], [8, 9]], dtype=float))


def test_reference_generator():
    r = reference_generator("reversal", 16.0, 0.2)
    assert len(r.times) == 81
    assert np.all(r.states[0] == 0.0) and np.allclose(r.states[-1], 0.0)
    for j in (2, 3):
        v = r.states[:, j]
        assert np.any(v > 1e-6) and np.any(v < -1e-6)
    # velocity columns are the derivative of the position columns
    np.testing.assert_allclose(np.gradient(r.states[:, 0], 0.2)[1:-1], r.states[1:-1, 2], atol=0.02)
    w = r.window(79, 5)
    assert np.array_equal(w[1:], np.repeat(r.states[-1:], 4, axis=0))
    assert np.all(reference_generator("equilibrium", 4.0, 0.2).states == 0.0)
    with pytest.raises(ValueError):
        reference_generator("circle")
    with pytest.raises(ValueError):
        reference_generator("reversal", 1.05, 0.2)
    assert set(REFERENCE_KINDS) == {"reversal", "equilibrium"}


def test_flow_sensitivity_matches_fd():
    m = default_manipulator()
    x0, u = np.array([0.3, -0.5, 1.0, -0.8]), np.array([0.2, -0.3])
    phi, Sx, Su = flow_sensitivity(m, 0.2, u, x0)
    np.testing.assert_allclose(phi, flow(m, 0.2, u, x0), atol=1e-9)
    eps = 1e-6
    for i in range(4):
        e = np.zeros(4)
        e[i] = eps
        np.testing.assert_allclose(Sx[:, i], (flow(m, 0.2, u, x0 + e) - flow(m, 0.2, u, x0 - e)) / (2 * eps), rtol=1e-5, atol=1e-6)
    for j in range(2):
        e = np.zeros(2)
        e[j] = eps
        np.testing.assert_allclose(Su[:, j], (flow(m, 0.2, u + e, x0) - flow(m, 0.2, u - e, x0)) / (2 * eps), rtol=1e-5, atol=1e-6)



@pytest.mark.parametrize("x0, u", [
    ([0.3, -0.5, 1.0, -0.8], [0.2, -0.3]),
    ([0.0, 0.0, 0.0, 0.0], [0.0, 0.0]),  # equilibrium: zero real error must not hide the derivative error
])
def test_complex_step_and_variational_sensitivities_agree(x0, u):
    m = default_manipulator()
    x0, u = np.array(x0), np.array(u)
    a = flow_sensitivity(m, 0.2, u, x0, method="complex-step")
    b = flow_sensitivity(m, 0.2, u, x0, method="variational")
    for p, q in zip(a, b):
        np.testing.assert_allclose(p, q, rtol=1e-7, atol=1e-8)

def test_exact_predictor_on_linear_model():
    m = linear_test_model(omega0=2.0, damping=0.5)
    pred = ExactFlowPredictor(m, 0.2)
    x, u = np.array([0.3, -0.2, 0.1, 0.4]), np.array([0.1, 0.2])
    np.testing.assert_allclose(pred.predict(x, u), m.exact_flow(0.2, u, x), atol=1e-6)


def test_surrogate_predictor_rejects_long_tau():
    with pytest.raises(ValueError):
        SurrogatePredictor(random_surrogate(), 0.3)


def test_closed_loop_equilibrium():
    sur = SurrogatePredictor(random_surrogate(zero=True), 0.2)
    refs = reference_generator("equilibrium", 2.0, 0.2)
    res = closed_loop(default_manipulator(), sur, refs, CFG, 2.0)
    assert len(res.solve_times) == 10 and res.trajectory.n_intervals == 10
    assert np.all(res.mae < 1e-6)
    np.testing.assert_allclose(res.controls, 0.0, atol=1e-6)
    m = res.metrics(CFG)
    assert m["H"] == 5 and m["tau"] == 0.2 and m["steps"] == 10


def test_closed_loop_step_count():
    sur = SurrogatePredictor(random_surrogate(zero=True), 0.2)
    res = closed_loop(default_manipulator(), sur, reference_generator("reversal", 16.0, 0.2), MpcConfig(max_iter=1), 16.0)
    assert len(res.solve_times) == 80 and len(res.trajectory.states) == 81


def test_closed_loop_deterministic():
    sur = SurrogatePredictor(random_surrogate(6), 0.2)
    refs = reference_generator("reversal", 16.0, 0.2)
    cfg = MpcConfig(max_iter=5)
    a = closed_loop(default_manipulator(), sur, refs, cfg, 1.0)
    b = closed_loop(default_manipulator(), sur, refs, cfg, 1.0)
    assert a.trajectory.states.tobytes() == b.trajectory.states.tobytes()
    assert a.controls.tobytes() == b.controls.tobytes()
