"""Physics-informed network surrogate of a two-link manipulator's ZOH flow map, and MPC on top of it."""
from .dynamics import LinearTestModel, Manipulator, ManipulatorParams, default_manipulator, linear_test_model, rhs
from .integrators import IntegratorSpec, Trajectory, flow, simulate_zoh
from .mpc import ExactFlowPredictor, MpcConfig, SurrogatePredictor, closed_loop, reference_generator, solve_ocp
from .netcore import Network, NetworkModel, NetworkTopology, load_checkpoint, save_checkpoint
from .pinn import SamplingDomain, TrainingConfig, self_loop_predict, train

__version__ = "0.1.0"
