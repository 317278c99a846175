"""Neural-residual dynamics ensembles inside a certifiable nonlinear MPC loop."""

from .certify import (
    CertificationReport,
    LinearModel,
    TerminalIngredients,
    certify_terminal_set,
    dlqr,
    linearize,
    make_terminal_ingredients,
    solve_dlyap,
)
from .ensemble import KnodeEnsemble, SplitSpec, equal_weights, optimize_weights, split_dataset
from .knode import KnodeModel, TrajectoryDataset, knode_loss, one_step_predict, train_knode
from .net import AdamState, MlpParams, adam_step, mlp_backward, mlp_forward, mlp_init
from .nmpc import MpcController, OcpConfig, OcpSolution, solve_ocp
from .ode import DynamicsFn, IntegratorConfig, Trajectory, integrate_interval, rk4_step, simulate_closed_loop

__version__ = "0.1.0"
