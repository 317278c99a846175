"""Workflow orchestration: data collection, training, certification, evaluation.

Everything here is driven by a :class:`~knodempc.config.RunConfig` and the
master seed; per-artifact seeds come from :func:`~knodempc.config.sub_seed`
with stable labels, so each stage is reproducible in isolation.

Scheme labels used in metrics records:

* prediction models: ``nominal``, ``member_<j>``, ``ensemble_equal``,
  ``ensemble_different``;
* closed-loop controllers: ``nominal_mpc``, ``knode_mpc_<j>``,
  ``enknode_mpc_equal``, ``enknode_mpc_different``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import plants
from .certify import (
    CertificationReport,
    TerminalIngredients,
    apply_certificate,
    certify_terminal_set,
    linearize,
    make_terminal_ingredients,
    shift_equilibrium,
)
from .config import RunConfig, sub_seed
from .ensemble import (
    KnodeEnsemble,
    SplitSpec,
    WeightOptConfig,
    ensemble_residual,
    equal_weights,
    holdout_loss,
    member_predictions,
    optimize_weights,
    split_dataset,
)
from .knode import TrainingConfig, TrajectoryDataset, predict_transitions, train_knode, TrainingDivergedError
from .net import MlpParams, mlp_forward
from .nmpc import MpcController, OcpConfig, SqpSettings, QpSettings
from .ode import DynamicsFn, IntegratorConfig, SimulationAborted, Trajectory, discretize, simulate_closed_loop

__all__ = [
    "ReferencePlan",
    "TrainResult",
    "true_dynamics",
    "nominal_dynamics",
    "state_projection",
    "make_reference",
    "make_predictor",
    "member_residual",
    "ensemble_residual_fn",
    "terminal_ingredients_for",
    "run_certification",
    "build_controller",
    "run_closed_loop",
    "collect_dataset",
    "train_members",
    "prediction_mse",
    "steady_state_error",
    "evaluate",
]

ResidualFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


# ----------------------------------------------------------------------
# Plant wiring
# ----------------------------------------------------------------------


def _pendulum_params(cfg: RunConfig, true_plant: bool) -> plants.PendulumParams:
    pp = cfg.plant_params
    mass = pp["mass_true"] if true_plant else pp["mass_nominal"]
    return plants.PendulumParams(m=mass, l=pp["length"], g=pp["gravity"])


def _quadrotor_params(cfg: RunConfig) -> plants.QuadrotorParams:
    pp = cfg.plant_params
    return plants.QuadrotorParams(
        m=pp["mass"], inertia_diag=tuple(pp["inertia_diag"]),
        g=pp["gravity"], drag_diag=tuple(pp["drag_diag"]),
    )


def true_dynamics(cfg: RunConfig) -> DynamicsFn:
    if cfg.plant == "pendulum":
        return plants.pendulum_dynamics(_pendulum_params(cfg, true_plant=True))
    return plants.quadrotor_dynamics(_quadrotor_params(cfg), disturbed=True)


def nominal_dynamics(cfg: RunConfig) -> DynamicsFn:
    if cfg.plant == "pendulum":
        return plants.pendulum_dynamics(_pendulum_params(cfg, true_plant=False))
    return plants.quadrotor_dynamics(_quadrotor_params(cfg), disturbed=False)


def state_projection(cfg: RunConfig):
    return plants.quadrotor_renormalize if cfg.plant == "quadrotor" else None


def nominal_id(cfg: RunConfig) -> str:
    if cfg.plant == "pendulum":
        pp = cfg.plant_params
        return f"pendulum:m={pp['mass_nominal']},l={pp['length']},g={pp['gravity']}"
    pp = cfg.plant_params
    return f"quadrotor:m={pp['mass']},g={pp['gravity']}"


def equilibrium(cfg: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    """Regulation point: pendulum upright at zero torque, quadrotor hover."""
    if cfg.plant == "pendulum":
        return np.zeros(2), np.zeros(1)
    return plants.hover_state(), plants.hover_input(_quadrotor_params(cfg))


# ----------------------------------------------------------------------
# References
# ----------------------------------------------------------------------


@dataclass
class ReferencePlan:
    """Precomputed state/input references plus metadata for metrics."""

    Xref: np.ndarray  # (K, n) with K >= steps + horizon + 1
    Uref: np.ndarray  # (K, m)
    meta: dict = field(default_factory=dict)

    def provider(self):
        last = self.Xref.shape[0] - 1

        def ref(k: int):
            i = min(max(k, 0), last)
            return self.Xref[i], self.Uref[i]

        return ref


def make_reference(cfg: RunConfig, seed: int, duration: float, params: dict) -> ReferencePlan:
    """Build the tracking reference, padded by one horizon for lookahead."""
    pad = (cfg.mpc.horizon + 2) * cfg.dt
    if cfg.plant == "pendulum":
        theta = plants.step_reference(
            seed, duration + pad, cfg.dt,
            magnitude_range=tuple(params["magnitude"]), hold_range=tuple(params["hold"]),
        )
        Xref = np.stack([theta, np.zeros_like(theta)], axis=-1)
        Uref = np.zeros((theta.shape[0], 1))
        return ReferencePlan(Xref, Uref, {"kind": "step", "theta": theta})
    pos, vel = plants.circle_reference(
        params["radius"], params["speed"], seed, duration + pad, cfg.dt,
        altitude=params.get("altitude", 1.0),
    )
    K = pos.shape[0]
    Xref = np.zeros((K, 13))
    Xref[:, plants.POS] = pos
    Xref[:, plants.VEL] = vel
    Xref[:, plants.QUAT.start] = 1.0
    Uref = np.tile(plants.hover_input(_quadrotor_params(cfg)), (K, 1))
    return ReferencePlan(Xref, Uref, {"kind": "circle", "radius": params["radius"],
                                      "speed": params["speed"]})


def _draw_reference_params(cfg: RunConfig, rng: np.random.Generator) -> dict:
    """Evaluation references: scalar entries stay, 2-ranges are drawn uniformly."""
    out = {}
    for key, value in cfg.evaluate.reference.items():
        if isinstance(value, (list, tuple)) and len(value) == 2 and key in ("radius", "speed"):
            out[key] = float(rng.uniform(value[0], value[1]))
        else:
            out[key] = value
    return out


def _draw_initial_state(cfg: RunConfig, plan: ReferencePlan, rng: np.random.Generator) -> np.ndarray:
    delta = np.asarray(cfg.evaluate.x0_delta, float)
    if cfg.plant == "pendulum":
        return rng.uniform(-delta, delta)
    x0 = plan.Xref[0].copy()
    x0[plants.POS] += rng.uniform(-delta, delta)
    return x0


def collection_initial_state(cfg: RunConfig, plan: ReferencePlan) -> np.ndarray:
    if cfg.plant == "pendulum":
        return np.asarray(cfg.data.x0, float)
    return plan.Xref[0].copy()


# ----------------------------------------------------------------------
# Prediction models
# ----------------------------------------------------------------------


def member_residual(member: MlpParams) -> ResidualFn:
    return lambda x, u: mlp_forward(member, np.concatenate([x, u], axis=-1))


def ensemble_residual_fn(nominal: DynamicsFn, members: list[MlpParams], weights: np.ndarray) -> ResidualFn:
    ens = KnodeEnsemble(nominal, members, np.asarray(weights, float))
    return lambda x, u: ensemble_residual(ens, x, u)


def make_predictor(cfg: RunConfig, nominal: DynamicsFn, residual: ResidualFn | None):
    """Discrete prediction model for the controller (frozen-field one-step)."""
    dt = cfg.dt

    def model(x: np.ndarray, u: np.ndarray, k: int) -> np.ndarray:
        return predict_transitions(nominal, residual, x, u, k * dt, dt)

    model.step_invariant = True  # both plants are time-invariant
    return model


def true_discrete_map(cfg: RunConfig):
    """The actual plant step (RK4 plus state projection)."""
    return discretize(true_dynamics(cfg), cfg.dt, cfg.substeps, state_projection(cfg))


def true_model_predictor(cfg: RunConfig):
    step = true_discrete_map(cfg)

    def model(x, u, k):
        return step(x, u)

    model.step_invariant = True
    return model


# ----------------------------------------------------------------------
# Certification wiring
# ----------------------------------------------------------------------


def _certifiable_map(cfg: RunConfig, model: str, members=None, weights=None):
    if model == "true":
        return true_discrete_map(cfg)
    if model == "nominal":
        pred = make_predictor(cfg, nominal_dynamics(cfg), None)
    elif model == "ensemble":
        if members is None or weights is None:
            raise ValueError("ensemble certification needs members and weights")
        pred = make_predictor(cfg, nominal_dynamics(cfg),
                              ensemble_residual_fn(nominal_dynamics(cfg), members, weights))
    else:
        raise ValueError(f"unknown certification model {model!r}")
    # certification maps keep the state projection (quaternion renormalization):
    # without it the quaternion-norm direction is an uncontrollable unit mode
    # and the Riccati iteration cannot converge
    project = state_projection(cfg)
    if project is None:
        return lambda x, u: pred(x, u, 0)
    return lambda x, u: project(pred(x, u, 0))


def terminal_ingredients_for(cfg: RunConfig, model: str = "nominal",
                             members=None, weights=None) -> TerminalIngredients:
    """Linearize the chosen discrete map at the regulation point and build P."""
    f = _certifiable_map(cfg, model, members, weights)
    x_eq, u_eq = equilibrium(cfg)
    lin = linearize(f, x_eq, u_eq)
    Q = np.diag(cfg.mpc.q_diag)
    R = np.diag(cfg.mpc.r_diag)
    return make_terminal_ingredients(lin.A, lin.B, Q, R, cfg.mpc.rho)


def run_certification(cfg: RunConfig, model: str | None = None, members=None, weights=None
                      ) -> tuple[TerminalIngredients, CertificationReport]:
    model = model or cfg.certify.model
    f = _certifiable_map(cfg, model, members, weights)
    x_eq, u_eq = equilibrium(cfg)
    ing = terminal_ingredients_for(cfg, model, members, weights)
    shifted = shift_equilibrium(f, x_eq, u_eq)
    u_lo = np.asarray(cfg.mpc.u_lo, float) - u_eq
    u_hi = np.asarray(cfg.mpc.u_hi, float) - u_eq
    report = certify_terminal_set(
        shifted, ing, u_lo, u_hi, cfg.certify.delta,
        n_samples=cfg.certify.n_samples, seed=sub_seed(cfg.seed, "certify"),
        hessian_points=cfg.certify.hessian_points,
    )
    return apply_certificate(ing, report), report


# ----------------------------------------------------------------------
# Controllers and closed-loop runs
# ----------------------------------------------------------------------


def solver_settings(cfg: RunConfig) -> SqpSettings:
    return SqpSettings(
        max_iterations=cfg.mpc.sqp_max_iterations,
        qp=QpSettings(max_iter=cfg.mpc.qp_max_iterations),
    )


def build_controller(
    cfg: RunConfig,
    predictor,
    plan: ReferencePlan,
    ing: TerminalIngredients,
    enforce_terminal_set: bool | None = None,
    record_telemetry: bool = False,
) -> MpcController:
    enforce = cfg.mpc.enforce_terminal_set if enforce_terminal_set is None else enforce_terminal_set
    ocp = OcpConfig(
        N=cfg.mpc.horizon,
        Q=np.diag(cfg.mpc.q_diag),
        R=np.diag(cfg.mpc.r_diag),
        P=ing.P,
        model=predictor,
        reference=plan.provider(),
        x_lo=np.asarray(cfg.mpc.x_lo, float),
        x_hi=np.asarray(cfg.mpc.x_hi, float),
        u_lo=np.asarray(cfg.mpc.u_lo, float),
        u_hi=np.asarray(cfg.mpc.u_hi, float),
        gamma=ing.gamma,
        enforce_terminal_set=enforce,
    )
    return MpcController(ocp, solver_settings(cfg), record_telemetry=record_telemetry)


def run_closed_loop(cfg: RunConfig, controller: MpcController, x0: np.ndarray, steps: int
                    ) -> tuple[Trajectory, list]:
    solutions = []

    def act(x, k):
        u, sol = controller.step(x, k)
        solutions.append(sol)
        return u

    traj = simulate_closed_loop(
        true_dynamics(cfg), x0, act, steps, IntegratorConfig(cfg.dt),
        substeps=cfg.substeps, project=state_projection(cfg),
    )
    return traj, solutions


# ----------------------------------------------------------------------
# Data collection and training
# ----------------------------------------------------------------------


def dataset_from_trajectory(traj: Trajectory, meta: dict) -> TrajectoryDataset:
    """Keep one ``(t, x, u)`` sample per applied input (final state dropped)."""
    return TrajectoryDataset(traj.t[:-1].copy(), traj.x[:-1].copy(), traj.u.copy(), meta)


def collect_dataset(cfg: RunConfig) -> TrajectoryDataset:
    """Closed loop under nominal-model MPC tracking the configured reference."""
    plan = make_reference(cfg, sub_seed(cfg.seed, "collect-ref"), cfg.data.duration,
                          cfg.data.reference)
    ing = terminal_ingredients_for(cfg, "nominal")
    predictor = make_predictor(cfg, nominal_dynamics(cfg), None)
    controller = build_controller(cfg, predictor, plan, ing, enforce_terminal_set=False)
    steps = int(round(cfg.data.duration / cfg.dt))
    traj, _ = run_closed_loop(cfg, controller, collection_initial_state(cfg, plan), steps)
    meta = {
        "plant": cfg.plant,
        "dt": cfg.dt,
        "controller": "nominal_mpc",
        "seed": cfg.seed,
        "config_sha256": cfg.sha256(),
    }
    return dataset_from_trajectory(traj, meta)


@dataclass
class TrainResult:
    members: list[MlpParams]
    member_seeds: list[int]
    hidden_sizes: list[int]
    histories: list[np.ndarray]
    weights_optimized: np.ndarray
    weights_equal: np.ndarray
    holdout_losses: dict
    split: SplitSpec
    failures: list[dict]


def train_members(cfg: RunConfig, dataset: TrajectoryDataset) -> TrainResult:
    """Train the member networks, then optimize mixing weights on the hold-out."""
    split = SplitSpec(cfg.data.split_fraction)
    train_set, holdout = split_dataset(dataset, split)
    nominal = nominal_dynamics(cfg)
    n, m = dataset.state_dim, dataset.input_dim

    widths = list(cfg.ensemble.hidden_sizes)[: cfg.ensemble.n_members]
    members: list[MlpParams] = []
    seeds: list[int] = []
    histories: list[np.ndarray] = []
    kept_widths: list[int] = []
    failures: list[dict] = []
    for j, width in enumerate(widths):
        seed = sub_seed(cfg.seed, "member", j)
        hyper = TrainingConfig(cfg.training.epochs, cfg.training.learning_rate,
                               cfg.training.weight_decay, [n + m, int(width), n], seed)
        try:
            model, history = train_knode(nominal, train_set, hyper)
        except TrainingDivergedError as exc:
            failures.append({"member": j, "width": int(width), "epoch": exc.epoch})
            continue
        members.append(model.residual)
        seeds.append(seed)
        histories.append(history)
        kept_widths.append(int(width))
    if not members:
        raise RuntimeError("every ensemble member diverged during training")

    L = len(members)
    w_eq = equal_weights(L)
    opt_cfg = WeightOptConfig(cfg.weights.epochs, cfg.weights.learning_rate,
                              cfg.weights.weight_decay, cfg.weights.nonnegative)
    w_opt = optimize_weights(members, nominal, holdout, opt_cfg)

    preds, targets = member_predictions(members, nominal, holdout)
    base = predict_transitions(nominal, None, holdout.x[:-1], holdout.u[:-1],
                               holdout.t[:-1], holdout.dt)
    losses = {
        "nominal": float(np.mean(np.sum((base - holdout.x[1:]) ** 2, axis=1))),
        "equal": holdout_loss(w_eq, preds, targets),
        "optimized": holdout_loss(w_opt, preds, targets),
        "members": [holdout_loss(np.eye(L)[j], preds, targets) for j in range(L)],
    }
    # the sum-to-one-only relaxation is always reported alongside
    relaxed = optimize_weights(members, nominal, holdout,
                               WeightOptConfig(opt_cfg.epochs, opt_cfg.learning_rate,
                                               opt_cfg.weight_decay, nonnegative=False))
    losses["optimized_unconstrained_sign"] = holdout_loss(relaxed, preds, targets)

    return TrainResult(members, seeds, kept_widths, histories, w_opt, w_eq, losses, split, failures)


# ----------------------------------------------------------------------
# Metrics helpers
# ----------------------------------------------------------------------


def prediction_mse(cfg: RunConfig, nominal: DynamicsFn, residual: ResidualFn | None,
                   data: TrajectoryDataset) -> float:
    pred = predict_transitions(nominal, residual, data.x[:-1], data.u[:-1], data.t[:-1], data.dt)
    return float(np.mean(np.sum((pred - data.x[1:]) ** 2, axis=1)))


def steady_state_error(err: np.ndarray, reference: np.ndarray, tail_fraction: float = 0.25) -> float:
    """Mean absolute error over the tail of every hold segment of a step reference."""
    segments = plants.hold_segments(reference[: err.shape[0]])
    collected = []
    for a, b in segments:
        span = b - a
        if span < 8:
            continue
        start = b - max(1, int(np.floor(tail_fraction * span)))
        collected.append(np.abs(err[start:b]))
    if not collected:
        return float(np.mean(np.abs(err)))
    return float(np.mean(np.concatenate(collected)))


def _closed_loop_metrics(cfg: RunConfig, traj: Trajectory, plan: ReferencePlan) -> tuple[dict, np.ndarray]:
    steps = traj.steps
    Xref = plan.Xref[: steps + 1]
    if cfg.plant == "pendulum":
        err = traj.x[:, 0] - Xref[:, 0]
        out = {
            "angle_mse": float(np.mean(err**2)),
            "steady_state_error": steady_state_error(err, Xref[:, 0]),
        }
        return out, np.abs(err)
    pos_err = traj.x[:, plants.POS] - Xref[:, plants.POS]
    vel_err = traj.x[:, plants.VEL] - Xref[:, plants.VEL]
    out = {
        "position_mse": float(np.mean(np.sum(pos_err**2, axis=1))),
        "velocity_mse": float(np.mean(np.sum(vel_err**2, axis=1))),
    }
    return out, np.linalg.norm(pos_err, axis=1)


# ----------------------------------------------------------------------
# Full evaluation
# ----------------------------------------------------------------------


def _prediction_schemes(cfg: RunConfig, members, w_eq, w_opt) -> dict:
    nominal = nominal_dynamics(cfg)
    schemes: dict[str, ResidualFn | None] = {"nominal": None}
    for j, member in enumerate(members):
        schemes[f"member_{j}"] = member_residual(member)
    schemes["ensemble_equal"] = ensemble_residual_fn(nominal, members, w_eq)
    schemes["ensemble_different"] = ensemble_residual_fn(nominal, members, w_opt)
    return schemes


def _controller_schemes(cfg: RunConfig, members, w_eq, w_opt) -> dict:
    nominal = nominal_dynamics(cfg)
    schemes: dict[str, ResidualFn | None] = {}
    if cfg.evaluate.closedloop_nominal:
        schemes["nominal_mpc"] = None
    for j, member in enumerate(members):
        schemes[f"knode_mpc_{j}"] = member_residual(member)
    schemes["enknode_mpc_equal"] = ensemble_residual_fn(nominal, members, w_eq)
    schemes["enknode_mpc_different"] = ensemble_residual_fn(nominal, members, w_opt)
    return schemes


def evaluate(cfg: RunConfig, members: list[MlpParams], w_opt: np.ndarray,
             w_eq: np.ndarray | None = None) -> tuple[dict, dict]:
    """Prediction-accuracy and closed-loop comparison over seeded test runs.

    Returns ``(record, series)`` where ``record`` holds per-run metric blocks
    and ``series``  maps closed-loop scheme -> (t, {run label: error series}).
    Failed runs are recorded per scheme and excluded from the per-run lists.
    """
    w_eq = equal_weights(len(members)) if w_eq is None else w_eq
    nominal = nominal_dynamics(cfg)
    ing = terminal_ingredients_for(cfg, "nominal")
    nominal_predictor = make_predictor(cfg, nominal, None)

    pred_schemes = _prediction_schemes(cfg, members, w_eq, w_opt)
    pred_per_run: dict[str, list] = {name: [] for name in pred_schemes}
    failures: dict[str, int] = {}

    steps_pred = int(round(cfg.evaluate.duration / cfg.dt))
    for r in range(cfg.evaluate.n_runs):
        rng = np.random.default_rng(sub_seed(cfg.seed, "eval-pred", r))
        plan = make_reference(cfg, sub_seed(cfg.seed, "eval-pred-ref", r),
                              cfg.evaluate.duration, _draw_reference_params(cfg, rng))
        x0 = _draw_initial_state(cfg, plan, rng)
        controller = build_controller(cfg, nominal_predictor, plan, ing,
                                      enforce_terminal_set=False)
        try:
            traj, _ = run_closed_loop(cfg, controller, x0, steps_pred)
        except SimulationAborted:
            failures["test_trajectory"] = failures.get("test_trajectory", 0) + 1
            continue
        data = dataset_from_trajectory(traj, {})
        for name, residual in pred_schemes.items():
            pred_per_run[name].append(prediction_mse(cfg, nominal, residual, data))

    ctl_schemes = _controller_schemes(cfg, members, w_eq, w_opt)
    cl_metric_names = (
        ["angle_mse", "steady_state_error"] if cfg.plant == "pendulum"
        else ["position_mse", "velocity_mse"]
    )
    cl_per_run: dict[str, dict[str, list]] = {
        metric: {name: [] for name in ctl_schemes} for metric in cl_metric_names
    }
    steps_cl = int(round(cfg.evaluate.closedloop_duration / cfg.dt))
    series: dict[str, dict] = {name: {} for name in ctl_schemes}
    t_axis = np.arange(steps_cl + 1) * cfg.dt

    for r in range(cfg.evaluate.n_closedloop_runs):
        rng = np.random.default_rng(sub_seed(cfg.seed, "eval-cl", r))
        plan = make_reference(cfg, sub_seed(cfg.seed, "eval-cl-ref", r),
                              cfg.evaluate.closedloop_duration, _draw_reference_params(cfg, rng))
        x0 = _draw_initial_state(cfg, plan, rng)
        for name, residual in ctl_schemes.items():
            predictor = make_predictor(cfg, nominal, residual)
            controller = build_controller(cfg, predictor, plan, ing,
                                          enforce_terminal_set=False)
            try:
                traj, _ = run_closed_loop(cfg, controller, x0, steps_cl)
            except SimulationAborted:
                failures[name] = failures.get(name, 0) + 1
                continue
            values, err_series = _closed_loop_metrics(cfg, traj, plan)
            for metric, value in values.items():
                cl_per_run[metric][name].append(value)
            series[name][f"run_{r}"] = err_series

    record: dict = {
        "plant": cfg.plant,
        "prediction_mse": {"per_run": pred_per_run},
        "failures": failures,
    }
    for metric in cl_metric_names:
        record[f"closed_loop_{metric}"] = {"per_run": cl_per_run[metric]}
    series_out = {name: (t_axis, runs) for name, runs in series.items()}
    return record, series_out
