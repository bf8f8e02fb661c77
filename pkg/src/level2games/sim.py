"""Receding-horizon fictitious play and observation generation.

Every agent repeatedly solves the game it believes it is playing (its row of
the ground-truth parameter set), executes its own slice of that plan for a
few steps, and the true joint state advances under everybody's executed
controls.  No agent updates its beliefs; disagreement between the rows is
what produces deadlocks, swerves, and late lane changes.  Because each agent
predicts the others incorrectly, the executed trajectory can drift off every
agent's plan, including past the planned safety margin; such violations are
recorded, not prevented.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import mcp as mcp_mod
from .game_model import (
    Level2ParamSet,
    ObservationModel,
    ObservationSequence,
    ParameterizedGame,
    TrajectoryBundle,
    step_dynamics,
)

__all__ = [
    "SimSettings",
    "SimRecord",
    "run_fictitious_play",
    "observe",
    "lane_change_time",
    "warm_start_shift",
    "POSITION_OBSERVATION",
]

# planar position selector on a (p_lat, p_lon, v_lat, v_lon) block
POSITION_OBSERVATION = np.array([[1.0, 0.0, 0.0, 0.0],
                                 [0.0, 1.0, 0.0, 0.0]])


@dataclass(frozen=True)
class SimSettings:
    sim_steps: int = 150
    plan_horizon: int = 15
    replan_every: int = 3
    noise_c: float = 0.1
    seed: int = 42
    solver: mcp_mod.MCPSettings = field(default_factory=mcp_mod.MCPSettings)

    def __post_init__(self):
        if self.replan_every > self.plan_horizon:
            raise ValueError("replan interval exceeds the planning horizon")
        if self.sim_steps < self.plan_horizon:
            raise ValueError("simulation must cover at least one planning horizon")


@dataclass
class SimRecord:
    executed: TrajectoryBundle
    plans: dict                 # replan step -> {agent: (X_plan, U_plan)}
    solver_stats: list
    aborted: Optional[tuple] = None   # (step, agent, message) when a replan failed

    @property
    def completed(self) -> bool:
        return self.aborted is None


def warm_start_shift(problem: mcp_mod.MCPProblem,
                     previous_plan: Optional[mcp_mod.MCPSolution],
                     current_state: np.ndarray, shift: int) -> np.ndarray:
    """Initial guess for a replan: shifted previous plan or zero-control rollout.

    Cold start (no previous plan): states follow a zero-control rollout from
    the current state, controls and all multipliers are zero.  Warm start:
    the previous primal trajectory shifts forward by ``shift`` steps with a
    zero-control tail, multipliers shift with zero padding, and the first
    state is pinned to the current state.
    """
    if previous_plan is None:
        z0 = mcp_mod.cold_start_guess(problem)
        return z0
    return mcp_mod.shift_guess(problem, previous_plan.z_star, shift,
                               x_init=current_state)


def run_fictitious_play(game: ParameterizedGame, ground_truth: Level2ParamSet,
                        settings: SimSettings) -> SimRecord:
    """Simulate mutually-oblivious planning under heterogeneous beliefs.

    At every replan step each agent solves its hypothesized game from the
    current true joint state (warm-started from its previous plan) and
    commits its own controls for the next ``replan_every`` steps.  A solver
    failure aborts the run; the partial record and the failing agent and step
    are returned in ``aborted``.
    """
    n = game.n_agents
    if ground_truth.n_agents != n:
        raise ValueError("parameter set does not match the game")
    game_T = game.with_horizon(settings.plan_horizon)
    u_slices = game.control_slices()
    m = sum(game.control_dims)

    X = np.zeros((settings.sim_steps, game.state_dim))
    U = np.zeros((settings.sim_steps, m))
    x = np.asarray(game.x_init, dtype=float).copy()
    prev = {}
    plans = {}
    stats = []
    plan_U = None
    offset = 0

    for s in range(settings.sim_steps):
        if s % settings.replan_every == 0:
            current = {}
            lo = None
            for i in range(n):
                problem = mcp_mod.transcribe(game_T, ground_truth.row(i), x)
                lo = problem.layout
                z0 = warm_start_shift(problem, prev.get(i), x, settings.replan_every)
                sol = mcp_mod.solve_mcp(problem, z0=z0, settings=settings.solver)
                stats.append({"step": s, "agent": i, "status": sol.status,
                              "iterations": sol.iterations,
                              "residual": sol.residual_norm})
                if not sol.converged:
                    executed = TrajectoryBundle(X[:s + 1], U[:s + 1])
                    return SimRecord(executed=executed, plans=plans,
                                     solver_stats=stats,
                                     aborted=(s, i, sol.status))
                current[i] = sol
            prev = current
            u_start = lo.n_x if game.dynamics.kind == "shared-linear" else lo.off_u
            plan_U = {}
            plan_X = {}
            for i in range(n):
                z = current[i].z_star
                plan_X[i] = z[:lo.n_x].reshape(settings.plan_horizon, game.state_dim)
                plan_U[i] = z[u_start:u_start + settings.plan_horizon * m].reshape(
                    settings.plan_horizon, m)
            plans[s] = {i: (plan_X[i].copy(), plan_U[i].copy()) for i in range(n)}
            offset = 0
        X[s] = x
        u = np.zeros(m)
        for i in range(n):
            u[u_slices[i]] = plan_U[i][offset, u_slices[i]]
        U[s] = u
        offset += 1
        if s + 1 < settings.sim_steps:
            x = step_dynamics(game, x, u)

    executed = TrajectoryBundle(X, U)
    return SimRecord(executed=executed, plans=plans, solver_stats=stats)


def observe(record: SimRecord, noise_c: float, seed: int,
            availability: Optional[np.ndarray] = None,
            observation: Optional[ObservationModel] = None) -> ObservationSequence:
    """Noisy position measurements of the executed trajectory.

    Each available entry is G(x^i_t) + noise_c * zeta with zeta drawn i.i.d.
    standard normal from a generator seeded by ``seed``; identical inputs
    reproduce the sequence bit for bit.
    """
    X = record.executed.X
    steps = X.shape[0]
    if observation is None:
        observation = ObservationModel(kind="state", G=POSITION_OBSERVATION,
                                       noise_scale=noise_c)
    G = observation.G
    block = G.shape[1]
    n_agents = X.shape[1] // block
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((steps, n_agents, G.shape[0]))
    values = np.zeros((steps, n_agents, G.shape[0]))
    for i in range(n_agents):
        own = X[:, i * block:(i + 1) * block]
        values[:, i, :] = own @ G.T + noise_c * noise[:, i, :]
    if availability is None:
        mask = np.ones((steps, n_agents), dtype=bool)
    else:
        mask = np.asarray(availability, dtype=bool)
        if mask.shape != (steps, n_agents):
            raise ValueError("availability mask shape mismatch")
    return ObservationSequence(values, mask, observation)


def lane_change_time(record: SimRecord, agent: int, target_lat: float,
                     tol: float) -> Optional[int]:
    """Earliest 1-based step from which the agent holds the target lane to the end.

    Returns ``None`` when the lateral offset never settles within ``tol``.
    """
    lat = record.executed.X[:, agent * 4]
    ok = np.abs(lat - target_lat) <= tol
    # suffix scan: last index where ok fails
    holds_from = None
    for t in range(len(ok) - 1, -1, -1):
        if not ok[t]:
            break
        holds_from = t
    if holds_from is None:
        return None
    return holds_from + 1
