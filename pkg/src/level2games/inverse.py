"""Gradient-based inference of level-2 parameter sets from observed behavior.

The loss measures, for every agent i and time t with an available
observation, half the squared gap between the observation and the prediction
extracted from agent i's own slice of the equilibrium of its hypothesized
game.  Gradients flow through the equilibrium via closed-form KKT
differentiation (LQ games) or implicit differentiation of the
complementarity system (constrained games).  The descent loop supports a
backtracking line search or a fixed step, positive-semidefinite projection of
quadratic cost blocks, and box clipping of parameters; a level-1 variant
restricts the search to homogeneous parameter sets.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import lq as lq_mod
from . import mcp as mcp_mod
from .game_model import Level2ParamSet, ObservationSequence, ParameterizedGame

__all__ = [
    "InverseSettings",
    "InverseResult",
    "OnlineInferenceResult",
    "EquilibriumSolveError",
    "LQBackend",
    "MCPBackend",
    "default_backend",
    "level2_loss",
    "level2_loss_gradient",
    "solve_inverse",
    "solve_inverse_level1",
    "project_psd",
    "online_infer",
]


class EquilibriumSolveError(RuntimeError):
    def __init__(self, agent, message):
        super().__init__(f"equilibrium solve failed for agent {agent}: {message}")
        self.agent = agent


@dataclass(frozen=True)
class InverseSettings:
    """Hyperparameters of the descent loop."""

    max_iter: int = 100
    step: float = 0.1
    decay: float = 0.5
    convergence_threshold: float = 0.0
    mode: str = "backtracking-line-search"   # or "fixed-step"
    psd_projection: bool = False
    param_bounds: Optional[tuple] = None     # (lower, upper) applied entrywise

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.step <= 0:
            raise ValueError("step must be positive")
        if not 0.0 < self.decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")
        if self.convergence_threshold < 0:
            raise ValueError("convergence threshold must be nonnegative")
        if self.mode not in ("backtracking-line-search", "fixed-step"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class InverseResult:
    theta_hat: Level2ParamSet
    loss_history: list
    status: str            # converged | max_iter
    per_agent_solutions: dict


@dataclass
class OnlineInferenceResult:
    times: list
    estimates: list
    losses: list
    statuses: list


class LQBackend:
    """Closed-form hypothesized equilibria for shared-linear games."""

    def __init__(self, game: ParameterizedGame):
        if game.dynamics.kind != "shared-linear":
            raise ValueError("LQBackend needs a shared-linear game")
        self.game = game

    def solve(self, row, agent, x_init=None):
        problem = mcp_mod.transcribe(self.game, row, x_init)
        try:
            eq = lq_mod.solve_lq_equilibrium(problem._kkt)
        except lq_mod.SingularKKTError as exc:
            raise EquilibriumSolveError(agent, str(exc)) from exc
        return problem, eq.zbar

    def prediction(self, problem, z, agent, model):
        return _extract_prediction(problem, z, agent, model)

    def prediction_jacobian(self, problem, z, agent, model):
        rhs = problem.eq_jac_theta(z)
        dz = -np.linalg.solve(problem._kkt.M, rhs)
        return _extract_prediction_jacobian(problem, dz, agent, model)


class MCPBackend:
    """Equilibria via the complementarity solver, warm-started per agent."""

    def __init__(self, game: ParameterizedGame, settings: Optional[mcp_mod.MCPSettings] = None):
        self.game = game
        self.settings = settings or mcp_mod.MCPSettings()
        self._warm = {}

    def reset_warm_starts(self):
        self._warm.clear()

    def solve(self, row, agent, x_init=None):
        problem = mcp_mod.transcribe(self.game, row, x_init)
        z0 = self._warm.get(agent)
        if z0 is not None and z0.shape != (problem.dim,):
            z0 = None
        sol = mcp_mod.solve_mcp(problem, z0=z0, settings=self.settings)
        if not sol.converged:
            self._warm.pop(agent, None)
            raise EquilibriumSolveError(
                agent, f"status {sol.status}, residual {sol.residual_norm:.2e}")
        self._warm[agent] = sol.z_star
        return problem, sol

    def prediction(self, problem, sol, agent, model):
        return _extract_prediction(problem, sol.z_star, agent, model)

    def prediction_jacobian(self, problem, sol, agent, model):
        dz = mcp_mod.sensitivity(problem, sol, eps_act=self.settings.eps_act)
        return _extract_prediction_jacobian(problem, dz, agent, model)


def default_backend(game: ParameterizedGame):
    if game.dynamics.kind == "shared-linear":
        return LQBackend(game)
    return MCPBackend(game)


def _prediction_cols(problem, agent, model):
    """z-columns whose G-image is the predicted observation at each step."""
    lo = problem.layout
    T = problem.game.horizon
    cols = np.empty((T, model.G.shape[1]), dtype=int)
    for t in range(T):
        if model.kind == "control":
            sl = lo.u_cols(t, agent)
        elif problem.kind == "shared-linear":
            sl = lo.x_cols(t)
        else:
            own = problem.game.dynamics.state_slice(agent)
            start = t * lo.n + own.start
            sl = slice(start, start + (own.stop - own.start))
        cols[t] = np.arange(sl.start, sl.stop)
    return cols


def _extract_prediction(problem, z, agent, model):
    cols = _prediction_cols(problem, agent, model)
    return z[cols] @ model.G.T


def _extract_prediction_jacobian(problem, dz, agent, model):
    cols = _prediction_cols(problem, agent, model)
    # (T, r, k) from (T, block, k) contracted with G
    return np.einsum("rb,tbk->trk", model.G, dz[cols])


def _solve_all_rows(game, theta, observations, backend):
    """One hypothesized solve per distinct row; identical rows share."""
    cache = {}
    handles = []
    for i in range(game.n_agents):
        row = theta.row(i)
        key = tuple(b.tobytes() for b in row)
        if key not in cache:
            cache[key] = backend.solve(row, i)
        handles.append(cache[key])
    return handles


def level2_loss(game: ParameterizedGame, theta: Level2ParamSet,
                observations: ObservationSequence, backend=None):
    """Observation mismatch of the hypothesized equilibria; missing data adds 0.

    Returns ``(loss, per_agent_solutions)`` where the solutions dict maps the
    agent index to its (problem, solution) pair at ``theta``.
    """
    if backend is None:
        backend = default_backend(game)
    if observations.horizon != game.horizon:
        raise ValueError("observation horizon does not match the game")
    handles = _solve_all_rows(game, theta, observations, backend)
    model = observations.model
    total = 0.0
    solutions = {}
    for i, (problem, sol) in enumerate(handles):
        pred = backend.prediction(problem, sol, i, model)
        for t in range(game.horizon):
            if observations.mask[t, i]:
                r = pred[t] - observations.values[t, i]
                total += 0.5 * float(r @ r)
        solutions[i] = (problem, sol)
    return total, solutions


def level2_loss_gradient(game: ParameterizedGame, theta: Level2ParamSet,
                         observations: ObservationSequence, backend=None,
                         solutions=None) -> Level2ParamSet:
    """Chain-rule gradient of :func:`level2_loss` over every parameter block.

    The block for agent i's row depends only on agent i's hypothesized game;
    degenerate complementarity in a game contributes a zero gradient with a
    warning, matching the observation that the equilibrium stops responding
    to the parameter there.
    """
    if backend is None:
        backend = default_backend(game)
    if solutions is None:
        _, solutions = level2_loss(game, theta, observations, backend)
    model = observations.model
    dims = game.param_dims
    grad_rows = []
    for i in range(game.n_agents):
        problem, sol = solutions[i]
        pred = backend.prediction(problem, sol, i, model)
        resid = np.where(observations.mask[:, i:i + 1],
                         pred - observations.values[:, i], 0.0)
        try:
            jac = backend.prediction_jacobian(problem, sol, i, model)
            g_row = np.einsum("tr,trk->k", resid, jac)
        except mcp_mod.DegenerateComplementarityError as exc:
            warnings.warn(
                f"agent {i}: strict complementarity fails at the current "
                f"estimate ({exc}); treating its gradient block as zero")
            g_row = np.zeros(sum(dims))
        row, off = [], 0
        for k in dims:
            row.append(g_row[off:off + k])
            off += k
        grad_rows.append(row)
    return Level2ParamSet(grad_rows)


def project_psd(Q: np.ndarray) -> np.ndarray:
    """Nearest positive-semidefinite matrix: clamp negative eigenvalues to zero."""
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise ValueError("need a square matrix")
    if not np.allclose(Q, Q.T, atol=1e-10):
        raise ValueError("matrix must be symmetric")
    w, V = np.linalg.eigh(0.5 * (Q + Q.T))
    return (V * np.maximum(w, 0.0)) @ V.T


def _project_params(game, theta: Level2ParamSet, settings: InverseSettings) -> Level2ParamSet:
    rows = [list(r) for r in theta.rows]
    for i, row in enumerate(rows):
        for j, block in enumerate(row):
            b = np.asarray(block, dtype=float)
            if settings.psd_projection:
                qp = game.costs[j].q_param
                b = qp.vector(project_psd(qp.matrix(b)))
            if settings.param_bounds is not None:
                lo, hi = settings.param_bounds
                b = np.clip(b, lo, hi)
            rows[i][j] = b
    return Level2ParamSet(rows)


def _descend(game, observations, theta0, settings, backend, pack, unpack):
    """Projected gradient descent over a parameter vector defined by pack/unpack.

    ``pack(theta_set_gradient) -> vector`` and ``unpack(vector) -> Level2ParamSet``
    define the search manifold (full level-2 space or the homogeneous slice).
    """
    theta_vec = pack(theta0, is_grad=False)
    theta_set = unpack(theta_vec)
    loss, sols = level2_loss(game, theta_set, observations, backend)  # fatal at theta0
    history = [loss]
    status = "max_iter"
    if loss <= settings.convergence_threshold:
        return InverseResult(theta_set, history, "converged", sols)

    fail_budget = 5
    alpha_scale = 1.0
    for _ in range(settings.max_iter):
        grad_set = level2_loss_gradient(game, theta_set, observations, backend, sols)
        g = pack(grad_set, is_grad=True)
        gnorm = float(np.linalg.norm(g))
        if gnorm == 0.0:
            status = "converged" if loss <= settings.convergence_threshold else "max_iter"
            break

        if settings.mode == "fixed-step":
            try:
                cand = unpack(theta_vec - alpha_scale * settings.step * g)
                cand = _project_params(game, cand, settings)
                new_loss, new_sols = level2_loss(game, cand, observations, backend)
            except EquilibriumSolveError:
                fail_budget -= 1
                alpha_scale *= 0.5
                if fail_budget < 0:
                    break
                continue
            theta_set, loss, sols = cand, new_loss, new_sols
            theta_vec = pack(theta_set, is_grad=False)
            history.append(loss)
        else:
            alpha = settings.step * alpha_scale
            accepted = False
            for _bt in range(60):
                try:
                    cand = unpack(theta_vec - alpha * g)
                    cand = _project_params(game, cand, settings)
                    new_loss, new_sols = level2_loss(game, cand, observations, backend)
                except EquilibriumSolveError:
                    fail_budget -= 1
                    if fail_budget < 0:
                        return InverseResult(theta_set, history, "max_iter", sols)
                    alpha *= 0.5
                    continue
                if new_loss < loss:
                    accepted = True
                    break
                alpha *= settings.decay
            if not accepted:
                break  # numerically stationary
            theta_set, loss, sols = cand, new_loss, new_sols
            theta_vec = pack(theta_set, is_grad=False)
            history.append(loss)

        if loss <= settings.convergence_threshold:
            status = "converged"
            break
    else:
        status = "max_iter"
    if loss <= settings.convergence_threshold:
        status = "converged"
    return InverseResult(theta_set, history, status, sols)


def solve_inverse(game: ParameterizedGame, observations: ObservationSequence,
                  theta0: Level2ParamSet, settings: InverseSettings,
                  backend=None) -> InverseResult:
    """Projected gradient descent over the full level-2 parameter set."""
    if backend is None:
        backend = default_backend(game)
    theta0 = _project_params(game, theta0, settings)

    def pack(ts, is_grad):
        return ts.to_vector()

    def unpack(vec):
        return theta0.from_vector(vec)

    return _descend(game, observations, theta0, settings, backend, pack, unpack)


def solve_inverse_level1(game: ParameterizedGame, observations: ObservationSequence,
                         theta0_row, settings: InverseSettings,
                         backend=None) -> InverseResult:
    """Descent restricted to homogeneous sets: one shared row of parameters.

    The manifold gradient is the sum of the level-2 gradient's row blocks
    (chain rule through replication); the result is returned as a homogeneous
    :class:`Level2ParamSet`.
    """
    if backend is None:
        backend = default_backend(game)
    n = game.n_agents
    row0 = game.validate_params_row(theta0_row)
    template = Level2ParamSet.homogeneous(row0, n)
    template = _project_params(game, template, settings)
    block_dims = template.block_dims()

    def pack(ts, is_grad):
        if is_grad:
            acc = [np.zeros(k) for k in block_dims]
            for i in range(n):
                for j in range(n):
                    acc[j] = acc[j] + ts.rows[i][j]
            return np.concatenate(acc)
        return np.concatenate(list(ts.rows[0]))

    def unpack(vec):
        row, off = [], 0
        for k in block_dims:
            row.append(vec[off:off + k])
            off += k
        return Level2ParamSet.homogeneous(row, n)

    return _descend(game, observations, template, settings, backend, pack, unpack)


def online_infer(game: ParameterizedGame, observation_stream: ObservationSequence,
                 window: int, settings: InverseSettings, theta0: Level2ParamSet,
                 mode: str = "level2", backend=None) -> OnlineInferenceResult:
    """Receding-horizon inference over a stream of observations.

    For each end time t from ``window`` to the stream length, the most recent
    ``window`` observations are fit, warm-started from the previous estimate.
    The window's initial-state estimate takes observed positions at the
    window start and zero velocities, propagated with zero-control dynamics
    between iterations (which leaves both components unchanged until a fresh
    observation arrives).  Failed windows keep the previous estimate.
    """
    if window > observation_stream.horizon:
        raise ValueError("window exceeds the observation stream length")
    if mode not in ("level2", "level1"):
        raise ValueError("mode must be 'level2' or 'level1'")
    if game.dynamics.kind == "shared-linear":
        raise ValueError("online inference expects a per-agent state game")

    game_w = game.with_horizon(window)
    if backend is None:
        backend = MCPBackend(game_w)
    model = observation_stream.model
    n = game.n_agents

    # per-agent initial-state blocks (positions observed, velocities zero)
    blocks = [np.zeros(d) for d in game.dynamics.state_dims]
    theta = theta0
    times, estimates, losses, statuses = [], [], [], []
    for end in range(window, observation_stream.horizon + 1):
        start = end - window
        obs_w = observation_stream.window(start, window)
        for i in range(n):
            if obs_w.mask[0, i]:
                pos = model.G.T @ obs_w.values[0, i]
                blocks[i] = blocks[i].copy()
                blocks[i][:pos.shape[0]] = pos[:game.dynamics.state_dims[i]]
        x_hat = np.concatenate(blocks)
        game_t = game_w.with_initial_state(x_hat)
        if isinstance(backend, MCPBackend):
            backend.game = game_t
        try:
            if mode == "level2":
                res = solve_inverse(game_t, obs_w, theta, settings, backend)
            else:
                res = solve_inverse_level1(game_t, obs_w, theta.row(0), settings, backend)
            theta = res.theta_hat
            times.append(end)
            estimates.append(theta)
            losses.append(res.loss_history[-1])
            statuses.append(res.status)
        except EquilibriumSolveError as exc:
            times.append(end)
            estimates.append(theta)
            losses.append(float("nan"))
            statuses.append(f"solve-failure:{exc.agent}")
    return OnlineInferenceResult(times, estimates, losses, statuses)
