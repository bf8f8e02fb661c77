"""Parameterized dynamic games, trajectories, observations, and belief parameter sets.

A "level-2" game gives every agent its own objective parameter plus private
estimates of all other agents' parameters.  Each agent solves the game it
believes it is playing (its *hypothesized* game) and executes its own slice of
that equilibrium.  This module defines the shared data model:

* :class:`Level2ParamSet` -- the N x N grid of parameter blocks (one row per
  agent; row i holds agent i's estimate of every agent's objective),
* dynamics / cost / constraint descriptions that together form a
  :class:`ParameterizedGame`,
* :class:`TrajectoryBundle` and :class:`ObservationSequence` containers,
* factory functions for the two built-in scenario families: coupled
  linear-quadratic games and the two-vehicle lane-change game.

All objects are immutable after construction; module functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Level2ParamSet",
    "SymmetricMatrixParam",
    "SharedLinearDynamics",
    "PerAgentDynamics",
    "QuadraticStateControlCost",
    "LaneTrackingCost",
    "BoxBounds",
    "CoupledDistanceConstraint",
    "ConstraintSet",
    "ParameterizedGame",
    "TrajectoryBundle",
    "ObservationModel",
    "ObservationSequence",
    "LaneChangeConfig",
    "make_lq_game",
    "make_lane_change_game",
    "step_dynamics",
    "evaluate_cost",
]


def _as_param(values) -> np.ndarray:
    v = np.atleast_1d(np.asarray(values, dtype=float))
    if v.ndim != 1:
        raise ValueError(f"parameter block must be a vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("parameter block contains non-finite entries")
    v.flags.writeable = False
    return v


@dataclass(frozen=True)
class Level2ParamSet:
    """All agents' objective parameters and their estimates of one another.

    ``rows[i][j]`` is agent i's estimate of agent j's parameter; the diagonal
    block ``rows[i][i]`` is agent i's own parameter.  A set is *homogeneous*
    when every row is identical, which is exactly the representation of a
    level-1 (shared-knowledge) model inside the level-2 parameter space.
    """

    rows: tuple

    def __init__(self, rows: Sequence[Sequence[np.ndarray]]):
        frozen = tuple(tuple(_as_param(b) for b in row) for row in rows)
        n = len(frozen)
        if n < 1:
            raise ValueError("need at least one agent")
        for row in frozen:
            if len(row) != n:
                raise ValueError("parameter set must have N x N blocks")
        for j in range(n):
            dims = {row[j].shape[0] for row in frozen}
            if len(dims) != 1:
                raise ValueError(f"inconsistent dimension for agent {j}'s parameter across rows")
        object.__setattr__(self, "rows", frozen)

    @classmethod
    def homogeneous(cls, row: Sequence[np.ndarray], n_agents: int) -> "Level2ParamSet":
        """Replicate one parameter row for every agent (the level-1 embedding)."""
        return cls([list(row) for _ in range(n_agents)])

    @property
    def n_agents(self) -> int:
        return len(self.rows)

    def row(self, i: int):
        return self.rows[i]

    def own(self, i: int) -> np.ndarray:
        return self.rows[i][i]

    def is_homogeneous(self) -> bool:
        first = self.rows[0]
        return all(
            all(np.array_equal(row[j], first[j]) for j in range(self.n_agents))
            for row in self.rows[1:]
        )

    def block_dims(self):
        return tuple(b.shape[0] for b in self.rows[0])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([b for row in self.rows for b in row])

    def from_vector(self, vec: np.ndarray) -> "Level2ParamSet":
        """Rebuild a set with this set's block structure from a flat vector."""
        vec = np.asarray(vec, dtype=float)
        out, k = [], 0
        for row in self.rows:
            new_row = []
            for b in row:
                new_row.append(vec[k:k + b.shape[0]])
                k += b.shape[0]
            out.append(new_row)
        if k != vec.shape[0]:
            raise ValueError("vector length does not match parameter structure")
        return Level2ParamSet(out)

    def replace_block(self, i: int, j: int, values) -> "Level2ParamSet":
        rows = [list(r) for r in self.rows]
        rows[i][j] = _as_param(values)
        return Level2ParamSet(rows)


class SymmetricMatrixParam:
    """Bijection between a flat parameter vector and a symmetric n x n matrix.

    Ordering: the n diagonal entries first, then the upper-triangle
    off-diagonals row by row.  For n = 2 this is (q11, q22, q12).
    """

    def __init__(self, n: int):
        self.n = n
        self.dim = n * (n + 1) // 2
        self._basis = []
        for d in range(n):
            E = np.zeros((n, n))
            E[d, d] = 1.0
            self._basis.append(E)
        for a in range(n):
            for b in range(a + 1, n):
                E = np.zeros((n, n))
                E[a, b] = E[b, a] = 1.0
                self._basis.append(E)

    def matrix(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise ValueError(f"expected {self.dim} parameters, got {theta.shape}")
        Q = np.zeros((self.n, self.n))
        for k, E in enumerate(self._basis):
            Q += theta[k] * E
        return Q

    def vector(self, Q: np.ndarray) -> np.ndarray:
        Q = np.asarray(Q, dtype=float)
        if not np.allclose(Q, Q.T, atol=1e-12):
            raise ValueError("matrix must be symmetric")
        out = [Q[d, d] for d in range(self.n)]
        for a in range(self.n):
            for b in range(a + 1, self.n):
                out.append(Q[a, b])
        return np.array(out)

    def basis(self):
        """Constant derivative matrices dQ/dtheta_k."""
        return self._basis


@dataclass(frozen=True)
class SharedLinearDynamics:
    """One joint linear state driven by every agent's control.

    x_{t+1} = A x_t + sum_j B_j u^j_t
    """

    A: np.ndarray
    B_list: tuple

    kind = "shared-linear"

    def __init__(self, A, B_list):
        A = np.asarray(A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("A must be square")
        Bs = tuple(np.asarray(B, dtype=float) for B in B_list)
        for B in Bs:
            if B.shape[0] != A.shape[0]:
                raise ValueError("each B must have as many rows as A")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B_list", Bs)

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def control_dims(self):
        return tuple(B.shape[1] for B in self.B_list)

    def step(self, x: np.ndarray, u_list) -> np.ndarray:
        out = self.A @ x
        for B, u in zip(self.B_list, u_list):
            out = out + B @ u
        return out


@dataclass(frozen=True)
class PerAgentDynamics:
    """Per-agent transition maps; the joint state is the concatenation of blocks.

    ``step_fns[j](x_j, u_j)`` returns agent j's next state block,
    ``jac_fns[j](x_j, u_j)`` its Jacobians ``(d next/d x_j, d next/d u_j)``.
    """

    step_fns: tuple
    jac_fns: tuple
    state_dims: tuple
    control_dims: tuple
    dt: float

    kind = "per-agent-nonlinear"

    @property
    def state_dim(self) -> int:
        return sum(self.state_dims)

    def state_slice(self, j: int) -> slice:
        off = sum(self.state_dims[:j])
        return slice(off, off + self.state_dims[j])

    def step(self, x: np.ndarray, u_list) -> np.ndarray:
        out = np.empty(self.state_dim)
        for j, f in enumerate(self.step_fns):
            out[self.state_slice(j)] = f(x[self.state_slice(j)], np.asarray(u_list[j], dtype=float))
        return out


def _linear_block_dynamics(A_blk: np.ndarray, B_blk: np.ndarray):
    A_blk = np.asarray(A_blk, dtype=float)
    B_blk = np.asarray(B_blk, dtype=float)

    def step(x, u):
        return A_blk @ x + B_blk @ u

    def jac(x, u):
        return A_blk, B_blk

    return step, jac


class QuadraticStateControlCost:
    """Stage cost 1/2 x' Q(theta) x + 1/2 u' R u on a shared joint state.

    Q is produced from the agent's parameter block by a
    :class:`SymmetricMatrixParam`; R is fixed and positive definite.
    """

    def __init__(self, q_param: SymmetricMatrixParam, R: np.ndarray):
        R = np.asarray(R, dtype=float)
        if not np.allclose(R, R.T, atol=1e-12):
            raise ValueError("R must be symmetric")
        if np.min(np.linalg.eigvalsh(R)) <= 0:
            raise ValueError("R must be positive definite")
        self.q_param = q_param
        self.R = R
        self.param_dim = q_param.dim

    def value(self, t, x, u_own, theta):
        Q = self.q_param.matrix(theta)
        return 0.5 * x @ Q @ x + 0.5 * u_own @ self.R @ u_own

    def grad(self, t, x, u_own, theta):
        return self.q_param.matrix(theta) @ x, self.R @ u_own

    def hess(self, t, x, u_own, theta):
        return self.q_param.matrix(theta), self.R

    def grad_param_jac(self, t, x, u_own, theta):
        Jx = np.stack([E @ x for E in self.q_param.basis()], axis=1)
        Ju = np.zeros((u_own.shape[0], self.param_dim))
        return Jx, Ju


class LaneTrackingCost:
    """Lane-offset tracking stage cost on an agent's own 4-dim block.

    State block is (p_lat, p_lon, v_lat, v_lon); the scalar parameter is the
    desired lateral offset.  Terms: w1 (p_lat - theta)^2 + w2 |v - v_d|^2 +
    w3 |u|^2.  Derivatives are taken with respect to the agent's own block.
    """

    param_dim = 1

    def __init__(self, agent: int, weights, v_d, state_slice: slice):
        self.agent = agent
        self.w1, self.w2, self.w3 = (float(w) for w in weights)
        self.v_d = np.asarray(v_d, dtype=float)
        self.state_slice = state_slice

    def _own(self, x):
        return x[self.state_slice] if x.shape[0] > 4 else x

    def value(self, t, x, u_own, theta):
        xo = self._own(x)
        dv = xo[2:4] - self.v_d
        return (self.w1 * (xo[0] - theta[0]) ** 2
                + self.w2 * (dv @ dv)
                + self.w3 * (u_own @ u_own))

    def grad(self, t, x, u_own, theta):
        xo = self._own(x)
        gx = np.array([2.0 * self.w1 * (xo[0] - theta[0]), 0.0,
                       2.0 * self.w2 * (xo[2] - self.v_d[0]),
                       2.0 * self.w2 * (xo[3] - self.v_d[1])])
        return gx, 2.0 * self.w3 * u_own

    def hess(self, t, x, u_own, theta):
        Hxx = np.diag([2.0 * self.w1, 0.0, 2.0 * self.w2, 2.0 * self.w2])
        return Hxx, 2.0 * self.w3 * np.eye(u_own.shape[0])

    def grad_param_jac(self, t, x, u_own, theta):
        Jx = np.zeros((4, 1))
        Jx[0, 0] = -2.0 * self.w1
        return Jx, np.zeros((u_own.shape[0], 1))


@dataclass(frozen=True)
class BoxBounds:
    lower: np.ndarray
    upper: np.ndarray

    def __init__(self, lower, upper):
        lo = np.asarray(lower, dtype=float)
        hi = np.asarray(upper, dtype=float)
        if lo.shape != hi.shape:
            raise ValueError("bound shapes differ")
        if np.any(lo > hi):
            raise ValueError("lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)


class CoupledDistanceConstraint:
    """Squared planar distance between two agents kept above a safety buffer.

    ``|p_a(t) - p_b(t)|^2 >= min_distance^2`` for plan steps t in
    ``range(start, T)``.  ``start`` skips steps whose positions are already
    fixed by the initial state (two steps for double-integrator blocks);
    constraining those steps would make replanning from tight states
    infeasible without restricting any actual decision.
    """

    def __init__(self, pos_slices, min_distance: float, start: int = 2):
        if min_distance <= 0:
            raise ValueError("safety buffer must be positive")
        self.pos_a, self.pos_b = pos_slices
        self.min_distance = float(min_distance)
        self.start = int(start)

    def stage_range(self, T: int) -> range:
        return range(self.start, T)

    def _diff(self, x):
        return x[self.pos_a] - x[self.pos_b]

    def value(self, x) -> float:
        d = self._diff(x)
        return d @ d - self.min_distance ** 2

    def grad(self, x) -> np.ndarray:
        g = np.zeros_like(x)
        d = self._diff(x)
        g[self.pos_a] = 2.0 * d
        g[self.pos_b] = -2.0 * d
        return g

    def hess(self, n: int) -> np.ndarray:
        H = np.zeros((n, n))
        ia, ib = self.pos_a, self.pos_b
        H[ia, ia] = H[ib, ib] = 2.0 * np.eye(ia.stop - ia.start)
        Hab = -2.0 * np.eye(ia.stop - ia.start)
        H[ia.start:ia.stop, ib.start:ib.stop] = Hab
        H[ib.start:ib.stop, ia.start:ia.stop] = Hab
        return H


@dataclass(frozen=True)
class ConstraintSet:
    """Equality maps, per-agent inequality lists, box bounds, and the initial state."""

    equalities: tuple = ()
    inequalities: tuple = ()      # one tuple of stage constraints per agent
    state_box: Optional[BoxBounds] = None     # per-agent state block bounds
    control_box: Optional[BoxBounds] = None   # per-agent control bounds
    x_init: Optional[np.ndarray] = None


@dataclass(frozen=True)
class ParameterizedGame:
    """A dynamic game determined up to one row of a :class:`Level2ParamSet`."""

    n_agents: int
    horizon: int
    dynamics: object
    costs: tuple
    constraints: ConstraintSet

    def __post_init__(self):
        if self.n_agents < 1:
            raise ValueError("need at least one agent")
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2")

    @property
    def state_dim(self) -> int:
        return self.dynamics.state_dim

    @property
    def control_dims(self):
        return self.dynamics.control_dims

    @property
    def param_dims(self):
        return tuple(c.param_dim for c in self.costs)

    @property
    def x_init(self) -> np.ndarray:
        return self.constraints.x_init

    def with_initial_state(self, x_init) -> "ParameterizedGame":
        c = replace(self.constraints, x_init=np.asarray(x_init, dtype=float))
        return replace(self, constraints=c)

    def with_horizon(self, T: int) -> "ParameterizedGame":
        return replace(self, horizon=int(T))

    def control_slices(self):
        out, off = [], 0
        for m in self.control_dims:
            out.append(slice(off, off + m))
            off += m
        return out

    def validate_params_row(self, row) -> tuple:
        row = tuple(np.asarray(b, dtype=float).reshape(-1) for b in row)
        if len(row) != self.n_agents:
            raise ValueError("parameter row must have one block per agent")
        for b, k in zip(row, self.param_dims):
            if b.shape[0] != k:
                raise ValueError(f"parameter block has dim {b.shape[0]}, expected {k}")
        return row


@dataclass(frozen=True)
class TrajectoryBundle:
    """Joint state/control trajectories, optionally with per-agent hypothesized plans.

    ``X`` has shape (T, n) and ``U`` shape (T, m); the final control exists for
    cost bookkeeping but drives no state.  ``hypothesized[i]`` holds agent i's
    own equilibrium plan (X_i, U_i) when available.
    """

    X: np.ndarray
    U: np.ndarray
    hypothesized: Optional[dict] = None

    def __post_init__(self):
        object.__setattr__(self, "X", np.asarray(self.X, dtype=float))
        object.__setattr__(self, "U", np.asarray(self.U, dtype=float))
        if self.X.shape[0] != self.U.shape[0]:
            raise ValueError("X and U must cover the same number of steps")

    @property
    def horizon(self) -> int:
        return self.X.shape[0]


@dataclass(frozen=True)
class ObservationModel:
    """Maps a hypothesized equilibrium to predicted observations.

    ``kind="state"``: the prediction for agent i at step t is ``G @ x^i_t``
    applied to agent i's own state block.  ``kind="control"``: the prediction
    is ``G @ u^i_t`` on agent i's own control.  ``noise_scale`` enters data
    generation only, never the inference loss.
    """

    kind: str
    G: np.ndarray
    noise_scale: float = 0.0

    def __post_init__(self):
        if self.kind not in ("state", "control"):
            raise ValueError("kind must be 'state' or 'control'")
        object.__setattr__(self, "G", np.asarray(self.G, dtype=float))

    @property
    def obs_dim(self) -> int:
        return self.G.shape[0]


class ObservationSequence:
    """Per-agent, per-time optional measurements with availability mask."""

    def __init__(self, values: np.ndarray, mask: np.ndarray, model: ObservationModel):
        values = np.asarray(values, dtype=float)
        mask = np.asarray(mask, dtype=bool)
        if values.ndim != 3:
            raise ValueError("values must have shape (T, N, r)")
        if mask.shape != values.shape[:2]:
            raise ValueError("mask must have shape (T, N)")
        if values.shape[2] != model.obs_dim:
            raise ValueError("observation dimension does not match the model")
        self.values = values
        self.mask = mask
        self.model = model

    @property
    def horizon(self) -> int:
        return self.values.shape[0]

    @property
    def n_agents(self) -> int:
        return self.values.shape[1]

    def window(self, start: int, length: int) -> "ObservationSequence":
        if start < 0 or start + length > self.horizon:
            raise ValueError("window out of range")
        return ObservationSequence(self.values[start:start + length],
                                   self.mask[start:start + length], self.model)

    @classmethod
    def fully_observed(cls, values, model):
        values = np.asarray(values, dtype=float)
        return cls(values, np.ones(values.shape[:2], dtype=bool), model)


def make_lq_game(A, B_list, R_list, q_parameterization: SymmetricMatrixParam,
                 T: int, x_init) -> ParameterizedGame:
    """Build a coupled linear-quadratic game on one shared state.

    Every agent pays 1/2 x' Q(theta^i) x + 1/2 u_i' R_i u_i per step over the
    shared dynamics x_{t+1} = A x_t + sum_j B_j u^j_t; there are no
    constraints beyond dynamics and the initial state.
    """
    dyn = SharedLinearDynamics(A, B_list)
    x_init = np.asarray(x_init, dtype=float)
    if x_init.shape != (dyn.state_dim,):
        raise ValueError("x_init dimension does not match A")
    if q_parameterization.n != dyn.state_dim:
        raise ValueError("Q parameterization dimension does not match the state")
    costs = tuple(QuadraticStateControlCost(q_parameterization, R) for R in R_list)
    if len(costs) != len(dyn.B_list):
        raise ValueError("need one R per agent")
    cons = ConstraintSet(x_init=x_init)
    return ParameterizedGame(n_agents=len(costs), horizon=int(T), dynamics=dyn,
                             costs=costs, constraints=cons)


@dataclass(frozen=True)
class LaneChangeConfig:
    """Scenario constants for the two-vehicle lane-change game."""

    lane_width: float = 2.0
    dt: float = 0.1
    mass: float = 1.0
    weights: tuple = (1.0, 0.5, 0.1)
    v_desired: tuple = (0.0, 2.0)
    safety_buffer: float = 2.0
    horizon: int = 15
    p_init: tuple = ((1.0, 1.0), (3.2, 0.9))
    v_init: tuple = ((0.0, 1.0), (0.0, 1.0))
    p_lat_bounds: tuple = (0.0, 4.0)
    p_lon_bounds: tuple = (0.0, 50.0)
    v_lat_bounds: tuple = (-10.0, 10.0)
    v_lon_bounds: tuple = (0.0, 10.0)
    force_bounds: tuple = (-5.0, 3.0)
    # positions respond to force with a two-step delay, so the coupling
    # constraint binds decisions only from this plan step on
    collision_start_step: int = 2


def make_lane_change_game(config: LaneChangeConfig | dict | None = None) -> ParameterizedGame:
    """Two point-mass vehicles on a two-lane road, coupled only through safety.

    Each agent has a planar double-integrator block (p_lat, p_lon, v_lat,
    v_lon), tracks a desired lateral offset given by its scalar parameter, and
    shares the minimum-distance constraint, which appears in both agents'
    inequality sets with separate multipliers.
    """
    if config is None:
        config = LaneChangeConfig()
    elif isinstance(config, dict):
        config = LaneChangeConfig(**config)
    if config.safety_buffer <= 0:
        raise ValueError("safety buffer must be positive")
    if config.lane_width <= 0:
        raise ValueError("lane width must be positive")
    if config.dt <= 0 or config.mass <= 0:
        raise ValueError("dt and mass must be positive")

    dt, m = config.dt, config.mass
    A_blk = np.array([[1, 0, dt, 0],
                      [0, 1, 0, dt],
                      [0, 0, 1, 0],
                      [0, 0, 0, 1]], dtype=float)
    B_blk = np.array([[0, 0],
                      [0, 0],
                      [dt / m, 0],
                      [0, dt / m]], dtype=float)
    step, jac = _linear_block_dynamics(A_blk, B_blk)
    dyn = PerAgentDynamics(step_fns=(step, step), jac_fns=(jac, jac),
                           state_dims=(4, 4), control_dims=(2, 2), dt=dt)

    costs = tuple(
        LaneTrackingCost(agent=j, weights=config.weights, v_d=config.v_desired,
                         state_slice=dyn.state_slice(j))
        for j in range(2)
    )

    collision = CoupledDistanceConstraint(
        pos_slices=(slice(0, 2), slice(4, 6)),
        min_distance=config.safety_buffer,
        start=config.collision_start_step,
    )
    state_box = BoxBounds(
        lower=[config.p_lat_bounds[0], config.p_lon_bounds[0],
               config.v_lat_bounds[0], config.v_lon_bounds[0]],
        upper=[config.p_lat_bounds[1], config.p_lon_bounds[1],
               config.v_lat_bounds[1], config.v_lon_bounds[1]],
    )
    control_box = BoxBounds(lower=[config.force_bounds[0]] * 2,
                            upper=[config.force_bounds[1]] * 2)

    x_init = np.concatenate([
        np.concatenate([config.p_init[j], config.v_init[j]]) for j in range(2)
    ]).astype(float)

    cons = ConstraintSet(
        equalities=((), ()),
        inequalities=((collision,), (collision,)),
        state_box=state_box,
        control_box=control_box,
        x_init=x_init,
    )
    return ParameterizedGame(n_agents=2, horizon=int(config.horizon), dynamics=dyn,
                             costs=costs, constraints=cons)


def step_dynamics(game: ParameterizedGame, x_t: np.ndarray, u_t: np.ndarray) -> np.ndarray:
    """Advance the joint state one step with the joint control vector."""
    x_t = np.asarray(x_t, dtype=float)
    u_t = np.asarray(u_t, dtype=float)
    if x_t.shape != (game.state_dim,):
        raise ValueError(f"state has dim {x_t.shape}, expected {game.state_dim}")
    if u_t.shape != (sum(game.control_dims),):
        raise ValueError(f"control has dim {u_t.shape}, expected {sum(game.control_dims)}")
    u_list = [u_t[s] for s in game.control_slices()]
    return game.dynamics.step(x_t, u_list)


def evaluate_cost(game: ParameterizedGame, trajectory: TrajectoryBundle,
                  agent: int, params_row) -> float:
    """Total cost of a trajectory for one agent, using its own parameter block.

    Only ``params_row[agent]`` is read; the other blocks of the row never
    enter the agent's objective.
    """
    row = game.validate_params_row(params_row)
    theta = row[agent]
    if trajectory.horizon != game.horizon:
        raise ValueError("trajectory horizon does not match the game")
    cost_fn = game.costs[agent]
    u_slice = game.control_slices()[agent]
    total = 0.0
    for t in range(trajectory.horizon):
        total += cost_fn.value(t, trajectory.X[t], trajectory.U[t, u_slice], theta)
    return float(total)
