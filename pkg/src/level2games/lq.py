"""Analytic machinery for coupled linear-quadratic games.

For a shared-state LQ game, the first-order conditions of all agents stack
into one square linear system

    M(Theta) zbar + S x_init = 0,

where ``zbar = [X, U, lambda, eta]`` collects states, controls, each agent's
dynamics multipliers, and each agent's initial-state multipliers.  The
solution (an open-loop equilibrium of the game parameterized by one belief
row Theta) is a linear function of x_init, which makes the inverse problem's
loss, its exact gradient, and the level-1 prediction-error bounds all
computable in closed form.

Losses here follow the convention ``loss = sum_i sum_t 1/2 |u^i_t - o^i_t|^2``.
The companion quantity ``residual_norm = sqrt(2 * loss)`` (the plain Euclidean
norm of the stacked control residual) is the form in which the counterexample
values are reported; the level-1 bounds of :func:`level1_bounds` empirically
sandwich the residual norm, not the half-squared loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .game_model import (
    Level2ParamSet,
    ObservationSequence,
    ParameterizedGame,
)

__all__ = [
    "KKTLayout",
    "KKTSystem",
    "LQEquilibrium",
    "SelectorMatrix",
    "SingularKKTError",
    "assemble_kkt",
    "solve_lq_equilibrium",
    "control_selector",
    "extract_controls",
    "lq_level2_loss",
    "lq_level2_residual_norm",
    "lq_loss_gradient",
    "level1_bounds",
    "heterogeneity",
]

# condition estimate above which M is treated as numerically singular
CONDITION_LIMIT = 1e12


class SingularKKTError(RuntimeError):
    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


@dataclass(frozen=True)
class KKTLayout:
    """Index map from (X, U, lambda, eta) blocks to rows/columns of M.

    Dimensions for N agents over horizon T with joint state dim n and total
    control dim m:  X: T*n, U: T*m, lambda: (T-1)*N*n (per-agent copies of the
    shared dynamics multipliers), eta: N*n.  Stationarity rows come first
    (time-major, agent-minor, states then controls), then the dynamics
    residuals, then the initial-state residual.
    """

    n_agents: int
    horizon: int
    state_dim: int
    control_dims: tuple

    @property
    def m_total(self) -> int:
        return sum(self.control_dims)

    @property
    def n_x(self) -> int:
        return self.horizon * self.state_dim

    @property
    def n_u(self) -> int:
        return self.horizon * self.m_total

    @property
    def n_lam(self) -> int:
        return (self.horizon - 1) * self.n_agents * self.state_dim

    @property
    def n_eta(self) -> int:
        return self.n_agents * self.state_dim

    @property
    def dim(self) -> int:
        return self.n_x + self.n_u + self.n_lam + self.n_eta

    def x_cols(self, t: int) -> slice:
        n = self.state_dim
        return slice(t * n, (t + 1) * n)

    def u_cols(self, t: int, agent: int) -> slice:
        off = self.n_x + t * self.m_total + sum(self.control_dims[:agent])
        return slice(off, off + self.control_dims[agent])

    def lam_cols(self, t: int, agent: int) -> slice:
        n = self.state_dim
        off = self.n_x + self.n_u + (t * self.n_agents + agent) * n
        return slice(off, off + n)

    def eta_cols(self, agent: int) -> slice:
        n = self.state_dim
        off = self.n_x + self.n_u + self.n_lam + agent * n
        return slice(off, off + n)

    def stat_x_rows(self, t: int, agent: int) -> slice:
        n = self.state_dim
        off = (t * self.n_agents + agent) * n
        return slice(off, off + n)

    def stat_u_rows(self, t: int, agent: int) -> slice:
        base = self.horizon * self.n_agents * self.state_dim
        off = base + t * self.m_total + sum(self.control_dims[:agent])
        return slice(off, off + self.control_dims[agent])

    def dyn_rows(self, t: int) -> slice:
        n = self.state_dim
        base = self.horizon * self.n_agents * n + self.n_u
        return slice(base + t * n, base + (t + 1) * n)

    @property
    def init_rows(self) -> slice:
        n = self.state_dim
        base = self.horizon * self.n_agents * n + self.n_u + (self.horizon - 1) * n
        return slice(base, base + n)


@dataclass(frozen=True)
class KKTSystem:
    M: np.ndarray
    S: np.ndarray
    x_init: np.ndarray
    layout: KKTLayout


@dataclass(frozen=True)
class LQEquilibrium:
    zbar: np.ndarray
    layout: KKTLayout

    @property
    def X(self) -> np.ndarray:
        lo = self.layout
        return self.zbar[:lo.n_x].reshape(lo.horizon, lo.state_dim)

    @property
    def U(self) -> np.ndarray:
        lo = self.layout
        return self.zbar[lo.n_x:lo.n_x + lo.n_u].reshape(lo.horizon, lo.m_total)

    def controls(self, agent: int) -> np.ndarray:
        lo = self.layout
        off = sum(lo.control_dims[:agent])
        return self.U[:, off:off + lo.control_dims[agent]]


@dataclass(frozen=True)
class SelectorMatrix:
    """Unit rows picking one agent's stacked controls out of zbar."""

    E: np.ndarray
    agent: int

    def apply(self, z: np.ndarray) -> np.ndarray:
        return self.E @ z


def _require_shared_linear(game: ParameterizedGame):
    if game.dynamics.kind != "shared-linear":
        raise ValueError("this operation needs a shared-linear game")


def assemble_kkt(game: ParameterizedGame, params_row, x_init=None) -> KKTSystem:
    """Stack all agents' first-order conditions into M(Theta) zbar + S x_init = 0.

    Row blocks, in order: state stationarity Q_i x_t - A' lam^i_t + lam^i_{t-1}
    (+ eta^i at t=1), control stationarity R_i u^i_t - B_i' lam^i_t, shared
    dynamics residuals, initial-state residual.  Q_i must be symmetric PSD.
    """
    _require_shared_linear(game)
    row = game.validate_params_row(params_row)
    dyn = game.dynamics
    A, Bs = dyn.A, dyn.B_list
    n = dyn.state_dim
    T = game.horizon
    N = game.n_agents
    if x_init is None:
        x_init = game.x_init
    x_init = np.asarray(x_init, dtype=float)

    Qs = []
    for i, cost in enumerate(game.costs):
        Q = cost.q_param.matrix(row[i])
        if not np.allclose(Q, Q.T, atol=1e-10):
            raise ValueError(f"Q for agent {i} is not symmetric")
        if np.min(np.linalg.eigvalsh(Q)) < -1e-9:
            raise ValueError(f"Q for agent {i} is not positive semidefinite")
        Qs.append(Q)
    Rs = [cost.R for cost in game.costs]

    lo = KKTLayout(n_agents=N, horizon=T, state_dim=n, control_dims=dyn.control_dims)
    M = np.zeros((lo.dim, lo.dim))
    S = np.zeros((lo.dim, n))
    eye = np.eye(n)

    for t in range(T):
        for i in range(N):
            r = lo.stat_x_rows(t, i)
            M[r, lo.x_cols(t)] += Qs[i]
            if t <= T - 2:
                M[r, lo.lam_cols(t, i)] += -A.T
            if t >= 1:
                M[r, lo.lam_cols(t - 1, i)] += eye
            if t == 0:
                M[r, lo.eta_cols(i)] += eye
            ru = lo.stat_u_rows(t, i)
            M[ru, lo.u_cols(t, i)] += Rs[i]
            if t <= T - 2:
                M[ru, lo.lam_cols(t, i)] += -Bs[i].T
    for t in range(T - 1):
        r = lo.dyn_rows(t)
        M[r, lo.x_cols(t)] += -A
        M[r, lo.x_cols(t + 1)] += eye
        for j in range(N):
            M[r, lo.u_cols(t, j)] += -Bs[j]
    M[lo.init_rows, lo.x_cols(0)] += eye
    S[lo.init_rows, :] = -eye

    return KKTSystem(M=M, S=S, x_init=x_init, layout=lo)


def solve_lq_equilibrium(kkt: KKTSystem) -> LQEquilibrium:
    """Solve zbar = -M^{-1} S x_init, refusing numerically singular systems."""
    cond = np.linalg.cond(kkt.M)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise SingularKKTError(
            f"KKT matrix is numerically singular (condition estimate {cond:.3e})",
            condition=cond)
    z = np.linalg.solve(kkt.M, -kkt.S @ kkt.x_init)
    resid = float(np.linalg.norm(kkt.M @ z + kkt.S @ kkt.x_init))
    if resid > 1e-10 * (1.0 + float(np.linalg.norm(z))):
        raise SingularKKTError(
            f"solve left residual {resid:.3e}; condition estimate {cond:.3e}",
            condition=cond)
    return LQEquilibrium(zbar=z, layout=kkt.layout)


def control_selector(layout: KKTLayout, agent: int) -> SelectorMatrix:
    rows = layout.horizon * layout.control_dims[agent]
    E = np.zeros((rows, layout.dim))
    r = 0
    for t in range(layout.horizon):
        cols = layout.u_cols(t, agent)
        for c in range(cols.start, cols.stop):
            E[r, c] = 1.0
            r += 1
    return SelectorMatrix(E=E, agent=agent)


def extract_controls(eq: LQEquilibrium, selector: SelectorMatrix) -> np.ndarray:
    """Agent controls as a (T, m_i) array."""
    lo = eq.layout
    flat = selector.apply(eq.zbar)
    return flat.reshape(lo.horizon, lo.control_dims[selector.agent])


def _check_control_observations(game: ParameterizedGame, observations: ObservationSequence):
    if observations.model.kind != "control":
        raise ValueError("LQ loss expects full control observations")
    if observations.horizon != game.horizon:
        raise ValueError("observation horizon does not match the game")
    if observations.n_agents != game.n_agents:
        raise ValueError("observation agent count does not match the game")


def _hypothesized_equilibria(game, theta: Level2ParamSet, x_init=None):
    eqs = []
    for i in range(game.n_agents):
        kkt = assemble_kkt(game, theta.row(i), x_init=x_init)
        eqs.append(solve_lq_equilibrium(kkt))
    return eqs


def lq_level2_loss(game: ParameterizedGame, theta: Level2ParamSet,
                   observations: ObservationSequence) -> float:
    """Half squared deviation of each agent's hypothesized controls from data.

    Agent i's prediction is its own control slice of the equilibrium of the
    game built from row i of ``theta``.
    """
    _check_control_observations(game, observations)
    total = 0.0
    for i, eq in enumerate(_hypothesized_equilibria(game, theta)):
        pred = eq.controls(i)
        for t in range(game.horizon):
            if observations.mask[t, i]:
                r = pred[t] - observations.values[t, i]
                total += 0.5 * float(r @ r)
    return total


def lq_level2_residual_norm(game, theta, observations) -> float:
    """Euclidean norm of the stacked control residual, sqrt(2 * loss)."""
    return float(np.sqrt(2.0 * lq_level2_loss(game, theta, observations)))


def lq_loss_gradient(game: ParameterizedGame, theta: Level2ParamSet,
                     observations: ObservationSequence) -> Level2ParamSet:
    """Exact gradient of :func:`lq_level2_loss` over every parameter block.

    Uses d zbar / d theta_k = -M^{-1} (dM/d theta_k) zbar with one adjoint
    solve per agent; the block for agent i's row involves only agent i's
    hypothesized system, so the gradient is additive across rows.
    """
    _check_control_observations(game, observations)
    lo = None
    grad_rows = []
    for i in range(game.n_agents):
        kkt = assemble_kkt(game, theta.row(i))
        eq = solve_lq_equilibrium(kkt)
        lo = kkt.layout
        pred = eq.controls(i)
        resid = np.zeros_like(pred)
        for t in range(game.horizon):
            if observations.mask[t, i]:
                resid[t] = pred[t] - observations.values[t, i]
        # dL/dz restricted to agent i's control entries
        dLdz = np.zeros(lo.dim)
        off = sum(lo.control_dims[:i])
        for t in range(game.horizon):
            dLdz[lo.u_cols(t, i)] = resid[t]
        w = np.linalg.solve(kkt.M.T, dLdz)
        X = eq.X
        row_grads = []
        for j in range(game.n_agents):
            basis = game.costs[j].q_param.basis()
            g = np.zeros(len(basis))
            for k, E in enumerate(basis):
                # (dM/dtheta_k) zbar is nonzero only in agent j's state
                # stationarity rows, where it equals E @ x_t
                acc = 0.0
                for t in range(game.horizon):
                    acc += w[lo.stat_x_rows(t, j)] @ (E @ X[t])
                g[k] = -acc
            row_grads.append(g)
        grad_rows.append(row_grads)
    return Level2ParamSet(grad_rows)


def _sigma_extremes(M: np.ndarray):
    s = np.linalg.svd(M, compute_uv=False)
    return s[0], s[-1]


def level1_bounds(game: ParameterizedGame, ground_truth: Level2ParamSet,
                  x_init=None):
    """Upper and lower bounds on the best level-1 (homogeneous) fit error.

    With M_i the KKT matrix of agent i's true hypothesized game, zbar_i its
    solution, Theta_check the homogeneous row of agents' own true parameters,
    and M_harm the inverse of the averaged inverses of the M_i:

        upper = 1/2 sum_i (sigma_max(M_i - M(Theta_check))
                           / sigma_min(M(Theta_check)) * |zbar_i|)^2
        lower = 1/2 sum_i (|E_i (M_i - M_harm) zbar_i| / sigma_max(M_harm))^2

    Both bracket the residual-norm form of the level-1 loss on the instance
    families exercised here; see the module docstring for the convention.
    """
    _require_shared_linear(game)
    N = game.n_agents
    Ms, zs = [], []
    layout = None
    for i in range(N):
        kkt = assemble_kkt(game, ground_truth.row(i), x_init=x_init)
        eq = solve_lq_equilibrium(kkt)
        Ms.append(kkt.M)
        zs.append(eq.zbar)
        layout = kkt.layout

    own_row = [ground_truth.own(j) for j in range(N)]
    M_check = assemble_kkt(game, own_row, x_init=x_init).M
    inv_mean = sum(np.linalg.inv(Mi) for Mi in Ms) / N
    try:
        M_harm = np.linalg.inv(inv_mean)
    except np.linalg.LinAlgError as exc:
        raise SingularKKTError("averaged inverse KKT matrix is singular") from exc

    smax_harm, _ = _sigma_extremes(M_harm)
    _, smin_check = _sigma_extremes(M_check)
    if smin_check <= 0:
        raise SingularKKTError("homogeneous KKT matrix is singular")

    upper = 0.0
    lower = 0.0
    for i in range(N):
        smax_diff_check, _ = _sigma_extremes(Ms[i] - M_check)
        upper += 0.5 * (smax_diff_check / smin_check * np.linalg.norm(zs[i])) ** 2
        E = control_selector(layout, i).E
        lower += 0.5 * (np.linalg.norm(E @ (Ms[i] - M_harm) @ zs[i]) / smax_harm) ** 2
    return float(lower), float(upper)


def heterogeneity(game: ParameterizedGame, ground_truth: Level2ParamSet) -> float:
    """Spread of agents' hypothesized KKT operators around their harmonic mean.

    sum_i sigma_max(M_i - M_harm), zero exactly when all rows agree.
    """
    _require_shared_linear(game)
    N = game.n_agents
    Ms = [assemble_kkt(game, ground_truth.row(i)).M for i in range(N)]
    if N == 1:
        return 0.0
    inv_mean = sum(np.linalg.inv(Mi) for Mi in Ms) / N
    M_harm = np.linalg.inv(inv_mean)
    return float(sum(_sigma_extremes(Mi - M_harm)[0] for Mi in Ms))
