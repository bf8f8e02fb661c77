"""Mixed-complementarity transcription and differentiable solve of trajectory games.

A hypothesized game (one belief row) is transcribed into the square system

    0 = F_eq(z; theta)           stationarity, equalities, initial state, dynamics
    0 <= gamma  perp  F_ineq(z; theta) >= 0

over z = [X, U, lambda, eta, mu, gamma].  Two game kinds are supported:

* shared-linear quadratic games, whose F_eq is affine with coefficient matrix
  identical to the direct KKT assembly in :mod:`level2games.lq` (same row and
  column order, so the two pipelines are comparable entry by entry), and
* per-agent-dynamics games with box bounds and stagewise inequality
  constraints, where each agent's stationarity is taken over its own decision
  variables only and shared constraints carry one multiplier per agent.

The solver is a damped semismooth Newton method on the Fischer-Burmeister
reformulation phi(a, b) = sqrt(a^2 + b^2) - a - b, globalized by a monotone
Armijo line search on the merit 1/2 |Phi|^2, Tikhonov-regularized steps when
the Newton system is singular, and a smoothing homotopy
phi_mu = sqrt(a^2 + b^2 + 2 mu) - a - b with mu driven to zero.  Because a
shared constraint active in both agents' sets duplicates complementarity rows,
the plain Newton matrix is singular exactly at such solutions; the smoothing
keeps those rows independent along the way.  A cascade of deterministic
starting strategies (warm start, homotopy, a decoupled solve with coupled
constraints disabled, a slower homotopy) stands in for the robustness of a
production complementarity solver.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .game_model import ParameterizedGame

__all__ = [
    "MCPSettings",
    "MCPSolution",
    "MCPProblem",
    "DegenerateComplementarityError",
    "SensitivityError",
    "transcribe",
    "cold_start_guess",
    "shift_guess",
    "solve_mcp",
    "check_strict_complementarity",
    "sensitivity",
]

_SPARSE_CUTOFF = 250  # factorize dense below this total dimension


class DegenerateComplementarityError(RuntimeError):
    def __init__(self, message, indices=None):
        super().__init__(message)
        self.indices = indices


class SensitivityError(RuntimeError):
    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


@dataclass(frozen=True)
class MCPSettings:
    tol: float = 1e-6
    max_iter: int = 100000
    comp_tol: float = 1e-2
    eps_act: float = 1e-5


@dataclass(frozen=True)
class MCPSolution:
    z_star: np.ndarray
    residual_norm: float
    iterations: int
    status: str                      # converged | max_iter | line_search_failure
    active: np.ndarray
    inactive: np.ndarray
    degenerate: np.ndarray
    ineq_values: np.ndarray
    feq_norm: float
    comp_residual: float

    @property
    def converged(self) -> bool:
        return self.status == "converged"


@dataclass(frozen=True)
class _GammaEntry:
    kind: str      # stage | xlb | xub | ulb | uub
    agent: int
    block: int     # constraint index or state/control dim
    t: int


class _PerAgentLayout:
    """Index bookkeeping for z = [X, U, lambda, eta, mu, gamma]."""

    def __init__(self, game: ParameterizedGame):
        dyn = game.dynamics
        T = game.horizon
        self.T = T
        self.N = game.n_agents
        self.n = dyn.state_dim
        self.state_dims = dyn.state_dims
        self.control_dims = dyn.control_dims
        self.m = sum(self.control_dims)
        self.n_x = T * self.n
        self.n_u = T * self.m
        self.n_lam = (T - 1) * self.n
        self.n_eta = self.n
        self.n_mu = sum(len(eqs) for eqs in game.constraints.equalities) if game.constraints.equalities else 0
        self.off_u = self.n_x
        self.off_lam = self.off_u + self.n_u
        self.off_eta = self.off_lam + self.n_lam
        self.off_mu = self.off_eta + self.n_eta
        self.off_gamma = self.off_mu + self.n_mu

        cons = game.constraints
        self.gamma_entries: list[_GammaEntry] = []
        for j in range(self.N):
            ineqs = cons.inequalities[j] if cons.inequalities else ()
            for ci, c in enumerate(ineqs):
                for t in c.stage_range(T):
                    self.gamma_entries.append(_GammaEntry("stage", j, ci, t))
            nj, mj = self.state_dims[j], self.control_dims[j]
            if cons.state_box is not None:
                lo, hi = cons.state_box.lower, cons.state_box.upper
                for t in range(T):
                    for d in range(nj):
                        if np.isfinite(lo[d]):
                            self.gamma_entries.append(_GammaEntry("xlb", j, d, t))
                    for d in range(nj):
                        if np.isfinite(hi[d]):
                            self.gamma_entries.append(_GammaEntry("xub", j, d, t))
            if cons.control_box is not None:
                lo, hi = cons.control_box.lower, cons.control_box.upper
                for t in range(T):
                    for d in range(mj):
                        if np.isfinite(lo[d]):
                            self.gamma_entries.append(_GammaEntry("ulb", j, d, t))
                    for d in range(mj):
                        if np.isfinite(hi[d]):
                            self.gamma_entries.append(_GammaEntry("uub", j, d, t))
        self.n_gamma = len(self.gamma_entries)
        self.dim = self.off_gamma + self.n_gamma
        self.n_eq = self.off_gamma

        # equation rows: per agent [stat_x (T*nj), stat_u (T*mj)], then shared
        # init rows (n) and dynamics rows ((T-1)*n)
        self._stat_row_off = []
        off = 0
        for j in range(self.N):
            self._stat_row_off.append(off)
            off += T * (self.state_dims[j] + self.control_dims[j])
        self._init_row_off = off
        off += self.n
        self._dyn_row_off = off
        off += (T - 1) * self.n
        assert off == self.n_eq, (off, self.n_eq)

    # --- column helpers ---
    def x_cols(self, t, j):
        off = t * self.n + sum(self.state_dims[:j])
        return slice(off, off + self.state_dims[j])

    def u_cols(self, t, j):
        off = self.off_u + t * self.m + sum(self.control_dims[:j])
        return slice(off, off + self.control_dims[j])

    def lam_cols(self, t, j):
        off = self.off_lam + sum((self.T - 1) * nj for nj in self.state_dims[:j]) \
            + t * self.state_dims[j]
        return slice(off, off + self.state_dims[j])

    def eta_cols(self, j):
        off = self.off_eta + sum(self.state_dims[:j])
        return slice(off, off + self.state_dims[j])

    # --- equation row helpers ---
    def stat_x_rows(self, t, j):
        off = self._stat_row_off[j] + t * self.state_dims[j]
        return slice(off, off + self.state_dims[j])

    def stat_u_rows(self, t, j):
        off = self._stat_row_off[j] + self.T * self.state_dims[j] + t * self.control_dims[j]
        return slice(off, off + self.control_dims[j])

    def init_rows(self, j):
        off = self._init_row_off + sum(self.state_dims[:j])
        return slice(off, off + self.state_dims[j])

    def dyn_rows(self, t, j):
        off = self._dyn_row_off + t * self.n + sum(self.state_dims[:j])
        return slice(off, off + self.state_dims[j])


class MCPProblem:
    """Immutable transcription of one hypothesized game.

    Exposes the residual maps and their Jacobians with respect to both the
    stacked variable z and the belief-row parameter vector.  ``gamma_range``
    is the slice of z holding the inequality multipliers.
    """

    def __init__(self, game: ParameterizedGame, params_row, x_init, horizon=None):
        if horizon is not None and horizon != game.horizon:
            game = game.with_horizon(horizon)
        self.game = game
        self.params_row = game.validate_params_row(params_row)
        self.x_init = np.asarray(x_init if x_init is not None else game.x_init, dtype=float)
        if self.x_init.shape != (game.state_dim,):
            raise ValueError("x_init dimension does not match the game")
        self.kind = game.dynamics.kind
        if self.kind == "shared-linear":
            from . import lq
            cons = game.constraints
            if (cons.state_box is not None or cons.control_box is not None
                    or any(len(c) for c in (cons.inequalities or ()))):
                raise NotImplementedError(
                    "shared-linear transcription supports unconstrained games only")
            self._kkt = lq.assemble_kkt(game, self.params_row, x_init=self.x_init)
            self.layout = self._kkt.layout
            self.dim = self.layout.dim
            self.n_eq = self.layout.dim
            self.n_gamma = 0
            self.gamma_range = slice(self.dim, self.dim)
        else:
            for cost in game.costs:
                missing = [m for m in ("grad", "hess", "grad_param_jac") if not hasattr(cost, m)]
                if missing:
                    raise ValueError(f"cost model lacks derivative callbacks: {missing}")
            self.layout = _PerAgentLayout(game)
            self.dim = self.layout.dim
            self.n_eq = self.layout.n_eq
            self.n_gamma = self.layout.n_gamma
            self.gamma_range = slice(self.layout.off_gamma, self.dim)
            self._prepare_box_index()
        self.param_dims = game.param_dims
        self.param_dim_total = sum(self.param_dims)

    def with_params(self, params_row, x_init=None) -> "MCPProblem":
        return MCPProblem(self.game, params_row,
                          self.x_init if x_init is None else x_init)

    # ------------------------------------------------------------------
    def _prepare_box_index(self):
        lo = self.layout
        cons = self.game.constraints
        rows, cols, signs, consts = [], [], [], []
        stage_idx = []
        for k, e in enumerate(lo.gamma_entries):
            if e.kind == "stage":
                stage_idx.append(k)
                continue
            if e.kind == "xlb":
                col = lo.x_cols(e.t, e.agent).start + e.block
                sign, const = 1.0, -cons.state_box.lower[e.block]
            elif e.kind == "xub":
                col = lo.x_cols(e.t, e.agent).start + e.block
                sign, const = -1.0, cons.state_box.upper[e.block]
            elif e.kind == "ulb":
                col = lo.u_cols(e.t, e.agent).start + e.block
                sign, const = 1.0, -cons.control_box.lower[e.block]
            else:
                col = lo.u_cols(e.t, e.agent).start + e.block
                sign, const = -1.0, cons.control_box.upper[e.block]
            rows.append(k)
            cols.append(col)
            signs.append(sign)
            consts.append(const)
        self._box_rows = np.array(rows, dtype=int)
        self._box_cols = np.array(cols, dtype=int)
        self._box_signs = np.array(signs)
        self._box_consts = np.array(consts)
        self._stage_rows = np.array(stage_idx, dtype=int)

    # ------------------------------------------------------------------
    def residuals(self, z, mask_coupled=False):
        """(F_eq, F_ineq) at z."""
        if self.kind == "shared-linear":
            return self._kkt.M @ z + self._kkt.S @ self.x_init, np.zeros(0)
        return self._feq(z), self._ineq(z, mask_coupled)

    def f_eq(self, z):
        return self.residuals(z)[0]

    def f_ineq(self, z):
        return self.residuals(z)[1]

    def _ineq(self, z, mask_coupled=False):
        lo = self.layout
        g = np.empty(lo.n_gamma)
        if self._box_rows.size:
            g[self._box_rows] = self._box_signs * z[self._box_cols] + self._box_consts
        X = z[:lo.n_x].reshape(lo.T, lo.n)
        for k in self._stage_rows:
            e = lo.gamma_entries[k]
            c = self.game.constraints.inequalities[e.agent][e.block]
            if mask_coupled and getattr(c, "coupled", True):
                g[k] = 1.0
            else:
                g[k] = c.value(X[e.t])
        return g

    def _feq(self, z, mask_coupled=False):
        lo = self.layout
        game = self.game
        T, N = lo.T, lo.N
        X = z[:lo.n_x].reshape(T, lo.n)
        F = np.zeros(lo.n_eq)
        gamma = z[lo.off_gamma:]
        jacs = self._dyn_jacobians(z)
        for j in range(N):
            xs = game.dynamics.state_slice(j)
            us = game.control_slices()[j]
            theta = self.params_row[j]
            cost = game.costs[j]
            for t in range(T):
                x_t = X[t]
                u_t = z[lo.u_cols(t, j)]
                gx, gu = cost.grad(t, x_t, u_t, theta)
                gx = gx.copy()
                gu = gu.copy()
                # inequality multipliers of agent j acting on its own block
                for k in self._stage_rows:
                    e = lo.gamma_entries[k]
                    if e.agent != j or e.t != t:
                        continue
                    c = game.constraints.inequalities[j][e.block]
                    if mask_coupled and getattr(c, "coupled", True):
                        continue
                    gx -= gamma[k] * c.grad(x_t)[xs]
                if t <= T - 2:
                    fx, fu = jacs[j][t]
                    lam_t = z[lo.lam_cols(t, j)]
                    gx -= fx.T @ lam_t
                    gu -= fu.T @ lam_t
                if t >= 1:
                    gx += z[lo.lam_cols(t - 1, j)]
                if t == 0:
                    gx += z[lo.eta_cols(j)]
                F[lo.stat_x_rows(t, j)] = gx
                F[lo.stat_u_rows(t, j)] = gu
            F[lo.init_rows(j)] = X[0, xs] - self.x_init[xs]
            for t in range(T - 1):
                F[lo.dyn_rows(t, j)] = X[t + 1, xs] - game.dynamics.step_fns[j](
                    X[t, xs], z[lo.u_cols(t, j)])
        # box multipliers enter stationarity linearly: -gamma for lower
        # bounds, +gamma for upper (their gradients are +/- unit vectors)
        if self._box_rows.size:
            np.subtract.at(F, self._stat_index_of_cols(self._box_cols),
                           self._box_signs * gamma[self._box_rows])
        return F

    def _stat_index_of_cols(self, cols):
        # map z columns of primal vars to their stationarity row indices
        if not hasattr(self, "_col_to_stat"):
            lo = self.layout
            m = np.full(lo.dim, -1, dtype=int)
            for j in range(lo.N):
                for t in range(lo.T):
                    m[lo.x_cols(t, j)] = np.arange(lo.stat_x_rows(t, j).start,
                                                   lo.stat_x_rows(t, j).stop)
                    m[lo.u_cols(t, j)] = np.arange(lo.stat_u_rows(t, j).start,
                                                   lo.stat_u_rows(t, j).stop)
            self._col_to_stat = m
        return self._col_to_stat[cols]

    def _dyn_jacobians(self, z):
        lo = self.layout
        out = []
        X = z[:lo.n_x].reshape(lo.T, lo.n)
        for j in range(lo.N):
            xs = self.game.dynamics.state_slice(j)
            rows = []
            for t in range(lo.T - 1):
                rows.append(self.game.dynamics.jac_fns[j](X[t, xs], z[lo.u_cols(t, j)]))
            out.append(rows)
        return out

    # ------------------------------------------------------------------
    def eq_jacobian(self, z, mask_coupled=False):
        """d F_eq / d z (dense)."""
        if self.kind == "shared-linear":
            return self._kkt.M.copy()
        lo = self.layout
        game = self.game
        T, N = lo.T, lo.N
        X = z[:lo.n_x].reshape(T, lo.n)
        J = np.zeros((lo.n_eq, lo.dim))
        gamma = z[lo.off_gamma:]
        jacs = self._dyn_jacobians(z)
        for j in range(N):
            xs = game.dynamics.state_slice(j)
            theta = self.params_row[j]
            cost = game.costs[j]
            nj = lo.state_dims[j]
            for t in range(T):
                rx = lo.stat_x_rows(t, j)
                ru = lo.stat_u_rows(t, j)
                u_t = z[lo.u_cols(t, j)]
                Hxx, Huu = cost.hess(t, X[t], u_t, theta)
                J[rx, lo.x_cols(t, j)] += Hxx
                J[ru, lo.u_cols(t, j)] += Huu
                for k in self._stage_rows:
                    e = lo.gamma_entries[k]
                    if e.agent != j or e.t != t:
                        continue
                    c = game.constraints.inequalities[j][e.block]
                    if mask_coupled and getattr(c, "coupled", True):
                        continue
                    H = c.hess(lo.n)
                    J[rx, lo.x_cols(t, 0).start:lo.x_cols(t, N - 1).stop] -= \
                        gamma[k] * H[xs, :]
                    J[rx, lo.off_gamma + k] -= c.grad(X[t])[xs]
                if t <= T - 2:
                    fx, fu = jacs[j][t]
                    lam_t = z[lo.lam_cols(t, j)]
                    J[rx, lo.lam_cols(t, j)] += -fx.T
                    J[ru, lo.lam_cols(t, j)] += -fu.T
                    # curvature of the dynamics map is zero for the linear
                    # blocks used here; nonlinear maps would add
                    # -d(fx' lam)/dx terms via second derivatives
                if t >= 1:
                    J[rx, lo.lam_cols(t - 1, j)] += np.eye(nj)
                if t == 0:
                    J[rx, lo.eta_cols(j)] += np.eye(nj)
            J[lo.init_rows(j), lo.x_cols(0, j)] += np.eye(nj)
            for t in range(T - 1):
                rd = lo.dyn_rows(t, j)
                fx, fu = jacs[j][t]
                J[rd, lo.x_cols(t + 1, j)] += np.eye(nj)
                J[rd, lo.x_cols(t, j)] += -fx
                J[rd, lo.u_cols(t, j)] += -fu
        if self._box_rows.size:
            J[self._stat_index_of_cols(self._box_cols),
              lo.off_gamma + self._box_rows] -= self._box_signs
        return J

    def ineq_jacobian(self, z, mask_coupled=False):
        """d F_ineq / d z (dense, n_gamma x dim)."""
        lo = self.layout
        G = np.zeros((lo.n_gamma, lo.dim))
        if self._box_rows.size:
            G[self._box_rows, self._box_cols] = self._box_signs
        X = z[:lo.n_x].reshape(lo.T, lo.n)
        for k in self._stage_rows:
            e = lo.gamma_entries[k]
            c = self.game.constraints.inequalities[e.agent][e.block]
            if mask_coupled and getattr(c, "coupled", True):
                continue
            G[k, e.t * lo.n:(e.t + 1) * lo.n] = c.grad(X[e.t])
        return G

    def eq_jac_theta(self, z):
        """d F_eq / d theta over the concatenated belief-row vector."""
        if self.kind == "shared-linear":
            lo = self.layout
            out = np.zeros((lo.dim, self.param_dim_total))
            X = z[:lo.n_x].reshape(lo.horizon, lo.state_dim)
            off = 0
            for j, cost in enumerate(self.game.costs):
                basis = cost.q_param.basis()
                for k, E in enumerate(basis):
                    col = np.zeros(lo.dim)
                    for t in range(lo.horizon):
                        col[lo.stat_x_rows(t, j)] = E @ X[t]
                    out[:, off + k] = col
                off += len(basis)
            return out
        lo = self.layout
        out = np.zeros((lo.n_eq, self.param_dim_total))
        X = z[:lo.n_x].reshape(lo.T, lo.n)
        off = 0
        for j, cost in enumerate(self.game.costs):
            theta = self.params_row[j]
            for t in range(lo.T):
                u_t = z[lo.u_cols(t, j)]
                Jx, Ju = cost.grad_param_jac(t, X[t], u_t, theta)
                out[lo.stat_x_rows(t, j), off:off + cost.param_dim] += Jx
                out[lo.stat_u_rows(t, j), off:off + cost.param_dim] += Ju
            off += cost.param_dim
        return out

    # ------------------------------------------------------------------
    def fb_residual(self, z, mu=0.0, mask_coupled=False):
        """Stacked root-finding residual [F_eq; phi_mu(gamma, F_ineq)]."""
        feq, g = self.residuals(z, mask_coupled)
        if self.n_gamma == 0:
            return feq, g
        a = z[self.gamma_range]
        r = np.sqrt(a * a + g * g + 2.0 * mu)
        return np.concatenate([feq, r - a - g]), g

    def fb_jacobian(self, z, mu=0.0, mask_coupled=False):
        feq_jac = self.eq_jacobian(z, mask_coupled)
        if self.n_gamma == 0:
            return feq_jac
        g = self._ineq(z, mask_coupled)
        a = z[self.gamma_range]
        r = np.sqrt(a * a + g * g + 2.0 * mu)
        tiny = r < 1e-14
        safe_r = np.where(tiny, 1.0, r)
        da = np.where(tiny, 1.0 / np.sqrt(2.0) - 1.0, a / safe_r - 1.0)
        db = np.where(tiny, 1.0 / np.sqrt(2.0) - 1.0, g / safe_r - 1.0)
        G = self.ineq_jacobian(z, mask_coupled)
        fb = db[:, None] * G
        fb[np.arange(self.n_gamma),
           np.arange(self.gamma_range.start, self.gamma_range.stop)] += da
        return np.vstack([feq_jac, fb])

    def convergence_report(self, z, settings: MCPSettings):
        feq, g = self.residuals(z)
        gamma = z[self.gamma_range]
        feq_norm = float(np.max(np.abs(feq))) if feq.size else 0.0
        if self.n_gamma:
            comp = float(np.max(np.abs(np.minimum(gamma, g))))
            sign_ok = bool(np.min(gamma) >= -settings.tol and np.min(g) >= -settings.tol)
        else:
            comp, sign_ok = 0.0, True
        ok = feq_norm <= settings.tol and sign_ok and comp <= settings.comp_tol
        return ok, feq_norm, comp, g


def transcribe(game: ParameterizedGame, params_row, x_init=None,
               T: Optional[int] = None) -> MCPProblem:
    """Build the complementarity system whose solutions are equilibrium candidates."""
    return MCPProblem(game, params_row, x_init, horizon=T)


def cold_start_guess(problem: MCPProblem) -> np.ndarray:
    """Zero-control state rollout from the initial state; all multipliers zero."""
    z = np.zeros(problem.dim)
    game = problem.game
    T = game.horizon
    n = game.state_dim
    x = problem.x_init.copy()
    X = np.empty((T, n))
    zero_u = [np.zeros(m) for m in game.control_dims]
    for t in range(T):
        X[t] = x
        x = game.dynamics.step(x, zero_u)
    z[:T * n] = X.ravel()
    return z


def shift_guess(problem: MCPProblem, z: np.ndarray, shift: int,
                x_init=None) -> np.ndarray:
    """Shift a previous solution forward in time to warm-start a replan.

    States and controls move ``shift`` steps earlier; the state tail is padded
    by a zero-control rollout and controls by zeros; time-indexed multipliers
    shift with zero padding.  When given, the first state is pinned to the new
    initial state.
    """
    if shift <= 0:
        out = z.copy()
    elif problem.kind == "shared-linear":
        lo = problem.layout
        T, n, m = lo.horizon, lo.state_dim, lo.m_total
        out = np.zeros_like(z)
        X = z[:lo.n_x].reshape(T, n)
        U = z[lo.n_x:lo.n_x + lo.n_u].reshape(T, m)
        Xn = np.zeros_like(X)
        Un = np.zeros_like(U)
        keep = max(T - shift, 0)
        Xn[:keep] = X[shift:shift + keep]
        Un[:keep] = U[shift:shift + keep]
        for t in range(keep, T):
            prev = Xn[t - 1] if t else problem.x_init
            Xn[t] = problem.game.dynamics.A @ prev
        out[:lo.n_x] = Xn.ravel()
        out[lo.n_x:lo.n_x + lo.n_u] = Un.ravel()
        lam = z[lo.n_x + lo.n_u:lo.n_x + lo.n_u + lo.n_lam].reshape(T - 1, -1)
        lam_n = np.zeros_like(lam)
        lam_n[:max(T - 1 - shift, 0)] = lam[shift:]
        out[lo.n_x + lo.n_u:lo.n_x + lo.n_u + lo.n_lam] = lam_n.ravel()
        out[lo.n_x + lo.n_u + lo.n_lam:] = z[lo.n_x + lo.n_u + lo.n_lam:]
    else:
        lo = problem.layout
        T, n, m = lo.T, lo.n, lo.m
        out = np.zeros_like(z)
        X = z[:lo.n_x].reshape(T, n)
        U = z[lo.off_u:lo.off_lam].reshape(T, m)
        Xn = np.zeros_like(X)
        Un = np.zeros_like(U)
        keep = max(T - shift, 0)
        Xn[:keep] = X[shift:shift + keep]
        Un[:keep] = U[shift:shift + keep]
        zero_u = [np.zeros(mm) for mm in lo.control_dims]
        for t in range(keep, T):
            prev = Xn[t - 1] if t else problem.x_init
            Xn[t] = problem.game.dynamics.step(prev, zero_u)
        out[:lo.n_x] = Xn.ravel()
        out[lo.off_u:lo.off_lam] = Un.ravel()
        for j in range(lo.N):
            for t in range(T - 1 - shift):
                out[lo.lam_cols(t, j)] = z[lo.lam_cols(t + shift, j)]
            out[lo.eta_cols(j)] = z[lo.eta_cols(j)]
        gshift = _gamma_shift_map(problem, shift)
        gamma = z[lo.off_gamma:]
        shifted = np.zeros_like(gamma)
        valid = gshift >= 0
        shifted[valid] = gamma[gshift[valid]]
        out[lo.off_gamma:] = shifted
    if x_init is not None:
        out = out.copy()
        out[:problem.game.state_dim] = np.asarray(x_init, dtype=float)
    return out


def _gamma_shift_map(problem: MCPProblem, shift: int) -> np.ndarray:
    cache = getattr(problem, "_gamma_shift_cache", None)
    if cache is None:
        cache = {}
        problem._gamma_shift_cache = cache
    if shift in cache:
        return cache[shift]
    lo = problem.layout
    index = {}
    for k, e in enumerate(lo.gamma_entries):
        index[(e.kind, e.agent, e.block, e.t)] = k
    out = np.full(lo.n_gamma, -1, dtype=int)
    for k, e in enumerate(lo.gamma_entries):
        src = index.get((e.kind, e.agent, e.block, e.t + shift))
        if src is not None:
            out[k] = src
    cache[shift] = out
    return out


# ----------------------------------------------------------------------
# solver

def _linear_solve(J, rhs):
    if J.shape[0] >= _SPARSE_CUTOFF:
        d = spla.splu(sp.csc_matrix(J)).solve(rhs)
    else:
        d = np.linalg.solve(J, rhs)
    if not np.all(np.isfinite(d)):
        raise np.linalg.LinAlgError("non-finite solution")
    return d


def _newton_leg(problem, z, mu, tol, max_iter, mask_coupled=False):
    """Damped Newton on the (smoothed) FB system; returns (z, iters, ok)."""
    reg = 0.0
    it = 0
    while it < max_iter:
        it += 1
        phi, _ = problem.fb_residual(z, mu, mask_coupled)
        res = float(np.max(np.abs(phi))) if phi.size else 0.0
        if res <= tol:
            return z, it, True
        J = problem.fb_jacobian(z, mu, mask_coupled)
        d = None
        if reg == 0.0:
            try:
                d = _linear_solve(J, -phi)
            except (np.linalg.LinAlgError, RuntimeError):
                reg = 1e-8
        if d is None:
            # Tikhonov-regularized least-squares step for singular systems
            JtJ = J.T @ J + reg * np.eye(problem.dim)
            try:
                d = np.linalg.solve(JtJ, -(J.T @ phi))
            except np.linalg.LinAlgError:
                reg *= 10.0
                if reg > 1e-2:
                    return z, it, False
                continue
        merit0 = 0.5 * float(phi @ phi)
        step, accepted = 1.0, False
        while step > 1e-12:
            z_new = z + step * d
            phi_new, _ = problem.fb_residual(z_new, mu, mask_coupled)
            if 0.5 * float(phi_new @ phi_new) <= (1.0 - 1e-4 * step) * merit0:
                accepted = True
                break
            step *= 0.5
        if accepted:
            z = z_new
            if step == 1.0:
                reg = 0.0
        else:
            reg = 1e-8 if reg == 0.0 else reg * 10.0
            if reg > 1e-2:
                return z, it, False
    return z, it, False


_MU_SCHEDULE = (1e-2, 1e-4, 1e-6, 1e-8, 0.0)
_MU_SCHEDULE_SLOW = (1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 1e-4, 1e-5, 1e-6, 1e-8, 0.0)


def _homotopy(problem, z, settings, budget, mus=_MU_SCHEDULE, per_leg=60,
              mask_coupled=False):
    used = 0
    for mu in mus:
        leg_tol = max(settings.tol, 2.0 * np.sqrt(2.0 * mu)) if mu > 0 else settings.tol
        z, its, _ = _newton_leg(problem, z, mu, leg_tol,
                                min(per_leg, max(budget - used, 1)), mask_coupled)
        used += its
        if not mask_coupled and problem.convergence_report(z, settings)[0]:
            return z, used, True
        if used >= budget:
            break
    ok = (not mask_coupled) and problem.convergence_report(z, settings)[0]
    return z, used, ok


def _has_coupled(problem) -> bool:
    if problem.kind == "shared-linear":
        return False
    ineqs = problem.game.constraints.inequalities or ()
    return any(getattr(c, "coupled", True) for cs in ineqs for c in cs
               if not isinstance(c, tuple))


def solve_mcp(problem: MCPProblem, z0: Optional[np.ndarray] = None,
              settings: Optional[MCPSettings] = None) -> MCPSolution:
    """Find a complementarity solution, trying progressively heavier strategies.

    Order: plain Newton from the warm start, smoothing homotopy from the warm
    start, homotopy from a cold start, a decoupled warm-up (coupled stage
    constraints disabled) followed by the homotopy, and finally a slower
    homotopy from cold.  All strategies are deterministic.
    """
    if settings is None:
        settings = MCPSettings()
    if z0 is not None and z0.shape != (problem.dim,):
        raise ValueError(f"initial guess has dim {z0.shape}, expected {problem.dim}")
    budget = settings.max_iter
    used = 0
    best = None

    def record(z):
        nonlocal best
        ok, feq_norm, comp, g = problem.convergence_report(z, settings)
        phi, _ = problem.fb_residual(z)
        score = float(np.max(np.abs(phi))) if phi.size else 0.0
        if best is None or (ok and not best[1]) or (ok == best[1] and score < best[2]):
            best = (z, ok, score, feq_norm, comp, g)
        return ok

    if z0 is not None:
        z, its, _ = _newton_leg(problem, z0.copy(), 0.0, settings.tol,
                                min(40, budget))
        used += its
        if record(z):
            return _finish(problem, best, used, settings)
        z, its, ok = _homotopy(problem, z0.copy(), settings, budget - used)
        used += its
        if record(z):
            return _finish(problem, best, used, settings)

    if used < budget:
        z, its, ok = _homotopy(problem, cold_start_guess(problem), settings,
                               budget - used)
        used += its
        if record(z):
            return _finish(problem, best, used, settings)

    if _has_coupled(problem) and used < budget:
        z, its, _ = _homotopy(problem, cold_start_guess(problem), settings,
                              budget - used, mus=(1e-2, 1e-6, 0.0), per_leg=50,
                              mask_coupled=True)
        used += its
        z, its, ok = _homotopy(problem, z, settings, budget - used)
        used += its
        if record(z):
            return _finish(problem, best, used, settings)

    if used < budget:
        z, its, ok = _homotopy(problem, cold_start_guess(problem), settings,
                               budget - used, mus=_MU_SCHEDULE_SLOW, per_leg=40)
        used += its
        record(z)

    return _finish(problem, best, used, settings)


def _finish(problem, best, iterations, settings):
    z, ok, score, feq_norm, comp, g = best
    gamma = z[problem.gamma_range]
    active, inactive, degenerate = _classify(gamma, g, settings.eps_act)
    if ok:
        status = "converged"
    elif iterations >= settings.max_iter:
        status = "max_iter"
    else:
        status = "line_search_failure"
    return MCPSolution(z_star=z, residual_norm=score, iterations=iterations,
                       status=status, active=active, inactive=inactive,
                       degenerate=degenerate, ineq_values=g, feq_norm=feq_norm,
                       comp_residual=comp)


def _classify(gamma, g, eps_act):
    if gamma.size == 0:
        empty = np.zeros(0, dtype=int)
        return empty, empty.copy(), empty.copy()
    act = (g <= eps_act) & (gamma > eps_act)
    ina = (gamma <= eps_act) & (g > eps_act)
    deg = (g <= eps_act) & (gamma <= eps_act)
    return np.where(act)[0], np.where(ina)[0], np.where(deg)[0]


def check_strict_complementarity(solution: MCPSolution, eps_act: float = 1e-5):
    """Partition inequality indices into active, inactive, and degenerate sets."""
    if not solution.converged:
        raise ValueError("solution did not converge")
    gamma = solution.z_star[-solution.ineq_values.shape[0]:] \
        if solution.ineq_values.shape[0] else np.zeros(0)
    active, inactive, degenerate = _classify(gamma, solution.ineq_values, eps_act)
    return {"active": active, "inactive": inactive, "degenerate": degenerate}


def sensitivity(problem: MCPProblem, solution: MCPSolution,
                eps_act: float = 1e-5) -> np.ndarray:
    """d z* / d theta by the implicit function theorem on the active system.

    Active inequalities are frozen as equalities, inactive multipliers are
    dropped (their sensitivity is zero), and the reduced linear system is
    solved for every parameter direction at once.  A shared constraint active
    in several agents' sets duplicates rows, so the reduced matrix is solved
    in the least-squares sense; an inconsistent or wildly ill-conditioned
    system raises :class:`SensitivityError`.
    """
    if not solution.converged:
        raise ValueError("sensitivity needs a converged solution")
    z = solution.z_star
    gamma = z[problem.gamma_range]
    g = solution.ineq_values
    active, inactive, degenerate = _classify(gamma, g, eps_act)
    if degenerate.size:
        raise DegenerateComplementarityError(
            f"{degenerate.size} inequality rows are degenerate (both the "
            "multiplier and the residual vanish); strict complementarity fails",
            indices=degenerate)

    J_eq = problem.eq_jacobian(z)
    dF_theta = problem.eq_jac_theta(z)
    if problem.n_gamma:
        G = problem.ineq_jacobian(z)
        rows = np.vstack([J_eq, G[active]])
        rhs = -np.vstack([dF_theta, np.zeros((active.size, dF_theta.shape[1]))])
    else:
        rows = J_eq
        rhs = -dF_theta
    keep_cols = np.concatenate([
        np.arange(problem.gamma_range.start),
        problem.gamma_range.start + active,
    ]).astype(int)
    J_red = rows[:, keep_cols]
    sol, _, rank, svals = np.linalg.lstsq(J_red, rhs, rcond=None)
    resid = J_red @ sol - rhs
    scale = 1.0 + float(np.max(np.abs(rhs))) if rhs.size else 1.0
    if float(np.max(np.abs(resid))) > 1e-6 * scale:
        cond = float(svals[0] / svals[-1]) if svals[-1] > 0 else np.inf
        raise SensitivityError(
            "reduced sensitivity system is inconsistent "
            f"(residual {np.max(np.abs(resid)):.2e})", condition=cond)
    out = np.zeros((problem.dim, dF_theta.shape[1]))
    out[keep_cols] = sol
    return out
