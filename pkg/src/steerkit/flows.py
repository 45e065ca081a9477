"""Drift flows, flow Jacobians, the controlled state-transition matrix and
the adjoint rows of the steering operators.

Conventions: R_u(T, t) is the STM of the linearization of the controlled
dynamics along x_u, propagated by one backward sweep of
dR/dt = -R A_u(t) from R_u(T,T) = Id.  The drift-flow Jacobians
DPhi_{t_j, tau}(x_u(t_j)) need one independent variational solve per node;
those solves share step times, so they march together as a batched
triangular sweep (lane j activates at node j).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, GridError
from .models import ControlSignal, SystemModel, Trajectory, TransferProblem
from .ode import TimeGrid

__all__ = [
    "StmField",
    "FlowJacobianField",
    "AdjointRows",
    "flow_map",
    "flow_jacobian",
    "controlled_stm",
    "flow_jacobian_field",
    "adjoint_rows",
    "apply_L",
    "transfer_target",
    "feasibility_residual",
]

# default node density for standalone flow solves (nodes per unit time)
_FLOW_STEPS_PER_UNIT = 256


@dataclass(eq=False)
class StmField:
    """R_u(T, t_j) at every node; matrices[-1] is the identity."""

    grid: TimeGrid
    matrices: np.ndarray = field(repr=False)


@dataclass(eq=False)
class FlowJacobianField:
    """DPhi_{t_j, tau}(x_u(t_j)) at every node for a fixed anchor tau."""

    grid: TimeGrid
    anchor: str
    matrices: np.ndarray = field(repr=False)


@dataclass(eq=False)
class AdjointRows:
    """Per-node k x d rows of the adjoints: L_rows = B^T DPhi^T and
    DF_rows = B^T Q^T with Q(T,t) = DPhi_{T,tau}(x_u(T)) R_u(T,t)."""

    grid: TimeGrid
    anchor: str
    L_rows: np.ndarray = field(repr=False)
    DF_rows: np.ndarray = field(repr=False)


def _check_finite_lanes(Y, what):
    ok = np.isfinite(Y).reshape(Y.shape[0], -1).all(axis=1)
    if not ok.all():
        bad = int(np.argmin(ok))
        raise DivergenceError(f"{what} diverged at node {bad}", node=bad)


def _rk4_drift_step(system, t, h, x, Y=None):
    """One RK4 step of the drift flow, optionally with the variational factor.

    x has shape (..., d); Y, when given, has shape (..., d, d) and satisfies
    dY/dt = D_x N_t(x(t)) Y.
    """
    drift = system.drift
    jac = system.drift_jacobian
    tm = t + 0.5 * h
    te = t + h

    k1 = drift(t, x)
    if Y is not None:
        K1 = jac(t, x) @ Y
    x2 = x + 0.5 * h * k1
    k2 = drift(tm, x2)
    if Y is not None:
        K2 = jac(tm, x2) @ (Y + 0.5 * h * K1)
    x3 = x + 0.5 * h * k2
    k3 = drift(tm, x3)
    if Y is not None:
        K3 = jac(tm, x3) @ (Y + 0.5 * h * K2)
    x4 = x + h * k3
    k4 = drift(te, x4)
    if Y is not None:
        K4 = jac(te, x4) @ (Y + h * K3)

    x_new = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if Y is None:
        return x_new, None
    return x_new, Y + (h / 6.0) * (K1 + 2.0 * K2 + 2.0 * K3 + K4)


def _default_steps(s, t):
    return max(16, int(math.ceil(abs(t - s) * _FLOW_STEPS_PER_UNIT)))


def flow_map(system: SystemModel, s, t, x, steps=None):
    """Drift-only flow Phi_{s,t}(x); backward integration (t < s) allowed."""
    x = np.asarray(x, dtype=float)
    if t == s:
        return x.copy()
    steps = steps if steps is not None else _default_steps(s, t)
    h = (t - s) / steps
    for i in range(steps):
        x, _ = _rk4_drift_step(system, s + i * h, h, x)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"drift flow diverged at step {i + 1} from t={s:.6g}")
    return x


def flow_jacobian(system: SystemModel, s, t, x, steps=None):
    """DPhi_{s,t}(x) via the variational equation, solved jointly with the flow."""
    x = np.asarray(x, dtype=float)
    Y = np.eye(system.d)
    if t == s:
        return Y
    steps = steps if steps is not None else _default_steps(s, t)
    h = (t - s) / steps
    for i in range(steps):
        x, Y = _rk4_drift_step(system, s + i * h, h, x, Y)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(Y))):
        raise DivergenceError(f"variational solve diverged integrating {s:.6g} -> {t:.6g}")
    return Y


def _u_stages(u: ControlSignal):
    grid = u.grid
    t = grid.nodes
    u_nodes = np.atleast_2d(u.at(t))
    u_mids = np.atleast_2d(u.at(t[:-1] + 0.5 * grid.h))
    return u_nodes, u_mids


def _a_matrix(system, t, x, uvec):
    """A_u(t) = D_x N_t(x) + sum_j u_j D_x B_t^(j)(x)."""
    A = system.drift_jacobian(t, x)
    J = system.input_jacobian(t, x)
    return A + np.einsum("...k,...kab->...ab", uvec, J)


def controlled_stm(system: SystemModel, u: ControlSignal, traj: Trajectory) -> StmField:
    """R_u(T, t_j) for all nodes, by one backward sweep of dR/dt = -R A_u(t).

    The state is re-integrated backward alongside R so the RK4 stages see a
    consistent x at half steps; it matches traj at nodes to integrator order.
    """
    grid = u.grid
    if traj.grid != grid:
        raise GridError("control and trajectory live on different grids")
    n, d = grid.n, system.d
    t = grid.nodes
    h = grid.h
    u_nodes, u_mids = _u_stages(u)

    R = np.empty((n, d, d))
    R[-1] = np.eye(d)
    x = traj.states[-1].copy()
    Rc = R[-1].copy()
    for j in range(n - 1, 0, -1):
        tj = t[j]
        tm = tj - 0.5 * h
        te = t[j - 1]
        hb = -h

        def f(tt, xx, RR, uu):
            dx = system.drift(tt, xx) + system.input(tt, xx) @ uu
            dR = -RR @ _a_matrix(system, tt, xx, uu)
            return dx, dR

        k1x, k1R = f(tj, x, Rc, u_nodes[j])
        k2x, k2R = f(tm, x + 0.5 * hb * k1x, Rc + 0.5 * hb * k1R, u_mids[j - 1])
        k3x, k3R = f(tm, x + 0.5 * hb * k2x, Rc + 0.5 * hb * k2R, u_mids[j - 1])
        k4x, k4R = f(te, x + hb * k3x, Rc + hb * k3R, u_nodes[j - 1])
        x = x + (hb / 6.0) * (k1x + 2 * k2x + 2 * k3x + k4x)
        Rc = Rc + (hb / 6.0) * (k1R + 2 * k2R + 2 * k3R + k4R)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(Rc))):
            raise DivergenceError(f"STM sweep diverged at node {j - 1}", node=j - 1)
        R[j - 1] = Rc
    return StmField(grid, R)


def flow_jacobian_field(system: SystemModel, traj: Trajectory, anchor: str) -> FlowJacobianField:
    """DPhi_{t_j, tau}(x_u(t_j)) for every node, tau in {t0, T}.

    One independent drift/variational solve per node, executed as a single
    time-synchronous sweep over all active lanes (lane j covers [t_j, T] for
    anchor "T", [t0, t_j] backward for anchor "t0").
    """
    if anchor not in ("t0", "T"):
        raise GridError(f"anchor must be 't0' or 'T', got {anchor!r}")
    grid = traj.grid
    n, d = grid.n, traj.states.shape[1]
    t = grid.nodes
    h = grid.h

    X = traj.states.copy()
    Y = np.broadcast_to(np.eye(d), (n, d, d)).copy()
    if anchor == "T":
        for m in range(n - 1):
            X[: m + 1], Y[: m + 1] = _rk4_drift_step(system, t[m], h, X[: m + 1], Y[: m + 1])
    else:
        for m in range(n - 1, 0, -1):
            X[m:], Y[m:] = _rk4_drift_step(system, t[m], -h, X[m:], Y[m:])
    _check_finite_lanes(Y, "flow-Jacobian solve")
    return FlowJacobianField(grid, anchor, Y)


def adjoint_rows(system: SystemModel, u: ControlSignal, traj: Trajectory,
                 stm: StmField, dphi: FlowJacobianField) -> AdjointRows:
    """Per-node rows of L* and DF* along the trajectory."""
    grid = traj.grid
    if not (u.grid == grid == stm.grid == dphi.grid):
        raise GridError("fields live on different grids")
    B = system.input(grid.nodes, traj.states)  # (n, d, k)
    # L_rows = (DPhi B)^T
    L_rows = np.einsum("nab,nbk->nka", dphi.matrices, B)
    # DF_rows = (E R B)^T with E = DPhi_{T,tau}(x_u(T)) (identity for tau = T)
    E = dphi.matrices[-1]
    Q = np.einsum("ab,nbc->nac", E, stm.matrices)
    DF_rows = np.einsum("nab,nbk->nka", Q, B)
    if not (np.all(np.isfinite(L_rows)) and np.all(np.isfinite(DF_rows))):
        raise DivergenceError("adjoint rows contain non-finite entries")
    return AdjointRows(grid, dphi.anchor, L_rows, DF_rows)


def apply_L(system: SystemModel, u: ControlSignal, traj: Trajectory,
            dphi: FlowJacobianField, v: ControlSignal):
    """Integral of DPhi_{t,tau}(x_u(t)) B_t(x_u(t)) v(t) dt by composite Simpson."""
    grid = traj.grid
    if v.grid != grid or dphi.grid != grid:
        raise GridError("fields live on different grids")
    B = system.input(grid.nodes, traj.states)
    integrand = np.einsum("nab,nbk,nk->na", dphi.matrices, B, v.values)
    return grid.simpson_weights() @ integrand


def transfer_target(system: SystemModel, problem: TransferProblem):
    """y_tau = Phi_{T,tau}(x1) - Phi_{t0,tau}(x0); backward flow for tau = t0."""
    grid = problem.grid
    steps = grid.n - 1
    if problem.anchor == "T":
        return problem.x1 - flow_map(system, grid.t0, grid.T, problem.x0, steps)
    return flow_map(system, grid.T, grid.t0, problem.x1, steps) - problem.x0


def feasibility_residual(system: SystemModel, u: ControlSignal, traj: Trajectory,
                         dphi: FlowJacobianField, problem: TransferProblem):
    """F_tau(u) = L_u u - y_tau; zero iff u steers x0 to x1 (flow-conjugate form)."""
    if dphi.anchor != problem.anchor:
        raise GridError("flow-Jacobian anchor does not match the problem anchor")
    y = transfer_target(system, problem)
    return apply_L(system, u, traj, dphi, u) - y
