"""Control-affine system models dx/dt = N_t(x) + B_t(x) u and their simulation.

A SystemModel bundles the drift, the input matrix and their state Jacobians
as plain callables.  Evaluators must broadcast over leading batch axes of x
(and, where time-varying, over a matching array of times); models built from
scalar-only callables can set vectorized=False to get wrapped automatically.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import expit

from .errors import DivergenceError, GridError, ModelError
from .ode import GridFunction, TimeGrid, integrate_ode

__all__ = [
    "SystemModel",
    "ControlSignal",
    "Trajectory",
    "TransferProblem",
    "make_pendulum",
    "make_rnn",
    "make_unicycle",
    "make_double_integrator",
    "simulate",
    "validate_jacobians",
    "MODEL_FACTORIES",
]


def _batched(f):
    """Wrap a scalar-only evaluator so it broadcasts over leading axes of x."""

    def g(t, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return np.asarray(f(t, x), dtype=float)
        lead = x.shape[:-1]
        xs = x.reshape(-1, x.shape[-1])
        ts = np.broadcast_to(np.asarray(t, dtype=float), lead).reshape(-1)
        rows = [np.asarray(f(ti, xi), dtype=float) for ti, xi in zip(ts, xs)]
        return np.stack(rows, axis=0).reshape(lead + rows[0].shape)

    return g


@dataclass
class SystemModel:
    """Evaluators and dimensions of one control-affine system.

    input_jacobian returns, for each input column j, the d x d Jacobian of
    that column with respect to the state, stacked along a leading axis of
    size k.  input_time_derivative is only meaningful for state-independent
    input matrices.  lambda1 / input_lipschitz are uniform bounds on
    ||D_x N_t|| and ||D_x B_t|| used by the certificate audits.
    """

    name: str
    d: int
    k: int
    drift: Callable = field(repr=False)
    drift_jacobian: Callable = field(repr=False)
    input: Callable = field(repr=False)
    input_jacobian: Callable = field(repr=False)
    input_time_derivative: Optional[Callable] = field(default=None, repr=False)
    lambda1: Optional[float] = None
    input_lipschitz: Optional[float] = None
    vectorized: bool = True

    def __post_init__(self):
        if self.k > self.d or self.d < 1 or self.k < 1:
            raise ModelError(f"need 1 <= k <= d, got d={self.d}, k={self.k}")
        if not self.vectorized:
            self.drift = _batched(self.drift)
            self.drift_jacobian = _batched(self.drift_jacobian)
            self.input = _batched(self.input)
            self.input_jacobian = _batched(self.input_jacobian)
            self.vectorized = True


@dataclass(eq=False)
class ControlSignal:
    """A control on a time grid, one k-vector per node, interpolated in t.

    interpolation is "cubic" (not-a-knot spline, the default) or "linear".
    Both reproduce the node values exactly; see the synthesis module notes
    for why cubic is the default.
    """

    grid: TimeGrid
    values: np.ndarray = field(repr=False)
    interpolation: str = "cubic"
    _spline: object = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.values.shape[0] == 1 and self.grid.n > 1:
            self.values = self.values.T
        if self.values.shape[0] != self.grid.n:
            raise GridError(
                f"control has {self.values.shape[0]} rows for a grid of {self.grid.n} nodes"
            )
        if not np.all(np.isfinite(self.values)):
            raise ModelError("control values must be finite")
        if self.interpolation not in ("cubic", "linear"):
            raise ModelError(f"unknown interpolation {self.interpolation!r}")

    @property
    def k(self):
        return self.values.shape[1]

    @classmethod
    def zero(cls, grid, k, interpolation="cubic"):
        return cls(grid, np.zeros((grid.n, k)), interpolation)

    @classmethod
    def from_function(cls, grid, fn, interpolation="cubic"):
        vals = np.stack([np.atleast_1d(np.asarray(fn(t), dtype=float)) for t in grid.nodes])
        return cls(grid, vals, interpolation)

    def at(self, t):
        """Evaluate the interpolant at scalar or array times."""
        if self.interpolation == "cubic":
            if self._spline is None:
                self._spline = CubicSpline(self.grid.nodes, self.values, axis=0)
            return self._spline(t)
        t = np.asarray(t, dtype=float)
        nodes = self.grid.nodes
        cols = [np.interp(t, nodes, self.values[:, i]) for i in range(self.k)]
        return np.stack(cols, axis=-1)

    def sup_norm(self):
        """Max over nodes of the Euclidean norm |u(t_j)|."""
        return float(np.max(np.linalg.norm(self.values, axis=1)))

    def l2_norm_sq(self):
        """Composite-Simpson value of the integral of |u(t)|^2."""
        w = self.grid.simpson_weights()
        return float(w @ np.sum(self.values**2, axis=1))

    def energy(self):
        return 0.5 * self.l2_norm_sq()


@dataclass(eq=False)
class Trajectory:
    """State samples of the controlled system on the grid."""

    grid: TimeGrid
    states: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.shape[0] != self.grid.n:
            raise GridError(
                f"trajectory has {self.states.shape[0]} rows for a grid of {self.grid.n} nodes"
            )

    @property
    def d(self):
        return self.states.shape[1]

    @property
    def endpoint(self):
        return self.states[-1]


@dataclass(eq=False)
class TransferProblem:
    """Steer from x0 at t0 to x1 at T, with Gramians anchored at tau."""

    x0: np.ndarray
    x1: np.ndarray
    grid: TimeGrid
    anchor: str = "T"

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        self.x1 = np.asarray(self.x1, dtype=float)
        if self.x0.shape != self.x1.shape or self.x0.ndim != 1:
            raise ModelError("x0 and x1 must be vectors of equal dimension")
        if self.anchor not in ("t0", "T"):
            raise ModelError(f"anchor must be 't0' or 'T', got {self.anchor!r}")

    @property
    def tau(self):
        return self.grid.t0 if self.anchor == "t0" else self.grid.T


# ---------------------------------------------------------------------------
# Builtin models
# ---------------------------------------------------------------------------

def _pendulum_coefficients(g, ell0, ell1, omega, beta):
    """Time coefficient functions of the varying-length pendulum.

    With eps = ell1/ell0 and phi(t) = cos t:
        b(t)     = (1 + eps cos t)^-2        (input gain)
        a(t)     = lam^2 sqrt(b(t))          (restoring gain), lam = omega0/omega
        gamma(t) = 2 eps b(t) phi'(t) + beta lam   (damping)
    """
    if ell0 <= 0:
        raise ModelError(f"need ell0 > 0, got {ell0}")
    if omega == 0:
        raise ModelError("need omega != 0")
    eps = ell1 / ell0
    if eps >= 1.0:
        raise ModelError(
            f"singular length: ell1/ell0 = {eps} >= 1 makes the length 1 + eps*cos(t) vanish"
        )
    omega0 = np.sqrt(g / ell0)
    lam = omega0 / omega

    def b(t):
        return (1.0 + eps * np.cos(t)) ** -2

    def bdot(t):
        return 2.0 * eps * np.sin(t) * (1.0 + eps * np.cos(t)) ** -3

    def a(t):
        return lam**2 / (1.0 + eps * np.cos(t))

    def gamma(t):
        return -2.0 * eps * np.sin(t) * b(t) + beta * lam

    return a, b, gamma, bdot, eps, lam


def make_pendulum(g=9.81, ell0=4.0, ell1=2.0, m=1.0, nu=0.2, omega=2.0, beta=None):
    """Torque-controlled pendulum with periodically varying length (d=2, k=1).

    State (angle, rate); drift N_t(x) = (x2, -a(t) sin x1 - gamma(t) x2),
    input column B_t = (0, b(t)).  Whether the damping constant beta in
    gamma(t) equals the listed nu is an assumption; beta defaults to nu and
    can be set independently.
    """
    if beta is None:
        beta = nu
    a, b, gamma, bdot, eps, lam = _pendulum_coefficients(g, ell0, ell1, omega, beta)
    del m  # mass is scaled out of the nondimensional form

    def drift(t, x):
        x = np.asarray(x, dtype=float)
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack([x2, -a(t) * np.sin(x1) - gamma(t) * x2], axis=-1)

    def drift_jacobian(t, x):
        x = np.asarray(x, dtype=float)
        lead = x.shape[:-1]
        J = np.zeros(lead + (2, 2))
        J[..., 0, 1] = 1.0
        J[..., 1, 0] = -a(t) * np.cos(x[..., 0])
        J[..., 1, 1] = -gamma(t) * np.ones(lead)
        return J

    def input_matrix(t, x):
        x = np.asarray(x, dtype=float)
        B = np.zeros(x.shape[:-1] + (2, 1))
        B[..., 1, 0] = b(t)
        return B

    def input_jacobian(t, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (1, 2, 2))

    def input_time_derivative(t):
        return np.array([[0.0], [bdot(t)]])

    # Uniform bound on ||D_x N_t||: Frobenius dominates the spectral norm and
    # the coefficients are 2*pi periodic, so a dense sweep over one period
    # plus headroom gives a valid constant.
    ts = np.linspace(0.0, 2.0 * np.pi, 20001)
    lambda1 = float(np.max(np.sqrt(1.0 + a(ts) ** 2 + gamma(ts) ** 2))) * (1.0 + 1e-6)

    return SystemModel(
        name="pendulum",
        d=2,
        k=1,
        drift=drift,
        drift_jacobian=drift_jacobian,
        input=input_matrix,
        input_jacobian=input_jacobian,
        input_time_derivative=input_time_derivative,
        lambda1=lambda1,
        input_lipschitz=0.0,
    )


_RNN_D = np.diag([1.25, 1.5, 1.0])
_RNN_W = np.array([[3.0, 1.0, -0.5], [2.0, 1.0, 0.5], [0.0, -1.5, 1.25]])


def make_rnn(D=None, W=None):
    """Fully actuated 3D recurrent network: N(x) = -D x + W sigmoid(x), B = Id."""
    D = _RNN_D if D is None else np.asarray(D, dtype=float)
    W = _RNN_W if W is None else np.asarray(W, dtype=float)
    if D.shape != (3, 3) or W.shape != (3, 3):
        raise ModelError("D and W must be 3x3")

    def drift(t, x):
        x = np.asarray(x, dtype=float)
        return -x @ D.T + expit(x) @ W.T

    def drift_jacobian(t, x):
        x = np.asarray(x, dtype=float)
        s = expit(x)
        return -D + W * (s * (1.0 - s))[..., None, :]

    def input_matrix(t, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.eye(3), x.shape[:-1] + (3, 3)).copy()

    def input_jacobian(t, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (3, 3, 3))

    # sigmoid slope is at most 1/4
    lambda1 = float(np.linalg.norm(D, 2) + 0.25 * np.linalg.norm(W, 2))

    return SystemModel(
        name="rnn3",
        d=3,
        k=3,
        drift=drift,
        drift_jacobian=drift_jacobian,
        input=input_matrix,
        input_jacobian=input_jacobian,
        input_time_derivative=lambda t: np.zeros((3, 3)),
        lambda1=lambda1,
        input_lipschitz=0.0,
    )


def make_unicycle():
    """Driftless unicycle (x1, x2, theta) with inputs (speed, turn rate).

    The heading is lifted to the real line (no angle wrapping); transfers
    must specify the lifted target angle.
    """

    def drift(t, x):
        x = np.asarray(x, dtype=float)
        return np.zeros_like(x)

    def drift_jacobian(t, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (3, 3))

    def input_matrix(t, x):
        x = np.asarray(x, dtype=float)
        th = x[..., 2]
        B = np.zeros(x.shape[:-1] + (3, 2))
        B[..., 0, 0] = np.cos(th)
        B[..., 1, 0] = np.sin(th)
        B[..., 2, 1] = 1.0
        return B

    def input_jacobian(t, x):
        x = np.asarray(x, dtype=float)
        th = x[..., 2]
        J = np.zeros(x.shape[:-1] + (2, 3, 3))
        J[..., 0, 0, 2] = -np.sin(th)
        J[..., 0, 1, 2] = np.cos(th)
        return J

    return SystemModel(
        name="unicycle",
        d=3,
        k=2,
        drift=drift,
        drift_jacobian=drift_jacobian,
        input=input_matrix,
        input_jacobian=input_jacobian,
        input_time_derivative=lambda t: np.zeros((3, 2)),
        lambda1=0.0,
        input_lipschitz=1.0,
    )


def make_double_integrator():
    """LTI double integrator: x1' = x2, x2' = u.  Demo / oracle model."""
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    B = np.array([[0.0], [1.0]])

    def drift(t, x):
        x = np.asarray(x, dtype=float)
        return x @ A.T

    def drift_jacobian(t, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(A, x.shape[:-1] + (2, 2)).copy()

    def input_matrix(t, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(B, x.shape[:-1] + (2, 1)).copy()

    def input_jacobian(t, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (1, 2, 2))

    return SystemModel(
        name="double_integrator",
        d=2,
        k=1,
        drift=drift,
        drift_jacobian=drift_jacobian,
        input=input_matrix,
        input_jacobian=input_jacobian,
        input_time_derivative=lambda t: np.zeros((2, 1)),
        lambda1=1.0,
        input_lipschitz=0.0,
    )


MODEL_FACTORIES = {
    "pendulum": make_pendulum,
    "rnn3": make_rnn,
    "unicycle": make_unicycle,
    "double_integrator": make_double_integrator,
}


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

def simulate(system: SystemModel, u: ControlSignal, x0) -> Trajectory:
    """Integrate dx/dt = N_t(x) + B_t(x) u(t) over the control's grid.

    Same classical RK4 sweep as ode.integrate_ode; the control is evaluated
    at nodes and midpoints once up front (RK4 stages hit no other times).
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (system.d,):
        raise ModelError(f"x0 has shape {x0.shape}, expected ({system.d},)")
    if u.k != system.k:
        raise ModelError(f"control has k={u.k}, system expects k={system.k}")
    grid = u.grid
    t = grid.nodes
    h = grid.h
    u_nodes = np.atleast_2d(u.at(t))
    u_mids = np.atleast_2d(u.at(t[:-1] + 0.5 * h))

    states = np.empty((grid.n, system.d))
    states[0] = x0
    x = x0
    for j in range(grid.n - 1):
        tj = t[j]
        tm = tj + 0.5 * h
        k1 = system.drift(tj, x) + system.input(tj, x) @ u_nodes[j]
        x2 = x + 0.5 * h * k1
        k2 = system.drift(tm, x2) + system.input(tm, x2) @ u_mids[j]
        x3 = x + 0.5 * h * k2
        k3 = system.drift(tm, x3) + system.input(tm, x3) @ u_mids[j]
        x4 = x + h * k3
        k4 = system.drift(tj + h, x4) + system.input(tj + h, x4) @ u_nodes[j + 1]
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(
                f"state became non-finite at node {j + 1} (t={t[j + 1]:.6g})",
                node=j + 1,
                time=t[j + 1],
            )
        states[j + 1] = x
    return Trajectory(grid, states)


def simulate_feedback(system: SystemModel, feedback, grid: TimeGrid, x0) -> Trajectory:
    """Closed-loop integration with u = feedback(t, x); used by baselines."""

    def rhs(t, x):
        return system.drift(t, x) + system.input(t, x) @ np.asarray(feedback(t, x), dtype=float)

    gf: GridFunction = integrate_ode(rhs, grid, np.asarray(x0, dtype=float))
    return Trajectory(grid, gf.values)


# ---------------------------------------------------------------------------
# Jacobian validation
# ---------------------------------------------------------------------------

def validate_jacobians(system: SystemModel, n_probes=100, t_range=(0.0, 2.0 * np.pi),
                       x_scale=2.0, rng=None):
    """Max relative mismatch between analytic Jacobians and central differences.

    Probes n_probes random (t, x); the step is 1e-6 * (1 + |x|).  Returns a
    dict with 'drift' and 'input' worst-case relative errors, where relative
    means ||FD - J|| / (1 + ||J||).
    """
    rng = np.random.default_rng(rng if rng is not None else 0)
    worst = {"drift": 0.0, "input": 0.0}
    for _ in range(n_probes):
        t = rng.uniform(*t_range)
        x = rng.uniform(-x_scale, x_scale, size=system.d)
        eps = 1e-6 * (1.0 + np.linalg.norm(x))

        J = system.drift_jacobian(t, x)
        fd = np.empty_like(J)
        for b in range(system.d):
            e = np.zeros(system.d)
            e[b] = eps
            fd[:, b] = (system.drift(t, x + e) - system.drift(t, x - e)) / (2 * eps)
        err = np.linalg.norm(fd - J) / (1.0 + np.linalg.norm(J))
        worst["drift"] = max(worst["drift"], float(err))

        Jb = system.input_jacobian(t, x)
        fdb = np.empty_like(Jb)
        for b in range(system.d):
            e = np.zeros(system.d)
            e[b] = eps
            dB = (system.input(t, x + e) - system.input(t, x - e)) / (2 * eps)
            fdb[:, :, b] = dB.T
        err = np.linalg.norm(fdb - Jb) / (1.0 + np.linalg.norm(Jb))
        worst["input"] = max(worst["input"], float(err))
    return worst
