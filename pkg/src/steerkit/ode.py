"""Fixed-step ODE integration and composite quadrature on a shared grid.

Everything downstream (controls, trajectories, transition matrices, Gramian
integrands) lives on one uniform time grid with an odd node count, so that
classical RK4 and composite Simpson line up node for node.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, GridError

__all__ = ["TimeGrid", "GridFunction", "integrate_ode", "composite_quadrature"]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_j = t0 + j*h on [t0, T] with an odd number of nodes."""

    t0: float
    T: float
    n: int

    def __post_init__(self):
        if not self.T > self.t0:
            raise GridError(f"need T > t0, got [{self.t0}, {self.T}]")
        if self.n < 3:
            raise GridError(f"need at least 3 nodes, got n={self.n}")
        if self.n % 2 == 0:
            raise GridError(f"node count must be odd for composite Simpson, got n={self.n}")

    @property
    def h(self):
        return (self.T - self.t0) / (self.n - 1)

    @property
    def nodes(self):
        return np.linspace(self.t0, self.T, self.n)

    @property
    def span(self):
        return self.T - self.t0

    def simpson_weights(self):
        """Composite Simpson weights; exact for cubics on this grid."""
        w = np.full(self.n, 2.0)
        w[1::2] = 4.0
        w[0] = w[-1] = 1.0
        return w * (self.h / 3.0)

    def __eq__(self, other):
        return (
            isinstance(other, TimeGrid)
            and self.t0 == other.t0
            and self.T == other.T
            and self.n == other.n
        )

    def __hash__(self):
        return hash((self.t0, self.T, self.n))


@dataclass(eq=False)
class GridFunction:
    """Values (vectors or matrices) attached to every node of a TimeGrid."""

    grid: TimeGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[0] != self.grid.n:
            raise GridError(
                f"values have {self.values.shape[0]} entries for a grid of {self.grid.n} nodes"
            )
        if not np.all(np.isfinite(self.values)):
            bad = int(np.argwhere(~np.isfinite(self.values).reshape(self.grid.n, -1).all(axis=1))[0])
            raise DivergenceError(f"non-finite value at node {bad}", node=bad)

    @property
    def final(self):
        return self.values[-1]


def integrate_ode(rhs, grid: TimeGrid, x0) -> GridFunction:
    """Integrate dx/dt = rhs(t, x) with classical RK4, sampling every node.

    Deterministic for fixed inputs.  Raises DivergenceError naming the first
    node at which the state stops being finite.
    """
    x0 = np.asarray(x0, dtype=float)
    t = grid.nodes
    h = grid.h
    out = np.empty((grid.n,) + x0.shape)
    out[0] = x0
    x = x0
    for j in range(grid.n - 1):
        tj = t[j]
        k1 = rhs(tj, x)
        k2 = rhs(tj + 0.5 * h, x + 0.5 * h * k1)
        k3 = rhs(tj + 0.5 * h, x + 0.5 * h * k2)
        k4 = rhs(tj + h, x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(
                f"state became non-finite at node {j + 1} (t={t[j + 1]:.6g})",
                node=j + 1,
                time=t[j + 1],
            )
        out[j + 1] = x
    return GridFunction(grid, out)


def composite_quadrature(samples: GridFunction):
    """Composite Simpson integral of a grid function (vector or matrix valued)."""
    w = samples.grid.simpson_weights()
    return np.tensordot(w, samples.values, axes=(0, 0))
