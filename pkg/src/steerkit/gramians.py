"""Trajectory-dependent Gramians, coercivity diagnostics and Loewner audits.

Three d x d matrices are assembled from the adjoint rows by composite
Simpson quadrature:

    M = integral of DF_row^T DF_row dt   (empirical, symmetric PSD)
    N = integral of L_row^T  L_row  dt   (almost-optimal, symmetric PSD)
    G = integral of L_row^T  DF_row dt   (optimal, generally non-symmetric)

For linear dynamics the three coincide with the classical controllability
Gramian; the unicycle admits closed forms checked against assembly.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, GridError
from .flows import AdjointRows
from .models import ControlSignal, Trajectory

__all__ = [
    "GramianSet",
    "CoercivityVerdict",
    "LoewnerAudit",
    "assemble_gramians",
    "unicycle_closed_form",
    "coercivity_check",
    "loewner_audit",
]


@dataclass(eq=False)
class GramianSet:
    M: np.ndarray = field(repr=False)
    N: np.ndarray = field(repr=False)
    G: np.ndarray = field(repr=False)
    lambda_min_M: float = 0.0
    lambda_min_N: float = 0.0
    cond_G: float = np.inf

    @property
    def d(self):
        return self.M.shape[0]


def _diagnostics(M, N, G):
    lm = float(np.linalg.eigvalsh(M)[0])
    ln = float(np.linalg.eigvalsh(N)[0])
    s = np.linalg.svd(G, compute_uv=False)
    cond = float(s[0] / s[-1]) if s[-1] > 0 else np.inf
    return lm, ln, cond


def assemble_gramians(rows: AdjointRows) -> GramianSet:
    """Quadrature assembly of (M, N, G) with eigenvalue diagnostics."""
    L, DF = rows.L_rows, rows.DF_rows
    if not (np.all(np.isfinite(L)) and np.all(np.isfinite(DF))):
        raise DivergenceError("cannot assemble Gramians from non-finite rows")
    w = rows.grid.simpson_weights()
    M = np.einsum("n,nka,nkb->ab", w, DF, DF)
    N = np.einsum("n,nka,nkb->ab", w, L, L)
    G = np.einsum("n,nka,nkb->ab", w, L, DF)
    lm, ln, cond = _diagnostics(M, N, G)
    return GramianSet(M=M, N=N, G=G, lambda_min_M=lm, lambda_min_N=ln, cond_G=cond)


def unicycle_closed_form(omega: ControlSignal, traj: Trajectory) -> GramianSet:
    """Closed-form unicycle Gramians anchored at T.

    N is block diagonal [[G_w, 0], [0, dt]] and G is block lower triangular
    with (2,1) block dp = integral of (p2(t)-p2(T), p1(T)-p1(t)) dt, where
    G_w integrates g g^T for the heading vector g = (cos theta, sin theta).
    lambda_min_N comes from the complex-integral identity
    (dt - |integral of exp(2i theta)|) / 2 rather than an eigensolve.
    """
    grid = traj.grid
    if omega.grid != grid:
        raise GridError("omega and trajectory live on different grids")
    if traj.states.shape[1] != 3:
        raise GridError("unicycle closed forms need a 3-state trajectory")
    om = omega.values[:, -1]
    theta = traj.states[:, 2]
    p = traj.states[:, :2]
    w = grid.simpson_weights()
    span = grid.span

    # consistency of the supplied turn rate with the trajectory heading
    if abs((theta[-1] - theta[0]) - float(w @ om)) > 1e-6 * (1.0 + abs(theta[-1] - theta[0])):
        raise GridError("omega is inconsistent with the trajectory heading")

    g = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    G_w = np.einsum("n,na,nb->ab", w, g, g)
    q = np.stack([p[:, 1] - p[-1, 1], p[-1, 0] - p[:, 0]], axis=-1)
    dp = w @ q

    N = np.zeros((3, 3))
    N[:2, :2] = G_w
    N[2, 2] = span
    G = N.copy()
    G[2, :2] = dp
    M = N.copy()
    M[:2, :2] += np.einsum("n,na,nb->ab", w, q, q)
    M[2, :2] = dp
    M[:2, 2] = dp

    z = w @ np.exp(2j * theta)
    lam_formula = 0.5 * (span - abs(z))

    lm = float(np.linalg.eigvalsh(M)[0])
    s = np.linalg.svd(G, compute_uv=False)
    cond = float(s[0] / s[-1]) if s[-1] > 0 else np.inf
    return GramianSet(M=M, N=N, G=G, lambda_min_M=lm,
                      lambda_min_N=float(lam_formula), cond_G=cond)


@dataclass
class CoercivityVerdict:
    feasible: bool
    margin: float
    lambda_min_N: float
    lambda_min_M: float
    floor: float


def coercivity_check(gs: GramianSet, floor: float) -> CoercivityVerdict:
    """Compare lambda_min(N) against the configured coercivity floor."""
    if not floor > 0:
        raise ValueError(f"floor must be positive, got {floor}")
    margin = gs.lambda_min_N - floor
    return CoercivityVerdict(
        feasible=bool(margin >= 0.0),
        margin=float(margin),
        lambda_min_N=float(gs.lambda_min_N),
        lambda_min_M=float(gs.lambda_min_M),
        floor=float(floor),
    )


@dataclass
class LoewnerAudit:
    alpha: float
    # requested-alpha sandwich alpha*M <= N <= alpha^-1 M, per GramianSet
    lam_N_minus_alphaM: tuple
    lam_invalphaM_minus_N: tuple
    sandwich_ok: tuple
    # largest admissible alpha in (0, 1] found by bisection, per GramianSet
    alpha_star: tuple
    # anchor sandwich gamma*N_2 <= N_1 <= gamma^-1 N_2 with gamma = e^{-2 L1 dt0}
    gamma: float | None = None
    lam_N1_minus_gammaN2: float | None = None
    lam_invgammaN2_minus_N1: float | None = None
    anchor_ok: bool | None = None


def _psd_tol(*mats):
    scale = max(1.0, *(float(np.linalg.norm(m)) for m in mats))
    return 1e-10 * scale


def _alpha_star(gs: GramianSet, iters=60):
    """Largest alpha in (0, 1] with alpha*M <= N <= alpha^-1 M (PSD within tol)."""
    tol = _psd_tol(gs.M, gs.N)

    def ok(a):
        lo = np.linalg.eigvalsh(gs.N - a * gs.M)[0]
        hi = np.linalg.eigvalsh(gs.M / a - gs.N)[0]
        return lo >= -tol and hi >= -tol

    if ok(1.0):
        return 1.0
    lo, hi = 0.0, 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if mid == 0.0:
            break
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


def loewner_audit(gs_pair, alpha, lambda1=None, dt0=None) -> LoewnerAudit:
    """Loewner-order report for the M-N sandwich and the anchor sandwich.

    gs_pair is (GramianSet at tau=t0, GramianSet at tau=T).  The paper-level
    constant in alpha is not computable, so besides evaluating the requested
    alpha the audit searches the largest admissible alpha by bisection.
    """
    gs1, gs2 = gs_pair
    if gs1.d != gs2.d:
        raise ValueError("Gramian sets have mismatched dimensions")
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")

    lam_lo, lam_hi, oks, stars = [], [], [], []
    for gs in (gs1, gs2):
        tol = _psd_tol(gs.M, gs.N)
        lo = float(np.linalg.eigvalsh(gs.N - alpha * gs.M)[0])
        hi = float(np.linalg.eigvalsh(gs.M / alpha - gs.N)[0])
        lam_lo.append(lo)
        lam_hi.append(hi)
        oks.append(bool(lo >= -tol and hi >= -tol))
        stars.append(float(_alpha_star(gs)))

    audit = LoewnerAudit(
        alpha=float(alpha),
        lam_N_minus_alphaM=tuple(lam_lo),
        lam_invalphaM_minus_N=tuple(lam_hi),
        sandwich_ok=tuple(oks),
        alpha_star=tuple(stars),
    )
    if lambda1 is not None and dt0 is not None:
        gamma = float(np.exp(-2.0 * lambda1 * dt0))
        tol = _psd_tol(gs1.N, gs2.N)
        lo = float(np.linalg.eigvalsh(gs1.N - gamma * gs2.N)[0])
        hi = float(np.linalg.eigvalsh(gs2.N / gamma - gs1.N)[0])
        audit.gamma = gamma
        audit.lam_N1_minus_gammaN2 = lo
        audit.lam_invgammaN2_minus_N1 = hi
        audit.anchor_ok = bool(lo >= -tol and hi >= -tol)
    return audit
