"""Per-row convex training problems and their proximal solver.

Each matrix row is fit independently: minimise

    match_weight * ||H w - target||^2 + penalty(w)
    subject to  ||w[:n_state]||_1 <= ball_radius      (state rows only)

where H stacks state and input columns.  The penalty is nothing, a
weighted L1 norm, or a weighted reverse-Huber term, the exact partial
minimum of the perspective relaxation of an L0 + L2 product penalty.

The solver is an accelerated proximal gradient iteration with gradient
restarts.  All penalty/constraint combinations admit exact proximal
maps: the reverse-Huber + L1 composition is ``berhu_prox`` after soft
thresholding, and the ball-constrained variants follow from a
piecewise-linear search over the Lagrange multiplier of the ball.

``exact`` mode re-solves with a geometrically increasing match weight,
warm starting each stage, until the matching residual is certified
below EXACT_MATCH_TOL.
"""

import math
from dataclasses import dataclass

import numpy as np

from .matrix_store import as_matrix
from .seeding import STREAM_SOLVER, derive_rng

EXACT_MATCH_TOL = 1e-6
_MAX_MATCH_WEIGHT = 1e6
_PENALTY_KINDS = ("none", "l1", "perspective")
_MODES = ("relaxed", "exact")


def soft_threshold(v, tau):
    """Componentwise prox of ``tau * |.|``."""
    if tau < 0:
        raise ValueError("tau must be non-negative")
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.maximum(np.abs(v) - tau, 0.0)


def berhu_penalty(m):
    """Reverse Huber: ``2|m|`` inside the unit interval, ``m**2 + 1`` outside."""
    arr = np.asarray(m, dtype=np.float64)
    out = np.where(np.abs(arr) <= 1.0, 2.0 * np.abs(arr), arr * arr + 1.0)
    return float(out) if np.isscalar(m) or arr.ndim == 0 else out


def berhu_prox(v, c):
    """Componentwise prox of ``c * berhu``.

    Zero up to 2c, soft-thresholded in the linear band, then scaled by
    1/(1+2c) in the quadratic regime; continuous at both joins.
    """
    if c < 0:
        raise ValueError("c must be non-negative")
    arr = np.asarray(v, dtype=np.float64)
    a = np.abs(arr)
    out = np.where(
        a <= 2.0 * c,
        0.0,
        np.where(a <= 1.0 + 2.0 * c, np.sign(arr) * (a - 2.0 * c), arr / (1.0 + 2.0 * c)),
    )
    return float(out) if np.isscalar(v) or arr.ndim == 0 else out


def project_l1_ball(v, radius):
    """Euclidean projection onto ``||x||_1 <= radius`` (sorted threshold)."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or radius == 0.0:
        return np.zeros_like(v)
    a = np.abs(v)
    if a.sum() <= radius:
        return v.copy()
    u = np.sort(a)[::-1]
    css = np.cumsum(u)
    j = np.arange(1, v.size + 1)
    rho = np.nonzero(u > (css - radius) / j)[0][-1]
    theta = (css[rho] - radius) / (rho + 1.0)
    return soft_threshold(v, theta)


def _berhu_ball_prox(v, c, radius):
    """Exact prox of ``c * berhu`` restricted to the L1 ball.

    The multiplier path ``x(mu) = berhu_prox(soft(v, mu), c)`` has a
    piecewise-linear, non-increasing L1 norm; the optimal mu is found
    by bisection over its breakpoints plus one linear interpolation.
    """
    x0 = berhu_prox(v, c)
    norm0 = np.abs(x0).sum()
    if norm0 <= radius:
        return np.asarray(x0, dtype=np.float64).copy()
    if radius == 0.0:
        return np.zeros_like(np.asarray(v, dtype=np.float64))
    u = np.sort(np.abs(np.asarray(v, dtype=np.float64)))[::-1]
    prefix = np.concatenate([[0.0], np.cumsum(u)])
    scale = 1.0 + 2.0 * c

    def norm_at(mu):
        k1 = np.searchsorted(-u, -(mu + 1.0 + 2.0 * c), side="left")
        k2 = np.searchsorted(-u, -(mu + 2.0 * c), side="left")
        quad = (prefix[k1] - k1 * mu) / scale
        soft = prefix[k2] - prefix[k1] - (k2 - k1) * (mu + 2.0 * c)
        return quad + soft

    cands = np.concatenate([u - 2.0 * c, u - 1.0 - 2.0 * c])
    cands = np.unique(cands[cands > 0.0])
    cands = np.concatenate([[0.0], cands])
    lo, hi = 0, len(cands) - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if norm_at(cands[mid]) >= radius:
            lo = mid
        else:
            hi = mid
    n_lo, n_hi = norm_at(cands[lo]), norm_at(cands[hi])
    if n_lo <= n_hi:
        mu = cands[lo]
    else:
        mu = cands[lo] + (n_lo - radius) * (cands[hi] - cands[lo]) / (n_lo - n_hi)
    return berhu_prox(soft_threshold(v, mu), c)


@dataclass(frozen=True)
class Penalty:
    """Sparsity penalty attached to every row of the trained matrix."""

    kind: str = "none"
    weight: float = 0.0

    def __post_init__(self):
        if self.kind not in _PENALTY_KINDS:
            raise ValueError(f"unknown penalty kind {self.kind!r}")
        if self.weight < 0 or not math.isfinite(self.weight):
            raise ValueError("penalty weight must be finite and non-negative")
        if self.kind == "none" and self.weight != 0.0:
            raise ValueError("'none' penalty takes no weight")

    def value(self, w):
        if self.kind == "none" or self.weight == 0.0:
            return 0.0
        w = np.asarray(w, dtype=np.float64)
        if self.kind == "l1":
            return float(self.weight * np.abs(w).sum())
        return float(self.weight * np.sum(berhu_penalty(w)))


@dataclass(frozen=True)
class SolverConfig:
    step: float | None = None
    max_iter: int = 50000
    tol_primal: float = 1e-6
    tol_dual: float = 1e-6
    gram_norm: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.step is not None and self.step <= 0:
            raise ValueError("step must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.tol_primal <= 0 or self.tol_dual <= 0:
            raise ValueError("tolerances must be positive")
        if self.gram_norm is not None and self.gram_norm <= 0:
            raise ValueError("gram_norm must be positive")


@dataclass(eq=False)
class RowProblem:
    """One row: data, target, penalty, optional state-block ball."""

    H: np.ndarray
    target: np.ndarray
    n_state: int
    match_weight: float
    penalty: Penalty = Penalty()
    ball_radius: float | None = None
    mode: str = "relaxed"
    warm_start: np.ndarray | None = None

    def __post_init__(self):
        # C order pinned: BLAS picks layout-dependent kernels, and bitwise
        # reproducibility across processes requires one layout everywhere
        self.H = np.ascontiguousarray(as_matrix(self.H, "H"))
        self.target = np.ascontiguousarray(self.target, dtype=np.float64)
        m, d = self.H.shape
        if m < 1 or d < 1:
            raise ValueError("H must be non-empty")
        if self.target.shape != (m,):
            raise ValueError("target length must match H rows")
        if not np.all(np.isfinite(self.target)):
            raise ValueError("target has non-finite entries")
        if not 0 <= self.n_state <= d:
            raise ValueError("n_state out of range")
        if self.mode not in _MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if not math.isfinite(self.match_weight) or self.match_weight < 0:
            raise ValueError("match_weight must be finite and non-negative")
        if self.mode == "relaxed" and self.match_weight == 0:
            raise ValueError("relaxed mode needs a positive match_weight")
        if self.ball_radius is not None and not 0 < self.ball_radius < 1:
            raise ValueError("ball_radius must lie in (0, 1)")
        if self.warm_start is not None:
            self.warm_start = np.ascontiguousarray(self.warm_start, dtype=np.float64)
            if self.warm_start.shape != (d,):
                raise ValueError("warm_start length must match H columns")
            if not np.all(np.isfinite(self.warm_start)):
                raise ValueError("warm_start has non-finite entries")


@dataclass
class RowSolution:
    w: np.ndarray
    iterations: int
    primal_residual: float
    dual_residual: float
    objective: float
    match_residual: float | None = None

    @property
    def nnz(self):
        return int(np.count_nonzero(self.w))


class RowSolverError(RuntimeError):
    """Raised when a row fails to converge; carries the partial solution."""

    def __init__(self, message, solution):
        super().__init__(message)
        self.solution = solution


def row_objective(problem, w):
    """Match term at the problem's own weight plus the penalty value."""
    r = problem.H @ w - problem.target
    return float(problem.match_weight * (r @ r) + problem.penalty.value(w))


def gram_norm(H, seed):
    """Largest eigenvalue of H^T H by seeded power iteration."""
    rng = derive_rng(seed, STREAM_SOLVER)
    d = H.shape[1]
    x = rng.standard_normal(d)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(100):
        y = H.T @ (H @ x)
        lam_new = float(x @ y)
        norm = np.linalg.norm(y)
        if norm == 0.0:
            return max(lam_new, np.finfo(float).tiny)
        x = y / norm
        if abs(lam_new - lam) <= 1e-6 * max(abs(lam_new), 1.0):
            lam = lam_new
            break
        lam = lam_new
    return max(lam, np.finfo(float).tiny)


def _apply_prox(v, gamma, penalty, radius, n_state):
    kind, wt = penalty.kind, penalty.weight
    if radius is None:
        head, tail = v, None
    else:
        head, tail = v[:n_state], v[n_state:]
    if radius is None:
        if kind == "l1" and wt > 0:
            return soft_threshold(v, gamma * wt)
        if kind == "perspective" and wt > 0:
            return berhu_prox(v, gamma * wt)
        return v.copy()
    if kind == "l1" and wt > 0:
        out_head = project_l1_ball(soft_threshold(head, gamma * wt), radius)
        out_tail = soft_threshold(tail, gamma * wt)
    elif kind == "perspective" and wt > 0:
        out_head = _berhu_ball_prox(head, gamma * wt, radius)
        out_tail = berhu_prox(tail, gamma * wt)
    else:
        out_head = project_l1_ball(head, radius)
        out_tail = tail.copy()
    return np.concatenate([out_head, out_tail])


def _fista_stage(problem, cfg, match_weight, gram, w0, cert_exit):
    """One accelerated proximal-gradient run at a fixed match weight.

    Returns ``(w, iterations, primal, dual, converged, cert)`` where
    cert is the infinity-norm matching residual when ``cert_exit`` is
    set (penalty-free exact stages may leave before the step norms are
    tiny, since feasibility is their whole objective).
    """
    H, t = problem.H, problem.target
    radius, n_state = problem.ball_radius, problem.n_state
    penalty = problem.penalty
    gamma = cfg.step if cfg.step is not None else 1.0 / (2.0 * match_weight * gram * 1.05)
    w = w0.copy()
    y = w.copy()
    tk = 1.0
    primal = math.inf
    dual = math.inf
    for it in range(1, cfg.max_iter + 1):
        grad_y = 2.0 * match_weight * (H.T @ (H @ y - t))
        w_next = _apply_prox(y - gamma * grad_y, gamma, penalty, radius, n_state)
        step = w_next - w
        # residuals on the gradient-mapping scale: dividing by gamma keeps
        # the tolerances meaningful when exact mode escalates match_weight
        # (the raw step shrinks with the step size, the mapping does not)
        primal = float(np.max(np.abs(step))) / gamma if step.size else 0.0
        if not math.isfinite(primal):
            # step overshoot; halve and restart from the stage origin
            gamma *= 0.5
            w = w0.copy()
            y = w.copy()
            tk = 1.0
            continue
        if float((y - w_next) @ step) > 0.0:
            tk = 1.0
            y = w_next
        else:
            tk_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * tk * tk))
            y = w_next + ((tk - 1.0) / tk_next) * step
            tk = tk_next
        w = w_next
        if cert_exit and it % 10 == 0:
            cert = float(np.max(np.abs(H @ w - t)))
            if cert <= EXACT_MATCH_TOL:
                grad_w = 2.0 * match_weight * (H.T @ (H @ w - t))
                pg = _apply_prox(w - gamma * grad_w, gamma, penalty, radius, n_state)
                dual = float(np.max(np.abs(pg - w))) / gamma
                return w, it, primal, dual, True, cert
        if primal <= cfg.tol_primal:
            grad_w = 2.0 * match_weight * (H.T @ (H @ w - t))
            pg = _apply_prox(w - gamma * grad_w, gamma, penalty, radius, n_state)
            dual = float(np.max(np.abs(pg - w))) / gamma
            if dual <= cfg.tol_dual:
                cert = float(np.max(np.abs(H @ w - t))) if cert_exit else None
                return w, it, primal, dual, True, cert
    cert = float(np.max(np.abs(H @ w - t))) if cert_exit else None
    return w, cfg.max_iter, primal, dual, False, cert


def solve_row(problem, config=SolverConfig()):
    """Solve one row problem; deterministic for fixed inputs and config.

    Relaxed mode runs a single stage and requires primal and dual
    convergence.  Exact mode walks the match weight up by factors of 10
    (capped at 1e6), warm starting each stage, until the infinity-norm
    matching residual certifies below EXACT_MATCH_TOL.
    """
    gram = config.gram_norm
    if gram is None and config.step is None:
        gram = gram_norm(problem.H, config.seed)
    d = problem.H.shape[1]
    w0 = (
        problem.warm_start.copy()
        if problem.warm_start is not None
        else np.zeros(d)
    )
    if problem.ball_radius is not None:
        w0[: problem.n_state] = project_l1_ball(w0[: problem.n_state], problem.ball_radius)

    if problem.mode == "relaxed":
        w, its, primal, dual, ok, _ = _fista_stage(
            problem, config, problem.match_weight, gram, w0, cert_exit=False
        )
        sol = RowSolution(w, its, primal, dual, row_objective(problem, w))
        if not ok:
            raise RowSolverError(
                f"no convergence in {config.max_iter} iterations "
                f"(primal {primal:.3e}, dual {dual:.3e})",
                sol,
            )
        return sol

    # exact mode
    feasibility_only = problem.penalty.kind == "none" or problem.penalty.weight == 0.0
    mw = problem.match_weight if problem.match_weight > 0 else 1.0
    total = 0
    w = w0
    while True:
        w, its, primal, dual, ok, cert = _fista_stage(
            problem, config, mw, gram, w, cert_exit=feasibility_only
        )
        total += its
        if cert is None:
            cert = float(np.max(np.abs(problem.H @ w - problem.target)))
        sol = RowSolution(w, total, primal, dual, row_objective(problem, w), cert)
        if not ok and not (feasibility_only and cert <= EXACT_MATCH_TOL):
            raise RowSolverError(
                f"stage at match weight {mw:g} did not converge "
                f"(primal {primal:.3e}, dual {dual:.3e})",
                sol,
            )
        if cert <= EXACT_MATCH_TOL:
            return sol
        # raising the match weight rescales the step to cancel it exactly,
        # so penalty-free stages would just repeat themselves
        if feasibility_only and config.step is None:
            raise RowSolverError(
                f"matching residual {cert:.3e} above {EXACT_MATCH_TOL:g}; "
                "the targets are not consistent with the data",
                sol,
            )
        if mw >= _MAX_MATCH_WEIGHT:
            raise RowSolverError(
                f"matching residual {cert:.3e} above {EXACT_MATCH_TOL:g} "
                f"at match weight cap {_MAX_MATCH_WEIGHT:g}",
                sol,
            )
        mw = min(mw * 10.0, _MAX_MATCH_WEIGHT)
