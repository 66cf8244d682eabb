"""Row-parallel training of implicit models from state bundles.

Every row of the stacked matrix ``[[A, B], [C, D]]`` is an independent
convex problem over the shared design ``H = [X^T U^T]``: state rows fit
pre-activations under the L1 ball that keeps the model well posed,
output rows fit logits unconstrained.  Rows are distributed over a
process pool with H in shared memory; each row is solved by the same
pure function on the same inputs, so the assembled model is bitwise
identical for every worker count and partition.
"""

import csv
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from multiprocessing import get_context, resource_tracker, shared_memory

import numpy as np
from threadpoolctl import threadpool_limits

from .baseline_net import StateBundle, embed_implicit, extract_states
from .implicit_core import (
    RELU,
    ImplicitModel,
    check_wellposed,
    picard_solve,
    rescale,
    state_scaling,
)
from .matrix_store import CsrMatrix, to_csr, to_dense
from .row_solver import (
    Penalty,
    RowProblem,
    RowSolverError,
    SolverConfig,
    gram_norm,
    solve_row,
)
from .seeding import STREAM_SUBSAMPLE, derive_rng

_BALL_SLACK = 1e-9


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters shared by every row of one training run."""

    objective: Penalty = Penalty()
    lam1: float = 0.1
    lam2: float = 0.1
    kappa: float = 0.99
    mode: str = "relaxed"
    workers: int = 1
    solver: SolverConfig = field(default_factory=SolverConfig)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.kappa < 1.0:
            raise ValueError("kappa must lie in (0, 1)")
        if self.lam1 < 0 or self.lam2 < 0:
            raise ValueError("match weights must be non-negative")
        if self.mode not in ("relaxed", "exact"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")


@dataclass(eq=False)
class TrainedModel:
    """CSR blocks of the trained model plus per-row diagnostics."""

    A: CsrMatrix
    B: CsrMatrix
    C: CsrMatrix
    D: CsrMatrix
    activation: object
    kappa: float
    per_row: list
    sparsity_pct: float

    @cached_property
    def model(self):
        return ImplicitModel(
            to_dense(self.A),
            to_dense(self.B),
            to_dense(self.C),
            to_dense(self.D),
            self.activation,
        )

    @property
    def nnz(self):
        return self.A.nnz + self.B.nnz + self.C.nnz + self.D.nnz


class TrainError(RuntimeError):
    """Raised when rows fail; lists the failing row indices."""

    def __init__(self, failures):
        self.row_indices = [idx for idx, _ in failures]
        detail = "; ".join(f"row {idx}: {msg}" for idx, msg in failures[:5])
        more = "" if len(failures) <= 5 else f" (+{len(failures) - 5} more)"
        super().__init__(f"{len(failures)} rows failed: {detail}{more}")


def build_row_problems(bundle, config):
    """One RowProblem per state row and per output row.

    The design matrix is shared by reference.  When the objective is
    penalty-free, the rows are warm started at the minimum-norm
    least-squares solution, computed in one shot so the result cannot
    depend on how rows are later partitioned.
    """
    H = np.ascontiguousarray(np.hstack([bundle.X.T, bundle.U.T]))
    n = bundle.n_state
    q = bundle.Yhat.shape[0]
    warm = None
    if config.objective.kind == "none" or config.objective.weight == 0.0:
        targets = np.vstack([bundle.Z, bundle.Yhat])
        warm = np.linalg.lstsq(H, targets.T, rcond=None)[0]
    problems = []
    for i in range(n + q):
        is_state = i < n
        problems.append(
            RowProblem(
                H=H,
                target=bundle.Z[i] if is_state else bundle.Yhat[i - n],
                n_state=n,
                match_weight=config.lam1 if is_state else config.lam2,
                penalty=config.objective,
                ball_radius=config.kappa if is_state else None,
                mode=config.mode,
                warm_start=None if warm is None else warm[:, i],
            )
        )
    return problems


# Per-process solve context: the shared design matrix and solver config.
# Set directly for serial runs; forked workers inherit the parent's
# mapping, spawned workers attach by name in _worker_init.
_CTX = {}


def _worker_init(shm_name, shape, solver_cfg):
    if "H" not in _CTX:
        shm = shared_memory.SharedMemory(name=shm_name)
        try:
            # attaching registers the segment with this process's resource
            # tracker, which would unlink it when the worker exits
            resource_tracker.unregister(shm._name, "shared_memory")
        except Exception:
            pass
        _CTX["shm"] = shm
        _CTX["H"] = np.ndarray(shape, dtype=np.float64, buffer=shm.buf)
    _CTX["solver"] = solver_cfg
    _CTX["blas_limit"] = threadpool_limits(limits=1)


def _solve_task(task):
    """Pure per-row solve; identical result for any partition of rows."""
    idx, target, n_state, match_weight, ball_radius, penalty, mode, warm = task
    problem = RowProblem(
        H=_CTX["H"],
        target=target,
        n_state=n_state,
        match_weight=match_weight,
        penalty=penalty,
        ball_radius=ball_radius,
        mode=mode,
        warm_start=warm,
    )
    try:
        return idx, "ok", solve_row(problem, _CTX["solver"])
    except RowSolverError as err:
        return idx, "err", str(err)


def _problem_task(idx, problem):
    return (
        idx,
        problem.target,
        problem.n_state,
        problem.match_weight,
        problem.ball_radius,
        problem.penalty,
        problem.mode,
        problem.warm_start,
    )


def _solve_all(problems, config):
    if not problems:
        return []
    H = problems[0].H
    solver_cfg = config.solver
    if solver_cfg.gram_norm is None and solver_cfg.step is None:
        solver_cfg = replace(solver_cfg, gram_norm=gram_norm(H, solver_cfg.seed))
    tasks = [_problem_task(i, p) for i, p in enumerate(problems)]
    if config.workers == 1:
        _CTX["H"] = H
        _CTX["solver"] = solver_cfg
        try:
            with threadpool_limits(limits=1):
                return [_solve_task(t) for t in tasks]
        finally:
            _CTX.clear()
    shm = shared_memory.SharedMemory(create=True, size=H.nbytes)
    try:
        view = np.ndarray(H.shape, dtype=np.float64, buffer=shm.buf)
        view[:] = H
        chunk = math.ceil(len(tasks) / config.workers)
        try:
            ctx = get_context("fork")
            _CTX["H"] = view  # forked workers inherit this mapping
        except ValueError:
            ctx = get_context("spawn")
        with ctx.Pool(
            processes=config.workers,
            initializer=_worker_init,
            initargs=(shm.name, H.shape, solver_cfg),
        ) as pool:
            return pool.map(_solve_task, tasks, chunksize=chunk)
    finally:
        _CTX.clear()
        shm.close()
        shm.unlink()


def train(bundle, config, activation=RELU, baseline_nnz=None):
    """Fit all rows and assemble a well-posed implicit model.

    Raises TrainError listing every row that failed to converge.  The
    state block of the result satisfies ``inf_norm(A) <= kappa`` (row
    sums a few ulps over the ball are scaled back onto it).
    """
    problems = build_row_problems(bundle, config)
    results = _solve_all(problems, config)
    failures = [(idx, msg) for idx, status, msg in results if status != "ok"]
    if failures:
        raise TrainError(failures)
    solutions = [sol for _, _, sol in results]
    n = bundle.n_state
    p = bundle.U.shape[0]
    q = bundle.Yhat.shape[0]
    W = np.vstack([sol.w for sol in solutions]) if solutions else np.zeros((0, n + p))
    for i in range(n):
        row_norm = np.abs(W[i, :n]).sum()
        if row_norm > config.kappa + _BALL_SLACK:
            raise TrainError([(i, f"state row violates the ball: {row_norm!r}")])
        if row_norm > config.kappa:
            W[i, :n] *= config.kappa / row_norm
    model = ImplicitModel(W[:n, :n], W[:n, n:], W[n:, :n], W[n:, n:], activation)
    if not check_wellposed(model, "inf_norm", config.kappa):
        raise TrainError([(0, "assembled model failed the well-posedness check")])
    blocks = [to_csr(b) for b in (model.A, model.B, model.C, model.D)]
    nnz = sum(b.nnz for b in blocks)
    if baseline_nnz is not None:
        if baseline_nnz <= 0:
            raise ValueError("baseline_nnz must be positive")
        sparsity = 100.0 * (1.0 - nnz / baseline_nnz)
    else:
        sparsity = float("nan")
    return TrainedModel(
        *blocks,
        activation=activation,
        kappa=config.kappa,
        per_row=solutions,
        sparsity_pct=sparsity,
    )


def subsample_columns(bundle, m_sub, seed=0):
    """Uniform column subset without replacement, consistent across blocks."""
    m = bundle.n_columns
    if not 1 <= m_sub <= m:
        raise ValueError(f"m_sub must lie in [1, {m}]")
    idx = derive_rng(seed, STREAM_SUBSAMPLE).permutation(m)[:m_sub]
    return StateBundle(
        bundle.U[:, idx], bundle.X[:, idx], bundle.Z[:, idx], bundle.Yhat[:, idx]
    )


def rescaled_state_bundle(net, U_design, kappa=0.99):
    """Extract states from a net and rescale them below the ball.

    Returns ``(bundle, model)`` where the model is the rescaled exact
    embedding and the bundle holds the correspondingly scaled states:
    dividing Z and X by the scaling vector keeps ``Z = A X + B U``
    exact, and the post-activations are recomputed so ``X = phi(Z)``
    holds bitwise.
    """
    base = embed_implicit(net)
    scaled = rescale(base, kappa)
    raw = extract_states(net, U_design)
    if raw.n_state == 0:
        return raw, scaled
    s = state_scaling(base, kappa)
    Z = raw.Z / s[:, None]
    X = net.activation(Z)
    return StateBundle(raw.U, X, Z, raw.Yhat), scaled


def bundle_from_implicit(model, U, tol=1e-10, max_iter=20000):
    """State bundle for an already-implicit baseline.

    ``X = phi(Z)`` holds exactly; ``Z = A X + B U`` holds to the Picard
    tolerance.
    """
    X, _ = picard_solve(model, U, tol=tol, max_iter=max_iter)
    Z = model.A @ X + model.B @ U
    X = model.activation(Z)
    Yhat = model.C @ X + model.D @ U
    return StateBundle(np.asarray(U, dtype=np.float64), X, Z, Yhat)


REPORT_COLUMNS = [
    "index",
    "block",
    "iterations",
    "primal_residual",
    "dual_residual",
    "match_residual",
    "objective",
    "nnz",
]


def write_row_report(trained, path):
    """One CSV line per row problem, state rows first."""
    n = trained.A.rows
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for i, sol in enumerate(trained.per_row):
            writer.writerow(
                [
                    i,
                    "state" if i < n else "output",
                    sol.iterations,
                    f"{sol.primal_residual:.6e}",
                    f"{sol.dual_residual:.6e}",
                    "" if sol.match_residual is None else f"{sol.match_residual:.6e}",
                    f"{sol.objective:.6e}",
                    sol.nnz,
                ]
            )
