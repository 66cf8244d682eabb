"""Equilibrium models, well-posedness checks, and state rescaling.

A model holds the block-partitioned parameter matrix
``[[A, B], [C, D]]`` together with a componentwise non-expansive
activation.  States solve ``X = phi(A X + B U)`` and predictions are
``C X + D U``.  Fixed points are computed by Picard iteration, which
converges geometrically whenever ``inf_norm(A) < 1`` and, more
generally, whenever the spectral radius of ``|A|`` is below one.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .matrix_store import (
    as_matrix,
    csr_from_bytes,
    csr_to_bytes,
    inf_norm,
    pf_eigenvalue,
    to_csr,
    to_dense,
)

MODEL_MAGIC = b"SIMMDL1"

_ACT_CODES = {"relu": 0, "leaky_relu": 1, "identity": 2}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


@dataclass(frozen=True)
class Activation:
    """Componentwise non-expansive, positively homogeneous map."""

    kind: str
    slope: float = 0.0

    def __post_init__(self):
        if self.kind not in _ACT_CODES:
            raise ValueError(f"unknown activation {self.kind!r}")
        if self.kind == "leaky_relu" and not 0.0 <= self.slope < 1.0:
            raise ValueError("leaky slope must lie in [0, 1)")

    def __call__(self, z):
        if self.kind == "identity":
            return np.asarray(z, dtype=np.float64).copy()
        z = np.asarray(z, dtype=np.float64)
        if self.kind == "relu":
            return np.maximum(z, 0.0)
        return np.where(z > 0.0, z, self.slope * z)

    def derivative(self, z):
        """Subgradient choice: 0 at the ReLU kink."""
        z = np.asarray(z, dtype=np.float64)
        if self.kind == "identity":
            return np.ones_like(z)
        slope = self.slope if self.kind == "leaky_relu" else 0.0
        return np.where(z > 0.0, 1.0, slope)


RELU = Activation("relu")
IDENTITY = Activation("identity")


def leaky_relu(slope):
    return Activation("leaky_relu", slope)


@dataclass(eq=False)
class ImplicitModel:
    """Parameters ``[[A, B], [C, D]]`` plus the activation."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    activation: Activation = RELU

    def __post_init__(self):
        self.A = as_matrix(self.A, "A")
        self.B = as_matrix(self.B, "B")
        self.C = as_matrix(self.C, "C")
        self.D = as_matrix(self.D, "D")
        n, n2 = self.A.shape
        if n != n2:
            raise ValueError("A must be square")
        if self.B.shape[0] != n:
            raise ValueError("B row count must match A")
        if self.C.shape[1] != n:
            raise ValueError("C column count must match A")
        if self.D.shape != (self.C.shape[0], self.B.shape[1]):
            raise ValueError("D shape must be (q, p)")
        if self.B.shape[1] < 1 or self.C.shape[0] < 1:
            raise ValueError("input and output dimensions must be positive")

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def p(self):
        return self.B.shape[1]

    @property
    def q(self):
        return self.C.shape[0]


@dataclass
class FixedPointReport:
    iterations: int
    final_residual: float
    converged: bool


class PicardDivergenceError(RuntimeError):
    """Raised when the fixed-point iteration exhausts its budget."""

    def __init__(self, report):
        super().__init__(
            f"no fixed point within {report.iterations} iterations "
            f"(last residual {report.final_residual:.3e})"
        )
        self.report = report


def _check_kappa(kappa, inclusive=False):
    hi_ok = kappa <= 1.0 if inclusive else kappa < 1.0
    if not (0.0 < kappa and hi_ok):
        span = "(0, 1]" if inclusive else "(0, 1)"
        raise ValueError(f"kappa must lie in {span}")


def check_wellposed(model, mode="inf_norm", kappa=0.99):
    """True when the chosen sufficient condition for uniqueness holds.

    ``inf_norm`` mode tests ``inf_norm(A) <= kappa`` (the closed
    constraint the trainer enforces); ``pf`` mode tests the sharper
    spectral condition ``pf_eigenvalue(|A|) < 1``.
    """
    _check_kappa(kappa)
    if mode not in ("inf_norm", "pf"):
        raise ValueError(f"unknown mode {mode!r}")
    if model.n == 0:
        return True
    if mode == "inf_norm":
        return inf_norm(model.A) <= kappa
    return pf_eigenvalue(np.abs(model.A)) < 1.0


def picard_solve(model, U, tol=1e-8, max_iter=5000, x0=None):
    """Iterate ``X <- phi(A X + B U)`` to the fixed point.

    Starts from zero states unless ``x0`` is given.  Returns
    ``(X, FixedPointReport)``; raises PicardDivergenceError when the
    infinity-norm increment stays above ``tol`` for ``max_iter``
    iterations.
    """
    U = as_matrix(U, "U")
    if U.shape[0] != model.p:
        raise ValueError(f"U must have {model.p} rows, got {U.shape[0]}")
    if tol <= 0 or max_iter < 1:
        raise ValueError("tol must be positive and max_iter at least 1")
    m = U.shape[1]
    if x0 is None:
        X = np.zeros((model.n, m))
    else:
        X = np.array(x0, dtype=np.float64)
        if X.shape != (model.n, m):
            raise ValueError("x0 shape must be (n, m)")
    BU = model.B @ U
    phi = model.activation
    for it in range(1, max_iter + 1):
        X_next = phi(model.A @ X + BU)
        diff = X_next - X
        residual = float(np.max(np.abs(diff))) if diff.size else 0.0
        X = X_next
        if residual <= tol:
            return X, FixedPointReport(it, residual, True)
    raise PicardDivergenceError(FixedPointReport(max_iter, residual, False))


def predict(model, U, tol=1e-8, max_iter=5000):
    """Equilibrium outputs ``C X + D U``."""
    U = as_matrix(U, "U")
    X, _ = picard_solve(model, U, tol=tol, max_iter=max_iter)
    return model.C @ X + model.D @ U


def state_scaling(model, kappa=1.0):
    """Positive vector s solving ``s = 1 + (|A|/kappa) s``.

    Exists iff ``pf_eigenvalue(|A|/kappa) < 1``; then every entry is
    at least one and ``diag(s)`` rescales the model below kappa.
    """
    _check_kappa(kappa, inclusive=True)
    n = model.n
    if n == 0:
        return np.zeros(0)
    scaled_abs = np.abs(model.A) / kappa
    if pf_eigenvalue(scaled_abs) >= 1.0:
        raise ValueError("not PF-rescalable at this kappa")
    s = np.linalg.solve(np.eye(n) - scaled_abs, np.ones(n))
    if not np.all(np.isfinite(s)) or np.any(s < 1.0 - 1e-9):
        raise ValueError("not PF-rescalable at this kappa")
    return s


def rescale(model, kappa=1.0):
    """Similarity-scale the states so ``inf_norm(A') < kappa``.

    With ``S = diag(s)`` the new blocks are ``A' = S^-1 A S``,
    ``B' = S^-1 B``, ``C' = C S``, ``D' = D``; by positive homogeneity
    of the activation the input-output map is unchanged.
    """
    s = state_scaling(model, kappa)
    if model.n == 0:
        return ImplicitModel(model.A, model.B, model.C, model.D, model.activation)
    A = model.A * (s[None, :] / s[:, None])
    B = model.B / s[:, None]
    C = model.C * s[None, :]
    return ImplicitModel(A, B, C, model.D.copy(), model.activation)


def _act_to_wire(activation):
    return struct.pack("<Bd", _ACT_CODES[activation.kind], activation.slope)


def _act_from_wire(blob, offset):
    code, slope = struct.unpack_from("<Bd", blob, offset)
    if code not in _ACT_NAMES:
        raise ValueError(f"unknown activation code {code}")
    kind = _ACT_NAMES[code]
    return Activation(kind, slope if kind == "leaky_relu" else 0.0), offset + 9


def model_to_bytes(model):
    """Container: magic, activation, then CSR blocks A, B, C, D.

    Negative zeros normalise to +0.0; all other values round-trip
    bit-exactly.
    """
    parts = [MODEL_MAGIC, _act_to_wire(model.activation)]
    for block in (model.A, model.B, model.C, model.D):
        parts.append(csr_to_bytes(to_csr(block)))
    return b"".join(parts)


def model_from_bytes(blob):
    if blob[:7] != MODEL_MAGIC:
        raise ValueError("bad magic: not a model file")
    activation, offset = _act_from_wire(blob, 7)
    blocks = []
    for _ in range(4):
        mat, offset = csr_from_bytes(blob, offset)
        blocks.append(mat)
    if offset != len(blob):
        raise ValueError("trailing bytes after model blocks")
    a, b, c, d = (to_dense(m) for m in blocks)
    return ImplicitModel(a, b, c, d, activation)


def save_model(model, path):
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path):
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
