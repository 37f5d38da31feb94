"""Problem and solution containers for the dense convex QP solver."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Regularization added to the cost Hessian so slack-only (semi-definite)
# costs become strictly convex and a Cholesky factorization exists.
HESSIAN_REG = 1e-10

# Eigenvalue floor below which the cost matrix is rejected as indefinite.
EIG_FLOOR = -1e-10


class QpError(ValueError):
    """Raised for malformed QP problem data."""


@dataclass
class QpProblem:
    """min 1/2 z'Hz + g'z  s.t.  A_eq z = b_eq,  A_in z <= b_in."""

    H: np.ndarray
    g: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_in: np.ndarray | None = None
    b_in: np.ndarray | None = None

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        self.g = np.asarray(self.g, dtype=float).ravel()
        n = self.g.shape[0]
        if self.H.shape != (n, n):
            raise QpError(f"H must be {n}x{n}, got {self.H.shape}")
        if not np.allclose(self.H, self.H.T, atol=1e-10):
            raise QpError("H must be symmetric")
        if np.linalg.eigvalsh(0.5 * (self.H + self.H.T)).min() < EIG_FLOOR:
            raise QpError("H must be positive semi-definite")
        self.A_eq, self.b_eq = _check_pair(self.A_eq, self.b_eq, n, "eq")
        self.A_in, self.b_in = _check_pair(self.A_in, self.b_in, n, "in")

    @property
    def n(self) -> int:
        return self.g.shape[0]


def _check_pair(A, b, n, tag):
    if A is None or np.size(A) == 0:
        return np.zeros((0, n)), np.zeros(0)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).ravel()
    if A.shape[1] != n or A.shape[0] != b.shape[0]:
        raise QpError(f"inconsistent {tag} constraint shapes {A.shape}, {b.shape}")
    if not np.all(np.isfinite(A)) or not np.all(np.isfinite(b)):
        raise QpError(f"non-finite {tag} constraint data")
    return A, b


@dataclass
class QpSolution:
    """Result of a QP solve.

    status is one of "Optimal", "Infeasible", "IterationLimit".  On
    "Infeasible", `certificate` holds a Farkas-style combination (the
    incoming constraint plus nonnegative coefficients on active rows
    whose normals cancel it).
    """

    status: str
    z: np.ndarray
    eq_multipliers: np.ndarray
    in_multipliers: np.ndarray
    iterations: int
    kkt_residual: float
    certificate: dict | None = field(default=None)

    @property
    def optimal(self) -> bool:
        return self.status == "Optimal"
