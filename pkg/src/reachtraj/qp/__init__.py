"""Dense convex QP solver with a compiled core and a numpy fallback.

The Cython extension (`reachtraj.qp._core`) implements the same dual
active-set algorithm as `_active_set.py`.  Backend selection happens at
import time; set REACHTRAJ_QP_BACKEND=python|cython to force one.
"""
from __future__ import annotations

import os

import numpy as np

from .problem import QpError, QpProblem, QpSolution
from ._active_set import _kkt_residual, solve_qp_py

__all__ = ["QpProblem", "QpSolution", "QpError", "solve_qp", "BACKEND",
           "available_backends", "solve_qp_with_backend"]

_STATUS = {0: "Optimal", 1: "Infeasible", 2: "IterationLimit"}

try:
    from . import _core as _core_mod
except ImportError:  # pragma: no cover - depends on build environment
    _core_mod = None


def _solve_qp_cy(problem: QpProblem, max_iter: int = 200) -> QpSolution:
    code, x, eq_mult, in_mult, iters, cert_p, cert_act, cert_coef, cert_v = \
        _core_mod.solve(problem.H, problem.g, problem.A_eq, problem.b_eq,
                        problem.A_in, problem.b_in, max_iter)
    status = _STATUS[code]
    cert = None
    if status == "Infeasible":
        cert = {"constraint": int(cert_p), "active": list(cert_act),
                "coefficients": np.asarray(cert_coef), "violation": cert_v}
    kkt = _kkt_residual(problem, x, eq_mult, in_mult)
    return QpSolution(status, x, eq_mult, in_mult, iters, kkt, cert)


def available_backends() -> list[str]:
    backends = ["python"]
    if _core_mod is not None:
        backends.append("cython")
    return backends


def solve_qp_with_backend(problem: QpProblem, backend: str,
                          max_iter: int = 200) -> QpSolution:
    if backend == "python":
        return solve_qp_py(problem, max_iter)
    if backend == "cython":
        if _core_mod is None:
            raise QpError("cython backend not built")
        return _solve_qp_cy(problem, max_iter)
    raise QpError(f"unknown QP backend {backend!r}")


_forced = os.environ.get("REACHTRAJ_QP_BACKEND", "").strip().lower()
if _forced:
    BACKEND = _forced
    if BACKEND not in ("python", "cython"):
        raise QpError(f"unsupported REACHTRAJ_QP_BACKEND={BACKEND!r}")
    if BACKEND == "cython" and _core_mod is None:
        raise QpError("REACHTRAJ_QP_BACKEND=cython but extension not built")
else:
    BACKEND = "cython" if _core_mod is not None else "python"


def solve_qp(problem: QpProblem, max_iter: int = 200) -> QpSolution:
    """Solve a dense convex QP with the selected backend."""
    return solve_qp_with_backend(problem, BACKEND, max_iter)
