"""Pure-numpy dual active-set QP solver (Goldfarb-Idnani scheme).

Reference implementation; the Cython extension in `_core.pyx` mirrors
this algorithm step for step.  Problems are small (tens of variables),
so every inner iteration refactorizes the reduced system instead of
maintaining rank-one updates.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .problem import HESSIAN_REG, QpProblem, QpSolution

FEAS_TOL = 1e-10
PIVOT_TOL = 1e-12


def solve_qp_py(problem: QpProblem, max_iter: int = 200) -> QpSolution:
    H = problem.H + HESSIAN_REG * np.eye(problem.n)
    g = problem.g
    A_eq, b_eq = problem.A_eq, problem.b_eq
    A_in, b_in = problem.A_in, problem.b_in
    meq, mi = A_eq.shape[0], A_in.shape[0]
    n = problem.n

    cho = cho_factor(H, lower=True)
    x = -cho_solve(cho, g)

    # Active set bookkeeping.  Normals are stored in ">= d" orientation:
    # inequalities enter negated, equalities may enter with either sign.
    act_idx: list[int] = []          # 0..meq-1 equalities, meq.. inequalities
    act_N: list[np.ndarray] = []     # oriented normals
    act_d: list[float] = []
    act_sign: list[float] = []       # orientation vs. the original row
    lam: list[float] = []
    iters = 0

    def finish(status, certificate=None):
        eq_mult = np.zeros(meq)
        in_mult = np.zeros(mi)
        for pos, j in enumerate(act_idx):
            if j < meq:
                # Stationarity is H x + g = sum lam*c on oriented normals;
                # reported against H x + g + A_eq' mu + A_in' mu = 0.
                eq_mult[j] = -act_sign[pos] * lam[pos]
            else:
                in_mult[j - meq] = lam[pos]
        kkt = _kkt_residual(problem, x, eq_mult, in_mult)
        return QpSolution(status, x.copy(), eq_mult, in_mult, iters, kkt,
                          certificate)

    while True:
        # Select the next constraint to enforce: equalities first (in
        # declaration order), then the most violated inequality.
        p = None
        for j in range(meq):
            if j not in act_idx:
                p = j
                break
        if p is None:
            if mi:
                s = A_in @ x - b_in
                s[[j - meq for j in act_idx if j >= meq]] = -np.inf
                p_in = int(np.argmax(s))
                if s[p_in] <= FEAS_TOL:
                    return finish("Optimal")
                p = meq + p_in
            else:
                return finish("Optimal")

        if p < meq:
            c, d = A_eq[p], b_eq[p]
            sp = float(c @ x - d)
            sign = 1.0
            if sp > 0.0:
                c, d, sp, sign = -c, -d, -sp, -1.0
        else:
            c, d = -A_in[p - meq], -b_in[p - meq]
            sp = float(c @ x - d)
            sign = 1.0

        lam_p = 0.0
        while True:
            iters += 1
            if iters > max_iter:
                return finish("IterationLimit")

            Hc = cho_solve(cho, c)
            q = len(act_idx)
            if q:
                Nmat = np.column_stack(act_N)
                HN = cho_solve(cho, Nmat)
                r = np.linalg.solve(Nmat.T @ HN, Nmat.T @ Hc)
                zdir = Hc - HN @ r
            else:
                r = np.zeros(0)
                zdir = Hc

            # Blocking step over active inequality multipliers.
            t1, k1 = np.inf, -1
            for pos, j in enumerate(act_idx):
                if j >= meq and r[pos] > PIVOT_TOL:
                    ratio = lam[pos] / r[pos]
                    if ratio < t1:
                        t1, k1 = ratio, pos
            denom = float(c @ zdir)
            t2 = -sp / denom if denom > PIVOT_TOL else np.inf

            t = min(t1, t2)
            if not np.isfinite(t):
                cert = {
                    "constraint": p,
                    "active": list(act_idx),
                    "coefficients": -np.asarray(r, dtype=float),
                    "violation": -sp,
                }
                return finish("Infeasible", cert)

            for pos in range(q):
                lam[pos] -= t * r[pos]
            lam_p += t
            if np.isfinite(t2):
                x += t * zdir
                sp += t * denom

            if t2 <= t1:
                act_idx.append(p)
                act_N.append(c.copy())
                act_d.append(d)
                act_sign.append(sign)
                lam.append(lam_p)
                break
            # Drop the blocking constraint and retry with the same p.
            for lst in (act_idx, act_N, act_d, act_sign, lam):
                del lst[k1]


def _kkt_residual(problem: QpProblem, x, eq_mult, in_mult) -> float:
    grad = problem.H @ x + problem.g
    if problem.A_eq.shape[0]:
        grad = grad + problem.A_eq.T @ eq_mult
    if problem.A_in.shape[0]:
        grad = grad + problem.A_in.T @ in_mult
    res = float(np.max(np.abs(grad))) if grad.size else 0.0
    if problem.A_eq.shape[0]:
        res = max(res, float(np.max(np.abs(problem.A_eq @ x - problem.b_eq))))
    if problem.A_in.shape[0]:
        s = problem.A_in @ x - problem.b_in
        res = max(res, float(np.max(np.maximum(s, 0.0))))
        res = max(res, float(np.max(np.abs(in_mult * s))))
    return res
