# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled dual active-set QP core.

Mirrors `_active_set.solve_qp_py` step for step: same constraint
selection order, same blocking-step logic, same refactorization of the
reduced system each inner iteration.  Linear algebra goes straight to
LAPACK (dpotrf/dpotrs for the Hessian factor, dgesv for the reduced
system), which removes the per-call Python overhead that dominates the
fallback on the sub-20-variable problems this package solves.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY
from scipy.linalg.cython_lapack cimport dgesv, dpotrf, dpotrs

cnp.import_array()

cdef double HESSIAN_REG = 1e-10
cdef double FEAS_TOL = 1e-10
cdef double PIVOT_TOL = 1e-12


def solve(H, g, A_eq, b_eq, A_in, b_in, int max_iter):
    """Returns (code, x, eq_mult, in_mult, iters, cert_p, cert_active,
    cert_coefficients, cert_violation); code 0=Optimal, 1=Infeasible,
    2=IterationLimit."""
    cdef int n = H.shape[0]
    cdef int meq = 0 if A_eq is None else A_eq.shape[0]
    cdef int mi = 0 if A_in is None else A_in.shape[0]
    cdef int cap = meq + mi + 1
    cdef int info = 0, nrhs = 1
    cdef int i, j, k, q, p, pos, k1, p_in
    cdef double sp, sign, lam_p, denom, t, t1, t2, ratio, s_j, best

    Hf_np = np.array(H, dtype=np.float64, order="F")
    cdef double[::1, :] Hf = Hf_np
    for i in range(n):
        Hf[i, i] += HESSIAN_REG
    dpotrf("L", &n, &Hf[0, 0], &n, &info)
    if info != 0:
        raise np.linalg.LinAlgError("Hessian factorization failed")

    g_np = np.ascontiguousarray(g, dtype=np.float64)
    cdef double[::1] gv = g_np
    Aeq_np = np.zeros((meq, n)) if meq == 0 else \
        np.ascontiguousarray(A_eq, dtype=np.float64)
    beq_np = np.zeros(meq) if meq == 0 else \
        np.ascontiguousarray(b_eq, dtype=np.float64)
    Ain_np = np.zeros((mi, n)) if mi == 0 else \
        np.ascontiguousarray(A_in, dtype=np.float64)
    bin_np = np.zeros(mi) if mi == 0 else \
        np.ascontiguousarray(b_in, dtype=np.float64)
    cdef double[:, ::1] Aeq = Aeq_np
    cdef double[::1] beq = beq_np
    cdef double[:, ::1] Ain = Ain_np
    cdef double[::1] bin_ = bin_np

    # x = -H^{-1} g
    x_np = np.empty(n)
    cdef double[::1] x = x_np
    for i in range(n):
        x[i] = -gv[i]
    dpotrs("L", &n, &nrhs, &Hf[0, 0], &n, &x[0], &n, &info)

    # active-set storage (oriented normals, column-wise Fortran layout)
    act_idx_np = np.empty(cap, dtype=np.int64)
    act_sign_np = np.empty(cap)
    act_d_np = np.empty(cap)
    lam_np = np.empty(cap)
    N_np = np.empty((n, cap), order="F")
    cdef long long[::1] act_idx = act_idx_np
    cdef double[::1] act_sign = act_sign_np
    cdef double[::1] act_d = act_d_np
    cdef double[::1] lam = lam_np
    cdef double[::1, :] N = N_np
    in_active_np = np.zeros(mi, dtype=np.uint8)
    cdef unsigned char[::1] in_active = in_active_np
    cdef int n_eq_active = 0
    q = 0

    # scratch buffers
    c_np = np.empty(n)
    Hc_np = np.empty(n)
    HN_np = np.empty((n, cap), order="F")
    G_np = np.empty((cap, cap), order="F")
    r_np = np.empty(cap)
    zdir_np = np.empty(n)
    ipiv_np = np.empty(cap, dtype=np.int32)
    cdef double[::1] c = c_np
    cdef double[::1] Hc = Hc_np
    cdef double[::1, :] HN = HN_np
    cdef double[::1, :] G = G_np
    cdef double[::1] r = r_np
    cdef double[::1] zdir = zdir_np
    cdef int[::1] ipiv = ipiv_np

    cdef int iters = 0
    cdef double d_val = 0.0

    while True:
        # next constraint: equalities in order, then worst inequality
        p = -1
        if n_eq_active < meq:
            p = n_eq_active
        elif mi:
            p_in = -1
            best = FEAS_TOL
            for j in range(mi):
                if in_active[j]:
                    continue
                s_j = -bin_[j]
                for i in range(n):
                    s_j += Ain[j, i] * x[i]
                if s_j > best:
                    best = s_j
                    p_in = j
            if p_in < 0:
                return _finish(0, x_np, act_idx_np, act_sign_np, lam_np,
                               q, meq, mi, iters)
            p = meq + p_in
        else:
            return _finish(0, x_np, act_idx_np, act_sign_np, lam_np,
                           q, meq, mi, iters)

        if p < meq:
            sp = -beq[p]
            for i in range(n):
                sp += Aeq[p, i] * x[i]
            sign = 1.0
            d_val = beq[p]
            if sp > 0.0:
                sign = -1.0
                sp = -sp
                d_val = -d_val
            for i in range(n):
                c[i] = sign * Aeq[p, i]
        else:
            j = p - meq
            for i in range(n):
                c[i] = -Ain[j, i]
            d_val = -bin_[j]
            sp = -d_val
            for i in range(n):
                sp += c[i] * x[i]
            sign = 1.0

        lam_p = 0.0
        while True:
            iters += 1
            if iters > max_iter:
                return _finish(2, x_np, act_idx_np, act_sign_np, lam_np,
                               q, meq, mi, iters)

            # Hc = H^{-1} c
            for i in range(n):
                Hc[i] = c[i]
            dpotrs("L", &n, &nrhs, &Hf[0, 0], &n, &Hc[0], &n, &info)

            if q:
                # HN = H^{-1} N (refactorized solve each iteration)
                for k in range(q):
                    for i in range(n):
                        HN[i, k] = N[i, k]
                dpotrs("L", &n, &q, &Hf[0, 0], &n, &HN[0, 0], &n, &info)
                # G = N^T HN,  r = solve(G, N^T Hc)
                for k in range(q):
                    for j in range(q):
                        s_j = 0.0
                        for i in range(n):
                            s_j += N[i, j] * HN[i, k]
                        G[j, k] = s_j
                    s_j = 0.0
                    for i in range(n):
                        s_j += N[i, k] * Hc[i]
                    r[k] = s_j
                dgesv(&q, &nrhs, &G[0, 0], &cap, &ipiv[0], &r[0], &cap,
                      &info)
                if info != 0:
                    raise np.linalg.LinAlgError(
                        "reduced system is singular")
                for i in range(n):
                    s_j = 0.0
                    for k in range(q):
                        s_j += HN[i, k] * r[k]
                    zdir[i] = Hc[i] - s_j
            else:
                for i in range(n):
                    zdir[i] = Hc[i]

            # blocking step over active inequality multipliers
            t1 = INFINITY
            k1 = -1
            for pos in range(q):
                if act_idx[pos] >= meq and r[pos] > PIVOT_TOL:
                    ratio = lam[pos] / r[pos]
                    if ratio < t1:
                        t1 = ratio
                        k1 = pos
            denom = 0.0
            for i in range(n):
                denom += c[i] * zdir[i]
            t2 = -sp / denom if denom > PIVOT_TOL else INFINITY

            t = t1 if t1 < t2 else t2
            if t == INFINITY:
                cert_act = [int(act_idx[pos]) for pos in range(q)]
                cert_coef = np.array([-r[pos] for pos in range(q)])
                return _finish(1, x_np, act_idx_np, act_sign_np, lam_np,
                               q, meq, mi, iters,
                               cert_p=p, cert_act=cert_act,
                               cert_coef=cert_coef, cert_v=-sp)

            for pos in range(q):
                lam[pos] -= t * r[pos]
            lam_p += t
            if t2 != INFINITY:
                for i in range(n):
                    x[i] += t * zdir[i]
                sp += t * denom

            if t2 <= t1:
                act_idx[q] = p
                for i in range(n):
                    N[i, q] = c[i]
                act_d[q] = d_val
                act_sign[q] = sign
                lam[q] = lam_p
                q += 1
                if p < meq:
                    n_eq_active += 1
                else:
                    in_active[p - meq] = 1
                break
            # drop the blocking constraint and retry with the same p
            in_active[act_idx[k1] - meq] = 0
            for pos in range(k1, q - 1):
                act_idx[pos] = act_idx[pos + 1]
                act_sign[pos] = act_sign[pos + 1]
                act_d[pos] = act_d[pos + 1]
                lam[pos] = lam[pos + 1]
                for i in range(n):
                    N[i, pos] = N[i, pos + 1]
            q -= 1


def _finish(int code, x_np, act_idx_np, act_sign_np, lam_np, int q,
            int meq, int mi, int iters, cert_p=-1, cert_act=None,
            cert_coef=None, cert_v=0.0):
    eq_mult = np.zeros(meq)
    in_mult = np.zeros(mi)
    cdef long long[::1] act_idx = act_idx_np
    cdef double[::1] act_sign = act_sign_np
    cdef double[::1] lam = lam_np
    cdef int pos, j
    for pos in range(q):
        j = <int> act_idx[pos]
        if j < meq:
            eq_mult[j] = -act_sign[pos] * lam[pos]
        else:
            in_mult[j - meq] = lam[pos]
    if cert_act is None:
        cert_act = []
    if cert_coef is None:
        cert_coef = np.zeros(0)
    return (code, x_np.copy(), eq_mult, in_mult, iters,
            int(cert_p), cert_act, cert_coef, float(cert_v))
