"""Segment-wise trajectory optimization restricted to reachable sets.

A direct multiple-shooting NLP per segment: states, inputs, and contact
wrenches are decision variables tied by defect equalities; the SQP
subproblem is condensed onto the input/wrench space through the
linearized defect sensitivities, and reachable-set membership is kept by
signed-distance cuts against the per-step output hulls together with a
line-search filter that rejects iterates leaving the hull.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from .qp import QpProblem, solve_qp
from .reachability import OutputHull, ReachableSet, output_hull

DEFECT_TOL = 1e-8
INEQ_TOL = 1e-6
TOL_GOAL = 1e-3
# intermediate chain segments only have to pass through a subregion
# (half a grid cell wide), so their terminal band can be loose enough
# for a raw rollout sample to satisfy it
SEG_TOL = 6e-3
# warm-start nodes sit exactly on the hull boundary, so the line-search
# filter must tolerate small excursions; the linearized hull cuts in the
# QP pull the iterates back inside
HULL_FILTER_TOL = 1e-4
# terminal output band sized strictly inside the goal tolerance so the
# band corner (both axes saturated) still satisfies the norm test
BAND_BACKOFF = 0.95
# Levenberg-style proximal damping on the QP Hessian: cheap decision
# variables (contact wrenches) otherwise take huge, violently nonlinear
# steps that the merit line search must reject
PROX_INIT = 1e-1
PROX_MIN = 1e-4
PROX_MAX = 1e2
FD_EPS = 1e-6


class NlpFailed(Exception):
    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


class ChainFailed(Exception):
    def __init__(self, segment, message, cause=None):
        super().__init__(f"segment {segment}: {message}")
        self.segment = segment
        self.cause = cause


def _spd(name, M):
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return M.reshape(0, 0)
    if not np.allclose(M, M.T, atol=1e-10):
        raise ValueError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(M).min() <= 0:
        raise ValueError(f"{name} must be positive definite")
    return M


@dataclass
class NlpWeights:
    Q_u: np.ndarray
    Q_c: np.ndarray
    Q_x: np.ndarray
    Q_y: np.ndarray

    def __post_init__(self):
        self.Q_u = _spd("Q_u", self.Q_u)
        self.Q_c = _spd("Q_c", self.Q_c)
        self.Q_x = _spd("Q_x", self.Q_x)
        self.Q_y = _spd("Q_y", self.Q_y)


@dataclass
class Trajectory:
    states: np.ndarray        # (N+1, n_x)
    inputs: np.ndarray        # (N+1, n_u)
    wrenches: np.ndarray      # (N+1, n_c)
    dt: float
    cost: float
    residuals: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.states.shape[0] - 1

    def defects(self, model: mdl.RobotModel) -> np.ndarray:
        out = np.zeros((self.N, self.states.shape[1]))
        for k in range(self.N):
            F = self.wrenches[k] if self.wrenches.shape[1] else None
            out[k] = self.states[k + 1] - mdl.step(
                model, self.states[k], self.inputs[k], F, self.dt)
        return out

    def save_csv(self, path):
        t = np.arange(self.N + 1) * self.dt
        data = np.column_stack([t, self.states, self.inputs, self.wrenches])
        np.savetxt(path, data, fmt="%.17g",
                   header=f"dt={self.dt:.17g} cost={self.cost:.17g}")

    def summary(self) -> dict:
        return {"N": self.N, "dt": self.dt, "cost": float(self.cost),
                "residuals": {k: float(v) for k, v in self.residuals.items()}}


def nlp_cost(model, weights: NlpWeights, traj_states, traj_inputs,
             traj_wrenches, x0, y_d) -> float:
    """Quadratic stage cost summed over all N+1 nodes."""
    x0 = np.asarray(x0, dtype=float)
    y_d = np.asarray(y_d, dtype=float)
    total = 0.0
    for k in range(traj_states.shape[0]):
        e_x = traj_states[k] - x0
        e_y = mdl.output(model, traj_states[k]) - y_d
        total += float(traj_inputs[k] @ weights.Q_u @ traj_inputs[k])
        if traj_wrenches.shape[1]:
            total += float(traj_wrenches[k] @ weights.Q_c @ traj_wrenches[k])
        total += float(e_x @ weights.Q_x @ e_x)
        total += float(e_y @ weights.Q_y @ e_y)
    return total


def _dynamics_jacobians(model, cs, x, u, F, dt):
    """A = df/dx by central differences; B, C analytic (affine in u, F)."""
    n_x = model.n_x
    A = np.zeros((n_x, n_x))
    for j in range(n_x):
        dp, dm = x.copy(), x.copy()
        dp[j] += FD_EPS
        dm[j] -= FD_EPS
        A[:, j] = (mdl.step(model, dp, u, F, dt) -
                   mdl.step(model, dm, u, F, dt)) / (2 * FD_EPS)
    q, _ = model.split_state(x)
    Minv = np.linalg.inv(mdl.mass_matrix(model, q))
    B = np.zeros((n_x, model.n_u))
    B[model.n_q:] = dt * (Minv @ model.selection_matrix().T)
    if model.n_c:
        C = np.zeros((n_x, 3))
        C[model.n_q:] = dt * (Minv @ mdl.contact_jacobian(model, q).T)
    else:
        C = np.zeros((n_x, 0))
    return A, B, C


def _node_rows(cs, x):
    """Linearized state-constraint rows (A, b) meaning A Δx ≤ b."""
    if cs is None:
        return np.zeros((0, x.shape[0])), np.zeros(0)
    J_e, J_i, _, _ = cs.constraint_jacobians(x)
    rows, rhs = [], []
    if J_e.shape[0]:
        h_e = cs.state_equalities(x)
        band = np.concatenate([np.full(3, cs.params.contact_pos_tol),
                               np.full(3, cs.params.contact_vel_tol)])
        rows.extend([J_e, -J_e])
        rhs.extend([band - h_e, band + h_e])
    if cs.n_state_ineq:
        rows.append(J_i)
        rhs.append(-cs.state_inequalities(x))
    if not rows:
        return np.zeros((0, x.shape[0])), np.zeros(0)
    return np.vstack(rows), np.concatenate(rhs)


def _node_violation(cs, x, u, F) -> float:
    if cs is None:
        return 0.0
    return cs.step_violation(x, u=u, F_c=F if F is not None and
                             len(F) else None)


def signed_hull_distance(hull: OutputHull, y):
    """(signed distance, inward unit normal); positive inside."""
    y = np.asarray(y, dtype=float)
    d = float(hull.boundary_distance(y[None])[0])
    # subgradient: direction from y to the nearest boundary point
    v = hull.vertices
    n_seg = 0 if v.shape[0] < 2 else (1 if hull.degenerate else v.shape[0])
    best, best_p = float(np.linalg.norm(y - v[0])), v[0]
    for i in range(n_seg):
        a, b = (v[i], v[(i + 1) % v.shape[0]]) if not hull.degenerate \
            else (v[0], v[1])
        ab = b - a
        denom = float(ab @ ab)
        t = 0.0 if denom == 0 else float(np.clip((y - a) @ ab / denom, 0, 1))
        p = a + t * ab
        dd = float(np.linalg.norm(y - p))
        if dd < best:
            best, best_p = dd, p
    inside = hull.contains(y)
    sd = d if inside else -d
    grad = best_p - y               # moving toward the boundary point
    ng = np.linalg.norm(grad)
    if ng < 1e-15:
        return sd, np.zeros_like(y)
    grad = grad / ng
    # inward direction increases the signed distance
    normal = -grad if inside else grad
    return sd, normal


def _tree_levels(reach_set: ReachableSet) -> np.ndarray:
    """Per-state integration-step count from the seed.

    Falls back to the birth step when the set carries no depth column
    (older artifacts); depth never exceeds the birth step.
    """
    if reach_set.depth is not None:
        return reach_set.depth
    return reach_set.step_of


def initial_guess(cs, model, x0, y_d, reach_set: ReachableSet, N, dt,
                  fallback_u=None, index=None):
    """Dynamically consistent warm start from the propagation tree.

    Walks parents from the stored state whose output is closest to the
    target (or from `index` when given), then pads with wrench-QP steps
    under the last input.
    """
    n_u, n_c = model.n_u, model.n_c
    states = [np.asarray(x0, dtype=float)]
    inputs, wrenches = [], []
    if reach_set is not None and len(reach_set.states) > 1 and \
            reach_set.parents is not None:
        if index is None:
            cand = np.nonzero(_tree_levels(reach_set) <= N)[0]
            errs = np.linalg.norm(reach_set.outputs[cand] -
                                  np.asarray(y_d), axis=1)
            idx = int(cand[np.argmin(errs)])
        else:
            idx = int(index)
        chain_idx = []
        while idx != 0:
            chain_idx.append(idx)
            idx = int(reach_set.parents[idx])
        for i in reversed(chain_idx):
            states.append(reach_set.states[i])
            inputs.append(reach_set.inputs[i])
            wrenches.append(reach_set.wrenches[i])
    u_hold = inputs[-1] if inputs else (
        np.zeros(n_u) if fallback_u is None else np.asarray(fallback_u))
    while len(states) < N + 1:
        x = states[-1]
        nxt = None
        if cs is not None and n_c:
            from .reachability import _wrench_qp
            nxt = _wrench_qp(cs, model, x, u_hold, dt,
                             np.eye(model.n_x), np.eye(3))
        if nxt is not None:
            states.append(nxt[0])
            inputs.append(u_hold.copy())
            wrenches.append(nxt[1])
        else:
            F0 = np.zeros(n_c) if n_c else None
            states.append(mdl.step(model, x, u_hold, F0, dt))
            inputs.append(u_hold.copy())
            wrenches.append(np.zeros(n_c))
    inputs.append(inputs[-1].copy() if inputs else np.zeros(n_u))
    wrenches.append(wrenches[-1].copy() if wrenches else np.zeros(n_c))
    return (np.array(states)[: N + 1],
            np.array(inputs).reshape(N + 1, n_u),
            np.array(wrenches).reshape(N + 1, n_c))


def solve_nlp(cs, model, weights: NlpWeights, x0, y_d, reach_set, N, dt,
              tol_goal: float = TOL_GOAL, max_iter: int = 200,
              trust_u: float = 50.0, trust_f: float = 100.0,
              guess=None, trace=None) -> Trajectory:
    """Multiple-shooting SQP for one segment; raises NlpFailed."""
    x0 = np.asarray(x0, dtype=float)
    y_d = np.asarray(y_d, dtype=float)
    n_x, n_u, n_c = model.n_x, model.n_u, model.n_c
    n_y = y_d.shape[0]

    if N == 0:
        e_y = mdl.output(model, x0) - y_d
        if np.linalg.norm(e_y) > tol_goal:
            raise NlpFailed("zero-horizon segment cannot reach target")
        traj = Trajectory(x0[None].copy(), np.zeros((1, n_u)),
                          np.zeros((1, n_c)), dt,
                          nlp_cost(model, weights, x0[None],
                                   np.zeros((1, n_u)), np.zeros((1, n_c)),
                                   x0, y_d))
        traj.residuals = {"defect": 0.0, "inequality": 0.0,
                          "terminal": float(np.linalg.norm(e_y))}
        return traj

    # per-depth hulls are only needed once the SQP actually takes a
    # step; building them eagerly would dominate the common case where
    # the warm start already satisfies every residual tolerance
    hulls = None
    hulls_built = reach_set is None

    def get_hulls():
        nonlocal hulls, hulls_built
        if not hulls_built:
            lev = _tree_levels(reach_set)
            hulls = [output_hull(reach_set.outputs[lev <= k])
                     for k in range(N)]
            hulls_built = True
        return hulls

    if guess is not None:
        xs, us, fs = (np.array(guess[0], dtype=float),
                      np.array(guess[1], dtype=float),
                      np.array(guess[2], dtype=float))
    else:
        xs, us, fs = initial_guess(cs, model, x0, y_d, reach_set, N, dt)
    xs[0] = x0

    n_v = (n_u + n_c) * (N + 1)

    def u_cols(k):
        return slice(k * n_u, (k + 1) * n_u)

    def f_cols(k):
        base = (N + 1) * n_u
        return slice(base + k * n_c, base + (k + 1) * n_c)

    def build_qp():
        # defect sensitivities: dxi_k = T_k v + t_k
        T = [np.zeros((n_x, n_v))]
        t = [np.zeros(n_x)]
        defs = []
        for k in range(1, N + 1):
            F = fs[k - 1] if n_c else None
            A, B, C = _dynamics_jacobians(model, cs, xs[k - 1], us[k - 1],
                                          F, dt)
            d = xs[k] - mdl.step(model, xs[k - 1], us[k - 1], F, dt)
            defs.append(d)
            Tk = A @ T[k - 1]
            Tk[:, u_cols(k - 1)] += B
            if n_c:
                Tk[:, f_cols(k - 1)] += C
            T.append(Tk)
            t.append(A @ t[k - 1] - d)

        H = np.zeros((n_v, n_v))
        g = np.zeros(n_v)
        for k in range(N + 1):
            H[u_cols(k), u_cols(k)] += 2.0 * weights.Q_u
            g[u_cols(k)] += 2.0 * (weights.Q_u @ us[k])
            if n_c:
                H[f_cols(k), f_cols(k)] += 2.0 * weights.Q_c
                g[f_cols(k)] += 2.0 * (weights.Q_c @ fs[k])
            if k == 0:
                continue
            J_y = mdl.output_jacobian(model, xs[k])
            e_y = mdl.output(model, xs[k]) - y_d
            Hx = 2.0 * (weights.Q_x + J_y.T @ weights.Q_y @ J_y)
            gx = 2.0 * (weights.Q_x @ (xs[k] - x0) +
                        J_y.T @ (weights.Q_y @ e_y))
            H += T[k].T @ Hx @ T[k]
            g += T[k].T @ (Hx @ t[k] + gx)

        A_rows, b_rows = [], []
        hl = get_hulls()
        for k in range(1, N + 1):
            R, rhs = _node_rows(cs, xs[k])
            if R.shape[0]:
                A_rows.append(R @ T[k])
                b_rows.append(rhs - R @ t[k])
            # the terminal node is pinned to the target by the output
            # band below; its hull membership is certified upstream by
            # the reach target test, so no cut is added there
            if hl is not None and k < N and not hl[k].degenerate:
                y_k = mdl.output(model, xs[k])
                sd, normal = signed_hull_distance(hl[k], y_k)
                J_y = mdl.output_jacobian(model, xs[k])
                row = -(normal @ J_y) @ T[k]
                A_rows.append(row[None])
                b_rows.append(np.array([sd - normal @ J_y @ t[k]]))
        if cs is not None:
            for k in range(N + 1):
                Au = np.zeros((cs.A_u.shape[0], n_v))
                Au[:, u_cols(k)] = cs.A_u
                A_rows.append(Au)
                b_rows.append(cs.b_u - cs.A_u @ us[k])
                if n_c:
                    q_k, _ = model.split_state(xs[k])
                    W = cs.cone_matrix(q_k)
                    Aw = np.zeros((5, n_v))
                    Aw[:, f_cols(k)] = W
                    A_rows.append(Aw)
                    b_rows.append(cs.cone_rhs - W @ fs[k])
        # terminal output band
        J_yN = mdl.output_jacobian(model, xs[N])
        e_yN = mdl.output(model, xs[N]) - y_d
        lim = BAND_BACKOFF * tol_goal / np.sqrt(n_y)
        G = J_yN @ T[N]
        off = e_yN + J_yN @ t[N]
        A_rows.extend([G, -G])
        b_rows.extend([lim - off, lim + off])
        # trust region
        I = np.eye(n_v)
        tr = np.concatenate([np.full((N + 1) * n_u, trust_u),
                             np.full((N + 1) * n_c, trust_f)])
        A_rows.extend([I, -I])
        b_rows.extend([tr, tr])
        return (np.array(defs), T, t, H, g,
                np.vstack(A_rows), np.concatenate(b_rows))

    def merit(xs_, us_, fs_, mu):
        c = nlp_cost(model, weights, xs_, us_, fs_, x0, y_d)
        tr = Trajectory(xs_, us_, fs_, dt, c)
        d = np.abs(tr.defects(model)).sum()
        v = sum(max(0.0, _node_violation(cs, xs_[k], us_[k],
                                         fs_[k] if n_c else None))
                for k in range(N + 1))
        e_t = max(0.0, np.linalg.norm(mdl.output(model, xs_[N]) - y_d)
                  - tol_goal)
        return c + mu * (d + v + e_t), c

    def hull_ok(xs_):
        hl = get_hulls()
        if hl is None:
            return True
        for k in range(1, N):
            y_k = mdl.output(model, xs_[k])
            if not hl[k].contains(y_k, tol=HULL_FILTER_TOL):
                sd, _ = signed_hull_distance(hl[k], y_k)
                if sd < -HULL_FILTER_TOL:
                    return False
        return True

    def residuals_of(xs_, us_, fs_):
        traj = Trajectory(xs_.copy(), us_.copy(), fs_.copy(), dt,
                          nlp_cost(model, weights, xs_, us_, fs_, x0, y_d))
        d_max = float(np.abs(traj.defects(model)).max()) if N else 0.0
        v_max = max(_node_violation(cs, xs_[k], us_[k],
                                    fs_[k] if n_c else None)
                    for k in range(N + 1))
        e_term = float(np.linalg.norm(mdl.output(model, xs_[N]) - y_d))
        traj.residuals = {"defect": d_max, "inequality": max(0.0, v_max),
                          "terminal": e_term}
        return traj

    mu = 1e3
    prox = PROX_INIT
    best = None
    for it in range(max_iter):
        # feasibility-first: stop at the first iterate meeting every
        # residual tolerance (often the warm start itself).  Polishing
        # the cost further drags the terminal state away from the
        # certified rollout, which can strand the next chained segment.
        traj = residuals_of(xs, us, fs)
        best = traj
        r = traj.residuals
        if (r["defect"] <= DEFECT_TOL and r["inequality"] <= INEQ_TOL and
                r["terminal"] <= tol_goal):
            return traj
        defs, T, t, H, g, A_in, b_in = build_qp()
        H = 0.5 * (H + H.T) + 2.0 * prox * np.eye(n_v)
        sol = solve_qp(QpProblem(H, g, A_in=A_in, b_in=b_in), max_iter=2000)
        if not sol.optimal:
            raise NlpFailed(f"QP subproblem {sol.status} at iteration {it}",
                            best)
        v = sol.z
        if sol.in_multipliers.size:
            mu = max(mu, 10.0 * float(np.abs(sol.in_multipliers).max()))
        phi0, _ = merit(xs, us, fs, mu)
        step_inf = float(np.abs(v).max())

        accepted = False
        alpha = 1.0
        for _ in range(12):
            us_t = us + alpha * v[: (N + 1) * n_u].reshape(N + 1, n_u)
            fs_t = fs + alpha * v[(N + 1) * n_u:].reshape(N + 1, n_c) \
                if n_c else fs.copy()
            xs_t = xs.copy()
            for k in range(1, N + 1):
                xs_t[k] = xs[k] + alpha * (T[k] @ v + t[k])
            phi_t, _ = merit(xs_t, us_t, fs_t, mu)
            if hull_ok(xs_t) and phi_t <= phi0 - 1e-8 * alpha * step_inf:
                xs, us, fs = xs_t, us_t, fs_t
                accepted = True
                break
            alpha *= 0.5
        if accepted and alpha >= 0.5:
            prox = max(prox * 0.5, PROX_MIN)
        elif not accepted or alpha <= 0.0625:
            prox = min(prox * 4.0, PROX_MAX)
        if trace is not None:
            trace(dict(it=it, accepted=accepted, alpha=alpha, prox=prox,
                       step_inf=step_inf, mu=mu,
                       **residuals_of(xs, us, fs).residuals))
        if not accepted:
            raise NlpFailed(f"line search failed at iteration {it}", best)
    traj = residuals_of(xs, us, fs)
    r = traj.residuals
    if (r["defect"] <= DEFECT_TOL and r["inequality"] <= INEQ_TOL and
            r["terminal"] <= tol_goal):
        return traj
    raise NlpFailed(f"iteration cap {max_iter} reached", traj)


@dataclass
class ChainResult:
    trajectory: Trajectory
    segments: list             # per-segment summaries
    boundaries: list           # node index where each segment starts
    reach_sets: list = field(default_factory=list)
    targets: list = field(default_factory=list)


def splice(trajs: list, model) -> Trajectory:
    """Concatenate segment trajectories sharing boundary states."""
    states = [trajs[0].states]
    inputs = [trajs[0].inputs[:-1]]
    wrenches = [trajs[0].wrenches[:-1]]
    for tr in trajs[1:]:
        if not np.array_equal(states[-1][-1], tr.states[0]):
            raise ValueError("segment boundaries do not match exactly")
        states.append(tr.states[1:])
        inputs.append(tr.inputs[:-1])
        wrenches.append(tr.wrenches[:-1])
    inputs.append(trajs[-1].inputs[-1:])
    wrenches.append(trajs[-1].wrenches[-1:])
    out = Trajectory(np.vstack(states), np.vstack(inputs),
                     np.vstack(wrenches), trajs[0].dt,
                     sum(tr.cost for tr in trajs))
    out.residuals = {
        "defect": float(np.abs(out.defects(model)).max()),
        "inequality": max(tr.residuals.get("inequality", 0.0)
                          for tr in trajs),
        "terminal": trajs[-1].residuals.get("terminal", 0.0),
    }
    return out


def chain(cs, model, weights: NlpWeights, x0, plan, reach_params,
          tol_goal: float = TOL_GOAL, y_goal=None,
          tol_seg: float = SEG_TOL) -> ChainResult:
    """Recursively solve one NLP per planned subregion and splice.

    `plan` provides subregion centers (the last target is replaced by
    the exact goal output when y_goal is given).  Intermediate
    segments use the looser `tol_seg`: they only need to pass through
    their subregion, and a handoff state taken verbatim from the
    certified rollout keeps the next segment's propagation alive,
    whereas squeezing the endpoint onto a tight band deforms it off
    the sampled funnel.  Only the final segment, which hands off to
    nobody, is held to `tol_goal`.  `reach_params` is a
    dict with keys input_spec, N_u, N_t, dt, mode, and optional
    delta_b, slack_steps, max_iter, attractor (dict of attractor_mean
    gains; input draws are then centered on a target-seeking policy)
    and overshoot (aim distance past each target so the sampled hull
    surrounds it).
    """
    from .reachability import (FrontierEmpty, ImmediateInfeasible,
                               attractor_mean, reach)

    centers = [np.asarray(c, dtype=float) for c in plan.subregions]
    targets = centers[1:]
    if targets and y_goal is not None:
        targets[-1] = np.asarray(y_goal, dtype=float)
    slack = int(reach_params.get("slack_steps", 2))
    x_cur = np.asarray(x0, dtype=float)
    trajs, summaries, boundaries = [], [], [0]
    reach_sets = []
    attractor = reach_params.get("attractor")
    overshoot = float(reach_params.get("overshoot", 0.0))
    for j, y_d in enumerate(targets, start=1):
        tol_j = tol_goal if j == len(targets) else max(tol_goal, tol_seg)
        mean_fn = None
        if attractor is not None:
            aim = y_d
            y_from = mdl.output(model, x_cur)
            gap = float(np.linalg.norm(y_d - y_from))
            if overshoot > 0.0 and gap > 1e-12:
                aim = y_d + overshoot * (y_d - y_from) / gap
            mean_fn = attractor_mean(cs, model, aim, **attractor)
        try:
            rs = reach(cs, model, x_cur, reach_params["input_spec"],
                       reach_params["N_u"], reach_params["N_t"],
                       reach_params["dt"], mode=reach_params.get(
                           "mode", "boundary"),
                       target=("point", y_d),
                       delta_b=reach_params.get("delta_b"),
                       n_b_max=reach_params.get("n_b_max", 256),
                       stop_on_reach=True, mean_fn=mean_fn)
        except (FrontierEmpty, ImmediateInfeasible) as exc:
            raise ChainFailed(j, f"reachability failed: {exc}", exc)
        reach_sets.append(rs)
        lev = _tree_levels(rs)
        errs = np.linalg.norm(rs.outputs - y_d, axis=1)
        # a propagated sample inside the terminal band is an exact
        # witness that the target is attainable; the concave hull can
        # miss it through an indentation even when witnesses exist
        if not rs.reached and float(errs.min()) > tol_j:
            raise ChainFailed(j, "target not contained in reachable hull")
        # horizon = exact tree depth of the stored state nearest the
        # target, so the warm-start path needs no hold-input padding and
        # every node of it sits inside its per-depth hull
        # among samples already inside the goal band, prefer the calmest
        # one: the segment hands its terminal state to the next segment,
        # and a fast endpoint can be impossible to steer onward
        close = np.nonzero(errs <= tol_j)[0]
        if close.size:
            speeds = np.linalg.norm(rs.states[close][:, model.n_q:],
                                    axis=1)
            best = int(close[np.argmin(speeds)])
        else:
            best = int(np.argmin(errs))
        N = int(lev[best])
        guess = initial_guess(cs, model, x_cur, y_d, rs, N,
                              reach_params["dt"], index=best)
        try:
            tr = solve_nlp(cs, model, weights, x_cur, y_d, rs, N,
                           reach_params["dt"], tol_goal=tol_j,
                           max_iter=reach_params.get("max_iter", 200),
                           guess=guess)
        except NlpFailed as exc:
            raise ChainFailed(j, f"NLP failed: {exc}", exc)
        trajs.append(tr)
        summaries.append({"segment": j, "N": N,
                          "reached_step": rs.reached_step,
                          **tr.summary()})
        boundaries.append(boundaries[-1] + N)
        x_cur = tr.states[-1].copy()
    if not trajs:
        raise ChainFailed(0, "plan has no segments")
    spliced = splice(trajs, model)
    # splicing keeps the successor segment's input at each shared
    # boundary node, so the spliced cost is recomputed on the spliced
    # arrays rather than summed from the per-segment solutions
    total = 0.0
    for j, y_d in enumerate(targets):
        sl = slice(boundaries[j], boundaries[j + 1] + 1)
        total += nlp_cost(model, weights, spliced.states[sl],
                          spliced.inputs[sl], spliced.wrenches[sl],
                          spliced.states[boundaries[j]], y_d)
    spliced.cost = float(total)
    return ChainResult(spliced, summaries, boundaries,
                       reach_sets, [t.copy() for t in targets])
