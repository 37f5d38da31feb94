"""Discrete-time reachable-set propagation with boundary-state pruning.

Each propagation step draws random torques per frontier state, solves a
small QP for an admissible contact wrench, and keeps the stepped states.
FullState mode re-propagates the entire cumulative set; BoundaryState
mode propagates only states whose outputs lie near a k-nearest-neighbor
concave hull of the cumulative output cloud, trading completeness for a
polynomial instead of geometric QP count.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import model as mdl
from .constraints import ConstraintSet
from .qp import QpProblem, solve_qp

VEL_BAND = 1e-9          # contact-velocity band enforced by the step QP
STATE_TOL = 1e-6         # nonlinear re-verification bound for stored states
HULL_CONTAIN_TOL = 1e-9


class ImmediateInfeasible(Exception):
    """The seed state violates the constraints before propagation."""


class FrontierEmpty(Exception):
    """Every (state, input) pair of a step was dropped."""


@dataclass(frozen=True)
class InputSpec:
    mu_u: np.ndarray
    sigma_u: np.ndarray
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "mu_u", np.asarray(self.mu_u, dtype=float))
        object.__setattr__(self, "sigma_u",
                           np.asarray(self.sigma_u, dtype=float))
        np.linalg.cholesky(self.sigma_u)


def _substream(seed: int, step: int, x: np.ndarray):
    """Per-(step, state) random stream keyed by the state's bytes, so a
    state shared between two runs receives identical input draws."""
    digest = hashlib.blake2b(x.tobytes(), digest_size=8).digest()
    return np.random.default_rng([seed, step, int.from_bytes(digest, "big")])


def draw_inputs(spec: InputSpec, cs: ConstraintSet, n: int, rng,
                mu=None) -> np.ndarray:
    L = np.linalg.cholesky(spec.sigma_u)
    mu = spec.mu_u if mu is None else np.asarray(mu, dtype=float)
    u = mu + rng.standard_normal((n, spec.mu_u.shape[0])) @ L.T
    return np.clip(u, cs.params.u_lower, cs.params.u_upper)


def attractor_mean(cs: ConstraintSet, model, y_d, kp=40.0, kd=12.0,
                   a_max=6.0, k_null=0.0):
    """State-feedback input mean pulling the output toward y_d.

    A saturated PD law sets a desired output acceleration; the realizing
    torque/contact-wrench pair (min-norm joint acceleration, exact
    torque solve) is affine in the acceleration scale, so it is backed
    off to the largest fraction admissible under the input bounds and
    the wrench cone.  Centering the input sampling distribution on this
    policy steers the sampled reachable set toward the segment target;
    it is a deterministic function of the state, so run determinism is
    unaffected.

    The output+contact map leaves a one-dimensional null space of joint
    accelerations; with k_null > 0, velocity in that null direction is
    damped (folded into the baseline torque, so the affine backoff is
    untouched).  Without it, internal posture drifts over chained
    segments until the wrench cone chokes the attractor.
    """
    y_d = np.asarray(y_d, dtype=float)
    S = model.selection_matrix()
    n_u = model.n_u
    r = np.concatenate([cs.params.u_upper, -cs.params.u_lower,
                        cs.cone_rhs])

    def mu(x):
        q, qd = model.split_state(x)
        y = mdl.output(model, x)
        Jq = mdl.output_jacobian(model, x)[:, : model.n_q]
        a_y = kp * (y_d - y) - kd * (Jq @ qd)
        na = float(np.linalg.norm(a_y))
        if na > a_max:
            a_y *= a_max / na
        M = mdl.mass_matrix(model, q)
        h = mdl.bias_forces(model, q, qd)
        Jc = mdl.contact_jacobian(model, q)
        A_map = np.vstack([Jq, Jc])
        Apinv = np.linalg.pinv(A_map)
        bias = np.concatenate(
            [np.zeros(2), -mdl.contact_jacobian_rate(model, q, qd) @ qd])
        qdd_0 = Apinv @ bias
        if k_null > 0.0:
            N_proj = np.eye(model.n_q) - Apinv @ A_map
            qdd_0 += N_proj @ (-k_null * qd)
        B = np.hstack([S.T, Jc.T])
        z_c = np.linalg.solve(B, M @ qdd_0 + h)
        dz = np.linalg.solve(B, M @ (Apinv[:, :2] @ a_y))
        lc = np.concatenate([z_c[:n_u], -z_c[:n_u],
                             cs.cone_matrix(q) @ z_c[n_u:]])
        ld = np.concatenate([dz[:n_u], -dz[:n_u],
                             cs.cone_matrix(q) @ dz[n_u:]])
        pos, neg = ld > 1e-12, ld < -1e-12
        hi, lo = 1.0, 0.0
        if pos.any():
            hi = min(hi, float(((r - lc)[pos] / ld[pos]).min()))
        if neg.any():
            lo = max(lo, float(((lc - r)[neg] / -ld[neg]).max()))
        alpha = hi if lo <= hi else 0.0
        if alpha < 0.0:
            alpha = 0.0
        elif alpha < 1.0:
            # strictly inside the cone: the certification QP perturbs
            # the wrench through the contact-velocity recentering
            alpha *= 0.9
        return np.clip((z_c + alpha * dz)[:n_u],
                       cs.params.u_lower, cs.params.u_upper)

    return mu


# ----------------------------------------------------------------------
# concave hull in output space
# ----------------------------------------------------------------------

@dataclass
class OutputHull:
    vertices: np.ndarray       # (V, 2) closed implicitly (last != first)
    area: float
    degenerate: bool = False
    k_used: int = 0

    @property
    def diameter(self) -> float:
        if self.vertices.shape[0] < 2:
            return 0.0
        d = self.vertices[:, None, :] - self.vertices[None, :, :]
        return float(np.sqrt((d ** 2).sum(-1)).max())

    def contains(self, y, tol: float = HULL_CONTAIN_TOL) -> bool:
        return bool(self.contains_many(np.asarray(y, dtype=float)[None],
                                       tol)[0])

    def contains_many(self, pts: np.ndarray,
                      tol: float = HULL_CONTAIN_TOL) -> np.ndarray:
        """Vectorized membership test (on-boundary counts as inside)."""
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        near = self.boundary_distance(pts) <= tol
        if self.degenerate:
            return near
        # ray casting, one vectorized pass per polygon edge
        v = self.vertices
        nxt = np.roll(v, -1, axis=0)
        x, y = pts[:, 0], pts[:, 1]
        inside = np.zeros(pts.shape[0], dtype=bool)
        for i in range(v.shape[0]):
            (ax, ay), (bx, by) = v[i], nxt[i]
            mask = (ay > y) != (by > y)
            if mask.any():
                t = (y[mask] - ay) / (by - ay)
                inside[mask] ^= x[mask] < ax + t * (bx - ax)
        return inside | near

    def boundary_distance(self, pts: np.ndarray) -> np.ndarray:
        """Distance from each point to the hull polyline."""
        v = self.vertices
        if v.shape[0] == 1:
            return np.linalg.norm(pts - v[0], axis=1)
        segs = [(v[i], v[(i + 1) % v.shape[0]]) for i in range(v.shape[0])] \
            if not self.degenerate else [(v[0], v[1])]
        best = np.full(pts.shape[0], np.inf)
        for a, b in segs:
            ab = b - a
            denom = float(ab @ ab)
            if denom == 0.0:
                d = np.linalg.norm(pts - a, axis=1)
            else:
                t = np.clip((pts - a) @ ab / denom, 0.0, 1.0)
                proj = a + t[:, None] * ab
                d = np.linalg.norm(pts - proj, axis=1)
            best = np.minimum(best, d)
        return best


def _segments_intersect(p1, p2, p3, p4) -> bool:
    """Proper intersection of open segments (shared endpoints allowed)."""
    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    d1, d2 = cross(p3, p4, p1), cross(p3, p4, p2)
    d3, d4 = cross(p1, p2, p3), cross(p1, p2, p4)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


def output_hull(points, k_start: int = 3) -> OutputHull:
    """k-nearest-neighbor concave hull of a 2-D point cloud.

    k starts at k_start and is incremented until the polygon closes, is
    simple, and contains every input point; collinear input degrades to
    a segment hull.
    """
    pts = np.unique(np.asarray(points, dtype=float).reshape(-1, 2), axis=0)
    n = pts.shape[0]
    if n == 1:
        return OutputHull(pts.copy(), 0.0, degenerate=True)
    centered = pts - pts.mean(axis=0)
    _, sv, vt = np.linalg.svd(centered, full_matrices=False)
    if n == 2 or sv[1] <= 1e-12 * max(sv[0], 1.0):
        proj = centered @ vt[0]
        ends = pts[[int(np.argmin(proj)), int(np.argmax(proj))]]
        return OutputHull(ends, 0.0, degenerate=True)

    tree = cKDTree(pts)
    for k in range(max(3, int(k_start)), n):
        hull = _knn_hull_attempt(pts, tree, k)
        if hull is not None:
            return hull
    # full fan: convex hull fallback
    from scipy.spatial import ConvexHull
    ch = ConvexHull(pts)
    verts = pts[ch.vertices]
    return OutputHull(verts, _shoelace(verts), k_used=n)


def _shoelace(v: np.ndarray) -> float:
    x, y = v[:, 0], v[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _knn_hull_attempt(pts, tree, k):
    """One counterclockwise boundary walk with k-nearest candidates.

    From each vertex the candidate with the smallest left-turn angle
    (hugging the boundary) that does not cross the polyline is chosen;
    returns None when the walk stalls or misses an input point.
    """
    n = pts.shape[0]
    k = min(k, n - 1)
    start = int(np.lexsort((pts[:, 0], pts[:, 1]))[0])   # lowest point
    hull_idx = [start]
    used = {start}
    heading = np.array([1.0, 0.0])
    current = start
    for _ in range(4 * n):
        cur_pt = pts[current]
        _, nbrs = tree.query(cur_pt, k=min(k + 1, n))
        cands = []
        for j in np.atleast_1d(nbrs):
            j = int(j)
            if j == current or (j in used and j != start):
                continue
            if j == start and len(hull_idx) < 3:
                continue
            d = pts[j] - cur_pt
            nd = np.linalg.norm(d)
            if nd == 0.0:
                continue
            d = d / nd
            turn = np.arctan2(heading[0] * d[1] - heading[1] * d[0],
                              heading @ d)
            cands.append((turn, j, d))
        cands.sort(key=lambda c: (c[0], c[1]))
        chosen = None
        m = len(hull_idx)
        if m >= 3:
            # vectorized proper-intersection test of the candidate edge
            # against the existing polyline (minus the last edge)
            P = pts[np.asarray(hull_idx)]
            A, B = P[:-2], P[1:-1]
            BA = B - A
            cr1 = BA[:, 0] * (cur_pt[1] - A[:, 1]) \
                - BA[:, 1] * (cur_pt[0] - A[:, 0])
        for _, j, d in cands:
            if m < 3:
                chosen = (j, d)
                break
            pj = pts[j]
            cr2 = BA[:, 0] * (pj[1] - A[:, 1]) - BA[:, 1] * (pj[0] - A[:, 0])
            e = pj - cur_pt
            cr3 = e[0] * (A[:, 1] - cur_pt[1]) - e[1] * (A[:, 0] - cur_pt[0])
            cr4 = e[0] * (B[:, 1] - cur_pt[1]) - e[1] * (B[:, 0] - cur_pt[0])
            hits = ((cr1 > 0) != (cr2 > 0)) & ((cr3 > 0) != (cr4 > 0))
            if j == start:
                hits[0] = False
            if not hits.any():
                chosen = (j, d)
                break
        if chosen is None:
            return None
        j, d = chosen
        if j == start:
            verts = pts[hull_idx]
            hull = OutputHull(verts, _shoelace(verts), k_used=k)
            dist = hull.boundary_distance(pts)
            far = pts[dist > 1e-12]
            if far.size == 0 or hull.contains_many(far).all():
                return hull
            return None
        hull_idx.append(j)
        used.add(j)
        heading = d
        current = j
    return None


# ----------------------------------------------------------------------
# reachable set
# ----------------------------------------------------------------------

@dataclass
class ComplexityReport:
    n_u: int
    n_t: int
    mode: str
    steps: list = field(default_factory=list)  # per-step dicts

    def add(self, step, qp_solves, hull_builds, frontier, stored, wall):
        self.steps.append({"step": int(step), "qp_solves": int(qp_solves),
                           "hull_builds": int(hull_builds),
                           "frontier": int(frontier),
                           "stored_states": int(stored),
                           "wall_seconds": float(wall)})

    @property
    def total_qp_solves(self) -> int:
        return sum(s["qp_solves"] for s in self.steps)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "N_u": self.n_u, "N_t": self.n_t,
                "steps": self.steps,
                "total_qp_solves": self.total_qp_solves,
                "total_wall_seconds": sum(s["wall_seconds"]
                                          for s in self.steps)}


@dataclass
class ReachableSet:
    states: np.ndarray         # (n, n_x) cumulative
    outputs: np.ndarray        # (n, 2)
    step_of: np.ndarray        # (n,) birth step of each state
    boundary_flag: np.ndarray  # (n,) bool, last boundary-selection result
    dt: float
    x0: np.ndarray
    mode: str
    reached: bool = False
    reached_step: int = -1
    report: ComplexityReport | None = None
    parents: np.ndarray | None = None   # (n,) index of the generating state
    inputs: np.ndarray | None = None    # (n, n_u) torque that produced it
    wrenches: np.ndarray | None = None  # (n, 3) certified contact wrench
    depth: np.ndarray | None = None     # (n,) exact step count from x0
    # depth can lag step_of in boundary mode: the propagated frontier is
    # drawn from the cumulative cloud, so a state born at step k may sit
    # only depth[parent] + 1 integration steps from the seed.

    def per_step(self, k: int) -> np.ndarray:
        return self.states[self.step_of == k]

    def cumulative_until(self, k: int) -> np.ndarray:
        return self.states[self.step_of <= k]

    def save_csv(self, path):
        data = np.column_stack([self.step_of, self.states, self.outputs,
                                self.boundary_flag.astype(float)])
        np.savetxt(path, data, fmt="%.17g",
                   header=f"dt={self.dt:.17g} mode={self.mode} "
                          f"reached={int(self.reached)} "
                          f"reached_step={self.reached_step}")


class _StateContext:
    """Input-independent precomputation for the per-step wrench QP.

    All kinematic/dynamic quantities of the one-step map depend only on
    the frontier state, so they are evaluated once and reused for every
    torque draw.  The velocity pinning rows are evaluated at q_next
    (known exactly before solving), so they are linear in F_c without
    truncation error.
    """

    __slots__ = ("ok", "q_next", "pos_resid", "qd_base", "Su", "Bc",
                 "Jc_next", "A_v", "W", "H", "GxQx", "A_in", "cs", "dt",
                 "n_box", "v_target")

    def __init__(self, cs: ConstraintSet, model, x, dt, Q_x, Q_c):
        q, qdot = model.split_state(x)
        self.cs = cs
        self.dt = dt
        self.q_next = q + dt * qdot
        p_next, ang_next = mdl.contact_frame_pose(model, self.q_next)
        ang_err = np.arctan2(np.sin(ang_next - cs.ang_ref),
                             np.cos(ang_next - cs.ang_ref))
        err = np.array([p_next[0] - cs.p_ref[0], p_next[1] - cs.p_ref[1],
                        ang_err])
        self.pos_resid = float(np.abs(err).max())
        self.ok = self.pos_resid <= cs.params.contact_pos_tol
        if not self.ok:
            return
        # Recenter the contact-velocity band to bleed off the drift the
        # explicit Euler step accumulates, keeping the frame pinned over
        # long horizons; the target stays inside half the velocity
        # tolerance so the stepped state always passes the band check.
        lim = 0.5 * cs.params.contact_vel_tol
        self.v_target = np.clip(-0.5 * err / dt, -lim, lim)
        Minv = np.linalg.inv(mdl.mass_matrix(model, q))
        bias = mdl.bias_forces(model, q, qdot)
        Jc = mdl.contact_jacobian(model, q)
        self.qd_base = qdot - dt * (Minv @ bias)
        self.Su = dt * (Minv @ model.selection_matrix().T)
        self.Bc = dt * (Minv @ Jc.T)          # d qdot_next / d F
        self.Jc_next = mdl.contact_jacobian(model, self.q_next)
        self.A_v = self.Jc_next @ self.Bc
        self.W = cs.cone_matrix(q)
        Gx = np.zeros((model.n_x, 3))
        Gx[model.n_q:] = self.Bc
        self.H = 2.0 * (Q_c + Gx.T @ Q_x @ Gx)
        self.GxQx = 2.0 * (Gx.T @ Q_x)
        A_rows = [self.W, self.A_v, -self.A_v]
        self.n_box = cs.n_state_ineq
        if self.n_box:
            A_rows.append(cs.J_box @ Gx)
        self.A_in = np.vstack(A_rows)

    def candidates(self, x, U):
        """Batch-solve the QP for each torque row of U.

        Returns (accepted list of (x_next, u, F), n_qp).  Accepted
        states already satisfy the step tolerance bands, checked from
        the same cached kinematics the QP rows were built from.
        """
        cs, dt = self.cs, self.dt
        U = np.atleast_2d(np.asarray(U, dtype=float))
        n_draw = U.shape[0]
        qdot = x[len(self.q_next):]
        band = np.full(3, VEL_BAND)
        # input-batched linear algebra shared by every draw
        QD0 = self.qd_base + U @ self.Su.T                   # (n, n_q)
        BaseV = QD0 @ self.Jc_next.T                         # (n, 3)
        D0 = np.hstack([np.broadcast_to(dt * qdot,
                                        (n_draw, qdot.shape[0])),
                        QD0 - qdot])
        G = D0 @ self.GxQx.T                                 # (n, 3)
        if self.n_box:
            X0 = np.hstack([np.broadcast_to(self.q_next,
                                            (n_draw, self.q_next.shape[0])),
                            QD0])
            Bbox = -(X0 @ cs.J_box.T + cs.box_offset)        # (n, n_box)
        # one validated problem, mutated per draw (H and A_in are fixed)
        prob = QpProblem(self.H, G[0], A_in=self.A_in,
                         b_in=np.zeros(self.A_in.shape[0]))
        out = []
        tgt = self.v_target
        for i in range(n_draw):
            b_rows = [cs.cone_rhs, band + tgt - BaseV[i],
                      band - tgt + BaseV[i]]
            if self.n_box:
                b_rows.append(Bbox[i])
            prob.g = G[i]
            prob.b_in = np.concatenate(b_rows)
            sol = solve_qp(prob)
            if not sol.optimal:
                out.append(None)
                continue
            F = sol.z
            qd_next = QD0[i] + self.Bc @ F
            x_next = np.concatenate([self.q_next, qd_next])
            viol = self.pos_resid - cs.params.contact_pos_tol
            viol = max(viol, float(np.abs(self.Jc_next @ qd_next).max())
                       - cs.params.contact_vel_tol)
            if self.n_box:
                viol = max(viol, float(
                    (cs.J_box @ x_next + cs.box_offset).max()))
            viol = max(viol, float((self.W @ F - cs.cone_rhs).max()))
            if viol > STATE_TOL:
                out.append(None)
                continue
            out.append((x_next, F))
        return out


def _wrench_qp(cs: ConstraintSet, model, x, u, dt, Q_x, Q_c):
    """One-step wrench feasibility QP; returns (x_next, F) or None."""
    ctx = _StateContext(cs, model, np.asarray(x, dtype=float), dt,
                        np.asarray(Q_x, dtype=float),
                        np.asarray(Q_c, dtype=float))
    if not ctx.ok:
        return None
    res = ctx.candidates(np.asarray(x, dtype=float),
                         np.asarray(u, dtype=float)[None])[0]
    return res


def propagate_step(cs: ConstraintSet, model, frontier_states, input_spec,
                   N_u: int, dt: float, step_index: int,
                   Q_x=None, Q_c=None, mean_fn=None):
    """Propagate each frontier state under N_u random torque draws.

    Returns (new_states, certificates, parent_positions, n_qp); pairs
    whose QP is not optimal or whose stepped state fails the step
    tolerance bands are dropped.  parent_positions index into
    frontier_states.
    """
    Q_x = np.eye(model.n_x) if Q_x is None else np.asarray(Q_x, dtype=float)
    Q_c = np.eye(3) if Q_c is None else np.asarray(Q_c, dtype=float)
    new_states, certs, parents = [], [], []
    n_qp = 0
    for pos, x in enumerate(frontier_states):
        x = np.asarray(x, dtype=float)
        rng = _substream(input_spec.seed, step_index, x)
        U = draw_inputs(input_spec, cs, N_u, rng,
                        mu=None if mean_fn is None else mean_fn(x))
        n_qp += len(U)
        ctx = _StateContext(cs, model, x, dt, Q_x, Q_c)
        if not ctx.ok:
            continue
        for u, res in zip(U, ctx.candidates(x, U)):
            if res is None:
                continue
            x_next, F = res
            new_states.append(x_next)
            certs.append((u, F))
            parents.append(pos)
    return new_states, certs, parents, n_qp


def boundary_states(states, outputs, hull: OutputHull, delta_b=None,
                    n_b_max=None):
    """Indices of states whose outputs lie near the hull polyline.

    When more than n_b_max states qualify, a deterministic subsample
    evenly spaced in polar angle around the output centroid is kept, so
    the propagated frontier stays spread along the boundary while the
    per-step QP count stays bounded.
    """
    outputs = np.asarray(outputs, dtype=float)
    if delta_b is None:
        delta_b = 1e-3 * max(hull.diameter, 1e-12)
    d = hull.boundary_distance(outputs)
    idx = np.nonzero(d <= delta_b)[0]
    if n_b_max is not None and idx.size > n_b_max:
        pts = outputs[idx]
        ctr = outputs.mean(axis=0)
        ang = np.arctan2(pts[:, 1] - ctr[1], pts[:, 0] - ctr[0])
        order = idx[np.lexsort((idx, ang))]
        take = np.unique(np.linspace(0, order.size - 1,
                                     int(n_b_max)).round().astype(int))
        idx = np.sort(order[take])
    return idx


def _target_hit(target, outputs, hull_fn) -> bool:
    kind = target[0]
    if kind == "box":
        _, center, eps = target
        return bool((np.abs(outputs - np.asarray(center)) < eps)
                    .all(axis=1).any())
    if kind == "point":
        return hull_fn().contains(target[1])
    raise ValueError(f"unknown target kind {kind!r}")


def reach(cs: ConstraintSet, model, x0, input_spec: InputSpec, N_u: int,
          N_t: int, dt: float, mode: str = "boundary", target=None,
          Q_x=None, Q_c=None, delta_b=None, n_b_max: int | None = 256,
          stop_on_reach: bool = False, mean_fn=None) -> ReachableSet:
    """Propagate the reachable set for N_t steps of size dt.

    mode "full" re-propagates the whole cumulative set each step;
    "boundary" only the concave-hull boundary states.  `target` is
    ("box", center, eps) for sample membership or ("point", y) for hull
    containment; with stop_on_reach the propagation ends at the first
    step whose target test passes.
    """
    if mode not in ("full", "boundary"):
        raise ValueError(f"unknown mode {mode!r}")
    x0 = np.asarray(x0, dtype=float)
    if cs.step_violation(x0) > STATE_TOL:
        raise ImmediateInfeasible("seed state violates constraints")

    states = [x0.copy()]
    outputs = [mdl.output(model, x0)]
    step_of = [0]
    depth = [0]
    bflag = [True]
    parent = [-1]
    u_of = [np.zeros(model.n_u)]
    f_of = [np.zeros(3)]
    report = ComplexityReport(N_u, N_t, mode)
    reached, reached_step = False, -1

    hull_cache: dict = {}
    k_warm = [3]

    def hull_now():
        # one hull per cumulative cloud size; reused by the boundary
        # selection of step k+1 and the target test of step k
        key = len(outputs)
        h = hull_cache.get(key)
        if h is None:
            h = output_hull(np.array(outputs), k_start=k_warm[0] - 1)
            k_warm[0] = max(3, h.k_used)
            hull_cache.clear()
            hull_cache[key] = h
        return h

    if target is not None and _target_hit(target, np.array(outputs),
                                          hull_now):
        reached, reached_step = True, 0

    for k in range(1, N_t + 1):
        t_start = time.perf_counter()
        hull_builds = 0
        if mode == "full" or len(states) == 1:
            frontier_idx = np.arange(len(states))
        else:
            built_before = len(outputs) in hull_cache
            hull = hull_now()
            hull_builds += 0 if built_before else 1
            frontier_idx = boundary_states(states, np.array(outputs), hull,
                                           delta_b, n_b_max=n_b_max)
            for i in range(len(bflag)):
                bflag[i] = False
            for i in frontier_idx:
                bflag[int(i)] = True
        frontier = [states[int(i)] for i in frontier_idx]
        new_states, certs, positions, n_qp = propagate_step(
            cs, model, frontier, input_spec, N_u, dt, k, Q_x=Q_x, Q_c=Q_c,
            mean_fn=mean_fn)
        if not new_states:
            raise FrontierEmpty(f"no feasible successor at step {k}")
        for x, (u, F), pos in zip(new_states, certs, positions):
            states.append(x)
            outputs.append(mdl.output(model, x))
            step_of.append(k)
            bflag.append(False)
            depth.append(depth[int(frontier_idx[pos])] + 1)
            parent.append(int(frontier_idx[pos]))
            u_of.append(u)
            f_of.append(F)
        if target is not None and not reached:
            if target[0] == "point" and len(outputs) not in hull_cache:
                hull_builds += 1
            if _target_hit(target, np.array(outputs), hull_now):
                reached, reached_step = True, k
        report.add(k, n_qp, hull_builds, len(frontier), len(states),
                   time.perf_counter() - t_start)
        if reached and stop_on_reach:
            break

    return ReachableSet(np.array(states), np.array(outputs),
                        np.array(step_of), np.array(bflag, dtype=bool),
                        dt, x0, mode, reached, reached_step, report,
                        parents=np.array(parent),
                        inputs=np.array(u_of), wrenches=np.array(f_of),
                        depth=np.array(depth))
