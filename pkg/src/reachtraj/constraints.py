"""Constraint catalog: state equalities (contact pinning), box
inequalities, input bounds, optional mixed power limit, and the contact
wrench cone.

Row orders are fixed at construction and never reordered, so stacked
Jacobians are bit-stable across runs:

* equalities:   [contact px, pz, pitch, contact vx, vz, omega]
* state ineqs:  [q upper..., q lower..., qdot upper..., qdot lower...]
  (only joints with finite bounds contribute rows)
* input ineqs:  [u upper..., u lower...]
* wrench cone:  [fx-kmu*fz, -fx-kmu*fz, -fz, tau-dx*fz, -tau-dx*fz]
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as mdl


@dataclass
class ConstraintParams:
    q_lower: np.ndarray
    q_upper: np.ndarray
    qd_lower: np.ndarray
    qd_upper: np.ndarray
    u_lower: np.ndarray
    u_upper: np.ndarray
    k_mu: float = 0.4
    d_x: float = 0.05
    f_z_min: float = 1.0
    eps: float = 1e-7            # equality tolerance defining membership
    contact_pos_tol: float = 1e-6   # pinning bands used by step-wise QPs
    contact_vel_tol: float = 1e-3
    attractor_margin: float = 0.0   # in [0, 1): pull fraction toward v_int
    power_limit: float | None = None  # mixed |u . qdot| bound, off by default


class ConstraintSet:
    """Evaluation and linearization of all constraint families for one
    robot model with a single pinned surface contact."""

    def __init__(self, model: mdl.RobotModel, params: ConstraintParams,
                 contact_ref: tuple | None = None):
        if params.eps <= 0:
            raise ValueError("eps must be positive")
        self.model = model
        self.params = params
        n_q = model.n_q

        for name in ("q_lower", "q_upper", "qd_lower", "qd_upper"):
            v = np.asarray(getattr(params, name), dtype=float).ravel()
            if v.shape[0] != n_q:
                raise ValueError(f"{name} must have length {n_q}")
            setattr(params, name, v)
        for name in ("u_lower", "u_upper"):
            v = np.asarray(getattr(params, name), dtype=float).ravel()
            if v.shape[0] != model.n_u:
                raise ValueError(f"{name} must have length {model.n_u}")
            setattr(params, name, v)

        if model.n_c:
            if contact_ref is None:
                raise ValueError("contact_ref required for contact models")
            self.p_ref = np.asarray(contact_ref[0], dtype=float)
            self.ang_ref = float(contact_ref[1])
            k, d = params.k_mu, params.d_x
            self.W_local = np.array([
                [1.0, -k, 0.0],
                [-1.0, -k, 0.0],
                [0.0, -1.0, 0.0],
                [0.0, -d, 1.0],
                [0.0, -d, -1.0],
            ])
            self.cone_rhs = np.array([0.0, 0.0, -params.f_z_min, 0.0, 0.0])

        # Box-inequality selection matrix over x (constant jacobian).
        rows, offs = [], []
        def _box(idx_offset, lower, upper):
            for i, b in enumerate(upper):
                if np.isfinite(b):
                    r = np.zeros(model.n_x)
                    r[idx_offset + i] = 1.0
                    rows.append(r)
                    offs.append(-b)
            for i, b in enumerate(lower):
                if np.isfinite(b):
                    r = np.zeros(model.n_x)
                    r[idx_offset + i] = -1.0
                    rows.append(r)
                    offs.append(b)
        _box(0, params.q_lower, params.q_upper)
        _box(n_q, params.qd_lower, params.qd_upper)
        # h_i(x) = J_box x + box_offset <= 0
        self.J_box = np.array(rows) if rows else np.zeros((0, model.n_x))
        self.box_offset = np.array(offs)
        self.n_state_ineq = self.J_box.shape[0]

        # Interior attractor: midpoint of the box bounds (zero where a
        # side is unbounded).  Note that paired upper/lower rows share the
        # midpoint, so targeting h_i(v_int) exactly would pin bounded
        # coordinates; e_i therefore uses a fractional margin toward the
        # attractor values (zero margin = plain linearized feasibility).
        v_int = np.zeros(model.n_x)
        both = np.isfinite(params.q_lower) & np.isfinite(params.q_upper)
        v_int[:n_q][both] = 0.5 * (params.q_lower[both] + params.q_upper[both])
        both = np.isfinite(params.qd_lower) & np.isfinite(params.qd_upper)
        v_int[n_q:][both] = 0.5 * (params.qd_lower[both] + params.qd_upper[both])
        self.v_int = v_int
        h_at_int = self.J_box @ v_int + self.box_offset
        if self.n_state_ineq and h_at_int.max() >= 0:
            raise ValueError("interior attractor is not strictly feasible")
        self.v_int_values = params.attractor_margin * h_at_int

        # Input bounds on actuated joints only (underactuation is
        # eliminated structurally, not constrained).
        self.A_u = np.vstack([np.eye(model.n_u), -np.eye(model.n_u)])
        self.b_u = np.concatenate([params.u_upper, -params.u_lower])

    # ------------------------------------------------------------------
    @property
    def n_eq(self) -> int:
        return 6 if self.model.n_c else 0

    def state_equalities(self, x) -> np.ndarray:
        """Contact pose error and contact-point velocity (6 rows)."""
        if not self.model.n_c:
            return np.zeros(0)
        q, qdot = self.model.split_state(x)
        p, ang = mdl.contact_frame_pose(self.model, q)
        Jc = mdl.contact_jacobian(self.model, q)
        ang_err = np.arctan2(np.sin(ang - self.ang_ref),
                             np.cos(ang - self.ang_ref))
        return np.concatenate([p - self.p_ref, [ang_err], Jc @ qdot])

    def state_inequalities(self, x) -> np.ndarray:
        return self.J_box @ np.asarray(x, dtype=float) + self.box_offset

    def eval_state(self, x):
        """(equality residuals, inequality values) in declared row order."""
        return self.state_equalities(x), self.state_inequalities(x)

    def input_inequalities(self, u) -> np.ndarray:
        return self.A_u @ np.asarray(u, dtype=float) - self.b_u

    def mixed_inequalities(self, x, u) -> np.ndarray:
        """Mechanical-power template |u . qdot_act| <= P_max (disabled
        unless params.power_limit is set)."""
        if self.params.power_limit is None:
            return np.zeros(0)
        _, qdot = self.model.split_state(x)
        p = float(np.asarray(u) @ qdot[list(self.model.actuated)])
        return np.array([p - self.params.power_limit,
                         -p - self.params.power_limit])

    def cone_matrix(self, q) -> np.ndarray:
        """W_c(q) = W_local R_c(q), global-frame wrench rows."""
        _, ang = mdl.contact_frame_pose(self.model, q)
        c, s = np.cos(ang), np.sin(ang)
        R_c = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
        return self.W_local @ R_c

    def eval_wrench_cone(self, x, F_c) -> np.ndarray:
        q, _ = self.model.split_state(x)
        return self.cone_matrix(q) @ np.asarray(F_c, dtype=float)

    # ------------------------------------------------------------------
    def constraint_jacobians(self, x):
        """(J_e, J_i, e_e, e_i) for the projection QP linearization."""
        x = np.asarray(x, dtype=float)
        q, qdot = self.model.split_state(x)
        n_x = self.model.n_x
        if self.model.n_c:
            Jc = mdl.contact_jacobian(self.model, q)
            Jc_rate = mdl.contact_jacobian_rate(self.model, q, qdot)
            J_e = np.zeros((6, n_x))
            J_e[:3, : self.model.n_q] = Jc
            J_e[3:, : self.model.n_q] = Jc_rate
            J_e[3:, self.model.n_q:] = Jc
        else:
            J_e = np.zeros((0, n_x))
        e_e = -self.state_equalities(x)
        e_i = self.v_int_values - self.state_inequalities(x)
        return J_e, self.J_box.copy(), e_e, e_i

    # ------------------------------------------------------------------
    def in_state_set(self, x, eps: float | None = None) -> bool:
        """Membership in the constrained-state set (equalities within
        eps, inequalities nonpositive)."""
        return self.state_set_violation(x, eps) <= 0.0

    def state_set_violation(self, x, eps: float | None = None) -> float:
        eps = self.params.eps if eps is None else eps
        h_e, h_i = self.eval_state(x)
        v = 0.0
        if h_e.size:
            v = max(v, float(np.max(np.abs(h_e))) - eps)
        if h_i.size:
            v = max(v, float(np.max(h_i)))
        return v

    def step_violation(self, x, u=None, F_c=None) -> float:
        """Worst violation against the step-wise tolerance bands; used to
        re-verify states produced by certification/propagation QPs."""
        h_e, h_i = self.eval_state(x)
        v = 0.0
        if h_e.size:
            v = max(v, float(np.max(np.abs(h_e[:3]))) - self.params.contact_pos_tol)
            v = max(v, float(np.max(np.abs(h_e[3:]))) - self.params.contact_vel_tol)
        if h_i.size:
            v = max(v, float(np.max(h_i)))
        if u is not None:
            hu = self.input_inequalities(u)
            if hu.size:
                v = max(v, float(np.max(hu)))
            hm = self.mixed_inequalities(x, u)
            if hm.size:
                v = max(v, float(np.max(hm)))
        if F_c is not None and self.model.n_c:
            hc = self.eval_wrench_cone(x, F_c) - self.cone_rhs
            v = max(v, float(np.max(hc)))
        return v
