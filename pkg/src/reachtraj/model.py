"""Planar articulated-chain dynamics in floating-base state-space form.

Kinematics live in the x-z plane; revolute joints rotate about the +y
axis with R(th) = [[cos, -sin], [sin, cos]] acting on (x, z).  The mass
matrix comes from link Jacobians (M = sum m Jv'Jv + I Jw'Jw), which is
exact for rigid chains, and bias forces from the matching velocity
product terms plus gravity.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PRISMATIC = "prismatic"
REVOLUTE = "revolute"


@dataclass(frozen=True)
class Joint:
    kind: str                 # "prismatic" | "revolute"
    parent: int               # parent joint index, -1 for world
    origin: tuple = (0.0, 0.0)   # fixed offset in the parent frame [m]
    axis: tuple = (0.0, 0.0)     # translation axis (prismatic only)


@dataclass(frozen=True)
class Link:
    mass: float               # [kg]
    inertia: float            # rotational inertia about the COM [kg m^2]
    com: tuple = (0.0, 0.0)   # COM offset in the link frame [m]


@dataclass(frozen=True)
class RobotModel:
    """Immutable planar chain: joint i carries link i.

    actuated: indices of actuated joints (defines the selection matrix).
    contact_body/contact_offset: frame whose pose enters the contact
    constraints; None disables contact machinery.
    output: ("point", body, (ox, oz)) task map y = position of a
    body-fixed point.
    """

    joints: tuple
    links: tuple
    actuated: tuple
    contact_body: int | None = None
    contact_offset: tuple = (0.0, 0.0)
    output: tuple = ("point", -1, (0.0, 0.0))
    gravity: float = 9.81

    def __post_init__(self):
        if len(self.joints) != len(self.links):
            raise ValueError("one link per joint required")
        for j in self.joints:
            if j.kind not in (PRISMATIC, REVOLUTE):
                raise ValueError(f"unknown joint type {j.kind!r}")
            if j.parent >= len(self.joints):
                raise ValueError("parent index out of range")
        for l in self.links:
            if l.mass <= 0 or l.inertia <= 0:
                raise ValueError("masses and inertias must be positive")
        if sorted(set(self.actuated)) != sorted(self.actuated):
            raise ValueError("duplicate actuated joint")
        object.__setattr__(self, "joints", tuple(self.joints))
        object.__setattr__(self, "links", tuple(self.links))
        object.__setattr__(self, "actuated", tuple(self.actuated))

    # dimensions -------------------------------------------------------
    @property
    def n_q(self) -> int:
        return len(self.joints)

    @property
    def n_x(self) -> int:
        return 2 * self.n_q

    @property
    def n_u(self) -> int:
        return len(self.actuated)

    @property
    def n_c(self) -> int:
        return 3 if self.contact_body is not None else 0

    @property
    def n_y(self) -> int:
        return 2

    def selection_matrix(self) -> np.ndarray:
        S = np.zeros((self.n_u, self.n_q))
        for row, j in enumerate(self.actuated):
            S[row, j] = 1.0
        return S

    def split_state(self, x):
        x = np.asarray(x, dtype=float)
        return x[: self.n_q], x[self.n_q:]


def planar_floating_chain(base_link: Link, chain_joints, chain_links,
                          **kwargs) -> RobotModel:
    """Standard floating-base layout: x, z prismatic + pitch revolute
    (unactuated) carrying `base_link`, then the given serial chain with
    every chain joint actuated."""
    joints = [
        Joint(PRISMATIC, -1, (0.0, 0.0), (1.0, 0.0)),
        Joint(PRISMATIC, 0, (0.0, 0.0), (0.0, 1.0)),
        Joint(REVOLUTE, 1),
    ]
    # Negligible-mass carrier links for the two base prismatic joints.
    links = [Link(1e-9, 1e-12), Link(1e-9, 1e-12), base_link]
    parent = 2
    for j, l in zip(chain_joints, chain_links):
        joints.append(Joint(j.kind, parent, j.origin, j.axis))
        links.append(l)
        parent = len(joints) - 1
    actuated = tuple(range(3, len(joints)))
    return RobotModel(tuple(joints), tuple(links), actuated, **kwargs)


# ----------------------------------------------------------------------
# kinematics
# ----------------------------------------------------------------------

_ROT90 = np.array([[0.0, -1.0], [1.0, 0.0]])


def _rot(th):
    c, s = np.cos(th), np.sin(th)
    return np.array([[c, -s], [s, c]])


@dataclass
class FrameData:
    """Positions/angles of every joint frame plus per-frame jacobians."""

    pos: np.ndarray      # (n, 2) frame origins
    ang: np.ndarray      # (n,) frame angles
    jpos: np.ndarray     # (n, 2, n) d pos / d q
    jang: np.ndarray     # (n, n) d ang / d q (constant 0/1 pattern)


def frame_kinematics(model: RobotModel, q) -> FrameData:
    q = np.asarray(q, dtype=float)
    # One forward pass is shared by every kinematic/dynamic quantity of
    # the same configuration (mass matrix, bias, jacobians, contact
    # pose), so a small per-model memo pays off throughout.
    cache = model.__dict__.get("_fk_cache")
    if cache is None:
        cache = {}
        object.__setattr__(model, "_fk_cache", cache)
    key = q.tobytes()
    hit = cache.get(key)
    if hit is not None:
        return hit
    n = model.n_q
    pos = np.zeros((n, 2))
    ang = np.zeros(n)
    jpos = np.zeros((n, 2, n))
    jang = np.zeros((n, n))
    for i, joint in enumerate(model.joints):
        if joint.parent < 0:
            p_par, a_par = np.zeros(2), 0.0
            jp_par, ja_par = np.zeros((2, n)), np.zeros(n)
        else:
            k = joint.parent
            p_par, a_par = pos[k], ang[k]
            jp_par, ja_par = jpos[k], jang[k]
        R = _rot(a_par)
        offset = np.asarray(joint.origin)
        if joint.kind == PRISMATIC:
            offset = offset + q[i] * np.asarray(joint.axis)
            ang[i] = a_par
            jang[i] = ja_par
        else:
            ang[i] = a_par + q[i]
            jang[i] = ja_par.copy()
            jang[i, i] += 1.0
        world_off = R @ offset
        pos[i] = p_par + world_off
        # d(R(a_par) offset)/dq = (S R offset) da_par/dq (+ R axis on own q)
        jpos[i] = jp_par + np.outer(_ROT90 @ world_off, ja_par)
        if joint.kind == PRISMATIC:
            jpos[i][:, i] += R @ np.asarray(joint.axis)
    fd = FrameData(pos, ang, jpos, jang)
    if len(cache) >= 8:
        cache.pop(next(iter(cache)))
    cache[key] = fd
    return fd


def point_kinematics(model: RobotModel, q, body: int, local,
                     hessian: bool = False):
    """World position of a body-fixed point with jacobian and (optionally)
    the per-coordinate second derivative tensor (2, n, n)."""
    fd = frame_kinematics(model, q)
    n = model.n_q
    R = _rot(fd.ang[body])
    world_off = R @ np.asarray(local, dtype=float)
    p = fd.pos[body] + world_off
    J = fd.jpos[body] + np.outer(_ROT90 @ world_off, fd.jang[body])
    if not hessian:
        return p, J, None
    H = np.zeros((2, n, n))
    # Differentiate J column-wise: column j is S(p - p_j) for a revolute
    # ancestor j and R(ang_j) axis_j for a prismatic ancestor.
    for j, joint in enumerate(model.joints):
        if not _on_path(model, body, j):
            continue
        if joint.kind == REVOLUTE:
            H[:, :, j] = _ROT90 @ (J - fd.jpos[j])
        else:
            col = _rot(fd.ang[j]) @ np.asarray(joint.axis)
            H[:, :, j] = np.outer(_ROT90 @ col, fd.jang[j])
    # mixed partials are symmetric; average out roundoff
    H = 0.5 * (H + np.swapaxes(H, 1, 2))
    return p, J, H


def _on_path(model: RobotModel, body: int, j: int) -> bool:
    k = body
    while k >= 0:
        if k == j:
            return True
        k = model.joints[k].parent
    return False


# ----------------------------------------------------------------------
# dynamics
# ----------------------------------------------------------------------

def _com_jacobians(model: RobotModel, q, hessian=False):
    out = []
    for i, link in enumerate(model.links):
        out.append(point_kinematics(model, q, i, link.com, hessian=hessian))
    return out


def mass_matrix(model: RobotModel, q) -> np.ndarray:
    """Joint-space inertia matrix, symmetric positive-definite."""
    fd_coms = _com_jacobians(model, q)
    fd = frame_kinematics(model, q)
    M = np.zeros((model.n_q, model.n_q))
    for i, link in enumerate(model.links):
        _, Jv, _ = fd_coms[i]
        M += link.mass * (Jv.T @ Jv)
        M += link.inertia * np.outer(fd.jang[i], fd.jang[i])
    return 0.5 * (M + M.T)


def bias_forces(model: RobotModel, q, qdot) -> np.ndarray:
    """Coriolis/centrifugal plus gravity generalized forces."""
    qdot = np.asarray(qdot, dtype=float)
    b = np.zeros(model.n_q)
    for i, link in enumerate(model.links):
        _, Jv, Hv = point_kinematics(model, q, i, link.com, hessian=True)
        acc = np.einsum("cjk,j,k->c", Hv, qdot, qdot)
        b += link.mass * (Jv.T @ acc)
        b += link.mass * model.gravity * Jv[1]
    return b


def contact_frame_pose(model: RobotModel, q):
    """(position, pitch angle) of the contact frame."""
    if model.contact_body is None:
        raise ValueError("model has no contact frame")
    p, _, _ = point_kinematics(model, q, model.contact_body,
                               model.contact_offset)
    fd = frame_kinematics(model, q)
    return p, float(fd.ang[model.contact_body])


def contact_jacobian(model: RobotModel, q) -> np.ndarray:
    """3 x n_q map from joint rates to contact (vx, vz, omega)."""
    if model.contact_body is None:
        raise ValueError("model has no contact frame")
    _, Jv, _ = point_kinematics(model, q, model.contact_body,
                                model.contact_offset)
    fd = frame_kinematics(model, q)
    return np.vstack([Jv, fd.jang[model.contact_body]])


def contact_jacobian_rate(model: RobotModel, q, qdot) -> np.ndarray:
    """d(J_c qdot)/dq, used when linearizing the zero-contact-velocity
    constraint; the angular row is configuration-independent."""
    qdot = np.asarray(qdot, dtype=float)
    _, _, Hv = point_kinematics(model, q, model.contact_body,
                                model.contact_offset, hessian=True)
    top = np.einsum("cjk,k->cj", Hv, qdot)
    return np.vstack([top, np.zeros(model.n_q)])


def dynamics(model: RobotModel, x, u, F_c) -> np.ndarray:
    """State derivative of the contact-constrained system."""
    q, qdot = model.split_state(x)
    u = np.asarray(u, dtype=float).ravel()
    tau = model.selection_matrix().T @ u if u.size else np.zeros(model.n_q)
    if model.n_c:
        F_c = np.asarray(F_c, dtype=float).ravel()
        tau = tau + contact_jacobian(model, q).T @ F_c
    rhs = tau - bias_forces(model, q, qdot)
    qdd = np.linalg.solve(mass_matrix(model, q), rhs)
    return np.concatenate([qdot, qdd])


def step(model: RobotModel, x, u, F_c, dt: float, order: int = 1) -> np.ndarray:
    """Discrete-time update with zero-order-hold inputs.

    order=1 is the explicit-Euler truncation used throughout the
    pipeline; order=4 (classic RK4) is provided for validation runs.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    if order == 1:
        return x + dt * dynamics(model, x, u, F_c)
    if order == 4:
        k1 = dynamics(model, x, u, F_c)
        k2 = dynamics(model, x + 0.5 * dt * k1, u, F_c)
        k3 = dynamics(model, x + 0.5 * dt * k2, u, F_c)
        k4 = dynamics(model, x + dt * k3, u, F_c)
        return x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    raise ValueError("supported integration orders: 1, 4")


# ----------------------------------------------------------------------
# task output map
# ----------------------------------------------------------------------

def _output_body_local(model: RobotModel):
    kind, body, local = model.output
    if kind != "point":
        raise ValueError(f"unknown output map {kind!r}")
    if body < 0:
        body = model.n_q - 1
    return body, local


def output(model: RobotModel, x) -> np.ndarray:
    q, _ = model.split_state(x)
    body, local = _output_body_local(model)
    p, _, _ = point_kinematics(model, q, body, local)
    return p


def output_jacobian(model: RobotModel, x) -> np.ndarray:
    q, _ = model.split_state(x)
    body, local = _output_body_local(model)
    _, J, _ = point_kinematics(model, q, body, local)
    Jy = np.zeros((2, model.n_x))
    Jy[:, : model.n_q] = J
    return Jy


def output_hessians(model: RobotModel, x) -> list:
    q, _ = model.split_state(x)
    body, local = _output_body_local(model)
    _, _, H = point_kinematics(model, q, body, local, hessian=True)
    out = []
    for c in range(2):
        Hx = np.zeros((model.n_x, model.n_x))
        Hx[: model.n_q, : model.n_q] = H[c]
        out.append(Hx)
    return out


def kinetic_energy(model: RobotModel, x) -> float:
    q, qdot = model.split_state(x)
    return 0.5 * float(qdot @ mass_matrix(model, q) @ qdot)
