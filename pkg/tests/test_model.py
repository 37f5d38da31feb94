"""Kinematics/dynamics checks against finite-difference oracles.

Every analytic jacobian and hessian of the model is compared to central
differences at randomly perturbed states; the dynamics terms are checked
against energy-based identities that do not reuse the tested code path.
"""
import numpy as np
import pytest

from reachtraj import model as mdl

from conftest import random_states

FD = 1e-6
TOL = 1e-5


def _fd_jacobian(f, x, eps=FD):
    x = np.asarray(x, dtype=float)
    y0 = np.asarray(f(x))
    J = np.zeros((y0.size, x.size))
    for j in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[j] += eps
        xm[j] -= eps
        J[:, j] = (np.asarray(f(xp)) - np.asarray(f(xm))) / (2 * eps)
    return J


def test_output_jacobian_matches_fd(model, rng):
    for x in random_states(model, rng, 10):
        J = mdl.output_jacobian(model, x)
        J_fd = _fd_jacobian(lambda z: mdl.output(model, z), x)
        np.testing.assert_allclose(J, J_fd, atol=TOL)


def test_output_hessians_match_fd(model, rng):
    for x in random_states(model, rng, 6):
        H = mdl.output_hessians(model, x)
        for c in range(2):
            H_fd = _fd_jacobian(
                lambda z, c=c: mdl.output_jacobian(model, z)[c], x)
            np.testing.assert_allclose(H[c], H_fd, atol=TOL)
            np.testing.assert_allclose(H[c], H[c].T, atol=1e-12)


def test_contact_jacobian_matches_fd(model, rng):
    def pose(q):
        p, ang = mdl.contact_frame_pose(model, q)
        return np.array([p[0], p[1], ang])

    for x in random_states(model, rng, 10):
        q = x[: model.n_q]
        J = mdl.contact_jacobian(model, q)
        np.testing.assert_allclose(J, _fd_jacobian(pose, q), atol=TOL)


def test_contact_jacobian_rate_matches_fd(model, rng):
    for x in random_states(model, rng, 6):
        q, qd = model.split_state(x)
        R = mdl.contact_jacobian_rate(model, q, qd)
        R_fd = _fd_jacobian(lambda z: mdl.contact_jacobian(model, z) @ qd, q)
        np.testing.assert_allclose(R, R_fd, atol=TOL)


def test_point_hessian_matches_fd(model, rng):
    body, local = model.contact_body, model.contact_offset
    for x in random_states(model, rng, 6):
        q = x[: model.n_q]
        _, _, H = mdl.point_kinematics(model, q, body, local, hessian=True)
        for c in range(2):
            H_fd = _fd_jacobian(
                lambda z, c=c: mdl.point_kinematics(model, z, body,
                                                    local)[1][c], q)
            np.testing.assert_allclose(H[c], H_fd, atol=TOL)


def test_mass_matrix_is_kinetic_energy_hessian(model, rng):
    # KE = 1/2 qd' M(q) qd, so d2 KE / d qd2 recovers M independently
    # of the jacobian assembly used inside mass_matrix.
    for x in random_states(model, rng, 5):
        q, qd = model.split_state(x)
        M = mdl.mass_matrix(model, q)
        np.testing.assert_allclose(M, M.T, atol=1e-12)
        assert np.linalg.eigvalsh(M).min() > 0
        eps = 1e-4
        H = np.zeros_like(M)
        for i in range(model.n_q):
            for j in range(model.n_q):
                def ke(di, dj):
                    v = qd.copy()
                    v[i] += di * eps
                    v[j] += dj * eps
                    return mdl.kinetic_energy(
                        model, np.concatenate([q, v]))
                H[i, j] = (ke(1, 1) - ke(1, -1) - ke(-1, 1) + ke(-1, -1)) \
                    / (4 * eps * eps)
        np.testing.assert_allclose(M, H, atol=1e-4 * max(1.0, np.abs(M).max()))


def test_bias_forces_match_lagrangian_identity(model, rng):
    # b_i = sum_j (dM_ij/dq . qd) qd_j - 1/2 qd' dM/dq_i qd + dV/dq_i,
    # assembled from finite differences of M(q) and the potential only.
    eps = 1e-6
    for x in random_states(model, rng, 5):
        q, qd = model.split_state(x)
        n = model.n_q

        def potential(qq):
            fd = [mdl.point_kinematics(model, qq, i, l.com)[0]
                  for i, l in enumerate(model.links)]
            return sum(l.mass * model.gravity * p[1]
                       for l, p in zip(model.links, fd))

        dM = np.zeros((n, n, n))       # dM/dq_k
        dV = np.zeros(n)
        for k in range(n):
            qp, qm = q.copy(), q.copy()
            qp[k] += eps
            qm[k] -= eps
            dM[:, :, k] = (mdl.mass_matrix(model, qp) -
                           mdl.mass_matrix(model, qm)) / (2 * eps)
            dV[k] = (potential(qp) - potential(qm)) / (2 * eps)
        Mdot = np.einsum("ijk,k->ij", dM, qd)
        b_ref = Mdot @ qd - 0.5 * np.einsum("j,jki,k->i", qd, dM, qd) + dV
        b = mdl.bias_forces(model, q, qd)
        np.testing.assert_allclose(b, b_ref, atol=1e-5)


def test_dynamics_solves_equations_of_motion(model, rng):
    for x in random_states(model, rng, 4):
        q, qd = model.split_state(x)
        u = rng.standard_normal(model.n_u)
        F = rng.standard_normal(3)
        dx = mdl.dynamics(model, x, u, F)
        np.testing.assert_allclose(dx[: model.n_q], qd)
        qdd = dx[model.n_q:]
        lhs = mdl.mass_matrix(model, q) @ qdd + mdl.bias_forces(model, q, qd)
        rhs = model.selection_matrix().T @ u \
            + mdl.contact_jacobian(model, q).T @ F
        np.testing.assert_allclose(lhs, rhs, atol=1e-8)


def test_step_orders(model, rng):
    x = random_states(model, rng, 1)[0]
    u = rng.standard_normal(model.n_u)
    F = rng.standard_normal(3)
    # Euler truncation error shrinks quadratically against RK4.
    errs = []
    for dt in (1e-3, 5e-4, 2.5e-4):
        e = np.abs(mdl.step(model, x, u, F, dt, order=1) -
                   mdl.step(model, x, u, F, dt, order=4)).max()
        errs.append(e)
    assert errs[1] < 0.35 * errs[0]
    assert errs[2] < 0.35 * errs[1]
    with pytest.raises(ValueError):
        mdl.step(model, x, u, F, 1e-3, order=2)
    with pytest.raises(ValueError):
        mdl.step(model, x, u, F, 0.0)


def test_selection_matrix_layout(model):
    S = model.selection_matrix()
    assert S.shape == (model.n_u, model.n_q)
    np.testing.assert_allclose(S @ S.T, np.eye(model.n_u))
    # floating-base coordinates are unactuated
    np.testing.assert_allclose(S[:, :3], 0.0)
