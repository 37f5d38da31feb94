"""Sample-based construction of the constrained-state set.

Raw Gaussian state samples are projected onto the constraint manifold by
iterated least-squares QPs, then certified dynamically by solving for an
admissible (torque, contact wrench) pair that keeps the next discrete
state inside the set.  Output-space feasibility of a goal is gated by a
second-order moment approximation and a Chi-square ellipsoid.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from .constraints import ConstraintSet
from .qp import QpProblem, solve_qp

# 0.95 Chi-square quantiles for 1..6 degrees of freedom.
CHI2_95 = {1: 3.841, 2: 5.991, 3: 7.815, 4: 9.488, 5: 11.070, 6: 12.592}

PROJECT_MAX_ITER = 50
PROJECT_STEP_CAP = 10.0
CERT_TOL = 1e-6


@dataclass(frozen=True)
class GaussianSpec:
    mu_x: np.ndarray
    sigma_x: np.ndarray
    mu_u: np.ndarray
    sigma_u: np.ndarray
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "mu_x", np.asarray(self.mu_x, dtype=float))
        object.__setattr__(self, "sigma_x", np.asarray(self.sigma_x, dtype=float))
        object.__setattr__(self, "mu_u", np.asarray(self.mu_u, dtype=float))
        object.__setattr__(self, "sigma_u", np.asarray(self.sigma_u, dtype=float))
        for name in ("sigma_x", "sigma_u"):
            np.linalg.cholesky(getattr(self, name))  # raises if not SPD


def sample_states(spec: GaussianSpec, n: int) -> np.ndarray:
    """n Gaussian state draws, deterministic for a given seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(spec.seed)
    L = np.linalg.cholesky(spec.sigma_x)
    z = rng.standard_normal((n, spec.mu_x.shape[0]))
    return spec.mu_x + z @ L.T


def sample_inputs(mu_u, sigma_u, n: int, rng) -> np.ndarray:
    L = np.linalg.cholesky(sigma_u)
    z = rng.standard_normal((n, np.asarray(mu_u).shape[0]))
    return np.asarray(mu_u) + z @ L.T


@dataclass
class ProjectionResult:
    status: str               # "projected" | "discarded"
    x: np.ndarray | None
    iterations: int
    reason: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "projected"


def project_sample(cs: ConstraintSet, model: mdl.RobotModel, x_raw,
                   max_iter: int = PROJECT_MAX_ITER) -> ProjectionResult:
    """Iteratively project a raw sample onto the constrained-state set.

    Each iteration minimizes the squared linearized equality residual
    subject to linearized inequalities pulled toward the interior
    attractor; non-optimal QPs or the iteration cap discard the sample.
    """
    x = np.asarray(x_raw, dtype=float).copy()
    for it in range(max_iter):
        if cs.state_set_violation(x) <= 0.0:
            return ProjectionResult("projected", x, it)
        J_e, J_i, e_e, e_i = cs.constraint_jacobians(x)
        H = 2.0 * (J_e.T @ J_e)
        g = -2.0 * (J_e.T @ e_e)
        sol = solve_qp(QpProblem(H, g, A_in=J_i, b_in=e_i))
        if not sol.optimal:
            return ProjectionResult("discarded", None, it, f"qp {sol.status}")
        dx = sol.z
        if np.linalg.norm(dx) > PROJECT_STEP_CAP:
            return ProjectionResult("discarded", None, it, "diverged")
        x += dx
    return ProjectionResult("discarded", None, max_iter, "iteration cap")


@dataclass
class CertificationResult:
    status: str               # "certified" | "infeasible"
    u: np.ndarray | None = None
    F_c: np.ndarray | None = None
    x_next: np.ndarray | None = None

    @property
    def ok(self) -> bool:
        return self.status == "certified"


def _step_maps(model: mdl.RobotModel, x, dt: float):
    """Affine map x_next = x0 + G_u u + G_c F for the order-1 step."""
    q, qdot = model.split_state(x)
    M = mdl.mass_matrix(model, q)
    Minv = np.linalg.inv(M)
    n_q = model.n_q
    x0 = np.asarray(x, dtype=float) + dt * np.concatenate(
        [qdot, -Minv @ mdl.bias_forces(model, q, qdot)])
    G_u = np.zeros((model.n_x, model.n_u))
    G_u[n_q:] = dt * (Minv @ model.selection_matrix().T)
    if model.n_c:
        Jc = mdl.contact_jacobian(model, q)
        G_c = np.zeros((model.n_x, 3))
        G_c[n_q:] = dt * (Minv @ Jc.T)
    else:
        G_c = np.zeros((model.n_x, 0))
    return x0, G_u, G_c


def certify_sample(cs: ConstraintSet, model: mdl.RobotModel, x, dt: float,
                   Q_u=None, Q_c=None) -> CertificationResult:
    """Find a minimum-cost (u, F_c) keeping the next state in the set.

    Both the torque and the wrench are decision variables; the next-state
    membership constraints are linearized about x, and the certified pair
    is re-checked nonlinearly before acceptance.
    """
    n_u, n_c = model.n_u, model.n_c
    Q_u = np.eye(n_u) if Q_u is None else np.asarray(Q_u, dtype=float)
    Q_c = np.eye(n_c) if Q_c is None else np.asarray(Q_c, dtype=float)
    x = np.asarray(x, dtype=float)
    q, _ = model.split_state(x)
    x0, G_u, G_c = _step_maps(model, x, dt)
    G = np.hstack([G_u, G_c])          # x_next - x0 = G z
    nz = n_u + n_c

    H = 2.0 * np.block([
        [Q_u, np.zeros((n_u, n_c))],
        [np.zeros((n_c, n_u)), Q_c],
    ])
    g = np.zeros(nz)

    A_rows, b_rows = [], []
    # input bounds
    A_rows.append(np.hstack([cs.A_u, np.zeros((cs.A_u.shape[0], n_c))]))
    b_rows.append(cs.b_u)
    if n_c:
        # wrench cone at the current configuration
        W = cs.cone_matrix(q)
        A_rows.append(np.hstack([np.zeros((5, n_u)), W]))
        b_rows.append(cs.cone_rhs)
        # next-state equalities within the pinning bands (two-sided)
        J_e, J_i, _, _ = cs.constraint_jacobians(x)
        h_e = cs.state_equalities(x)
        band = np.concatenate([
            np.full(3, cs.params.contact_pos_tol),
            np.full(3, cs.params.contact_vel_tol),
        ])
        base = h_e + J_e @ (x0 - x)
        JG = J_e @ G
        A_rows.extend([JG, -JG])
        b_rows.extend([band - base, band + base])
    # next-state box inequalities
    if cs.n_state_ineq:
        base_i = cs.J_box @ x0 + cs.box_offset
        A_rows.append(cs.J_box @ G)
        b_rows.append(-base_i)

    sol = solve_qp(QpProblem(H, g, A_in=np.vstack(A_rows),
                             b_in=np.concatenate(b_rows)))
    if not sol.optimal:
        return CertificationResult("infeasible")
    u, F_c = sol.z[:n_u], sol.z[n_u:]
    x_next = x0 + G @ sol.z
    if cs.step_violation(x_next, u=u, F_c=F_c if n_c else None) > CERT_TOL:
        return CertificationResult("infeasible")
    return CertificationResult("certified", u, F_c, x_next)


# ----------------------------------------------------------------------
# feasible sample set
# ----------------------------------------------------------------------

@dataclass
class FeasibleSampleSet:
    states: np.ndarray        # (n, n_x)
    outputs: np.ndarray       # (n, 2)
    inputs: np.ndarray        # (n, n_u) certificates
    wrenches: np.ndarray      # (n, n_c)
    seed: int
    eps: float
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return self.states.shape[0]

    def save(self, path):
        n_x = self.states.shape[1]
        n_y = self.outputs.shape[1]
        header = (f"n_x={n_x} n_y={n_y} eps={self.eps:.17g} "
                  f"seed={self.seed} n_raw={self.provenance.get('n_raw', 0)} "
                  f"n_projected={self.provenance.get('n_projected', 0)}")
        data = np.hstack([self.states, self.outputs, self.inputs,
                          self.wrenches])
        np.savetxt(path, data, fmt="%.17g", header=header)

    @classmethod
    def load(cls, path, n_u: int, n_c: int = 3) -> "FeasibleSampleSet":
        with open(path) as fh:
            head = fh.readline().lstrip("# ").strip()
        meta = dict(kv.split("=") for kv in head.split())
        n_x, n_y = int(meta["n_x"]), int(meta["n_y"])
        data = np.loadtxt(path, ndmin=2)
        if data.size == 0:
            data = data.reshape(0, n_x + n_y + n_u + n_c)
        c0, c1, c2 = n_x, n_x + n_y, n_x + n_y + n_u
        return cls(states=data[:, :c0], outputs=data[:, c0:c1],
                   inputs=data[:, c1:c2], wrenches=data[:, c2:],
                   seed=int(meta["seed"]), eps=float(meta["eps"]),
                   provenance={"n_raw": int(meta.get("n_raw", 0)),
                               "n_projected": int(meta.get("n_projected", 0))})


def build_feasible_set(cs: ConstraintSet, model: mdl.RobotModel,
                       spec: GaussianSpec, n: int, dt: float,
                       Q_u=None, Q_c=None, threads: int = 1) -> FeasibleSampleSet:
    """Full feasibility stage: sample, project, certify, pair outputs.

    Results are merged in sample-index order, so the outcome is a pure
    function of (spec, n) regardless of worker count.
    """
    raw = sample_states(spec, n)

    def _work(chunk):
        rows = []
        n_proj = 0
        for x_raw in chunk:
            pr = project_sample(cs, model, x_raw)
            if not pr.ok:
                continue
            n_proj += 1
            cr = certify_sample(cs, model, pr.x, dt, Q_u=Q_u, Q_c=Q_c)
            if not cr.ok:
                continue
            rows.append((pr.x, mdl.output(model, pr.x), cr.u, cr.F_c))
        return n_proj, rows

    chunks = np.array_split(raw, max(1, min(64, n)))
    if threads > 1:
        from joblib import Parallel, delayed
        results = Parallel(n_jobs=threads)(delayed(_work)(c) for c in chunks)
    else:
        results = [_work(c) for c in chunks]

    n_projected = sum(r[0] for r in results)
    rows = [row for r in results for row in r[1]]
    n_x, n_u, n_c = model.n_x, model.n_u, model.n_c
    if rows:
        states = np.array([r[0] for r in rows])
        outputs = np.array([r[1] for r in rows])
        inputs = np.array([r[2] for r in rows]).reshape(len(rows), n_u)
        wrenches = np.array([r[3] for r in rows]).reshape(len(rows), n_c)
    else:
        states = np.zeros((0, n_x))
        outputs = np.zeros((0, 2))
        inputs = np.zeros((0, n_u))
        wrenches = np.zeros((0, n_c))
    return FeasibleSampleSet(states, outputs, inputs, wrenches,
                             seed=spec.seed, eps=cs.params.eps,
                             provenance={"n_raw": n,
                                         "n_projected": n_projected})


# ----------------------------------------------------------------------
# output moment approximation
# ----------------------------------------------------------------------

@dataclass
class OutputMoments:
    mu_y: np.ndarray
    sigma_y: np.ndarray
    kappa: float

    def __post_init__(self):
        s = np.asarray(self.sigma_y, dtype=float)
        if not np.allclose(s, s.T, atol=1e-9):
            raise ValueError("sigma_y must be symmetric")
        if np.linalg.eigvalsh(0.5 * (s + s.T)).min() < -1e-10:
            raise ValueError("sigma_y must be positive semi-definite")


def chi2_quantile_95(df: int) -> float:
    if df not in CHI2_95:
        raise ValueError(f"no built-in 0.95 quantile for df={df}")
    return CHI2_95[df]


def output_moments(model: mdl.RobotModel, mu_x, sigma_x,
                   kappa: float | None = None,
                   mean_half_factor: bool = False) -> OutputMoments:
    """Second-order moment approximation of the output distribution.

    The mean correction omits the 1/2 factor by default (the covariance
    term keeps it); `mean_half_factor` switches the mean to the standard
    second-order expansion.
    """
    mu_x = np.asarray(mu_x, dtype=float)
    sigma_x = np.asarray(sigma_x, dtype=float)
    sigma_x = 0.5 * (sigma_x + sigma_x.T)
    # empirical covariances of small feasible sets are often singular,
    # so only reject indefinite inputs
    if np.linalg.eigvalsh(sigma_x).min() < -1e-10:
        raise ValueError("sigma_x must be positive semi-definite")
    y0 = mdl.output(model, mu_x)
    J = mdl.output_jacobian(model, mu_x)
    Hs = mdl.output_hessians(model, mu_x)
    factor = 0.5 if mean_half_factor else 1.0
    mu_y = y0 + factor * np.array([np.trace(H @ sigma_x) for H in Hs])
    n_y = y0.shape[0]
    quad = np.array([[np.trace(sigma_x @ Hs[i] @ sigma_x @ Hs[j])
                      for j in range(n_y)] for i in range(n_y)])
    sigma_y = J @ sigma_x @ J.T + 0.5 * quad
    if kappa is None:
        kappa = chi2_quantile_95(n_y)
    return OutputMoments(mu_y, 0.5 * (sigma_y + sigma_y.T), float(kappa))


def ellipsoid_contains(moments: OutputMoments, y) -> bool:
    """Chi-square ellipsoid membership of an output point."""
    d = np.asarray(y, dtype=float) - moments.mu_y
    s = moments.sigma_y
    try:
        m = float(d @ np.linalg.solve(s, d))
    except np.linalg.LinAlgError:
        m = float(d @ np.linalg.solve(s + 1e-12 * np.eye(s.shape[0]), d))
    return m <= moments.kappa
