"""Grid decomposition of the output space and a belief-space planner.

The feasible sample set induces, per grid cell, a principal singular
vector of the local output covariance; transitions of an 8-connected
grid MDP are shaped by how well an action's displacement aligns with
that vector, observations by the fraction of certified one-step
successors landing in the target cell.  A finite-horizon DP over the
reachable belief tree extracts a subregion sequence toward the goal.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as mdl

BELIEF_PRUNE = 1e-6
PROB_FLOOR = 1e-9

# 8-connected moves as (dcol, drow), fixed order.
ACTIONS = (
    ("up", (0, 1)),
    ("down", (0, -1)),
    ("right", (1, 0)),
    ("left", (-1, 0)),
    ("up-right", (1, 1)),
    ("up-left", (-1, 1)),
    ("down-right", (1, -1)),
    ("down-left", (-1, -1)),
)
N_ACTIONS = len(ACTIONS)


class PlanFailed(Exception):
    """No obstacle-free node sequence to the goal within the horizon."""


@dataclass(frozen=True)
class OutputGrid:
    """Uniform square tiling of an output workspace into subregions."""
    origin: np.ndarray        # lower-left corner (x, z)
    cell: float               # full cell side; eps_y = cell / 2
    cols: int
    rows: int
    obstacles: frozenset
    goal_output: np.ndarray
    goal_node: int

    @property
    def m(self) -> int:
        return self.cols * self.rows

    @property
    def eps_y(self) -> float:
        return 0.5 * self.cell

    def center(self, node: int) -> np.ndarray:
        row, col = divmod(node, self.cols)
        return self.origin + self.cell * (np.array([col, row]) + 0.5)

    @property
    def centers(self) -> np.ndarray:
        return np.array([self.center(i) for i in range(self.m)])

    def node_of(self, y) -> int | None:
        """Cell index containing y; shared edges go to the lower index."""
        u = (np.asarray(y, dtype=float) - self.origin) / self.cell
        if (u < 0).any() or u[0] > self.cols or u[1] > self.rows:
            return None
        idx = np.floor(u).astype(int)
        for k, hi in enumerate((self.cols, self.rows)):
            if u[k] == idx[k] and idx[k] > 0:   # tie on a shared edge
                idx[k] -= 1
            idx[k] = min(idx[k], hi - 1)        # upper workspace boundary
        return int(idx[1] * self.cols + idx[0])

    def neighbor(self, node: int, action: int) -> int | None:
        row, col = divmod(node, self.cols)
        dc, dr = ACTIONS[action][1]
        col, row = col + dc, row + dr
        if 0 <= col < self.cols and 0 <= row < self.rows:
            return row * self.cols + col
        return None

    def adjacent(self, a: int, b: int) -> bool:
        ra, ca = divmod(a, self.cols)
        rb, cb = divmod(b, self.cols)
        return max(abs(ra - rb), abs(ca - cb)) == 1


def build_grid(bounds, dims, obstacles, y_g) -> OutputGrid:
    """Square-cell grid over `bounds` = ((x0, x1), (z0, z1)).

    `dims` = (cols, rows); `obstacles` is a list of (col, row) pairs.
    """
    (x0, x1), (z0, z1) = bounds
    cols, rows = int(dims[0]), int(dims[1])
    if cols * rows < 2:
        raise ValueError("grid needs at least 2 cells")
    cw, ch = (x1 - x0) / cols, (z1 - z0) / rows
    if abs(cw - ch) > 1e-9 * max(cw, ch):
        raise ValueError("cells must be square (inf-norm subregions)")
    obs = frozenset(int(r) * cols + int(c) for c, r in obstacles)
    grid = OutputGrid(np.array([x0, z0]), cw, cols, rows, obs,
                      np.asarray(y_g, dtype=float), -1)
    goal_node = grid.node_of(y_g)
    if goal_node is None:
        raise ValueError("goal output outside the gridded workspace")
    if goal_node in obs:
        raise ValueError("goal output lies inside an obstacle cell")
    object.__setattr__(grid, "goal_node", goal_node)
    return grid


def _outputs_of(samples) -> np.ndarray:
    return samples if isinstance(samples, np.ndarray) else samples.outputs


def assign_nodes(grid: OutputGrid, outputs: np.ndarray) -> np.ndarray:
    """Node index per output row, -1 for points outside the workspace."""
    nodes = [grid.node_of(y) for y in outputs]
    return np.array([-1 if n is None else n for n in nodes], dtype=int)


def psv(grid: OutputGrid, samples, node: int):
    """Principal singular vector of a cell's output samples.

    Unit norm, sign canonicalized so the first nonzero component is
    positive; None when the cell holds fewer than two samples.
    """
    outputs = _outputs_of(samples)
    pts = np.array([y for y in outputs if grid.node_of(y) == node])
    if pts.shape[0] < 2:
        return None
    _, _, vt = np.linalg.svd(pts - pts.mean(axis=0), full_matrices=False)
    v = vt[0]
    for comp in v:
        if abs(comp) > 1e-12:
            if comp < 0:
                v = -v
            break
    return v


def _alignments(grid: OutputGrid, v, s: int) -> np.ndarray:
    """max{0, v . unit displacement} per action; 0 for off-grid moves."""
    t = np.zeros(N_ACTIONS)
    if v is None:
        return t
    for a in range(N_ACTIONS):
        nb = grid.neighbor(s, a)
        if nb is None:
            continue
        d = grid.center(nb) - grid.center(s)
        t[a] = max(0.0, float(v @ (d / np.linalg.norm(d))))
    return t


def transition(grid: OutputGrid, psv_s, s: int, s_next: int, a: int) -> float:
    """Transition probability T(s_next | s, a).

    The alignment mass of the commanded move, normalized across the 8
    actions, goes to the action's neighbor; the remainder stays at s, so
    each (s, a) column sums to one.  Columns are identically zero when
    the PSV is undefined, alignment vanishes for every action, or the
    move leaves the grid.
    """
    t = _alignments(grid, psv_s, s)
    w = t.sum()
    nb = grid.neighbor(s, a)
    if w <= 0.0 or nb is None:
        return 0.0
    p = t[a] / w
    if s_next == nb:
        return p
    if s_next == s:
        return 1.0 - p
    return 0.0


def successor_outputs(samples, model: mdl.RobotModel, dt: float) -> np.ndarray:
    """Outputs of each certified sample after one step with its certificate."""
    return np.array([
        mdl.output(model, mdl.step(model, x, u, F, dt))
        for x, u, F in zip(samples.states, samples.inputs, samples.wrenches)
    ]).reshape(len(samples.states), -1)


def observation_prob(samples, grid: OutputGrid, s: int, s_next: int,
                     model: mdl.RobotModel, dt: float,
                     succ_outputs=None) -> float:
    """Eq.-style ratio: certified samples in cell s whose one-step
    successor output lands in cell s_next, over the s_next population."""
    outputs = _outputs_of(samples)
    if succ_outputs is None:
        succ_outputs = successor_outputs(samples, model, dt)
    nodes = assign_nodes(grid, outputs)
    succ_nodes = assign_nodes(grid, succ_outputs)
    denom = int(np.sum(nodes == s_next))
    if denom == 0:
        return 0.0
    num = int(np.sum((nodes == s) & (succ_nodes == s_next)))
    return min(1.0, num / denom)


def reward(grid: OutputGrid, samples, node: int, k_r: float = 1.0,
           eta_goal: float = 100.0, eta_obs: float = 100.0) -> float:
    """Sample-occupancy reward with goal/obstacle offsets."""
    outputs = _outputs_of(samples)
    total = outputs.shape[0]
    frac = 0.0 if total == 0 else \
        sum(1 for y in outputs if grid.node_of(y) == node) / total
    eta = 0.0
    if node == grid.goal_node:
        eta = eta_goal
    elif node in grid.obstacles:
        eta = -eta_obs
    return k_r * frac + eta


@dataclass(frozen=True)
class PomdpSpec:
    grid: OutputGrid
    T: np.ndarray             # (n_a, m, m): T[a, s, s']
    Z: np.ndarray             # (n_a, m): Pr(observe s' | arrived s', a)
    R: np.ndarray             # (m,)
    gamma: float
    horizon: int

    def __post_init__(self):
        if ((self.T < -1e-12) | (self.T > 1 + 1e-12)).any():
            raise ValueError("transition probabilities outside [0, 1]")
        sums = self.T.sum(axis=2)
        ok = np.isclose(sums, 1.0, atol=1e-9) | np.isclose(sums, 0.0,
                                                           atol=1e-12)
        if not ok.all():
            raise ValueError("each T(.,s,a) column must sum to 1 or 0")
        if not np.isfinite(self.R).all():
            raise ValueError("rewards must be finite")


def crossing_numerators(grid: OutputGrid, samples, model: mdl.RobotModel,
                        cs, dt: float, counts=None) -> np.ndarray:
    """num[a, s] = samples in cell s from which some admissible
    (input, contact wrench) pair carries the one-step successor output
    into neighbor(s, a).

    The witness is built by targeting the output acceleration that lands
    the second-order successor on the neighbor's center; the realizing
    torque/wrench pair is affine in the acceleration scale, so the
    largest scale satisfying the input bounds and the wrench cone has a
    closed form.  The crossing is then validated with an order-4 step.
    Work per (cell, action) pair stops once the numerator saturates the
    observation likelihood (num >= samples in the neighbor cell).
    """
    outputs = _outputs_of(samples)
    nodes = assign_nodes(grid, outputs)
    if counts is None:
        counts = np.array([int(np.sum(nodes == s)) for s in range(grid.m)])
    num = np.zeros((N_ACTIONS, grid.m))
    n_q, n_u = model.n_q, model.n_u
    S = model.selection_matrix()
    r_u = np.concatenate([cs.params.u_upper, -cs.params.u_lower])
    G_u = np.vstack([np.eye(n_u), -np.eye(n_u)])
    for i in np.nonzero(nodes >= 0)[0]:
        s = int(nodes[i])
        todo = [a for a in range(N_ACTIONS)
                if (nb := grid.neighbor(s, a)) is not None
                and 0 < counts[nb] > num[a, s]]
        if not todo:
            continue
        x, y = samples.states[i], outputs[i]
        q, qd = model.split_state(x)
        M = mdl.mass_matrix(model, q)
        h = mdl.bias_forces(model, q, qd)
        Jc = mdl.contact_jacobian(model, q)
        Jq = mdl.output_jacobian(model, x)[:, :n_q]
        # min-norm qdd realizing (a_y, contact acceleration 0)
        Apinv = np.linalg.pinv(np.vstack([Jq, Jc]))
        bias = np.concatenate(
            [np.zeros(2), -mdl.contact_jacobian_rate(model, q, qd) @ qd])
        B = np.hstack([S.T, Jc.T])
        z_c = np.linalg.solve(B, M @ (Apinv @ bias) + h)
        Zmap = np.linalg.solve(B, M @ Apinv[:, :2])
        W = cs.cone_matrix(q)
        G = np.vstack([np.hstack([G_u, np.zeros((2 * n_u, 3))]),
                       np.hstack([np.zeros((W.shape[0], n_u)), W])])
        r = np.concatenate([r_u, cs.cone_rhs])
        lc = G @ z_c
        ydot = Jq @ qd
        for a in todo:
            nb = grid.neighbor(s, a)
            a_y = 2.0 * (grid.center(nb) - y - dt * ydot) / (dt * dt)
            dz = Zmap @ a_y
            ld = G @ dz
            pos, neg = ld > 1e-12, ld < -1e-12
            hi, lo = 1.0, 0.0
            if pos.any():
                hi = min(hi, float(((r - lc)[pos] / ld[pos]).min()))
            if neg.any():
                lo = max(lo, float(((lc - r)[neg] / -ld[neg]).max()))
            if lo > hi or ((~pos & ~neg) & (lc > r + 1e-9)).any():
                continue
            z = z_c + hi * dz
            x2 = mdl.step(model, x, z[:n_u], z[n_u:], dt, order=4)
            if grid.node_of(mdl.output(model, x2)) == nb:
                num[a, s] += 1.0
    return num


def build_pomdp(grid: OutputGrid, samples, model: mdl.RobotModel, dt: float,
                gamma: float = 0.95, k_r: float = 1.0,
                eta_goal: float = 100.0, eta_obs: float = 100.0,
                horizon: int | None = None, cs=None,
                probe_dt: float | None = None) -> PomdpSpec:
    """Assemble the full belief-MDP specification from the sample set.

    With a constraint set `cs`, observation numerators come from the
    existential input probe of `crossing_numerators` over a step of
    probe_dt (default dt); otherwise each sample is stepped with its own
    certified input/wrench pair.
    """
    outputs = _outputs_of(samples)
    nodes = assign_nodes(grid, outputs)
    succ_nodes = None
    if cs is None:
        succ_nodes = assign_nodes(grid, successor_outputs(
            samples, model, dt if probe_dt is None else probe_dt))
    m = grid.m

    psvs = [psv(grid, outputs, s) for s in range(m)]
    T = np.zeros((N_ACTIONS, m, m))
    for s in range(m):
        t = _alignments(grid, psvs[s], s)
        w = t.sum()
        if w <= 0.0:
            continue
        for a in range(N_ACTIONS):
            nb = grid.neighbor(s, a)
            if nb is None:
                continue
            T[a, s, nb] = t[a] / w
            T[a, s, s] = 1.0 - t[a] / w

    counts = np.array([int(np.sum(nodes == s)) for s in range(m)])
    num = None
    if cs is not None:
        num = crossing_numerators(grid, samples, model, cs,
                                  dt if probe_dt is None else probe_dt,
                                  counts=counts)
    Z = np.zeros((N_ACTIONS, m))
    for a in range(N_ACTIONS):
        for s in range(m):
            nb = grid.neighbor(s, a)
            if nb is None or counts[nb] == 0:
                continue
            if num is None:
                n_as = int(np.sum((nodes == s) & (succ_nodes == nb)))
            else:
                n_as = num[a, s]
            Z[a, nb] = min(1.0, n_as / counts[nb])

    total = max(1, outputs.shape[0])
    R = k_r * counts / total
    R[grid.goal_node] += eta_goal
    for o in grid.obstacles:
        R[o] -= eta_obs

    if horizon is None:
        horizon = 2 * max(grid.cols, grid.rows)
    return PomdpSpec(grid, T, Z, R, float(gamma), int(horizon))


def belief_update(spec: PomdpSpec, b: np.ndarray, a: int, o):
    """Bayes filter step; `o` is a node index or None (null symbol).

    Returns the posterior belief, or None when the observation has zero
    probability under (b, a).
    """
    pred = spec.T[a].T @ b
    if o is None:
        post = (1.0 - spec.Z[a]) * pred
    else:
        post = np.zeros_like(pred)
        post[o] = spec.Z[a, o] * pred[o]
    norm = post.sum()
    if norm <= 0.0:
        return None
    return post / norm


def observation_distribution(spec: PomdpSpec, b: np.ndarray, a: int):
    """[(o, Pr(o | b, a))] over successor symbols plus the null symbol."""
    pred = spec.T[a].T @ b
    out = []
    null_mass = 0.0
    for s in np.nonzero(pred > PROB_FLOOR)[0]:
        p = spec.Z[a, s] * pred[s]
        if p > PROB_FLOOR:
            out.append((int(s), p))
        null_mass += (1.0 - spec.Z[a, s]) * pred[s]
    if null_mass > PROB_FLOOR:
        out.append((None, null_mass))
    return out


@dataclass
class PlanResult:
    actions: list              # action names, length n_pi - 1
    nodes: list                # node indices S*, length n_pi
    subregions: list           # cell centers along the plan
    n_pi: int
    value: float

    def to_dict(self) -> dict:
        return {"actions": list(self.actions),
                "nodes": [int(s) for s in self.nodes],
                "subregions": [list(map(float, c)) for c in self.subregions],
                "n_pi": int(self.n_pi),
                "value": float(self.value)}


def _prune(b: np.ndarray) -> np.ndarray:
    b = np.where(b < BELIEF_PRUNE, 0.0, b)
    return b / b.sum()


def solve_policy(spec: PomdpSpec, b0, horizon: int | None = None) -> PlanResult:
    """Finite-horizon DP on the reachable belief tree, then a greedy
    rollout under most-likely informative observations.

    Raises PlanFailed when the rollout does not reach the goal node.
    """
    horizon = spec.horizon if horizon is None else int(horizon)
    b0 = _prune(np.asarray(b0, dtype=float))
    memo = {}

    def key(t, b):
        return t, np.round(b, 9).tobytes()

    def q_values(t, b):
        if t >= horizon:
            return None
        k = key(t, b)
        if k in memo:
            return memo[k]
        base = float(spec.R @ b)
        qs = np.full(N_ACTIONS, -np.inf)
        for a in range(N_ACTIONS):
            if (spec.T[a].T @ b).sum() <= PROB_FLOOR:
                continue
            future = 0.0
            # the observation alphabet is the node set; probability mass
            # that produces no node observation has no continuation
            for o, p in observation_distribution(spec, b, a):
                if o is None:
                    continue
                nb = belief_update(spec, b, a, o)
                if nb is None:
                    continue
                future += p * value(t + 1, _prune(nb))[0]
            qs[a] = base + spec.gamma * future
        memo[k] = qs
        return qs

    def value(t, b):
        qs = q_values(t, b)
        if qs is None:
            return 0.0, None
        a = int(np.argmax(qs))
        if not np.isfinite(qs[a]):
            return float(spec.R @ b), None
        return float(qs[a]), a

    v0, _ = value(0, b0)

    # Greedy rollout with backtracking: per step, try actions in
    # descending Q order and their node-advancing observations in
    # descending likelihood; the null symbol, the self observation and
    # already-visited nodes are uninformative (revisits would loop the
    # node sequence).  A cell whose transition mass points away from
    # every unvisited neighbor is a dead end, so a failed branch
    # backtracks to the previous belief and takes the next-best action.
    start = int(np.argmax(b0))

    def rollout(t, b, node, visited):
        if node == spec.grid.goal_node:
            return [], []
        if t >= horizon:
            return None
        qs = q_values(t, b)
        if qs is None:
            return None
        for cand in np.argsort(qs)[::-1]:
            if not np.isfinite(qs[cand]):
                break
            cand_obs = sorted(
                ((o, p) for o, p in observation_distribution(spec, b, cand)
                 if o is not None and o not in visited
                 and o not in spec.grid.obstacles),
                key=lambda op: -op[1])
            for o, _ in cand_obs:
                nb = _prune(belief_update(spec, b, cand, o))
                nxt = int(np.argmax(nb))
                if (nxt == node or nxt in visited
                        or nxt in spec.grid.obstacles):
                    continue
                sub = rollout(t + 1, nb, nxt, visited | {nxt})
                if sub is not None:
                    return ([ACTIONS[cand][0]] + sub[0], [nxt] + sub[1])
        return None

    found = rollout(0, b0, start, {start})
    if found is None:
        raise PlanFailed(f"no belief rollout from node {start} reaches "
                         f"goal {spec.grid.goal_node} within the horizon")
    actions, tail = found
    nodes = [start] + tail
    if any(s in spec.grid.obstacles for s in nodes):
        raise PlanFailed("rollout crossed an obstacle cell")
    return PlanResult(actions, nodes,
                      [spec.grid.center(s) for s in nodes],
                      len(nodes), v0)
