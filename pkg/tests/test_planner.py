"""Planner tests: grid geometry, hand-worked transition/observation
models, and the belief-tree DP against an exhaustive enumeration."""
import numpy as np
import pytest

from reachtraj.planner import (ACTIONS, N_ACTIONS, PROB_FLOOR, OutputGrid,
                               PlanFailed, PlanResult, PomdpSpec,
                               _prune, assign_nodes, belief_update,
                               build_grid, build_pomdp,
                               crossing_numerators,
                               observation_distribution, observation_prob,
                               psv, solve_policy, transition)

ACTION_INDEX = {name: i for i, (name, _) in enumerate(ACTIONS)}


def _grid(cols=3, rows=3, obstacles=(), goal=None):
    goal = goal if goal is not None else (cols - 0.5, rows - 0.5)
    return build_grid(((0.0, float(cols)), (0.0, float(rows))),
                      (cols, rows), list(obstacles), goal)


def test_grid_geometry():
    g = _grid(4, 3)
    assert g.m == 12 and g.eps_y == 0.5
    np.testing.assert_allclose(g.center(0), [0.5, 0.5])
    np.testing.assert_allclose(g.center(5), [1.5, 1.5])
    assert g.node_of([0.5, 0.5]) == 0
    assert g.node_of([3.9, 2.9]) == 11
    assert g.node_of([-0.1, 0.5]) is None
    assert g.node_of([4.1, 0.5]) is None
    # shared edges resolve to the lower cell index
    assert g.node_of([1.0, 0.5]) == 0
    assert g.node_of([0.5, 1.0]) == 0
    # boundary of the workspace belongs to the outermost cells
    assert g.node_of([4.0, 3.0]) == 11
    assert g.neighbor(0, ACTION_INDEX["up"]) == 4
    assert g.neighbor(0, ACTION_INDEX["left"]) is None
    assert g.neighbor(11, ACTION_INDEX["up-right"]) is None
    assert g.adjacent(0, 5) and not g.adjacent(0, 6)


def test_build_grid_validation():
    with pytest.raises(ValueError):        # non-square cells
        build_grid(((0, 2), (0, 3)), (1, 3), [], (0.5, 0.5))
    with pytest.raises(ValueError):        # goal outside
        build_grid(((0, 3), (0, 3)), (3, 3), [], (5.0, 0.5))
    with pytest.raises(ValueError):        # goal inside an obstacle
        build_grid(((0, 3), (0, 3)), (3, 3), [(2, 2)], (2.5, 2.5))


def test_psv_direction_and_sign():
    g = _grid(3, 3)
    d = np.array([-1.0, -2.0]) / np.sqrt(5.0)
    pts = np.array([0.5, 0.5]) + np.linspace(-0.2, 0.2, 9)[:, None] * d
    v = psv(g, pts, 0)
    # sign canonicalization: first nonzero component positive
    np.testing.assert_allclose(v, [1.0 / np.sqrt(5), 2.0 / np.sqrt(5)],
                               atol=1e-12)
    assert psv(g, pts[:1], 0) is None          # under two samples
    assert psv(g, pts, 4) is None              # empty cell


def test_transition_hand_case():
    g = _grid(3, 3)
    s = 4                                      # center cell
    v = np.array([1.0, 0.0])                   # PSV along +x
    # alignments: right = 1, up-right = down-right = 1/sqrt(2), rest 0
    w = 1.0 + np.sqrt(2.0)
    a = ACTION_INDEX["right"]
    p = 1.0 / w
    assert transition(g, v, s, 5, a) == pytest.approx(p)
    assert transition(g, v, s, s, a) == pytest.approx(1.0 - p)
    assert transition(g, v, s, 3, a) == 0.0
    a = ACTION_INDEX["up-right"]
    p = (1.0 / np.sqrt(2.0)) / w
    assert transition(g, v, s, 8, a) == pytest.approx(p)
    # a blocked move has zero probability everywhere
    assert transition(g, v, s, 1, ACTION_INDEX["left"]) == 0.0
    # undefined PSV zeroes the whole column
    assert transition(g, None, s, 5, ACTION_INDEX["right"]) == 0.0


class _FakeSamples:
    def __init__(self, outputs):
        self.outputs = np.asarray(outputs, dtype=float)
        self.states = np.zeros((len(outputs), 1))
        self.inputs = np.zeros((len(outputs), 1))
        self.wrenches = np.zeros((len(outputs), 3))


def test_observation_prob_hand_case():
    g = _grid(2, 1, goal=(1.5, 0.5))
    outputs = np.array([[0.4, 0.5], [0.6, 0.5], [1.2, 0.5], [1.7, 0.5]])
    succ = np.array([[1.3, 0.5], [0.7, 0.5], [1.4, 0.5], [1.8, 0.5]])
    fs = _FakeSamples(outputs)
    # 1 of the two cell-0 samples crosses into cell 1; cell 1 holds 2
    p = observation_prob(fs, g, 0, 1, model=None, dt=0.1, succ_outputs=succ)
    assert p == pytest.approx(0.5)
    # empty target cell gives zero
    assert observation_prob(fs, g, 1, 0, None, 0.1, succ_outputs=succ) == 0.0


def expectimax(spec: PomdpSpec, b, t):
    """Exhaustive enumeration of the belief tree (no memoization)."""
    if t >= spec.horizon:
        return 0.0
    base = float(spec.R @ b)
    best = None
    for a in range(N_ACTIONS):
        if (spec.T[a].T @ b).sum() <= PROB_FLOOR:
            continue
        future = 0.0
        for o, p in observation_distribution(spec, b, a):
            if o is None:
                continue
            nb = belief_update(spec, b, a, o)
            if nb is None:
                continue
            future += p * expectimax(spec, _prune(nb), t + 1)
        q = base + spec.gamma * future
        best = q if best is None else max(best, q)
    return base if best is None else best


def _spec_1x3():
    g = build_grid(((0.0, 1.0), (0.0, 3.0)), (1, 3), [], (0.5, 2.5))
    m, up, down = 3, ACTION_INDEX["up"], ACTION_INDEX["down"]
    T = np.zeros((N_ACTIONS, m, m))
    T[up, 0, 1], T[up, 0, 0] = 0.8, 0.2
    T[up, 1, 2], T[up, 1, 1] = 0.7, 0.3
    T[down, 1, 0], T[down, 1, 1] = 0.5, 0.5
    T[down, 2, 1], T[down, 2, 2] = 0.6, 0.4
    Z = np.zeros((N_ACTIONS, m))
    Z[up, 1], Z[up, 2] = 0.9, 0.8
    Z[down, 0], Z[down, 1] = 0.5, 0.7
    R = np.array([0.0, 0.1, 10.0])
    return PomdpSpec(g, T, Z, R, gamma=0.95, horizon=4)


def _spec_3x3():
    g = _grid(3, 3, obstacles=[(1, 1)])
    m = 9
    T = np.zeros((N_ACTIONS, m, m))
    Z = np.zeros((N_ACTIONS, m))
    for s in range(m):
        for a in range(N_ACTIONS):
            nb = g.neighbor(s, a)
            if nb is None:
                continue
            p = 0.3 + 0.2 * ((s + a) % 3)
            T[a, s, nb] = p
            T[a, s, s] = 1.0 - p
            Z[a, nb] = max(Z[a, nb], 0.5 + 0.1 * ((a + nb) % 5))
    R = 0.01 * np.arange(m)
    R[g.goal_node] += 100.0
    R[4] -= 100.0
    return PomdpSpec(g, T, Z, R, gamma=0.9, horizon=5)


@pytest.mark.parametrize("make_spec", [_spec_1x3, _spec_3x3])
def test_policy_value_matches_exhaustive_enumeration(make_spec):
    spec = make_spec()
    b0 = np.zeros(spec.grid.m)
    b0[0] = 1.0
    plan = solve_policy(spec, b0)
    assert plan.value == expectimax(spec, _prune(b0), 0)
    assert plan.nodes[0] == 0 and plan.nodes[-1] == spec.grid.goal_node
    assert plan.n_pi == len(plan.nodes) == len(plan.actions) + 1
    assert not any(s in spec.grid.obstacles for s in plan.nodes)
    # consecutive plan nodes are grid-adjacent
    for a, b in zip(plan.nodes, plan.nodes[1:]):
        assert spec.grid.adjacent(a, b)


def test_rollout_fails_without_observations():
    spec = _spec_1x3()
    spec = PomdpSpec(spec.grid, spec.T, np.zeros_like(spec.Z), spec.R,
                     spec.gamma, spec.horizon)
    b0 = np.zeros(3)
    b0[0] = 1.0
    with pytest.raises(PlanFailed):
        solve_policy(spec, b0)


def test_spec_validation():
    g = _grid(2, 1, goal=(1.5, 0.5))
    T_bad = np.full((N_ACTIONS, 2, 2), 0.9)
    with pytest.raises(ValueError):
        PomdpSpec(g, T_bad, np.zeros((N_ACTIONS, 2)), np.zeros(2), 0.9, 2)


def test_belief_update_hand_case():
    spec = _spec_1x3()
    b = np.array([1.0, 0.0, 0.0])
    up = ACTION_INDEX["up"]
    post = belief_update(spec, b, up, 1)
    np.testing.assert_allclose(post, [0.0, 1.0, 0.0])
    # null observation keeps mass on both outcomes
    post0 = belief_update(spec, b, up, None)
    pred = spec.T[up].T @ b
    expect = (1.0 - spec.Z[up]) * pred
    np.testing.assert_allclose(post0, expect / expect.sum())
    # impossible observation
    assert belief_update(spec, b, up, 0) is None or \
        belief_update(spec, b, up, 0)[0] >= 0  # Z[up,0]=0 -> None
    assert belief_update(spec, b, up, 0) is None


def test_crossing_numerators_on_balanced_pose(cfg, cs):
    g = build_grid(
        ((cfg.grid_origin[0], cfg.grid_origin[0]
          + cfg.grid_cols * cfg.grid_cell),
         (cfg.grid_origin[1], cfg.grid_origin[1]
          + cfg.grid_rows * cfg.grid_cell)),
        (cfg.grid_cols, cfg.grid_rows), cfg.obstacles, cfg.y_g)

    class _One:
        states = np.asarray([cfg.x0], dtype=float)
        outputs = np.asarray([[0.384, 0.352]], dtype=float)

    counts = np.full(g.m, 5)
    num = crossing_numerators(g, _One(), cfg.model, cs, dt=cfg.probe_dt,
                              counts=counts)
    assert num.shape == (N_ACTIONS, g.m)
    s = g.node_of([0.384, 0.352])
    # the witness construction can only credit the sample's own cell
    assert num.sum() == num[:, s].sum()
    # every admissible crossing is validated, so entries are 0/1 here
    assert set(np.unique(num)) <= {0.0, 1.0}
    assert num[:, s].sum() >= 1.0
