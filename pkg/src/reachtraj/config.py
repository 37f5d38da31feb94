"""Pipeline configuration: one plain-text file drives every stage.

The file is hierarchical key/value (YAML subset); keys carry explicit
units (_m, _s, _rad, _nm) where dimensional.  Validation happens before
any stage runs and reports the dotted key path plus the source line.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import yaml

from . import model as mdl
from .constraints import ConstraintParams


class ConfigError(Exception):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


def _line_of(text: str, key: str) -> str:
    """Best-effort source line of the deepest key in a dotted path."""
    leaf = key.split(".")[-1]
    for i, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0]
        if stripped.strip().startswith(leaf + ":"):
            return f" (line {i})"
    return ""


class _Section:
    """Typed accessor over one nesting level with path-tagged errors."""

    def __init__(self, data: dict, path: str, text: str):
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a mapping"
                              f"{_line_of(text, path)}")
        self._d = data
        self._path = path
        self._text = text
        self._seen = set()

    def _full(self, key):
        return f"{self._path}.{key}" if self._path else key

    def child(self, key) -> "_Section":
        self._seen.add(key)
        if key not in self._d:
            raise ConfigError(f"missing section {self._full(key)!r}")
        return _Section(self._d[key], self._full(key), self._text)

    _MISSING = object()

    def get(self, key, kind, default=_MISSING, shape=None, low=None,
            high=None, choices=None):
        self._seen.add(key)
        full = self._full(key)
        where = _line_of(self._text, full)
        if key not in self._d or self._d[key] is None:
            if default is self._MISSING:
                raise ConfigError(f"missing key {full!r}")
            return default
        v = self._d[key]
        try:
            if kind is float:
                v = float(v)
            elif kind is int:
                if isinstance(v, float) and v != int(v):
                    raise ValueError
                v = int(v)
            elif kind is bool:
                if not isinstance(v, bool):
                    raise ValueError
            elif kind is str:
                v = str(v)
            elif kind is np.ndarray:
                v = np.asarray(v, dtype=float)
                if v.ndim == 0:
                    v = v.reshape(1)
        except (TypeError, ValueError):
            raise ConfigError(f"{full}: expected {kind.__name__}, got "
                              f"{v!r}{where}") from None
        if shape is not None and tuple(np.shape(v)) != tuple(shape):
            raise ConfigError(f"{full}: expected shape {shape}, got "
                              f"{np.shape(v)}{where}")
        if low is not None and np.any(np.asarray(v, dtype=float) < low):
            raise ConfigError(f"{full}: must be >= {low}{where}")
        if high is not None and np.any(np.asarray(v, dtype=float) > high):
            raise ConfigError(f"{full}: must be <= {high}{where}")
        if choices is not None and v not in choices:
            raise ConfigError(f"{full}: must be one of {choices}{where}")
        return v

    def warn_unknown(self):
        extra = set(self._d) - self._seen
        if extra:
            raise ConfigError(f"unknown key(s) under "
                              f"{self._path or '<root>'}: "
                              f"{sorted(extra)}"
                              f"{_line_of(self._text, sorted(extra)[0])}")


def _cov(section: _Section, key: str, dim: int) -> np.ndarray:
    """Covariance given either as a diagonal vector or a full matrix."""
    raw = section.get(key, np.ndarray)
    if raw.ndim == 1:
        if raw.shape[0] != dim:
            raise ConfigError(f"{section._full(key)}: diagonal must have "
                              f"length {dim}")
        raw = np.diag(raw)
    if raw.shape != (dim, dim):
        raise ConfigError(f"{section._full(key)}: expected ({dim},{dim}) "
                          f"matrix or length-{dim} diagonal")
    try:
        np.linalg.cholesky(raw + 0.0)
    except np.linalg.LinAlgError:
        raise ConfigError(f"{section._full(key)}: not positive definite") \
            from None
    return raw


@dataclass
class PipelineConfig:
    model: mdl.RobotModel
    constraints: ConstraintParams
    x0: np.ndarray
    # sampling
    n_samples: int
    sample_seed: int
    mu_x: np.ndarray
    sigma_x: np.ndarray
    mu_u: np.ndarray
    sigma_u: np.ndarray
    # goal gate
    y_g: np.ndarray
    kappa: float
    # grid / planner
    grid_origin: np.ndarray
    grid_cell: float
    grid_cols: int
    grid_rows: int
    obstacles: list
    gamma: float
    k_r: float
    eta_goal: float
    eta_obstacle: float
    horizon: int | None
    probe_dt: float
    # reachability
    dt: float
    n_u: int
    n_t: int
    mode: str
    delta_b: float | None
    n_b_max: int
    reach_seed: int
    reach_sigma_u: np.ndarray
    # segment chaining (reach parameters of the optimize stage)
    chain_dt: float
    chain_n_u: int
    chain_n_t: int
    chain_n_b_max: int
    chain_seed: int
    chain_sigma_u: np.ndarray
    attractor_kp: float
    attractor_kd: float
    attractor_a_max: float
    attractor_k_null: float
    overshoot: float
    # nlp
    q_u: np.ndarray
    q_c: np.ndarray
    q_x: np.ndarray
    q_y: np.ndarray
    tol_goal: float
    max_sqp_iter: int
    slack_steps: int
    # plumbing
    out_dir: str = "out"
    threads: int = 1
    raw: dict = field(default_factory=dict)


def _build_model(sec: _Section) -> mdl.RobotModel:
    base = sec.child("base")
    base_link = mdl.Link(base.get("mass_kg", float, low=0.0),
                         base.get("inertia_kgm2", float, low=0.0),
                         tuple(base.get("com_m", np.ndarray, shape=(2,),
                                        default=np.zeros(2))))
    base.warn_unknown()
    joints_raw = sec.get("joints", list)
    links_raw = sec.get("links", list)
    if not isinstance(joints_raw, list) or not isinstance(links_raw, list):
        raise ConfigError("robot.joints and robot.links must be lists")
    if len(joints_raw) != len(links_raw):
        raise ConfigError("robot.joints and robot.links lengths differ")
    joints, links = [], []
    for i, (j, l) in enumerate(zip(joints_raw, links_raw)):
        js = _Section(j, f"robot.joints[{i}]", sec._text)
        ls = _Section(l, f"robot.links[{i}]", sec._text)
        kind = js.get("kind", str, default=mdl.REVOLUTE,
                      choices=(mdl.REVOLUTE, mdl.PRISMATIC))
        joints.append(mdl.Joint(
            kind, 0,
            tuple(js.get("origin_m", np.ndarray, shape=(2,),
                         default=np.zeros(2))),
            tuple(js.get("axis", np.ndarray, shape=(2,),
                         default=np.zeros(2)))))
        links.append(mdl.Link(
            ls.get("mass_kg", float, low=0.0),
            ls.get("inertia_kgm2", float, low=0.0),
            tuple(ls.get("com_m", np.ndarray, shape=(2,),
                         default=np.zeros(2)))))
    contact = sec.child("contact")
    output = sec.child("output")
    robot = mdl.planar_floating_chain(
        base_link, joints, links,
        contact_body=contact.get("body", int, low=0),
        contact_offset=tuple(contact.get("offset_m", np.ndarray,
                                         shape=(2,))),
        output=("point", output.get("body", int, low=0),
                tuple(output.get("offset_m", np.ndarray, shape=(2,)))),
        gravity=sec.get("gravity_mps2", float, default=9.81))
    contact.warn_unknown()
    output.warn_unknown()
    sec.warn_unknown()
    return robot


def load_config(path, overrides: dict | None = None) -> PipelineConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config parse error: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    root = _Section(data, "", text)

    robot = _build_model(root.child("robot"))
    n_q, n_u_dim, n_x = robot.n_q, robot.n_u, robot.n_x

    c = root.child("constraints")
    def _bounds(key, n):
        v = c.get(key, np.ndarray, shape=(n,))
        return v
    params = ConstraintParams(
        q_lower=_bounds("q_lower_rad", n_q),
        q_upper=_bounds("q_upper_rad", n_q),
        qd_lower=_bounds("qd_lower_radps", n_q),
        qd_upper=_bounds("qd_upper_radps", n_q),
        u_lower=_bounds("u_lower_nm", n_u_dim),
        u_upper=_bounds("u_upper_nm", n_u_dim),
        k_mu=c.get("friction_coeff", float, default=0.4, low=0.0),
        d_x=c.get("support_halfwidth_m", float, default=0.05, low=0.0),
        f_z_min=c.get("min_normal_force_n", float, default=1.0, low=0.0),
        eps=c.get("equality_tol", float, default=1e-7, low=0.0),
        contact_pos_tol=c.get("contact_pos_tol_m", float, default=1e-6,
                              low=0.0),
        contact_vel_tol=c.get("contact_vel_tol_mps", float, default=1e-3,
                              low=0.0),
        attractor_margin=c.get("attractor_margin", float, default=0.0,
                               low=0.0, high=0.999),
    )
    if np.any(params.q_lower > params.q_upper) or \
            np.any(params.qd_lower > params.qd_upper) or \
            np.any(params.u_lower > params.u_upper):
        raise ConfigError("constraints: lower bound exceeds upper bound")
    c.warn_unknown()

    ini = root.child("initial_state")
    x0 = np.concatenate([ini.get("q_rad", np.ndarray, shape=(n_q,)),
                         ini.get("qd_radps", np.ndarray, shape=(n_q,),
                                 default=np.zeros(n_q))])
    ini.warn_unknown()

    s = root.child("sampling")
    mu_x = s.get("mean_x", np.ndarray, shape=(n_x,), default=x0)
    cfg_sampling = dict(
        n_samples=s.get("n_samples", int, low=1),
        sample_seed=s.get("seed", int),
        mu_x=mu_x,
        sigma_x=_cov(s, "cov_x", n_x),
        mu_u=s.get("mean_u_nm", np.ndarray, shape=(n_u_dim,)),
        sigma_u=_cov(s, "cov_u", n_u_dim),
    )
    s.warn_unknown()

    g = root.child("goal")
    cfg_goal = dict(
        y_g=g.get("output_m", np.ndarray, shape=(2,)),
        kappa=g.get("kappa", float, default=5.991, low=0.0),
    )
    g.warn_unknown()

    gr = root.child("grid")
    cfg_grid = dict(
        grid_origin=gr.get("origin_m", np.ndarray, shape=(2,)),
        grid_cell=gr.get("cell_m", float, low=1e-12),
        grid_cols=gr.get("cols", int, low=1),
        grid_rows=gr.get("rows", int, low=1),
        obstacles=[tuple(int(v) for v in ob) for ob in
                   gr.get("obstacles", list, default=[])],
    )
    for ob in cfg_grid["obstacles"]:
        if len(ob) != 2 or not (0 <= ob[0] < cfg_grid["grid_cols"]) or \
                not (0 <= ob[1] < cfg_grid["grid_rows"]):
            raise ConfigError(f"grid.obstacles: cell {ob} outside the "
                              f"{cfg_grid['grid_cols']}x"
                              f"{cfg_grid['grid_rows']} grid"
                              f"{_line_of(text, 'obstacles')}")
    gr.warn_unknown()

    p = root.child("planner")
    cfg_pomdp = dict(
        gamma=p.get("discount", float, default=0.95, low=0.0, high=1.0),
        k_r=p.get("reward_scale", float, default=1.0),
        eta_goal=p.get("goal_bonus", float, default=100.0),
        eta_obstacle=p.get("obstacle_penalty", float, default=100.0),
        horizon=p.get("horizon", int, default=0, low=0) or None,
        probe_dt=p.get("probe_dt_s", float, default=0.02, low=1e-9),
    )
    p.warn_unknown()

    r = root.child("reach")
    cfg_reach = dict(
        dt=r.get("dt_s", float, low=1e-9),
        n_u=r.get("n_u", int, low=1),
        n_t=r.get("n_t", int, low=1),
        mode=r.get("mode", str, default="boundary",
                   choices=("full", "boundary")),
        delta_b=r.get("delta_b_m", float, default=0.0, low=0.0) or None,
        n_b_max=r.get("n_b_max", int, default=256, low=1),
        reach_seed=r.get("seed", int),
        reach_sigma_u=_cov(r, "cov_u", n_u_dim),
    )
    r.warn_unknown()

    root._seen.add("chain")
    ch = _Section(data.get("chain", {}), "chain", text)
    cfg_chain = dict(
        chain_dt=ch.get("dt_s", float, default=cfg_reach["dt"], low=1e-9),
        chain_n_u=ch.get("n_u", int, default=cfg_reach["n_u"], low=1),
        chain_n_t=ch.get("n_t", int, default=cfg_reach["n_t"], low=1),
        chain_n_b_max=ch.get("n_b_max", int,
                             default=cfg_reach["n_b_max"], low=1),
        chain_seed=ch.get("seed", int, default=cfg_reach["reach_seed"]),
        chain_sigma_u=(_cov(ch, "cov_u", n_u_dim) if "cov_u" in ch._d
                       else cfg_reach["reach_sigma_u"]),
        attractor_kp=ch.get("attractor_kp", float, default=0.0, low=0.0),
        attractor_kd=ch.get("attractor_kd", float, default=0.0, low=0.0),
        attractor_a_max=ch.get("attractor_accel_max_mps2", float, default=6.0,
                               low=0.0),
        attractor_k_null=ch.get("attractor_k_null", float, default=0.0,
                                low=0.0),
        overshoot=ch.get("overshoot_m", float, default=0.0, low=0.0),
    )
    ch.warn_unknown()

    n = root.child("nlp")
    def _weight(key, dim, default_scale):
        v = n.get(key, np.ndarray, default=np.full(dim, default_scale))
        if v.ndim == 1:
            if v.shape[0] != dim:
                raise ConfigError(f"nlp.{key}: need length {dim}")
            return np.diag(v)
        if v.shape != (dim, dim):
            raise ConfigError(f"nlp.{key}: need ({dim},{dim})")
        return v
    cfg_nlp = dict(
        q_u=_weight("weight_u", n_u_dim, 1e-4),
        q_c=_weight("weight_wrench", 3, 1e-6),
        q_x=_weight("weight_state", n_x, 1e-6),
        q_y=_weight("weight_output", 2, 10.0),
        tol_goal=n.get("tol_goal_m", float, default=1e-3, low=0.0),
        max_sqp_iter=n.get("max_iterations", int, default=200, low=1),
        slack_steps=n.get("slack_steps", int, default=2, low=0),
    )
    n.warn_unknown()

    out_dir = root.get("out_dir", str, default="out")
    root.warn_unknown()

    cfg = PipelineConfig(model=robot, constraints=params, x0=x0,
                         **cfg_sampling, **cfg_goal, **cfg_grid,
                         **cfg_pomdp, **cfg_reach, **cfg_chain, **cfg_nlp,
                         out_dir=out_dir, raw=data)
    if overrides:
        for k, v in overrides.items():
            if v is not None:
                setattr(cfg, k, v)
    _check_consistency(cfg)
    return cfg


def _check_consistency(cfg: PipelineConfig):
    ok_x = cfg.x0.shape == (cfg.model.n_x,)
    if not ok_x:
        raise ConfigError("initial_state dimension mismatch with robot")
    span_x = cfg.grid_origin[0] + cfg.grid_cols * cfg.grid_cell
    span_y = cfg.grid_origin[1] + cfg.grid_rows * cfg.grid_cell
    if not (cfg.grid_origin[0] <= cfg.y_g[0] <= span_x and
            cfg.grid_origin[1] <= cfg.y_g[1] <= span_y):
        raise ConfigError("goal.output_m lies outside the planner grid")
