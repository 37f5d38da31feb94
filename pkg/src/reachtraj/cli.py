"""Pipeline orchestration and artifact plumbing.

Subcommands: sample | plan | reach | optimize | bench | verify | run.
Each stage loads upstream artifacts from disk, so runs can be staged or
executed end to end (`run`).  Bulk numerics are CSV, summaries JSON, and
a manifest lists every artifact with its SHA-256 so reruns are checkable
byte for byte.

Exit codes: 0 ok, 1 verification failure, 2 config error,
3 goal outside the feasible-output ellipsoid, 4 planning failure,
5 reachability failure, 6 NLP failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import model as mdl
from .config import ConfigError, PipelineConfig, load_config
from .constraints import ConstraintSet
from .feasibility import (FeasibleSampleSet, GaussianSpec, build_feasible_set,
                          ellipsoid_contains, output_moments)
from .planner import (PlanFailed, PlanResult, build_grid, build_pomdp,
                      solve_policy)
from .reachability import (FrontierEmpty, ImmediateInfeasible, InputSpec,
                           boundary_states, output_hull, propagate_step,
                           reach)
from .trajopt import (ChainFailed, NlpFailed, NlpWeights, Trajectory, chain,
                      nlp_cost)

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_CONFIG = 2
EXIT_GOAL = 3
EXIT_PLAN = 4
EXIT_REACH = 5
EXIT_NLP = 6


class GoalInfeasible(Exception):
    """Goal output lies outside the 95% feasible-output ellipsoid."""


# ----------------------------------------------------------------------
# artifact helpers
# ----------------------------------------------------------------------

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_manifest(out_dir, names) -> str:
    manifest = {"files": {n: _sha256(os.path.join(out_dir, n))
                          for n in sorted(names)}}
    path = os.path.join(out_dir, "manifest.json")
    _write_json(path, manifest)
    return path


def constraint_set(cfg: PipelineConfig) -> ConstraintSet:
    q0, _ = cfg.model.split_state(cfg.x0)
    ref = mdl.contact_frame_pose(cfg.model, q0)
    return ConstraintSet(cfg.model, cfg.constraints, contact_ref=ref)


# ----------------------------------------------------------------------
# stages
# ----------------------------------------------------------------------

def stage_sample(cfg: PipelineConfig, out_dir) -> FeasibleSampleSet:
    cs = constraint_set(cfg)
    spec = GaussianSpec(cfg.mu_x, cfg.sigma_x, cfg.mu_u, cfg.sigma_u,
                        cfg.sample_seed)
    samples = build_feasible_set(cs, cfg.model, spec, cfg.n_samples,
                                 dt=cfg.dt, threads=cfg.threads)
    samples.save(os.path.join(out_dir, "samples.csv"))
    return samples


def _load_samples(cfg: PipelineConfig, out_dir) -> FeasibleSampleSet:
    path = os.path.join(out_dir, "samples.csv")
    if not os.path.exists(path):
        raise ConfigError(f"missing upstream artifact {path}; "
                          f"run `sample` first")
    return FeasibleSampleSet.load(path, cfg.model.n_u)


def stage_gate(cfg: PipelineConfig, samples: FeasibleSampleSet, out_dir):
    """Second-order output moments of the feasible set + goal gate."""
    if len(samples) == 0:
        raise GoalInfeasible("feasible sample set is empty")
    mu_x = samples.states.mean(axis=0)
    sigma_x = np.cov(samples.states.T) if len(samples) > 1 \
        else np.zeros((cfg.model.n_x, cfg.model.n_x))
    moments = output_moments(cfg.model, mu_x, sigma_x, kappa=cfg.kappa)
    contained = ellipsoid_contains(moments, cfg.y_g)
    _write_json(os.path.join(out_dir, "moments.json"), {
        "mean_y": [float(v) for v in moments.mu_y],
        "cov_y": [[float(v) for v in row] for row in moments.sigma_y],
        "kappa": float(moments.kappa),
        "goal": [float(v) for v in cfg.y_g],
        "goal_contained": bool(contained),
        "n_feasible": len(samples),
    })
    if not contained:
        raise GoalInfeasible(
            f"goal {cfg.y_g.tolist()} outside the {cfg.kappa:.3f}-scaled "
            f"output ellipsoid")
    return moments


def stage_plan(cfg: PipelineConfig, samples: FeasibleSampleSet,
               out_dir) -> PlanResult:
    bounds = ((cfg.grid_origin[0],
               cfg.grid_origin[0] + cfg.grid_cols * cfg.grid_cell),
              (cfg.grid_origin[1],
               cfg.grid_origin[1] + cfg.grid_rows * cfg.grid_cell))
    grid = build_grid(bounds, (cfg.grid_cols, cfg.grid_rows),
                      cfg.obstacles, cfg.y_g)
    start = grid.node_of(mdl.output(cfg.model, cfg.x0))
    if start is None:
        raise PlanFailed("initial output lies outside the gridded "
                         "workspace")
    if start in grid.obstacles:
        raise PlanFailed("initial output lies inside an obstacle cell")
    spec = build_pomdp(grid, samples, cfg.model, cfg.dt, gamma=cfg.gamma,
                       k_r=cfg.k_r, eta_goal=cfg.eta_goal,
                       eta_obs=cfg.eta_obstacle, horizon=cfg.horizon,
                       cs=constraint_set(cfg), probe_dt=cfg.probe_dt)
    b0 = np.zeros(grid.m)
    b0[start] = 1.0
    plan = solve_policy(spec, b0)
    _write_json(os.path.join(out_dir, "plan.json"), plan.to_dict())
    return plan


def _load_plan(cfg: PipelineConfig, out_dir) -> PlanResult:
    path = os.path.join(out_dir, "plan.json")
    if not os.path.exists(path):
        raise ConfigError(f"missing upstream artifact {path}; "
                          f"run `plan` first")
    with open(path) as fh:
        d = json.load(fh)
    return PlanResult(d["actions"], d["nodes"],
                      [np.array(c) for c in d["subregions"]],
                      d["n_pi"], d["value"])


def _reach_params(cfg: PipelineConfig) -> dict:
    return {
        "input_spec": InputSpec(cfg.mu_u, cfg.reach_sigma_u,
                                cfg.reach_seed),
        "N_u": cfg.n_u, "N_t": cfg.n_t, "dt": cfg.dt, "mode": cfg.mode,
        "delta_b": cfg.delta_b, "n_b_max": cfg.n_b_max,
        "slack_steps": cfg.slack_steps, "max_iter": cfg.max_sqp_iter,
    }


def _chain_params(cfg: PipelineConfig) -> dict:
    params = {
        "input_spec": InputSpec(cfg.mu_u, cfg.chain_sigma_u,
                                cfg.chain_seed),
        "N_u": cfg.chain_n_u, "N_t": cfg.chain_n_t, "dt": cfg.chain_dt,
        "mode": cfg.mode, "delta_b": cfg.delta_b,
        "n_b_max": cfg.chain_n_b_max, "slack_steps": cfg.slack_steps,
        "max_iter": cfg.max_sqp_iter, "overshoot": cfg.overshoot,
    }
    if cfg.attractor_kp > 0.0:
        params["attractor"] = {"kp": cfg.attractor_kp,
                               "kd": cfg.attractor_kd,
                               "a_max": cfg.attractor_a_max,
                               "k_null": cfg.attractor_k_null}
    return params


def stage_reach(cfg: PipelineConfig, out_dir, target=None):
    """Standalone reachable-set run from the configured initial state."""
    cs = constraint_set(cfg)
    rp = _reach_params(cfg)
    rs = reach(cs, cfg.model, cfg.x0, rp["input_spec"], rp["N_u"],
               rp["N_t"], rp["dt"], mode=rp["mode"], target=target,
               delta_b=rp["delta_b"], n_b_max=rp["n_b_max"])
    rs.save_csv(os.path.join(out_dir, "reach.csv"))
    _write_json(os.path.join(out_dir, "reach_report.json"),
                rs.report.to_dict())
    return rs


def stage_optimize(cfg: PipelineConfig, plan: PlanResult, out_dir):
    cs = constraint_set(cfg)
    weights = NlpWeights(cfg.q_u, cfg.q_c, cfg.q_x, cfg.q_y)
    result = chain(cs, cfg.model, weights, cfg.x0, plan,
                   _chain_params(cfg), tol_goal=cfg.tol_goal,
                   y_goal=cfg.y_g)
    result.trajectory.save_csv(os.path.join(out_dir, "trajectory.csv"))
    reach_files = []
    for j, rs in enumerate(result.reach_sets, start=1):
        name = f"reach_segment_{j:02d}.csv"
        rs.save_csv(os.path.join(out_dir, name))
        reach_files.append(name)
    _write_json(os.path.join(out_dir, "trajectory.json"), {
        "cost": float(result.trajectory.cost),
        "dt": float(result.trajectory.dt),
        "N": int(result.trajectory.N),
        "residuals": result.trajectory.residuals,
        "segments": result.segments,
        "boundaries": [int(b) for b in result.boundaries],
        "targets": [[float(v) for v in t] for t in result.targets],
        "goal": [float(v) for v in cfg.y_g],
        "tol_goal": float(cfg.tol_goal),
        "reach_files": reach_files,
    })
    return result, reach_files


def run_pipeline(cfg: PipelineConfig, out_dir) -> dict:
    """sample -> project/certify -> moment gate -> plan -> reach+NLP."""
    os.makedirs(out_dir, exist_ok=True)
    samples = stage_sample(cfg, out_dir)
    stage_gate(cfg, samples, out_dir)
    plan = stage_plan(cfg, samples, out_dir)
    _, reach_files = stage_optimize(cfg, plan, out_dir)
    names = ["samples.csv", "moments.json", "plan.json",
             "trajectory.csv", "trajectory.json"] + reach_files
    write_manifest(out_dir, names)
    return {"artifacts": names}


# ----------------------------------------------------------------------
# bench
# ----------------------------------------------------------------------

def run_bench(cfg: PipelineConfig, out_dir, n_u=None, n_t=None,
              wall_cap_s: float = 120.0, mem_cap_mb: float = 256.0):
    """Per-step QP-count/wall-time table for both propagation modes.

    A mode stops at the step where the wall or memory cap is exceeded;
    that step and any remaining ones are recorded as infeasible.
    """
    cs = constraint_set(cfg)
    model = cfg.model
    n_u = cfg.n_u if n_u is None else int(n_u)
    n_t = cfg.n_t if n_t is None else int(n_t)
    ispec = InputSpec(cfg.mu_u, cfg.reach_sigma_u, cfg.reach_seed)
    rows = []
    for mode in ("full", "boundary"):
        states = [cfg.x0.copy()]
        outputs = [mdl.output(model, cfg.x0)]
        t0 = time.perf_counter()
        capped = None
        for k in range(1, n_t + 1):
            if mode == "full" or len(states) == 1:
                frontier = states
            else:
                hull = output_hull(np.array(outputs))
                idx = boundary_states(states, np.array(outputs), hull,
                                      cfg.delta_b, n_b_max=cfg.n_b_max)
                frontier = [states[int(i)] for i in idx]
            # cap check before committing to the step's QP batch
            projected_qps = len(frontier) * n_u
            mem_mb = (len(states) + projected_qps) * model.n_x * 8 / 2 ** 20
            if time.perf_counter() - t0 > wall_cap_s or \
                    mem_mb > mem_cap_mb:
                capped = ("wall" if time.perf_counter() - t0 > wall_cap_s
                          else "memory")
                rows.append({"mode": mode, "step": k, "status": "infeasible",
                             "reason": capped,
                             "projected_qp_solves": projected_qps,
                             "wall_seconds": time.perf_counter() - t0})
                break
            step_t = time.perf_counter()
            new_states, _, _, n_qp = propagate_step(
                cs, model, frontier, ispec, n_u, cfg.dt, k)
            if not new_states:
                rows.append({"mode": mode, "step": k, "status": "empty",
                             "wall_seconds": time.perf_counter() - t0})
                break
            states.extend(new_states)
            outputs.extend(mdl.output(model, x) for x in new_states)
            rows.append({"mode": mode, "step": k, "status": "ok",
                         "qp_solves": n_qp, "frontier": len(frontier),
                         "stored_states": len(states),
                         "step_seconds": time.perf_counter() - step_t,
                         "wall_seconds": time.perf_counter() - t0})
        if capped is None and rows and rows[-1]["mode"] == mode and \
                rows[-1]["status"] == "ok" and rows[-1]["step"] == n_t:
            pass  # completed the horizon
    table = {"N_u": n_u, "N_t": n_t, "wall_cap_s": wall_cap_s,
             "mem_cap_mb": mem_cap_mb, "rows": rows}
    os.makedirs(out_dir, exist_ok=True)
    _write_json(os.path.join(out_dir, "bench.json"), table)
    with open(os.path.join(out_dir, "bench.csv"), "w") as fh:
        fh.write("mode,step,status,qp_solves,frontier,stored_states,"
                 "wall_seconds\n")
        for r in rows:
            fh.write(f"{r['mode']},{r['step']},{r['status']},"
                     f"{r.get('qp_solves', '')},{r.get('frontier', '')},"
                     f"{r.get('stored_states', '')},"
                     f"{r['wall_seconds']:.6f}\n")
    return table


# ----------------------------------------------------------------------
# verify
# ----------------------------------------------------------------------

def _load_trajectory(path, model) -> Trajectory:
    data = np.atleast_2d(np.loadtxt(path))
    n_x, n_u = model.n_x, model.n_u
    cols = 1 + n_x + n_u + 3
    if data.shape[1] != cols:
        raise ValueError(f"trajectory CSV has {data.shape[1]} columns, "
                         f"expected {cols}")
    t = data[:, 0]
    dt = float(t[1] - t[0]) if data.shape[0] > 1 else 0.0
    return Trajectory(data[:, 1:1 + n_x],
                      data[:, 1 + n_x:1 + n_x + n_u],
                      data[:, 1 + n_x + n_u:], dt, cost=0.0)


def run_verify(cfg: PipelineConfig, out_dir) -> list:
    """Re-check every persisted artifact's invariants; returns the list
    of violations (empty = clean)."""
    problems = []
    cs = constraint_set(cfg)
    model = cfg.model

    manifest_path = os.path.join(out_dir, "manifest.json")
    if os.path.exists(manifest_path):
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        for name, digest in manifest.get("files", {}).items():
            p = os.path.join(out_dir, name)
            if not os.path.exists(p):
                problems.append(f"manifest: missing file {name}")
            elif _sha256(p) != digest:
                problems.append(f"manifest: checksum mismatch for {name}")

    sp = os.path.join(out_dir, "samples.csv")
    if os.path.exists(sp):
        samples = FeasibleSampleSet.load(sp, model.n_u)
        for i, x in enumerate(samples.states):
            if cs.state_set_violation(x) > 0.0:
                problems.append(f"samples: state {i} violates the "
                                f"constrained-state set")
                break
        y = np.array([mdl.output(model, x) for x in samples.states])
        if len(samples) and not np.allclose(y, samples.outputs,
                                            atol=1e-12):
            problems.append("samples: stored outputs do not match f_y")

    for name in sorted(os.listdir(out_dir)):
        if not (name == "reach.csv" or name.startswith("reach_segment_")):
            continue
        if not name.endswith(".csv"):
            continue
        data = np.atleast_2d(np.loadtxt(os.path.join(out_dir, name)))
        states = data[:, 1:1 + model.n_x]
        worst = max(cs.step_violation(x) for x in states)
        if worst > 1e-6:
            problems.append(f"{name}: stored state violates constraints "
                            f"by {worst:.3e}")

    tp = os.path.join(out_dir, "trajectory.csv")
    mp = os.path.join(out_dir, "trajectory.json")
    if os.path.exists(tp):
        traj = _load_trajectory(tp, model)
        d = np.abs(traj.defects(model)).max() if traj.N else 0.0
        if d > 1e-8:
            problems.append(f"trajectory: dynamics defect {d:.3e} > 1e-8")
        worst = max(cs.step_violation(traj.states[k], u=traj.inputs[k],
                                      F_c=traj.wrenches[k])
                    for k in range(traj.N + 1))
        if worst > 1e-6:
            problems.append(f"trajectory: inequality residual "
                            f"{worst:.3e} > 1e-6")
        if os.path.exists(mp):
            with open(mp) as fh:
                meta = json.load(fh)
            y_end = mdl.output(model, traj.states[-1])
            err = float(np.linalg.norm(y_end - np.array(meta["goal"])))
            if err > meta.get("tol_goal", cfg.tol_goal):
                problems.append(f"trajectory: terminal output error "
                                f"{err:.3e} exceeds tolerance")
            # recompute the cost segment by segment
            weights = NlpWeights(cfg.q_u, cfg.q_c, cfg.q_x, cfg.q_y)
            bounds = meta["boundaries"]
            total = 0.0
            for j, y_d in enumerate(meta["targets"]):
                a, b = bounds[j], bounds[j + 1]
                sl = slice(a, b + 1)
                total += nlp_cost(model, weights, traj.states[sl],
                                  traj.inputs[sl], traj.wrenches[sl],
                                  traj.states[a], np.array(y_d))
            if abs(total - meta["cost"]) > 1e-9 * max(1.0, abs(total)):
                problems.append(f"trajectory: stored cost {meta['cost']} "
                                f"!= recomputed {total}")
    return problems


# ----------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="reachtraj",
        description="Contact-constrained trajectory generation pipeline")
    ap.add_argument("command",
                    choices=["run", "sample", "plan", "reach", "optimize",
                             "bench", "verify"])
    ap.add_argument("--config", required=True, help="pipeline config file")
    ap.add_argument("--out", default=None, help="artifact directory")
    ap.add_argument("--seed", type=int, default=None,
                    help="override sampling and propagation seeds")
    ap.add_argument("--threads", type=int, default=None,
                    help="worker cap for parallel stages")
    ap.add_argument("--mode", choices=["full", "boundary"], default=None,
                    help="override the propagation mode")
    ap.add_argument("--bench-n-u", type=int, default=None)
    ap.add_argument("--bench-n-t", type=int, default=None)
    ap.add_argument("--wall-cap-s", type=float, default=120.0)
    ap.add_argument("--mem-cap-mb", type=float, default=256.0)
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        overrides = {}
        if args.seed is not None:
            overrides["sample_seed"] = args.seed
            overrides["reach_seed"] = args.seed
        if args.threads is not None:
            overrides["threads"] = args.threads
        if args.mode is not None:
            overrides["mode"] = args.mode
        cfg = load_config(args.config, overrides)
        out_dir = args.out or cfg.out_dir
        os.makedirs(out_dir, exist_ok=True)

        if args.command == "run":
            run_pipeline(cfg, out_dir)
        elif args.command == "sample":
            samples = stage_sample(cfg, out_dir)
            stage_gate(cfg, samples, out_dir)
        elif args.command == "plan":
            samples = _load_samples(cfg, out_dir)
            stage_plan(cfg, samples, out_dir)
        elif args.command == "reach":
            stage_reach(cfg, out_dir)
        elif args.command == "optimize":
            plan = _load_plan(cfg, out_dir)
            _, reach_files = stage_optimize(cfg, plan, out_dir)
            names = [n for n in ("samples.csv", "moments.json",
                                 "plan.json", "trajectory.csv",
                                 "trajectory.json")
                     if os.path.exists(os.path.join(out_dir, n))]
            write_manifest(out_dir, names + reach_files)
        elif args.command == "bench":
            run_bench(cfg, out_dir, n_u=args.bench_n_u,
                      n_t=args.bench_n_t, wall_cap_s=args.wall_cap_s,
                      mem_cap_mb=args.mem_cap_mb)
        elif args.command == "verify":
            problems = run_verify(cfg, out_dir)
            if problems:
                for p in problems:
                    print(f"verify: {p}", file=sys.stderr)
                return EXIT_VERIFY
            print("verify: all artifacts clean")
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GoalInfeasible as exc:
        print(f"goal infeasible: {exc}", file=sys.stderr)
        return EXIT_GOAL
    except PlanFailed as exc:
        print(f"planning failed: {exc}", file=sys.stderr)
        return EXIT_PLAN
    except (ImmediateInfeasible, FrontierEmpty) as exc:
        print(f"reachability failed: {exc}", file=sys.stderr)
        return EXIT_REACH
    except ChainFailed as exc:
        code = EXIT_NLP if isinstance(exc.cause, NlpFailed) else EXIT_REACH
        print(f"chaining failed: {exc}", file=sys.stderr)
        return code
    except NlpFailed as exc:
        print(f"NLP failed: {exc}", file=sys.stderr)
        return EXIT_NLP


if __name__ == "__main__":
    sys.exit(main())
