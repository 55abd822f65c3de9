"""Command-line front end: explore, fit, cross-validate, evaluate, simulate.

Every run is driven by one JSON config describing the model, the kernel, and
the stage parameters, so results are reproducible from the config alone.
Artifacts (datasets, surrogates, reports, curves) are plain JSON or CSV with
no timestamps; running the same command twice writes identical bytes.
Failures print a one-line JSON object to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .evaluate import center_curve, cross_validate, save_cv_report, simulate_feedback, write_curves
from .explore import (
    ExploreConfig,
    candidate_grid,
    candidate_modes,
    candidate_sobol,
    farthest_point_order,
    load_dataset,
    run_exploration,
    save_dataset,
    solve_testset,
)
from .hermite import load_surrogate, save_surrogate
from .kernels import StructuredKernel, WendlandC4
from .models import build_model
from .openloop import OpenLoopConfig
from .riccati import quadratic_matrix
from .vkoga import VkogaConfig, run_vkoga, write_trace

CONFIG_SCHEMA = "vfcontrol-config-v1"
RUN_SCHEMA = "vfcontrol-run-v1"


class ConfigError(ValueError):
    pass


def load_config(path) -> dict:
    with open(path) as fh:
        cfg = json.load(fh)
    if cfg.get("schema") != CONFIG_SCHEMA:
        raise ConfigError(f"unsupported config schema {cfg.get('schema')!r}, expected {CONFIG_SCHEMA!r}")
    if "model" not in cfg or "name" not in cfg["model"]:
        raise ConfigError("config needs a model section with a name")
    return cfg


def model_from_config(cfg: dict):
    section = cfg["model"]
    return build_model(section["name"], section.get("params", {}))


def kernel_from_config(cfg: dict, dim: int, structured: bool):
    section = cfg.get("kernel", {})
    if "gamma" not in section:
        raise ConfigError("config needs kernel.gamma")
    gamma = float(section["gamma"])
    if structured:
        gamma = float(section.get("gamma_structured", gamma))
        return StructuredKernel(WendlandC4(dim=dim, gamma=gamma))
    return WendlandC4(dim=dim, gamma=gamma)


def candidates_from_config(spec: dict, model) -> np.ndarray:
    kind = spec.get("kind")
    if kind == "grid":
        return candidate_grid(spec["bounds"], int(spec["n_per_axis"]))
    if kind == "sobol":
        return candidate_sobol(spec["bounds"], int(spec["n"]), int(spec.get("seed", 0)))
    if kind == "modes":
        grid_side = int(spec.get("grid_side", model.params.get("grid_side", 0)))
        if grid_side <= 0:
            raise ConfigError("mode candidates need a grid side")
        return candidate_modes(
            grid_side,
            amplitude_range=tuple(spec.get("amplitude_range", (-0.25, 0.5))),
            n_amplitude=int(spec.get("n_amplitude", 7)),
            frequencies=tuple(spec.get("frequencies", (1, 2))),
        )
    raise ConfigError(f"unknown candidate kind {kind!r}")


def solver_from_config(spec: dict) -> OpenLoopConfig:
    known = set(OpenLoopConfig.__dataclass_fields__)
    extra = set(spec) - known
    if extra:
        raise ConfigError(f"unknown solver options {sorted(extra)}")
    return OpenLoopConfig(**spec)


def vkoga_from_config(spec: dict, max_centers=None, checkpoints=()) -> VkogaConfig:
    return VkogaConfig(
        max_centers=int(max_centers if max_centers is not None else spec.get("max_centers", 100)),
        eps_tol_f=float(spec.get("eps_tol_f", 0.0)),
        cg_tol=float(spec.get("cg_tol", 1e-10)),
        cg_max_iter=spec.get("cg_max_iter"),
        nugget=float(spec.get("nugget", 0.0)),
        checkpoints=checkpoints,
    )


def _testset_states(cfg: dict, model) -> np.ndarray:
    section = cfg.get("evaluate", {})
    spec = section.get("testset")
    if spec is None:
        raise ConfigError("config needs evaluate.testset")
    pool = candidates_from_config(spec, model)
    size = int(spec.get("size", min(8, pool.shape[0])))
    idx, _ = farthest_point_order(pool, size)
    return pool[idx]


def cmd_explore(args) -> int:
    cfg = load_config(args.config)
    model = model_from_config(cfg)
    qm = quadratic_matrix(model)
    section = cfg.get("explore", {})
    candidates = candidates_from_config(section.get("candidates", {}), model)
    horizon = section.get("horizon")
    explore_cfg = ExploreConfig(
        n_trajectories=int(section.get("n_trajectories", 40)),
        eps_tol_d=float(section.get("eps_tol_d", 0.0)),
        horizon=None if horizon is None else float(horizon),
        hjb_tol=float(section.get("hjb_tol", 1e-6)),
        monotone_tol=float(section.get("monotone_tol", 1e-9)),
        solver=solver_from_config(section.get("solver", {})),
    )
    dataset = run_exploration(model, candidates, qm, explore_cfg)
    save_dataset(dataset, args.out)
    print(json.dumps({"trajectories": dataset.n_trajectories, "samples": dataset.n_samples, "out": args.out}))
    return 0


def cmd_fit(args) -> int:
    cfg = load_config(args.config)
    model = model_from_config(cfg)
    dataset = load_dataset(getattr(args, "in"))
    structured = args.variant == "structured"
    kernel = kernel_from_config(cfg, model.dim_state, structured)
    qm = quadratic_matrix(model) if structured else None
    pts, vals, gds = dataset.flattened(include_origin=not structured)
    config = vkoga_from_config(cfg.get("fit", {}), max_centers=args.centers)
    result = run_vkoga(kernel, pts, vals, gds, config=config, q_matrix=qm)
    save_surrogate(result.surrogate, args.out)
    if args.trace:
        write_trace(result, args.trace)
    print(
        json.dumps(
            {
                "variant": args.variant,
                "centers": result.surrogate.n_centers,
                "final_residual": result.final_residual,
                "out": args.out,
            }
        )
    )
    return 0


def cmd_cv(args) -> int:
    cfg = load_config(args.config)
    model = model_from_config(cfg)
    dataset = load_dataset(getattr(args, "in"))
    structured = args.variant == "structured"
    kernel = kernel_from_config(cfg, model.dim_state, structured)
    qm = quadratic_matrix(model) if structured else None
    config = vkoga_from_config(cfg.get("fit", {}))
    report = cross_validate(
        kernel,
        dataset,
        config=config,
        n_folds=args.folds,
        q_matrix=qm,
        include_origin=not structured,
    )
    save_cv_report(report, args.out)
    print(json.dumps({"max_residual": report.max_residual, "mean_residual": report.mean_residual, "out": args.out}))
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    model = model_from_config(cfg)
    qm = quadratic_matrix(model)
    dataset = load_dataset(getattr(args, "in"))
    section = cfg.get("evaluate", {})
    states = _testset_states(cfg, model)
    solver = solver_from_config(cfg.get("explore", {}).get("solver", {}))
    references = solve_testset(model, states, qm, solver, threads=args.threads)
    counts = section.get("counts", [10, 20, 40, 80])
    horizon = section.get("horizon")
    kernel_plain = kernel_from_config(cfg, model.dim_state, structured=False)
    kernel_structured = kernel_from_config(cfg, model.dim_state, structured=True)
    rows = center_curve(
        model,
        dataset,
        kernel_plain,
        kernel_structured,
        qm,
        counts,
        references,
        config=vkoga_from_config(cfg.get("fit", {})),
        horizon=None if horizon is None else float(horizon),
        threads=args.threads,
    )
    write_curves(rows, args.out)
    print(json.dumps(rows[-1]))
    return 0


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    model = model_from_config(cfg)
    surrogate = load_surrogate(args.surrogate)
    x0 = np.asarray(json.loads(args.x0), dtype=float)
    if x0.shape != (model.dim_state,):
        raise ConfigError(f"start state has shape {x0.shape}, model needs ({model.dim_state},)")
    run = simulate_feedback(model, surrogate, x0, horizon=args.horizon)
    doc = {
        "schema": RUN_SCHEMA,
        "x0": x0.tolist(),
        "cost": run.cost,
        "escaped": run.escaped,
        "times": run.times.tolist(),
        "states": run.states.tolist(),
    }
    with open(args.out, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    print(json.dumps({"cost": run.cost, "escaped": run.escaped, "out": args.out}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vfcontrol", description="Value-function surrogates for feedback control.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("explore", help="generate value data along optimal trajectories")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_explore)

    p = sub.add_parser("fit", help="greedy surrogate fit from a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--in", dest="in", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=["plain", "structured"], default="plain")
    p.add_argument("--centers", type=int, default=None)
    p.add_argument("--trace", default=None)
    p.set_defaults(fn=cmd_fit)

    p = sub.add_parser("cv", help="trajectory-level cross-validation")
    p.add_argument("--config", required=True)
    p.add_argument("--in", dest="in", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=["plain", "structured"], default="plain")
    p.add_argument("--folds", type=int, default=5)
    p.set_defaults(fn=cmd_cv)

    p = sub.add_parser("evaluate", help="closed-loop error versus center count")
    p.add_argument("--config", required=True)
    p.add_argument("--in", dest="in", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("simulate", help="closed-loop rollout under a fitted surrogate")
    p.add_argument("--config", required=True)
    p.add_argument("--surrogate", required=True)
    p.add_argument("--x0", required=True, help="start state as a JSON list")
    p.add_argument("--horizon", type=float, default=20.0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_simulate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, ValueError, RuntimeError) as err:
        print(json.dumps({"error": str(err)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
