"""Closed-loop evaluation of fitted value models.

A surrogate induces the feedback u(x) = -R^{-1} g(x)^T grad s(x) / 2.  Its
quality is measured by replaying the reference start states under that
feedback and comparing against the open-loop optimal paths on the reference
time grids:

    MRL2 = mean over references of sqrt( sum ||x_ref - x_fb||^2 / sum ||x_ref||^2 ).

Runs that blow up are stopped at an escape radius and extended by their last
state, so an unstable feedback scores badly instead of crashing the study.
Cross-validation holds out whole trajectories (samples within one trajectory
are strongly correlated, so sample-level folds would flatter the fit).
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .explore import Dataset, parallel_map
from .hermite import Surrogate, quadratic_surrogate
from .models import ControlAffineModel, optimal_control
from .numerics import IvpFailure, integrate_ivp
from .vkoga import VkogaConfig, run_vkoga

__all__ = [
    "ClosedLoopRun",
    "simulate_feedback",
    "mrl2_error",
    "evaluate_surrogate",
    "FoldResult",
    "CvReport",
    "cross_validate",
    "save_cv_report",
    "center_curve",
    "write_curves",
]

CV_SCHEMA = "vfcontrol-cv-v1"


@dataclass
class ClosedLoopRun:
    x0: np.ndarray
    times: np.ndarray
    states: np.ndarray
    cost: float
    escaped: bool
    interpolant: object = None  # integrator dense output, if the run has one

    def states_at(self, times) -> np.ndarray:
        """States on an arbitrary grid; past the end of the run the last state holds.

        Runs that kept their integrator interpolant evaluate through it, so
        the accuracy between accepted steps matches the solver tolerance.
        Reloaded or crashed runs fall back to linear interpolation on the
        stored nodes.
        """
        times = np.atleast_1d(np.asarray(times, dtype=float))
        t_end = self.times[-1]
        clipped = np.minimum(times, t_end)
        n = self.states.shape[1]
        if self.interpolant is not None:
            return np.asarray(self.interpolant.at(clipped))[:, :n]
        out = np.empty((times.size, n))
        for j in range(n):
            out[:, j] = np.interp(clipped, self.times, self.states[:, j])
        return out

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]


def simulate_feedback(
    model: ControlAffineModel,
    surrogate: Surrogate,
    x0: np.ndarray,
    horizon: float,
    rel_tol: float = 1e-8,
    abs_tol: float = 1e-10,
    escape_factor: float = 10.0,
    method: str = "LSODA",
) -> ClosedLoopRun:
    """Integrate the closed loop under the surrogate feedback, accumulating cost."""
    x0 = np.asarray(x0, dtype=float)
    n = model.dim_state
    radius = escape_factor * (1.0 + float(np.linalg.norm(x0)))

    def rhs(_t, y):
        x = y[:n]
        grad = surrogate.gradient(x[None, :])[0]
        u = optimal_control(model, x, grad)
        dx = model.f(x) + model.g_apply(x, u)
        dj = model.r(x) + u @ model.R @ u
        return np.concatenate([dx, [dj]])

    def escaped(_t, y):
        return float(np.linalg.norm(y[:n])) - radius

    y0 = np.concatenate([x0, [0.0]])
    try:
        sol = integrate_ivp(
            rhs, y0, (0.0, float(horizon)), rel_tol=rel_tol, abs_tol=abs_tol, stop=escaped, method=method
        )
    except IvpFailure as err:
        last = np.asarray(err.last_state, dtype=float)
        times = np.array([0.0, err.last_time if err.last_time > 0 else 1e-12])
        states = np.stack([x0, last[:n]])
        return ClosedLoopRun(x0=x0, times=times, states=states, cost=float(last[n]), escaped=True)

    stopped_early = sol.times[-1] < horizon * (1.0 - 1e-12)
    return ClosedLoopRun(
        x0=x0,
        times=np.asarray(sol.times, dtype=float),
        states=sol.states[:, :n],
        cost=float(sol.states[-1, n]),
        escaped=bool(stopped_early),
        interpolant=sol,
    )


def mrl2_error(references: Sequence, runs: Sequence[ClosedLoopRun], horizon: Optional[float] = None) -> float:
    """Mean relative L2 trajectory error over reference/run pairs.

    Each reference needs ``times`` and ``states``; comparison happens on the
    reference grid (optionally truncated).  References that never leave the
    origin carry no scale and are skipped with a warning.
    """
    ratios = []
    for ref, run in zip(references, runs):
        times = np.asarray(ref.times, dtype=float)
        states = np.asarray(ref.states, dtype=float)
        if horizon is not None:
            mask = times <= horizon
            times, states = times[mask], states[mask]
        denom = float(np.sum(states * states))
        if denom == 0.0:
            warnings.warn("reference trajectory is identically zero; skipped", stacklevel=2)
            continue
        sim = run.states_at(times)
        ratios.append(np.sqrt(float(np.sum((states - sim) ** 2)) / denom))
    if not ratios:
        return float("nan")
    return float(np.mean(ratios))


def evaluate_surrogate(
    model: ControlAffineModel,
    surrogate: Surrogate,
    references: Sequence,
    horizon: Optional[float] = None,
    threads: int = 1,
    rel_tol: float = 1e-8,
    abs_tol: float = 1e-10,
):
    """Closed-loop MRL2 of one surrogate against reference solutions."""
    def run_one(ref):
        t_last = float(np.asarray(ref.times)[-1])
        t_end = t_last if horizon is None else min(horizon, t_last)
        return simulate_feedback(model, surrogate, np.asarray(ref.x0 if hasattr(ref, "x0") else ref.states[0]),
                                 t_end, rel_tol=rel_tol, abs_tol=abs_tol)

    runs = parallel_map(run_one, references, threads)
    return mrl2_error(references, runs, horizon=horizon), runs


@dataclass(frozen=True)
class FoldResult:
    fold: int
    n_train_trajectories: int
    n_test_samples: int
    n_centers: int
    max_residual: float
    mean_residual: float


@dataclass
class CvReport:
    folds: list[FoldResult] = field(default_factory=list)

    @property
    def max_residual(self) -> float:
        return max((f.max_residual for f in self.folds), default=float("nan"))

    @property
    def mean_residual(self) -> float:
        vals = [f.mean_residual for f in self.folds]
        return float(np.mean(vals)) if vals else float("nan")


def cross_validate(
    kernel,
    dataset: Dataset,
    config: VkogaConfig = VkogaConfig(),
    n_folds: int = 5,
    q_matrix=None,
    include_origin: bool = False,
) -> CvReport:
    """Hold out whole trajectories round-robin, refit, score held-out samples."""
    n_traj = dataset.n_trajectories
    n_folds = min(n_folds, n_traj)
    if n_folds < 2:
        raise ValueError("cross-validation needs at least two trajectories")
    report = CvReport()
    for fold in range(n_folds):
        train = Dataset(
            dim=dataset.dim,
            trajectories=[t for i, t in enumerate(dataset.trajectories) if i % n_folds != fold],
        )
        test = [t for i, t in enumerate(dataset.trajectories) if i % n_folds == fold]
        pts, vals, gds = train.flattened(include_origin=include_origin)
        result = run_vkoga(kernel, pts, vals, gds, config=config, q_matrix=q_matrix)
        tp = np.concatenate([t.states for t in test])
        tv = np.concatenate([t.values for t in test])
        tg = np.concatenate([t.grads for t in test])
        sv, sg = result.surrogate.value_and_gradient(tp)
        rho = np.abs(tv - sv) + np.linalg.norm(tg - sg, axis=1)
        report.folds.append(
            FoldResult(
                fold=fold,
                n_train_trajectories=train.n_trajectories,
                n_test_samples=tp.shape[0],
                n_centers=result.surrogate.n_centers,
                max_residual=float(np.max(rho)),
                mean_residual=float(np.mean(rho)),
            )
        )
    return report


def save_cv_report(report: CvReport, path) -> None:
    doc = {
        "schema": CV_SCHEMA,
        "max_residual": report.max_residual,
        "mean_residual": report.mean_residual,
        "folds": [
            {
                "fold": f.fold,
                "n_train_trajectories": f.n_train_trajectories,
                "n_test_samples": f.n_test_samples,
                "n_centers": f.n_centers,
                "max_residual": f.max_residual,
                "mean_residual": f.mean_residual,
            }
            for f in report.folds
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def center_curve(
    model: ControlAffineModel,
    dataset: Dataset,
    kernel_plain,
    kernel_structured,
    q_matrix,
    counts: Sequence[int],
    references: Sequence,
    config: VkogaConfig = VkogaConfig(),
    horizon: Optional[float] = None,
    threads: int = 1,
):
    """MRL2 versus center count for both surrogate variants and the quadratic baseline."""
    counts = sorted(set(int(c) for c in counts))
    cfg = VkogaConfig(
        max_centers=max(counts),
        eps_tol_f=config.eps_tol_f,
        cg_tol=config.cg_tol,
        cg_max_iter=config.cg_max_iter,
        nugget=config.nugget,
        warm_start=config.warm_start,
        checkpoints=counts,
    )
    pts, vals, gds = dataset.flattened(include_origin=True)
    plain = run_vkoga(kernel_plain, pts, vals, gds, config=cfg)
    pts_s, vals_s, gds_s = dataset.flattened(include_origin=False)
    structured = run_vkoga(kernel_structured, pts_s, vals_s, gds_s, config=cfg, q_matrix=q_matrix)

    quad = quadratic_surrogate(q_matrix)
    mrl2_quad, _ = evaluate_surrogate(model, quad, references, horizon=horizon, threads=threads)

    rows = []
    for count in counts:
        sp = plain.checkpoints.get(count, plain.surrogate)
        ss = structured.checkpoints.get(count, structured.surrogate)
        mrl2_p, _ = evaluate_surrogate(model, sp, references, horizon=horizon, threads=threads)
        mrl2_s, _ = evaluate_surrogate(model, ss, references, horizon=horizon, threads=threads)
        rows.append(
            {
                "n_centers": count,
                "mrl2_plain": mrl2_p,
                "mrl2_structured": mrl2_s,
                "mrl2_quadratic": mrl2_quad,
            }
        )
    return rows


def write_curves(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["n_centers", "mrl2_plain", "mrl2_structured", "mrl2_quadratic"])
        writer.writeheader()
        for row in rows:
            writer.writerow(
                {
                    "n_centers": row["n_centers"],
                    "mrl2_plain": f"{row['mrl2_plain']:.17g}",
                    "mrl2_structured": f"{row['mrl2_structured']:.17g}",
                    "mrl2_quadratic": f"{row['mrl2_quadratic']:.17g}",
                }
            )
