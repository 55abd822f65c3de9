"""Open-loop optimal trajectories via the first-order necessary conditions.

For a start state x0 the stacked unknown z = [x; p; v] obeys

    x' = f + g u,   p' = -(J_f^T p + d(gu)/dx^T p + grad r),   v' = -(r + u^T R u),

with u = -R^{-1} g^T p / 2, x(0) = x0, and p, v -> 0 as t -> infinity.  The
infinite horizon is mapped onto the unit interval by t = tau / (1 - tau), the
grid stops one step delta_tau short of tau = 1, and the missing step is closed
by an explicit Euler extrapolation whose p and v components must land on zero.
That extrapolated condition is the far-end boundary residual.

Discretization is trapezoid collocation on a mesh graded toward both ends
(fast initial transients live near tau = 0, the algebraic tail near tau = 1),
solved by a damped Newton method.  The Jacobian couples each node only to its
neighbor, so it is assembled from per-node finite-difference blocks into a
block-sparse matrix and factored directly.  A midpoint-rule defect flags
intervals whose local truncation error is still large; those get split and
the solve repeats on the refined mesh.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .models import ControlAffineModel, optimal_control, pmp_rhs, split_state
from .numerics import IvpFailure, integrate_ivp

__all__ = [
    "time_stretch",
    "time_stretch_rate",
    "graded_mesh",
    "bvp_residual",
    "OpenLoopConfig",
    "BvpSolution",
    "BvpFailure",
    "initial_guess",
    "solve_pmp",
    "solve_open_loop",
    "Trajectory",
    "to_trajectory",
]


def time_stretch(tau):
    """Map collocation time in [0, 1) to physical time t = tau / (1 - tau)."""
    tau = np.asarray(tau, dtype=float)
    return tau / (1.0 - tau)


def time_stretch_rate(tau):
    """dt/dtau = 1 / (1 - tau)^2."""
    tau = np.asarray(tau, dtype=float)
    return 1.0 / (1.0 - tau) ** 2


def graded_mesh(n_intervals: int, power: float = 1.0, tau_end: float = 1.0 - 1e-3) -> np.ndarray:
    """Mesh on [0, tau_end] with intervals shrinking toward both endpoints.

    Interval k gets length proportional to ((k+1)(n-k))^power, so power 0 is
    uniform and larger powers cluster nodes at the ends.
    """
    if n_intervals < 2:
        raise ValueError("need at least two intervals")
    k = np.arange(n_intervals, dtype=float)
    weights = ((k + 1.0) * (n_intervals - k)) ** power
    taus = np.concatenate([[0.0], np.cumsum(weights)])
    return taus * (tau_end / taus[-1])


def bvp_residual(model: ControlAffineModel, taus: np.ndarray, z: np.ndarray, x0: np.ndarray, delta_tau: float) -> np.ndarray:
    """Stacked residual: boundary rows first, then one collocation row per interval.

    The interval rule is Hermite-Simpson: the midpoint state interpolates the
    cubic through the endpoint values and slopes, and Simpson quadrature over
    endpoint and midpoint slopes closes the fourth-order defect.
    """
    n = model.dim_state
    rate = time_stretch_rate(taus)
    ft = rate[:, None] * pmp_rhs(model, z)
    h = np.diff(taus)[:, None]
    z_mid = 0.5 * (z[:-1] + z[1:]) + (h / 8.0) * (ft[:-1] - ft[1:])
    mid_rate = time_stretch_rate(0.5 * (taus[:-1] + taus[1:]))
    ft_mid = mid_rate[:, None] * pmp_rhs(model, z_mid)
    coll = z[1:] - z[:-1] - (h / 6.0) * (ft[:-1] + 4.0 * ft_mid + ft[1:])
    tail = (z[-1] + delta_tau * ft[-1])[n:]
    return np.concatenate([z[0, :n] - x0, tail, coll.ravel()])


def _batched_jacobians(model: ControlAffineModel, z: np.ndarray, fd_step: float) -> np.ndarray:
    """dF/dz at every row of z by central differences, one batched rhs call per column."""
    n_nodes, nz = z.shape
    jac = np.empty((n_nodes, nz, nz))
    for j in range(nz):
        step = fd_step * (1.0 + np.abs(z[:, j]))
        zp = z.copy()
        zp[:, j] += step
        zm = z.copy()
        zm[:, j] -= step
        jac[:, :, j] = (pmp_rhs(model, zp) - pmp_rhs(model, zm)) / (2.0 * step)[:, None]
    return jac


def _assemble_jacobian(model, taus, z, delta_tau, fd_step):
    n = model.dim_state
    nz = z.shape[1]
    n_nodes = z.shape[0]
    k_intervals = n_nodes - 1
    rate = time_stretch_rate(taus)
    a = rate[:, None, None] * _batched_jacobians(model, z, fd_step)

    ft = rate[:, None] * pmp_rhs(model, z)
    h = np.diff(taus)[:, None]
    z_mid = 0.5 * (z[:-1] + z[1:]) + (h / 8.0) * (ft[:-1] - ft[1:])
    mid_rate = time_stretch_rate(0.5 * (taus[:-1] + taus[1:]))
    a_mid = mid_rate[:, None, None] * _batched_jacobians(model, z_mid, fd_step)

    eye = np.eye(nz)
    data = np.empty((2 * n_nodes, nz, nz))
    indices = np.empty(2 * n_nodes, dtype=np.int32)
    indptr = np.arange(0, 2 * n_nodes + 1, 2, dtype=np.int32)

    # boundary block row: x rows pin node 0, the extrapolated tail rows pin the last node
    b00 = np.zeros((nz, nz))
    b00[:n, :n] = np.eye(n)
    b0k = np.zeros((nz, nz))
    b0k[n:, :] = (eye + delta_tau * a[-1])[n:, :]
    data[0] = b00
    data[1] = b0k
    indices[0] = 0
    indices[1] = k_intervals

    hh = h[:, :, None]
    dmid_left = 0.5 * eye[None, :, :] + (hh / 8.0) * a[:-1]
    dmid_right = 0.5 * eye[None, :, :] - (hh / 8.0) * a[1:]
    left = -eye[None, :, :] - (hh / 6.0) * (a[:-1] + 4.0 * np.matmul(a_mid, dmid_left))
    right = eye[None, :, :] - (hh / 6.0) * (a[1:] + 4.0 * np.matmul(a_mid, dmid_right))
    data[2::2] = left
    data[3::2] = right
    indices[2::2] = np.arange(k_intervals, dtype=np.int32)
    indices[3::2] = np.arange(1, k_intervals + 1, dtype=np.int32)

    dim = n_nodes * nz
    return sp.bsr_matrix((data, indices, indptr), shape=(dim, dim))


@dataclass(frozen=True)
class OpenLoopConfig:
    n_nodes: int = 240
    grading_power: float = 1.0
    delta_tau: float = 1e-3
    newton_tol: float = 1e-11
    newton_max_iter: int = 40
    fd_step: float = 1e-6
    refine_rounds: int = 2
    refine_tol: float = 1e-8
    escape_factor: float = 10.0
    samples: int = 40
    min_spacing: float = 1e-8


class BvpFailure(RuntimeError):
    def __init__(self, message: str, residual: float = np.nan, iterations: int = 0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


@dataclass
class BvpSolution:
    taus: np.ndarray
    z: np.ndarray
    converged: bool
    newton_iterations: int
    residual_norm: float
    dim_state: int
    refine_rounds: int = 0
    max_defect: float = 0.0

    @property
    def times(self) -> np.ndarray:
        return time_stretch(self.taus)

    @property
    def states(self) -> np.ndarray:
        return self.z[:, : self.dim_state]

    @property
    def costates(self) -> np.ndarray:
        return self.z[:, self.dim_state : 2 * self.dim_state]

    @property
    def values(self) -> np.ndarray:
        return self.z[:, 2 * self.dim_state]


def initial_guess(model: ControlAffineModel, x0: np.ndarray, taus: np.ndarray, q_matrix: np.ndarray, escape_factor: float = 10.0) -> np.ndarray:
    """Closed-loop rollout under the quadratic-value feedback as a first iterate.

    States come from integrating x' = f + g u with u fed back from the value
    model x^T Q x; costates and values are that model's gradient and value.
    If the rollout escapes (the quadratic feedback need not stabilize far
    out), everything past the escape time is padded with zeros, which is the
    correct asymptote anyway.
    """
    x0 = np.asarray(x0, dtype=float)
    n = model.dim_state
    qm = np.asarray(q_matrix, dtype=float)
    radius = escape_factor * (1.0 + float(np.linalg.norm(x0)))

    def rhs(_t, x):
        u = optimal_control(model, x, 2.0 * x @ qm)
        return model.f(x) + model.g_apply(x, u)

    def escaped(_t, x):
        return float(np.linalg.norm(x)) - radius

    times = time_stretch(taus)
    try:
        sol = integrate_ivp(
            rhs, x0, (0.0, float(times[-1])), rel_tol=1e-10, abs_tol=1e-12, stop=escaped, method="LSODA"
        )
    except IvpFailure as err:
        sol = None
        t_reached = err.last_time
    else:
        t_reached = float(sol.times[-1])

    z = np.zeros((taus.size, 2 * n + 1))
    inside = times <= t_reached
    if sol is not None and np.any(inside):
        xs = sol.at(times[inside])
        z[inside, :n] = xs
        z[inside, n : 2 * n] = 2.0 * xs @ qm
        z[inside, 2 * n] = np.einsum("ij,jk,ik->i", xs, qm, xs)
    z[0, :n] = x0
    return z


def solve_pmp(
    model: ControlAffineModel,
    x0: np.ndarray,
    taus: np.ndarray,
    guess: np.ndarray,
    config: OpenLoopConfig = OpenLoopConfig(),
) -> BvpSolution:
    """Damped Newton on the collocation system from the supplied iterate."""
    x0 = np.asarray(x0, dtype=float)
    z = np.array(guess, dtype=float)
    if z.shape != (taus.size, 2 * model.dim_state + 1):
        raise ValueError(f"guess shape {z.shape} does not match mesh with {taus.size} nodes")

    res = bvp_residual(model, taus, z, x0, config.delta_tau)
    norm = float(np.max(np.abs(res)))
    if not np.isfinite(norm):
        raise BvpFailure("initial iterate produces a non-finite residual", residual=norm)

    for iteration in range(1, config.newton_max_iter + 1):
        scale = 1.0 + float(np.max(np.abs(z)))
        if norm <= config.newton_tol * scale:
            return BvpSolution(
                taus=taus,
                z=z,
                converged=True,
                newton_iterations=iteration - 1,
                residual_norm=norm,
                dim_state=model.dim_state,
            )
        jac = _assemble_jacobian(model, taus, z, config.delta_tau, config.fd_step)
        try:
            lu = splu(jac.tocsc())
        except RuntimeError as err:
            raise BvpFailure(f"singular collocation Jacobian: {err}", residual=norm, iterations=iteration) from err
        step = lu.solve(-res).reshape(z.shape)
        if not np.all(np.isfinite(step)):
            raise BvpFailure("non-finite Newton step", residual=norm, iterations=iteration)

        lam = 1.0
        accepted = False
        while lam >= 2.0 ** -12:
            z_new = z + lam * step
            res_new = bvp_residual(model, taus, z_new, x0, config.delta_tau)
            norm_new = float(np.max(np.abs(res_new)))
            if np.isfinite(norm_new) and norm_new < norm * (1.0 - 1e-4 * lam):
                z, res, norm = z_new, res_new, norm_new
                accepted = True
                break
            lam *= 0.5
        if not accepted:
            raise BvpFailure(
                f"line search stalled at residual {norm:.3e}", residual=norm, iterations=iteration
            )

    scale = 1.0 + float(np.max(np.abs(z)))
    if norm <= config.newton_tol * scale:
        return BvpSolution(
            taus=taus,
            z=z,
            converged=True,
            newton_iterations=config.newton_max_iter,
            residual_norm=norm,
            dim_state=model.dim_state,
        )
    raise BvpFailure(
        f"no convergence in {config.newton_max_iter} Newton iterations (residual {norm:.3e})",
        residual=norm,
        iterations=config.newton_max_iter,
    )


def _interval_defects(model, taus, z, scale):
    """Midpoint-rule defect per interval, relative to the iterate's magnitude."""
    h = np.diff(taus)
    mid_tau = 0.5 * (taus[:-1] + taus[1:])
    mid_z = 0.5 * (z[:-1] + z[1:])
    ft = time_stretch_rate(mid_tau)[:, None] * pmp_rhs(model, mid_z)
    defect = z[1:] - z[:-1] - h[:, None] * ft
    return np.max(np.abs(defect), axis=1) / scale


def _interp_nodes(taus_old, z_old, taus_new):
    z_new = np.empty((taus_new.size, z_old.shape[1]))
    for j in range(z_old.shape[1]):
        z_new[:, j] = np.interp(taus_new, taus_old, z_old[:, j])
    return z_new


def solve_open_loop(
    model: ControlAffineModel,
    x0: np.ndarray,
    q_matrix: np.ndarray,
    config: OpenLoopConfig = OpenLoopConfig(),
    warm: Optional[BvpSolution] = None,
) -> BvpSolution:
    """Full pipeline for one start state: guess, solve, refine until the defect is small.

    ``warm`` reuses a neighboring solution as the first iterate (its states
    need not start at x0; the boundary residual pulls them over).  If that
    iterate fails to converge the solve restarts once from the quadratic-value
    rollout.
    """
    taus = graded_mesh(config.n_nodes, config.grading_power, 1.0 - config.delta_tau)

    def first_iterate():
        return initial_guess(model, x0, taus, q_matrix, config.escape_factor)

    if warm is not None:
        guess = _interp_nodes(warm.taus, warm.z, taus)
        try:
            sol = solve_pmp(model, x0, taus, guess, config)
        except BvpFailure:
            sol = solve_pmp(model, x0, taus, first_iterate(), config)
    else:
        sol = solve_pmp(model, x0, taus, first_iterate(), config)

    rounds = 0
    for rounds in range(config.refine_rounds + 1):
        scale = 1.0 + float(np.max(np.abs(sol.z)))
        defects = _interval_defects(model, sol.taus, sol.z, scale)
        worst = float(np.max(defects))
        if worst <= config.refine_tol or rounds == config.refine_rounds:
            break
        split = defects > config.refine_tol
        mids = 0.5 * (sol.taus[:-1] + sol.taus[1:])[split]
        taus_new = np.sort(np.concatenate([sol.taus, mids]))
        guess = _interp_nodes(sol.taus, sol.z, taus_new)
        sol = solve_pmp(model, x0, taus_new, guess, config)

    sol.refine_rounds = rounds
    sol.max_defect = worst
    return sol


@dataclass
class Trajectory:
    """Value-function samples along one optimal trajectory."""

    x0: np.ndarray
    times: np.ndarray
    states: np.ndarray
    grads: np.ndarray
    values: np.ndarray

    def __len__(self) -> int:
        return self.times.size


def to_trajectory(
    solution: BvpSolution,
    samples: int = 40,
    min_spacing: float = 1e-8,
    horizon: Optional[float] = None,
) -> Trajectory:
    """Thin a solution to samples spread evenly along the state-space path.

    Only nodes with t <= horizon are stored (the solve itself always covers
    the whole transformed interval; the horizon only restricts which samples
    become data).  Node times crowd where the mesh is dense, not where the
    state moves, so the selection walks the cumulative chord length of the
    state path and keeps one node per equal arc increment, skipping any node
    closer than ``min_spacing`` to the previously kept one (near-duplicate
    centers make the interpolation system singular).
    """
    if horizon is not None:
        inside = solution.times <= horizon
        solution = BvpSolution(
            taus=solution.taus[inside],
            z=solution.z[inside],
            converged=solution.converged,
            newton_iterations=solution.newton_iterations,
            residual_norm=solution.residual_norm,
            dim_state=solution.dim_state,
        )
    states = solution.states
    seg = np.linalg.norm(np.diff(states, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    total = arc[-1]
    if total == 0.0:
        keep = [0]
    else:
        targets = np.linspace(0.0, total, num=max(2, samples))
        idx = np.searchsorted(arc, targets)
        idx = np.clip(idx, 0, states.shape[0] - 1)
        keep = []
        for i in idx:
            i = int(i)
            if keep and np.linalg.norm(states[i] - states[keep[-1]]) < min_spacing:
                continue
            if keep and i <= keep[-1]:
                continue
            keep.append(i)
        if not keep:
            keep = [0]
    keep = np.asarray(keep, dtype=int)
    return Trajectory(
        x0=states[0].copy(),
        times=solution.times[keep],
        states=states[keep],
        grads=solution.costates[keep],
        values=solution.values[keep],
    )
