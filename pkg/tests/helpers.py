"""Shared oracles for the test suite.

Everything here recomputes quantities along an independent route from the
library code under test: the interpolation matrix is assembled densely from
single-pair kernel calls, reference trajectories come from closed-form
solutions, and derivative checks go through finite differences.
"""

import numpy as np

from vfcontrol.kernels import ek_apply, kernel_eval, kernel_grad1, kernel_grad2
from vfcontrol.models import AmpParameters


def dense_hermite_matrix(kernel, centers):
    """Assemble the full interpolation matrix entry by entry.

    Row/column layout matches the stacked coefficient vector: n value slots
    followed by n blocks of dim gradient slots.
    """
    x = np.asarray(centers, dtype=float)
    n, dim = x.shape
    m = np.zeros((n * (1 + dim), n * (1 + dim)))
    for j in range(n):
        for i in range(n):
            m[j, i] = kernel_eval(kernel, x[i], x[j])
            m[j, n + i * dim : n + (i + 1) * dim] = kernel_grad1(kernel, x[i], x[j])
            m[n + j * dim : n + (j + 1) * dim, i] = kernel_grad2(kernel, x[i], x[j])
            for d in range(dim):
                unit = np.zeros(dim)
                unit[d] = 1.0
                m[n + j * dim : n + (j + 1) * dim, n + i * dim + d] = ek_apply(kernel, x[i], x[j], unit)
    return m


def lattice_centers(rng, n, dim, avoid_origin=False):
    """Well-separated random centers: jittered picks from an integer lattice.

    Plain uniform draws occasionally land two centers nearly on top of each
    other, which makes the interpolation matrix arbitrarily ill conditioned
    and turns a correctness test into a conditioning test.  The lattice keeps
    pairwise distances near 1 while the jitter avoids symmetry accidents.
    """
    side = np.arange(-2.0, 2.1, 1.0)
    mesh = np.stack(np.meshgrid(*([side] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    if avoid_origin:
        mesh = mesh[np.linalg.norm(mesh, axis=1) > 0.4]
    pick = rng.choice(mesh.shape[0], size=min(n, mesh.shape[0]), replace=False)
    return mesh[pick] + rng.uniform(-0.15, 0.15, size=(len(pick), dim))


class AnalyticRun:
    """A reference trajectory given directly by arrays (duck-types BvpSolution)."""

    def __init__(self, x0, times, states):
        self.x0 = np.asarray(x0, dtype=float)
        self.times = np.asarray(times, dtype=float)
        self.states = np.asarray(states, dtype=float)


def amp_closed_loop(x0, horizon, n_times=400, params=AmpParameters()):
    """Optimal closed-loop trajectory of the analytic benchmark model.

    Under the optimal feedback the squared radius q = ||x||^2 obeys
    q' = -2 c q^2 with c = sqrt(1 + alpha/beta), so the state just shrinks
    radially: x(t) = x0 / sqrt(1 + 2 c ||x0||^2 t).
    """
    x0 = np.asarray(x0, dtype=float)
    c = np.sqrt(1.0 + params.alpha / params.beta)
    times = np.linspace(0.0, horizon, n_times)
    den = np.sqrt(1.0 + 2.0 * c * float(x0 @ x0) * times)
    states = x0[None, :] / den[:, None]
    return AnalyticRun(x0, times, states)


def relative_l2(reference, run, horizon=None):
    """Relative L2 gap of one closed-loop run against one reference."""
    times = np.asarray(reference.times, dtype=float)
    states = np.asarray(reference.states, dtype=float)
    if horizon is not None:
        mask = times <= horizon
        times, states = times[mask], states[mask]
    sim = run.states_at(times)
    return float(np.sqrt(np.sum((states - sim) ** 2) / np.sum(states * states)))
