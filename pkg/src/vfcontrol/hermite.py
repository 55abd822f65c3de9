"""Matrix-free Hermite kernel interpolation of values and gradients.

The interpolant has the form

    s(x) = sum_i alpha_i k(x_i, x) + <beta_i, grad_1 k(x_i, x)>,

and fitting it to value/gradient data means solving M c = rhs with the
symmetric positive definite two-by-two block matrix

    M = [[ K, B ], [ B^T, C ]],   K_ji = k(x_i, x_j),
    B rows <grad_1 k(x_i, x_j), .>,  C blocks E_k(x_i, x_j),

of size n(1+N).  Nothing here ever materializes B or C: every product with M
reduces to pairwise scalar matrices (profile values on squared distances,
inner products) combined through O(n m N) matrix products, which is what makes
center counts in the hundreds cheap even for N = 100.

The same contraction evaluated at off-center points is the surrogate itself,
so ``hermite_apply`` doubles as the Gram matvec (query points = centers) and
as batched surrogate evaluation.

The structured variant replaces k by <x, y>^2 k(x, y) and represents the
value as a square:

    s(x) = ( sqrt(x^T Q x) + correction(x) )^2,

fit through the linearized right-hand side of ``assemble_rhs``; it vanishes
with vanishing gradient at the origin and is nonnegative by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .kernels import StructuredKernel, WendlandC4, kernel_from_spec, kernel_to_spec
from .numerics import CgError, LinearOperator, cg_solve

__all__ = [
    "hermite_apply",
    "HermiteOperator",
    "matvec_M",
    "stack_coeffs",
    "unstack_coeffs",
    "assemble_rhs",
    "fit",
    "FitError",
    "Surrogate",
    "quadratic_surrogate",
    "native_norm_sq",
    "save_surrogate",
    "load_surrogate",
]

SURROGATE_SCHEMA = "vfcontrol-surrogate-v1"


class FitError(RuntimeError):
    pass


def _pairwise_sqdist(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    xs = np.sum(x * x, axis=1)
    ys = np.sum(y * y, axis=1)
    s = x @ y.T
    s *= -2.0
    s += xs[:, None]
    s += ys[None, :]
    return np.maximum(s, 0.0, out=s)


class _PairCache:
    """Coefficient-independent pairwise tables between centers and points.

    Everything that depends only on geometry lives here, so repeated
    applications with fresh coefficients (the CG inner loop) pay only for the
    O(n m N) contractions.
    """

    __slots__ = ("x", "y", "structured", "psi", "dpsi", "ddpsi",
                 "ip_psi", "ip2_psi", "ip_dpsi", "ip2_dpsi", "ip2_ddpsi")

    def __init__(self, kernel, centers, points):
        self.x = np.asarray(centers, dtype=float)
        self.y = np.atleast_2d(np.asarray(points, dtype=float))
        self.structured = isinstance(kernel, StructuredKernel)
        base = kernel.base if self.structured else kernel
        self.psi, self.dpsi, self.ddpsi = base.profile(_pairwise_sqdist(self.x, self.y))
        if self.structured:
            ip = self.x @ self.y.T
            ip2 = ip * ip
            self.ip_psi = ip * self.psi
            self.ip2_psi = ip2 * self.psi
            self.ip_dpsi = ip * self.dpsi
            self.ip2_dpsi = ip2 * self.dpsi
            self.ip2_ddpsi = ip2 * self.ddpsi


def _apply_cached(cache: "_PairCache", alphas, betas):
    x, y = cache.x, cache.y
    al = np.asarray(alphas, dtype=float)
    be = np.asarray(betas, dtype=float)
    c = np.sum(be * x, axis=1)          # <beta_i, x_i>
    bg = be @ y.T                       # <beta_i, y_j>

    if not cache.structured:
        psi, dpsi, ddpsi = cache.psi, cache.dpsi, cache.ddpsi
        vals = psi.T @ al + 2.0 * (dpsi.T @ c - np.einsum("ij,ij->j", dpsi, bg))
        w = dpsi * al[:, None]
        grads = 2.0 * (np.sum(w, axis=0)[:, None] * y - w.T @ x)
        pb = dpsi.T @ be
        np.subtract(bg, c[:, None], out=bg)  # <y_j - x_i, beta_i>
        u = ddpsi * bg
        grads += -2.0 * pb + 4.0 * (u.T @ x - np.sum(u, axis=0)[:, None] * y)
        return vals, grads

    cg = c[:, None] - bg                # <x_i - y_j, beta_i>
    vals = cache.ip2_psi.T @ al + 2.0 * (
        np.einsum("ij,ij->j", cache.ip_psi, bg) + np.einsum("ij,ij->j", cache.ip2_dpsi, cg)
    )
    # sum_i alpha_i grad_2 kappa(x_i, y_j)
    ma1 = al[:, None] * cache.ip_psi
    ma2 = al[:, None] * cache.ip2_dpsi
    grads = 2.0 * (ma1.T @ x) + 2.0 * (np.sum(ma2, axis=0)[:, None] * y - ma2.T @ x)
    # sum_i E_kappa(x_i, y_j) beta_i, by the product rule around E_k of the base
    grads += 2.0 * ((cache.psi * bg).T @ x)
    grads += 2.0 * (cache.ip_psi.T @ be)
    m3 = cache.ip_dpsi * bg
    grads += 4.0 * (np.sum(m3, axis=0)[:, None] * y - m3.T @ x)
    m4 = cache.ip_dpsi * cg
    grads += 4.0 * (m4.T @ x)
    grads += -2.0 * (cache.ip2_dpsi.T @ be)
    m5b = cache.ip2_ddpsi * cg
    grads -= 4.0 * (m5b.T @ x - np.sum(m5b, axis=0)[:, None] * y)
    return vals, grads


def hermite_apply(kernel, centers, alphas, betas, points):
    """Values and gradients at ``points`` of the Hermite expansion.

    Returns ``(values (m,), grads (m, N))``.  ``kernel`` may be a plain
    radial kernel or a :class:`StructuredKernel`.
    """
    x = np.asarray(centers, dtype=float)
    y = np.atleast_2d(np.asarray(points, dtype=float))
    n, dim = x.shape
    if n == 0:
        return np.zeros(y.shape[0]), np.zeros((y.shape[0], dim))
    return _apply_cached(_PairCache(kernel, x, y), alphas, betas)


class HermiteOperator:
    """The Gram matvec bound to a fixed center set.

    Building the operator evaluates all pairwise kernel profiles once; each
    :meth:`matvec` afterwards costs only the coefficient contractions, which
    is what a Krylov loop should pay per iteration.
    """

    def __init__(self, kernel, centers):
        self.centers = np.asarray(centers, dtype=float)
        self.n, self.dim = self.centers.shape
        self.kernel = kernel
        self._cache = _PairCache(kernel, self.centers, self.centers)

    @property
    def size(self) -> int:
        return self.n * (1 + self.dim)

    def matvec(self, stacked: np.ndarray) -> np.ndarray:
        alphas, betas = unstack_coeffs(stacked, self.n, self.dim)
        vals, grads = _apply_cached(self._cache, alphas, betas)
        return stack_coeffs(vals, grads)


def stack_coeffs(alphas: np.ndarray, betas: np.ndarray) -> np.ndarray:
    return np.concatenate([np.asarray(alphas, float), np.asarray(betas, float).ravel()])


def unstack_coeffs(stacked: np.ndarray, n: int, dim: int):
    stacked = np.asarray(stacked, dtype=float)
    if stacked.size != n * (1 + dim):
        raise ValueError(f"coefficient vector of size {stacked.size}, expected {n * (1 + dim)}")
    return stacked[:n], stacked[n:].reshape(n, dim)


def matvec_M(kernel, centers, stacked: np.ndarray) -> np.ndarray:
    """Product of the Hermite interpolation matrix with stacked [alpha; vec(beta)]."""
    centers = np.asarray(centers, dtype=float)
    n, dim = centers.shape
    alphas, betas = unstack_coeffs(stacked, n, dim)
    vals, grads = hermite_apply(kernel, centers, alphas, betas, centers)
    return stack_coeffs(vals, grads)


def assemble_rhs(values, grads, variant: str = "plain", q_matrix=None, centers=None) -> np.ndarray:
    """Right-hand side of the interpolation system.

    Plain: stacked values and gradients as given.  Structured: the linearized
    square-root data

        sqrt(v_j) - sqrt(x_j^T Q x_j),
        grad v_j / (2 sqrt(v_j)) - Q x_j / sqrt(x_j^T Q x_j),

    which requires strictly positive values and nonzero centers.
    """
    values = np.asarray(values, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if variant == "plain":
        return stack_coeffs(values, grads)
    if variant != "structured":
        raise ValueError(f"unknown variant {variant!r}")
    if q_matrix is None or centers is None:
        raise ValueError("structured rhs needs the quadratic matrix and the centers")
    centers = np.asarray(centers, dtype=float)
    qm = np.asarray(q_matrix, dtype=float)
    if np.any(values <= 0.0):
        bad = int(np.argmin(values))
        raise ValueError(f"structured rhs needs positive values; sample {bad} has v = {values[bad]:.3e}")
    xqx = np.einsum("ij,jk,ik->i", centers, qm, centers)
    if np.any(xqx <= 0.0):
        bad = int(np.argmin(xqx))
        raise ValueError(f"structured rhs is undefined at the origin; sample {bad} has x^T Q x = {xqx[bad]:.3e}")
    sv = np.sqrt(values)
    sq = np.sqrt(xqx)
    rhs_vals = sv - sq
    rhs_grads = grads / (2.0 * sv[:, None]) - (centers @ qm) / sq[:, None]
    return stack_coeffs(rhs_vals, rhs_grads)


def _jacobi_diag(kernel, centers: np.ndarray) -> np.ndarray:
    """Exact diagonal of the interpolation matrix, for preconditioning."""
    n, dim = centers.shape
    structured = isinstance(kernel, StructuredKernel)
    base = kernel.base if structured else kernel
    psi0, dpsi0, _ = base.profile(0.0)
    psi0 = float(psi0)
    e_diag = -2.0 * float(dpsi0)
    if not structured:
        return np.concatenate([np.full(n, psi0), np.full(n * dim, e_diag)])
    qn = np.sum(centers * centers, axis=1)
    val_diag = qn * qn * psi0
    grad_diag = 2.0 * psi0 * centers * centers + (2.0 * psi0 * qn + e_diag * qn * qn)[:, None]
    return np.concatenate([val_diag, grad_diag.ravel()])


def fit(
    kernel,
    centers,
    rhs: np.ndarray,
    cg_tol: float = 1e-10,
    max_iter: Optional[int] = None,
    nugget: float = 0.0,
    x0: Optional[np.ndarray] = None,
    precondition: bool = True,
):
    """Solve the interpolation system by preconditioned CG.

    Returns ``(alphas, betas, info)`` where info records iterations and the
    final relative residual.  Centers must be pairwise distinct; a duplicate
    pair makes the system singular and is reported by index.
    """
    centers = np.asarray(centers, dtype=float)
    n, dim = centers.shape
    if n == 0:
        return np.zeros(0), np.zeros((0, dim)), {"iterations": 0, "residual": 0.0}
    sq = _pairwise_sqdist(centers, centers)
    np.fill_diagonal(sq, np.inf)
    closest = np.unravel_index(np.argmin(sq), sq.shape)
    if sq[closest] == 0.0:
        raise FitError(f"duplicate centers {closest[0]} and {closest[1]}")

    bound = HermiteOperator(kernel, centers)

    def apply(vec):
        out = bound.matvec(vec)
        if nugget:
            out = out + nugget * vec
        return out

    op = LinearOperator(dim=n * (1 + dim), apply=apply)
    diag = _jacobi_diag(kernel, centers) + nugget if precondition else None
    try:
        res = cg_solve(op, rhs, tol=cg_tol, max_iter=max_iter, x0=x0, diag=diag)
    except CgError as err:
        raise FitError(
            f"CG stalled at relative residual {err.residual:.3e} after {err.iterations} iterations"
        ) from err
    alphas, betas = unstack_coeffs(res.x, n, dim)
    return alphas, betas, {"iterations": res.iterations, "residual": res.residual, "nugget": nugget}


@dataclass
class Surrogate:
    """A fitted value-function model: coefficients, centers, and the kernel."""

    kernel: object
    centers: np.ndarray
    alphas: np.ndarray
    betas: np.ndarray
    variant: str = "plain"
    q_matrix: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def n_centers(self) -> int:
        return self.centers.shape[0]

    def value_and_gradient(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        vals, grads = hermite_apply(self.kernel, self.centers, self.alphas, self.betas, points)
        if self.variant == "plain":
            return vals, grads
        qm = self.q_matrix
        xqx = np.einsum("ij,jk,ik->i", points, qm, points)
        nonzero = xqx > 0.0
        root = np.sqrt(np.where(nonzero, xqx, 1.0))
        h = np.where(nonzero, root, 0.0) + vals
        value = h * h
        qgrad = np.where(nonzero[:, None], (points @ qm) / root[:, None], 0.0)
        gradient = 2.0 * h[:, None] * (qgrad + grads)
        # at the origin the correction vanishes identically; pin the limit
        gradient[~nonzero] = 0.0
        value[~nonzero] = 0.0
        return value, gradient

    def value(self, points):
        return self.value_and_gradient(points)[0]

    def gradient(self, points):
        return self.value_and_gradient(points)[1]


def quadratic_surrogate(q_matrix: np.ndarray, dim: Optional[int] = None, gamma: float = 1.0) -> Surrogate:
    """The pure quadratic model x^T Q x as a structured surrogate with no centers."""
    qm = np.asarray(q_matrix, dtype=float)
    dim = qm.shape[0] if dim is None else dim
    return Surrogate(
        kernel=StructuredKernel(WendlandC4(dim=dim, gamma=gamma)),
        centers=np.zeros((0, dim)),
        alphas=np.zeros(0),
        betas=np.zeros((0, dim)),
        variant="structured",
        q_matrix=qm,
        meta={"baseline": "quadratic"},
    )


def native_norm_sq(surrogate: Surrogate) -> float:
    """Squared native-space norm of a plain surrogate: c^T M c."""
    if surrogate.variant != "plain":
        raise ValueError("native norm is defined for the plain variant only")
    stacked = stack_coeffs(surrogate.alphas, surrogate.betas)
    if stacked.size == 0:
        return 0.0
    return float(stacked @ matvec_M(surrogate.kernel, surrogate.centers, stacked))


def save_surrogate(surrogate: Surrogate, path) -> None:
    doc = {
        "schema": SURROGATE_SCHEMA,
        "kernel": kernel_to_spec(surrogate.kernel),
        "variant": surrogate.variant,
        "centers": surrogate.centers.tolist(),
        "alphas": surrogate.alphas.tolist(),
        "betas": surrogate.betas.tolist(),
        "q_matrix": None if surrogate.q_matrix is None else np.asarray(surrogate.q_matrix).tolist(),
        "meta": surrogate.meta,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_surrogate(path) -> Surrogate:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema") != SURROGATE_SCHEMA:
        raise ValueError(f"unsupported surrogate schema {doc.get('schema')!r}")
    dim = int(doc["kernel"]["dim"])
    centers = np.asarray(doc["centers"], dtype=float).reshape(-1, dim)
    return Surrogate(
        kernel=kernel_from_spec(doc["kernel"]),
        centers=centers,
        alphas=np.asarray(doc["alphas"], dtype=float),
        betas=np.asarray(doc["betas"], dtype=float).reshape(-1, dim),
        variant=doc["variant"],
        q_matrix=None if doc["q_matrix"] is None else np.asarray(doc["q_matrix"], dtype=float),
        meta=doc.get("meta", {}),
    )
