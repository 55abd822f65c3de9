"""Compactly supported Wendland kernels and their first-order Hermite derivative actions.

The kernel is translation invariant, k(x, y) = Phi(gamma * ||x - y||), with the
dimension-dependent C4 Wendland polynomial

    Phi(r) = (1 - r)_+^(l+2) * ((l+1)(l+3) r^2 + 3(l+2) r + 3),   l = floor(dim/2) + 3.

All derivative formulas are written in the squared radius s = ||x - y||^2 via
psi(s) = Phi(gamma * sqrt(s)).  For this family the apparent 1/sqrt(s)
singularity cancels exactly and both psi' and psi'' are polynomials in
r = gamma * sqrt(s):

    psi'(s)  = (gamma^2 / 2) (1 - r)^(m-1) (c1 r + c0),
    psi''(s) = (gamma^4 / 4) m (m^2 - 1)(m + 2) (1 - r)^(m-2),

with m = l + 2, c1 = -(m+2)(m^2-1), c0 = -(m+1)(m+2).  In particular
psi'(0) = gamma^2 Phi''(0) / 2 and psi''(0) = gamma^4 Phi''''(0) / 12 hold
exactly, with Phi''(0) = -(l+3)(l+4) and Phi''''(0) = 3(l+1)(l+2)(l+3)(l+4).

The structured variant multiplies the base kernel by <x, y>^2 so that every
surrogate built from it vanishes with vanishing gradient at the origin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "WendlandC4",
    "StructuredKernel",
    "kernel_eval",
    "kernel_grad1",
    "kernel_grad2",
    "ek_apply",
    "kernel_to_spec",
    "kernel_from_spec",
]


@dataclass(frozen=True)
class WendlandC4:
    """C4 Wendland kernel for a given state dimension and shape parameter gamma."""

    dim: int
    gamma: float

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")

    @property
    def smoothness_degree(self) -> int:
        return self.dim // 2 + 3

    @property
    def support_radius(self) -> float:
        """Distance beyond which the kernel and its derivatives vanish."""
        return 1.0 / self.gamma

    def profile(self, s):
        """psi, psi', psi'' of the squared radius, evaluated elementwise.

        Shares the clamped powers of (1 - r) between the three outputs; this
        is the hot path of every Gram matrix action.
        """
        s = np.asarray(s, dtype=float)
        l = self.smoothness_degree
        m = l + 2
        g = self.gamma
        r = np.sqrt(np.maximum(s, 0.0))
        r *= g
        t = np.maximum(1.0 - r, 0.0)
        t_m2 = _int_power(t, m - 2)
        t_m1 = t_m2 * t
        a2 = (l + 1) * (l + 3)
        c1 = -(m + 2) * (m * m - 1)
        c0 = -(m + 1) * (m + 2)
        psi = a2 * r
        psi += 3.0 * m
        psi *= r
        psi += 3.0
        psi *= t_m1
        psi *= t
        dpsi = c1 * r
        dpsi += c0
        dpsi *= t_m1
        dpsi *= 0.5 * g * g
        ddpsi = (0.25 * g ** 4 * m * (m * m - 1) * (m + 2)) * t_m2
        return psi, dpsi, ddpsi

    def psi(self, s):
        return self.profile(s)[0]

    def dpsi(self, s):
        return self.profile(s)[1]

    def ddpsi(self, s):
        return self.profile(s)[2]


@dataclass(frozen=True)
class StructuredKernel:
    """Base kernel times <x, y>^2; vanishes to first order when either argument is 0."""

    base: WendlandC4

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def gamma(self) -> float:
        return self.base.gamma


def _int_power(base: np.ndarray, exponent: int) -> np.ndarray:
    """base ** exponent by repeated squaring; much faster than elementwise pow
    for the large integer exponents the high-dimensional profiles need."""
    result = None
    square = base
    e = exponent
    while e:
        if e & 1:
            result = square.copy() if result is None else result * square
        e >>= 1
        if e:
            square = square * square
    return np.ones_like(base) if result is None else result


def _sqdist(x, y):
    d = x - y
    return float(d @ d)


def kernel_eval(kernel, x: np.ndarray, y: np.ndarray) -> float:
    """k(x, y) for a single pair of points."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if isinstance(kernel, StructuredKernel):
        ip = float(x @ y)
        return ip * ip * kernel_eval(kernel.base, x, y)
    return float(kernel.psi(_sqdist(x, y)))


def kernel_grad1(kernel, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of k with respect to the first argument, at (x, y)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if isinstance(kernel, StructuredKernel):
        ip = float(x @ y)
        base = kernel.base
        return 2.0 * ip * y * kernel_eval(base, x, y) + ip * ip * kernel_grad1(base, x, y)
    dpsi = float(kernel.dpsi(_sqdist(x, y)))
    return 2.0 * dpsi * (x - y)


def kernel_grad2(kernel, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of k with respect to the second argument; equals grad1 with arguments swapped."""
    return kernel_grad1(kernel, np.asarray(y, float), np.asarray(x, float))


def ek_apply(kernel, x: np.ndarray, y: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Action of the mixed second-derivative block E_k(x, y) on a vector b.

    E_k has entries d/dy_i d/dx_j k(x, y): rows differentiate the second
    argument, the contraction with b runs over derivatives of the first.
    This is the orientation the Hermite system needs when the first argument
    is the column (coefficient) point and the second the row (condition)
    point; for the radial base kernel

        E_k(x, y) b = -2 psi'(s) b + 4 psi''(s) (x - y) <y - x, b>,

    and the structured product adds four rank-one correction terms.  Cost is
    O(dim); the matrix itself is never formed.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    b = np.asarray(b, dtype=float)
    if isinstance(kernel, StructuredKernel):
        base = kernel.base
        ip = float(x @ y)
        k = kernel_eval(base, x, y)
        g1 = kernel_grad1(base, x, y)
        yb = float(y @ b)
        return (
            2.0 * k * yb * x
            + 2.0 * ip * k * b
            + 2.0 * ip * yb * (-g1)
            + 2.0 * ip * float(g1 @ b) * x
            + ip * ip * ek_apply(base, x, y, b)
        )
    s = _sqdist(x, y)
    _, dpsi, ddpsi = kernel.profile(s)
    d = x - y
    return -2.0 * float(dpsi) * b - 4.0 * float(ddpsi) * d * float(d @ b)


def kernel_to_spec(kernel) -> dict:
    if isinstance(kernel, StructuredKernel):
        spec = kernel_to_spec(kernel.base)
        spec["structured"] = True
        return spec
    return {"family": "wendland_c4", "dim": kernel.dim, "gamma": kernel.gamma, "structured": False}


def kernel_from_spec(spec: dict):
    if spec.get("family") != "wendland_c4":
        raise ValueError(f"unknown kernel family {spec.get('family')!r}")
    base = WendlandC4(dim=int(spec["dim"]), gamma=float(spec["gamma"]))
    return StructuredKernel(base) if spec.get("structured") else base
