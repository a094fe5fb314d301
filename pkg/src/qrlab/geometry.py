"""Zonal backgrounds, quadrature and spectral calculus.

Every field in the package depends on a single latitude variable
mu = cos(theta) measured on a round factor S^m of the background.  On the
round sphere S^n the factor is the whole manifold (m = n); on an Einstein
product S^p(r1) x S^q(r2) it is the first factor (m = p) and the second
factor only contributes its volume.

The zonal Laplace-Beltrami eigenfunctions on S^m are the symmetric Jacobi
polynomials P_l^{(a,a)}(mu) with a = (m-2)/2, so every operator that is a
polynomial in the Laplacian becomes a diagonal multiplier.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np
from scipy import special

from .errors import AliasingWarning, PreconditionError

TAIL_WARN_FRACTION = 1e-6
CHOP_TOL = 2e-15


def chop_tail(c: np.ndarray, tol: float | None = None) -> np.ndarray:
    """Zero the trailing coefficients that sit at roundoff level.

    High-order multipliers grow like l^4 and the basis grows towards the
    poles, so a roundoff plateau in the tail would otherwise dominate fourth
    derivatives.  Only the contiguous tail below tol * max|c| is removed.
    """
    tol = CHOP_TOL if tol is None else tol
    mag = np.abs(c)
    top = mag.max() if mag.size else 0.0
    if top == 0.0:
        return c
    keep = np.nonzero(mag > tol * top)[0]
    last = keep[-1] + 1
    if last == c.size:
        return c
    out = c.copy()
    out[last:] = 0.0
    return out


def sphere_area(k: int) -> float:
    """Volume of the unit k-sphere, 2 pi^{(k+1)/2} / Gamma((k+1)/2)."""
    return 2.0 * math.pi ** ((k + 1) / 2) / math.gamma((k + 1) / 2)


@dataclass(frozen=True)
class RoundSphere:
    """The unit round sphere S^n."""


@dataclass(frozen=True)
class EinsteinProduct:
    """S^p(r1) x S^q(r2) with (p-1)/r1^2 = (q-1)/r2^2.

    ``radii=None`` picks r1 = 1 and the matching r2.
    """

    p: int
    q: int
    radii: tuple[float, float] | None = None

    def resolved_radii(self) -> tuple[float, float]:
        if self.radii is not None:
            return (float(self.radii[0]), float(self.radii[1]))
        return (1.0, math.sqrt((self.q - 1) / (self.p - 1)))


BackgroundKind = Union[RoundSphere, EinsteinProduct]


def orthonormal_jacobi(x: np.ndarray, L: int, a: float, derivatives: int = 0) -> tuple[np.ndarray, ...]:
    """Orthonormal P_l^{(a,a)} on [-1,1] with weight (1-x^2)^a, l = 0..L.

    Uses the three-term recurrence x p_l = b_{l+1} p_{l+1} + b_l p_{l-1},
    differentiated term by term for p' and p''.  Returns a tuple of arrays of
    shape x.shape + (L+1,).
    """
    x = np.asarray(x, dtype=float)
    mass = 2.0 ** (2 * a + 1) * math.gamma(a + 1) ** 2 / math.gamma(2 * a + 2)
    out = [np.zeros(x.shape + (L + 1,)) for _ in range(derivatives + 1)]
    out[0][..., 0] = 1.0 / math.sqrt(mass)

    def b(k: int) -> float:
        return math.sqrt(k * (k + 2 * a) / ((2 * k + 2 * a + 1) * (2 * k + 2 * a - 1)))

    b_prev = 0.0
    for l in range(L):
        b_next = b(l + 1)
        for d, arr in enumerate(out):
            prev = arr[..., l - 1] if l > 0 else 0.0
            val = x * arr[..., l] - b_prev * prev
            if d:
                val = val + d * out[d - 1][..., l]
            arr[..., l + 1] = val / b_next
        b_prev = b_next
    return tuple(out)


def gauss_jacobi(N: int, a: float) -> tuple[np.ndarray, np.ndarray]:
    """Gauss nodes and weights for (1-x^2)^a on [-1,1].

    scipy's nodes are polished by two Newton steps on the orthonormal p_N and
    the weights are taken from the Christoffel function 1/sum_{l<N} p_l(x)^2,
    which keeps the discrete Gram matrix at the 1e-15 level for large N.
    """
    x, _ = special.roots_jacobi(N, a, a)
    for _ in range(2):
        P, dP = orthonormal_jacobi(x, N, a, derivatives=1)
        x = x - P[:, N] / dP[:, N]
    (P,) = orthonormal_jacobi(x, N - 1, a)
    return x, 1.0 / np.sum(P * P, axis=1)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Background:
    n: int
    kind: BackgroundKind
    N: int
    L: int
    m: int
    r1: float
    nodes: np.ndarray
    weights: np.ndarray
    volume: float
    R0: float
    Q0: float
    A0_coeff: float
    eigs: np.ndarray
    basis: np.ndarray = field(repr=False)
    dbasis: np.ndarray = field(repr=False)
    d2basis: np.ndarray = field(repr=False)
    norms: np.ndarray = field(repr=False)

    @property
    def alpha(self) -> float:
        return (self.m - 2) / 2.0

    @property
    def is_round(self) -> bool:
        return isinstance(self.kind, RoundSphere)

    # spectral transforms on raw arrays; the Field wrappers below call these
    def project(self, values: np.ndarray, chop: bool = True) -> np.ndarray:
        c = self.basis.T @ (self.weights * values)
        return chop_tail(c) if chop else c

    def synth(self, coeffs: np.ndarray) -> np.ndarray:
        return self.basis @ coeffs

    def dmu(self, coeffs: np.ndarray) -> np.ndarray:
        """d/dmu of the expansion, sampled at the nodes."""
        return self.dbasis @ coeffs

    def d2mu(self, coeffs: np.ndarray) -> np.ndarray:
        return self.d2basis @ coeffs

    def lap(self, coeffs: np.ndarray) -> np.ndarray:
        return self.basis @ (-self.eigs * coeffs)

    def grad_sq(self, coeffs: np.ndarray) -> np.ndarray:
        d = self.dbasis @ coeffs
        return (1.0 - self.nodes**2) * d * d / self.r1**2

    def grad_dot(self, ca: np.ndarray, cb: np.ndarray) -> np.ndarray:
        return (1.0 - self.nodes**2) * (self.dbasis @ ca) * (self.dbasis @ cb) / self.r1**2

    def integrate(self, values: np.ndarray) -> float:
        return float(np.dot(self.weights, values))

    def basis_at(self, x: np.ndarray) -> np.ndarray:
        """Orthonormal basis evaluated at arbitrary points in [-1, 1]."""
        (P,) = orthonormal_jacobi(np.asarray(x, dtype=float), self.L, self.alpha, derivatives=0)
        return P / self.norms

    def tail_fraction(self, coeffs: np.ndarray) -> float:
        total = float(np.dot(coeffs, coeffs))
        if total == 0.0:
            return 0.0
        cut = (2 * self.L) // 3 + 1
        return float(np.dot(coeffs[cut:], coeffs[cut:])) / total


def build_background(n: int, kind: BackgroundKind | None = None, N: int = 128, L: int = 48) -> Background:
    kind = RoundSphere() if kind is None else kind
    if n < 3:
        raise PreconditionError(f"dimension n={n} must be at least 3")
    if L < 8:
        raise PreconditionError(f"truncation L={L} must be at least 8")
    if N < 2 * L + 2:
        raise PreconditionError(f"N={N} too small for L={L}: need N >= 2L+2 to avoid aliasing")

    if isinstance(kind, RoundSphere):
        m, r1 = n, 1.0
        extra_volume = 1.0
        R0 = float(n * (n - 1))
    elif isinstance(kind, EinsteinProduct):
        p, q = kind.p, kind.q
        if p < 2 or q < 2:
            raise PreconditionError("Einstein product needs p, q >= 2")
        if p + q != n:
            raise PreconditionError(f"p+q={p + q} does not match n={n}")
        r1, r2 = kind.resolved_radii()
        if r1 <= 0 or r2 <= 0:
            raise PreconditionError("radii must be positive")
        k1, k2 = (p - 1) / r1**2, (q - 1) / r2**2
        if abs(k1 - k2) > 1e-12 * max(k1, k2):
            raise PreconditionError(f"radii {r1}, {r2} are not Einstein matched")
        m = p
        extra_volume = r2**q * sphere_area(q)
        R0 = p * (p - 1) / r1**2 + q * (q - 1) / r2**2
    else:
        raise PreconditionError(f"unknown background kind {kind!r}")

    a = (m - 2) / 2.0
    x, w = gauss_jacobi(N, a)
    volume = r1**m * sphere_area(m) * extra_volume
    # rescale so that the weights integrate the full measure, not just the 1-D weight
    scale = volume / math.fsum(w)
    weights = w * scale
    P, dP, d2P = orthonormal_jacobi(x, L, a, derivatives=2)
    norms = np.full(L + 1, math.sqrt(scale))
    basis, dbasis, d2basis = P / norms, dP / norms, d2P / norms

    ls = np.arange(L + 1)
    eigs = ls * (ls + m - 1) / r1**2
    A0 = R0 / (2 * n * (n - 1))
    Q0 = (n * n - 4) / (8 * n * (n - 1) ** 2) * R0**2

    return Background(
        n=n, kind=kind, N=N, L=L, m=m, r1=r1,
        nodes=_readonly(x), weights=_readonly(weights), volume=volume,
        R0=float(R0), Q0=float(Q0), A0_coeff=float(A0),
        eigs=_readonly(eigs), basis=_readonly(basis), dbasis=_readonly(dbasis),
        d2basis=_readonly(d2basis), norms=_readonly(norms),
    )


@dataclass(frozen=True, eq=False)
class Field:
    """Zonal field: nodal values plus optional spectral coefficients."""

    bg: Background
    values: np.ndarray
    coeffs: np.ndarray | None = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.bg.N,):
            raise ValueError(f"expected {self.bg.N} nodal values, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("field has non-finite values")
        object.__setattr__(self, "values", vals)

    def spectral(self) -> np.ndarray:
        return self.coeffs if self.coeffs is not None else self.bg.project(self.values)


def from_function(bg: Background, func: Callable[[np.ndarray], np.ndarray]) -> Field:
    return Field(bg, np.broadcast_to(func(bg.nodes), bg.nodes.shape).astype(float))


def from_coeffs(bg: Background, coeffs: np.ndarray) -> Field:
    c = np.zeros(bg.L + 1)
    coeffs = np.asarray(coeffs, dtype=float)
    c[: len(coeffs)] = coeffs
    return Field(bg, bg.synth(c), c)


def constant(bg: Background, c: float) -> Field:
    return Field(bg, np.full(bg.N, float(c)))


def basis_function(bg: Background, l: int) -> Field:
    c = np.zeros(bg.L + 1)
    c[l] = 1.0
    return from_coeffs(bg, c)


def to_spectral(f: Field) -> Field:
    if f.coeffs is not None:
        return f
    return Field(f.bg, f.values, f.bg.project(f.values))


def to_nodal(f: Field) -> Field:
    """Resample from the coefficients, dropping anything above degree L."""
    c = f.spectral()
    return Field(f.bg, f.bg.synth(c), c)


def _checked_coeffs(f: Field) -> np.ndarray:
    c = f.spectral()
    if f.bg.tail_fraction(c) > TAIL_WARN_FRACTION:
        warnings.warn("top spectral modes carry significant energy; increase L", AliasingWarning, stacklevel=3)
    return c


def laplacian_g0(f: Field) -> Field:
    c = _checked_coeffs(f)
    lc = -f.bg.eigs * c
    return Field(f.bg, f.bg.synth(lc), lc)


def grad_sq_g0(f: Field) -> Field:
    c = _checked_coeffs(f)
    return Field(f.bg, f.bg.grad_sq(c))


def integrate(f: Field) -> float:
    return f.bg.integrate(f.values)


def evaluate(f: Field, x: np.ndarray) -> np.ndarray:
    """Evaluate the spectral expansion of ``f`` at arbitrary mu values."""
    return f.bg.basis_at(x) @ f.spectral()


@dataclass(frozen=True, eq=False)
class SpectralOperator:
    bg: Background
    multipliers: np.ndarray
    kernel_dim: int = field(init=False)

    def __post_init__(self):
        mult = _readonly(np.asarray(self.multipliers, dtype=float))
        object.__setattr__(self, "multipliers", mult)
        scale = max(1.0, float(np.max(np.abs(mult))))
        object.__setattr__(self, "kernel_dim", int(np.sum(np.abs(mult) <= 1e-12 * scale)))

    def apply_coeffs(self, c: np.ndarray) -> np.ndarray:
        return self.multipliers * c

    def apply(self, f: Field) -> Field:
        c = self.multipliers * f.spectral()
        return Field(self.bg, self.bg.synth(c), c)

    def solve_coeffs(self, c: np.ndarray) -> np.ndarray:
        """Inverse on the complement of the kernel; kernel components map to 0."""
        out = np.zeros_like(c)
        nz = self.multipliers != 0.0
        if self.kernel_dim:
            scale = max(1.0, float(np.max(np.abs(self.multipliers))))
            nz = np.abs(self.multipliers) > 1e-12 * scale
        out[nz] = c[nz] / self.multipliers[nz]
        return out

    def solve(self, f: Field) -> Field:
        c = self.solve_coeffs(f.spectral())
        return Field(self.bg, self.bg.synth(c), c)


def minus_laplacian(bg: Background) -> SpectralOperator:
    return SpectralOperator(bg, bg.eigs)


def conformal_laplacian(bg: Background) -> SpectralOperator:
    n = bg.n
    return SpectralOperator(bg, bg.eigs + (n - 2) * bg.R0 / (4 * (n - 1)))
