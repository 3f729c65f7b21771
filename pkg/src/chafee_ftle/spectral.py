"""Truncated Dirichlet sine-Galerkin representation of fields on [0, L].

Coefficients are stored against the L2-orthonormal basis

    e_k(x) = sqrt(2/L) sin(pi * s * k * x / L),   k = 1..N,

with stride ``s = 2`` for the ``PaperTwoPi`` convention (lambda_k = (2 pi k/L)^2)
and ``s = 1`` for ``StandardDirichlet`` (lambda_k = (pi k/L)^2).  All array
routines act on the last axis, so batches of fields (ensembles, tangent
frames) go through the same code path as single fields.

Products are evaluated by collocation with a type-I discrete sine transform on
``P = 2N + 1`` interior points of the reduced interval [0, L/s].  The grid is
fine enough that the projection of a cubic of N-mode fields back onto the
first N modes is free of aliasing.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.fft

__all__ = [
    "BasisConvention",
    "DomainSpec",
    "SpectralBasis",
    "SpectralField",
    "NonFiniteStateError",
    "eigenvalue",
    "h_norm",
    "v_norm",
    "project_span",
    "cubic",
    "multiply_pointwise",
    "basis_for",
]


class NonFiniteStateError(FloatingPointError):
    """A spectral state contains NaN or Inf."""


class BasisConvention(str, enum.Enum):
    PAPER_TWO_PI = "PaperTwoPi"
    STANDARD_DIRICHLET = "StandardDirichlet"

    @property
    def stride(self) -> int:
        return 2 if self is BasisConvention.PAPER_TWO_PI else 1


@dataclass(frozen=True)
class DomainSpec:
    """Interval length, number of retained modes and basis convention."""

    L: float = 2 * math.pi
    N: int = 64
    basis_convention: BasisConvention = BasisConvention.PAPER_TWO_PI

    def __post_init__(self):
        if not (self.L > 0 and math.isfinite(self.L)):
            raise ValueError(f"domain length must be positive, got {self.L}")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"number of modes must be a positive integer, got {self.N}")
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(
            self, "basis_convention", BasisConvention(self.basis_convention)
        )

    @property
    def stride(self) -> int:
        return self.basis_convention.stride

    def eigenvalues(self) -> np.ndarray:
        k = np.arange(1, self.N + 1, dtype=float)
        return (math.pi * self.stride * k / self.L) ** 2


class SpectralBasis:
    """Transforms, eigenvalues and dealiased products for one DomainSpec.

    Instances are immutable after construction and may be shared between
    threads.  Use :func:`basis_for` to get a cached instance.
    """

    def __init__(self, domain: DomainSpec):
        self.domain = domain
        self.N = domain.N
        self.lam = domain.eigenvalues()
        self.lam.setflags(write=False)
        self.n_grid = 2 * self.N + 1
        # reduced interval [0, L/stride] carries all the information
        self.reduced_length = domain.L / domain.stride
        self._to_grid_scale = math.sqrt((self.n_grid + 1) / domain.L)
        self._from_grid_scale = math.sqrt(domain.L / (self.n_grid + 1))

    def __repr__(self):
        return f"SpectralBasis({self.domain!r})"

    @cached_property
    def grid(self) -> np.ndarray:
        """Interior collocation points on the reduced interval."""
        j = np.arange(1, self.n_grid + 1)
        return j * self.reduced_length / (self.n_grid + 1)

    # -- transforms -------------------------------------------------------

    def to_grid(self, coeffs: np.ndarray) -> np.ndarray:
        """Evaluate fields at the collocation points (last axis)."""
        coeffs = np.asarray(coeffs, dtype=float)
        pad = [(0, 0)] * (coeffs.ndim - 1) + [(0, self.n_grid - self.N)]
        padded = np.pad(coeffs, pad)
        return self._to_grid_scale * scipy.fft.dst(padded, type=1, norm="ortho", axis=-1)

    def from_grid(self, values: np.ndarray) -> np.ndarray:
        """Project grid values onto the first N modes."""
        full = scipy.fft.dst(values, type=1, norm="ortho", axis=-1)
        return self._from_grid_scale * full[..., : self.N]

    # -- products ---------------------------------------------------------

    def cubic(self, coeffs: np.ndarray) -> np.ndarray:
        g = self.to_grid(coeffs)
        return self.from_grid(g * g * g)

    def multiply(self, b: np.ndarray, v: np.ndarray) -> np.ndarray:
        return self.from_grid(self.to_grid(b) * self.to_grid(v))

    # -- norms ------------------------------------------------------------

    def h_norm(self, coeffs: np.ndarray) -> np.ndarray:
        return np.sqrt(np.sum(np.square(coeffs), axis=-1))

    def v_norm(self, coeffs: np.ndarray) -> np.ndarray:
        return np.sqrt(np.sum(self.lam * np.square(coeffs), axis=-1))

    @cached_property
    def _cos_matrix(self) -> np.ndarray:
        # d/dx e_k at the grid points, shape (N, P)
        k = np.arange(1, self.N + 1)[:, None]
        x = self.grid[None, :]
        w = math.pi * k / self.reduced_length
        return math.sqrt(2 / self.domain.L) * w * np.cos(w * x)

    def square_v_norm(self, coeffs: np.ndarray) -> np.ndarray:
        """H^1_0 seminorm ||(u^2)'||_{L^2(0,L)} of the pointwise square.

        The square of an N-mode field leaves the retained span, so this is
        computed in physical space: (u^2)' = 2 u u' and the trapezoid rule on
        the collocation grid integrates its square exactly.
        """
        u = self.to_grid(coeffs)
        du = np.asarray(coeffs) @ self._cos_matrix
        integrand = (2 * u * du) ** 2
        h = self.reduced_length / (self.n_grid + 1)
        # endpoints contribute zero since u vanishes there
        return np.sqrt(self.domain.stride * h * np.sum(integrand, axis=-1))

    def sup_norm(self, coeffs: np.ndarray, refine: int = 4) -> np.ndarray:
        """Max |u(x)| sampled on a grid ``refine`` times finer than collocation."""
        n = refine * (self.n_grid + 1)
        x = np.arange(1, n) * self.reduced_length / n
        k = np.arange(1, self.N + 1)
        basis = math.sqrt(2 / self.domain.L) * np.sin(
            np.outer(k, x) * math.pi / self.reduced_length
        )
        return np.max(np.abs(np.asarray(coeffs) @ basis), axis=-1)

    def check_finite(self, coeffs: np.ndarray, where: str = "") -> None:
        if not np.all(np.isfinite(coeffs)):
            raise NonFiniteStateError(f"non-finite spectral coefficients {where}".strip())


_BASES: dict[DomainSpec, SpectralBasis] = {}


def basis_for(domain: DomainSpec) -> SpectralBasis:
    basis = _BASES.get(domain)
    if basis is None:
        basis = _BASES.setdefault(domain, SpectralBasis(domain))
    return basis


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Coefficients of a function in H = L^2(0, L) against the sine basis."""

    coeffs: np.ndarray
    domain: DomainSpec = field(default_factory=DomainSpec)

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float)
        if c.shape != (self.domain.N,):
            raise ValueError(
                f"expected {self.domain.N} coefficients, got shape {c.shape}"
            )
        if not np.all(np.isfinite(c)):
            raise NonFiniteStateError("spectral field has non-finite coefficients")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zeros(cls, domain: DomainSpec) -> SpectralField:
        return cls(np.zeros(domain.N), domain)

    @classmethod
    def mode(cls, k: int, domain: DomainSpec, amplitude: float = 1.0) -> SpectralField:
        if not 1 <= k <= domain.N:
            raise IndexError(f"mode {k} outside 1..{domain.N}")
        c = np.zeros(domain.N)
        c[k - 1] = amplitude
        return cls(c, domain)

    @property
    def basis(self) -> SpectralBasis:
        return basis_for(self.domain)

    def __add__(self, other: SpectralField) -> SpectralField:
        _same_domain(self, other)
        return SpectralField(self.coeffs + other.coeffs, self.domain)

    def __sub__(self, other: SpectralField) -> SpectralField:
        _same_domain(self, other)
        return SpectralField(self.coeffs - other.coeffs, self.domain)

    def __neg__(self) -> SpectralField:
        return SpectralField(-self.coeffs, self.domain)

    def __mul__(self, scalar: float) -> SpectralField:
        return SpectralField(scalar * self.coeffs, self.domain)

    __rmul__ = __mul__

    def __eq__(self, other):
        if not isinstance(other, SpectralField):
            return NotImplemented
        return self.domain == other.domain and np.array_equal(self.coeffs, other.coeffs)

    __hash__ = None

    def inner(self, other: SpectralField) -> float:
        _same_domain(self, other)
        return float(self.coeffs @ other.coeffs)

    def evaluate(self, x) -> np.ndarray:
        """Point values of the represented function at positions ``x``."""
        x = np.asarray(x, dtype=float)
        k = np.arange(1, self.domain.N + 1)
        phase = np.multiply.outer(x, k) * math.pi * self.domain.stride / self.domain.L
        return math.sqrt(2 / self.domain.L) * np.sin(phase) @ self.coeffs


def _same_domain(a: SpectralField, b: SpectralField) -> None:
    if a.domain != b.domain:
        raise ValueError("fields live on different domains")


def eigenvalue(k: int, d: DomainSpec) -> float:
    """Dirichlet eigenvalue lambda_k of -Laplacian in the chosen convention."""
    if not 1 <= k <= d.N:
        raise IndexError(f"mode index {k} outside 1..{d.N}")
    return (math.pi * d.stride * k / d.L) ** 2


def h_norm(u: SpectralField) -> float:
    return float(np.sqrt(np.sum(u.coeffs**2)))


def v_norm(u: SpectralField) -> float:
    return float(basis_for(u.domain).v_norm(u.coeffs))


def project_span(u: SpectralField, k: int) -> tuple[SpectralField, SpectralField]:
    """Split u into its component on span(e_1..e_k) and the orthogonal rest."""
    if not 1 <= k <= u.domain.N:
        raise IndexError(f"projection rank {k} outside 1..{u.domain.N}")
    low = np.zeros_like(u.coeffs)
    high = np.zeros_like(u.coeffs)
    low[:k] = u.coeffs[:k]
    high[k:] = u.coeffs[k:]
    return SpectralField(low, u.domain), SpectralField(high, u.domain)


def cubic(u: SpectralField) -> SpectralField:
    """Dealiased Galerkin projection of the pointwise cube u^3."""
    return SpectralField(basis_for(u.domain).cubic(u.coeffs), u.domain)


def multiply_pointwise(b: SpectralField, v: SpectralField) -> SpectralField:
    """Galerkin projection of the pointwise product b * v.

    The product is formed on the reduced interval [0, L/s].  Under the
    ``PaperTwoPi`` convention every basis function is odd about L/2, so a
    multiplier such as 3u^2 is represented by its restriction to [0, L/2];
    integrating b * v over the full interval would give zero.
    """
    _same_domain(b, v)
    return SpectralField(basis_for(b.domain).multiply(b.coeffs, v.coeffs), b.domain)
