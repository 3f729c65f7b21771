"""Exterior powers of the truncated space.

Blades e_i = e_{i_1} ^ ... ^ e_{i_k} with i_1 < ... < i_k form an orthonormal
basis of the k-th wedge power.  Dense wedge matrices have C(N, k) rows and are
meant for small test problems only; long FTLE runs propagate k tangent
vectors instead (see :mod:`chafee_ftle.lyapunov`).

Indices are 1-based throughout, matching mode numbers.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .spectral import SpectralField

__all__ = [
    "WedgeIndex",
    "WedgeVector",
    "wedge_indices",
    "blade",
    "blade_coefficients",
    "wedge_norm_of_operator",
    "wedge_power",
    "b_hat_k",
    "max_volume_brute_force",
]


@dataclass(frozen=True, order=True)
class WedgeIndex:
    indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if not idx:
            raise ValueError("wedge index must be nonempty")
        if idx[0] < 1 or any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"wedge index must be strictly increasing and >= 1, got {idx}")
        object.__setattr__(self, "indices", idx)

    @property
    def k(self) -> int:
        return len(self.indices)

    @classmethod
    def leading(cls, k: int) -> WedgeIndex:
        """The distinguished index (1, ..., k)."""
        return cls(tuple(range(1, k + 1)))

    def __iter__(self):
        return iter(self.indices)


@lru_cache(maxsize=64)
def wedge_indices(n: int, k: int) -> tuple[tuple[int, ...], ...]:
    """All increasing k-tuples from 1..n in lexicographic order."""
    if not 1 <= k <= n:
        raise ValueError(f"grade {k} outside 1..{n}")
    return tuple(itertools.combinations(range(1, n + 1), k))


@dataclass(frozen=True, eq=False)
class WedgeVector:
    """Sparse coefficients of a k-vector against the orthonormal blades."""

    k: int
    coeffs: dict[WedgeIndex, float] = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for idx, c in self.coeffs.items():
            idx = idx if isinstance(idx, WedgeIndex) else WedgeIndex(tuple(idx))
            if idx.k != self.k:
                raise ValueError(f"index {idx.indices} has grade {idx.k}, expected {self.k}")
            if c != 0.0:
                clean[idx] = float(c)
        object.__setattr__(self, "coeffs", clean)

    def __getitem__(self, idx) -> float:
        idx = idx if isinstance(idx, WedgeIndex) else WedgeIndex(tuple(idx))
        return self.coeffs.get(idx, 0.0)

    def norm_squared(self) -> float:
        return float(sum(c * c for c in self.coeffs.values()))

    def norm(self) -> float:
        return math.sqrt(self.norm_squared())

    def inner(self, other: WedgeVector) -> float:
        if other.k != self.k:
            raise ValueError("grades differ")
        return float(sum(c * other.coeffs.get(i, 0.0) for i, c in self.coeffs.items()))

    @property
    def leading_coefficient(self) -> float:
        return self[WedgeIndex.leading(self.k)]


def blade_coefficients(frame: np.ndarray, k: int | None = None) -> np.ndarray:
    """Dense blade coefficients of the rows of ``frame`` (shape (k, n)).

    Entry j is the k x k minor on the columns ``wedge_indices(n, k)[j]``.
    """
    frame = np.asarray(frame, dtype=float)
    kk, n = frame.shape
    if k is not None and k != kk:
        raise ValueError("frame size does not match the grade")
    cols = np.array(wedge_indices(n, kk)) - 1
    minors = frame[:, cols].transpose(1, 0, 2)  # (C, k, k)
    return np.linalg.det(minors)


def blade(vectors) -> WedgeVector:
    """v_1 ^ ... ^ v_k as a WedgeVector; dependent inputs give zero."""
    rows = [v.coeffs if isinstance(v, SpectralField) else np.asarray(v, dtype=float) for v in vectors]
    frame = np.vstack(rows)
    k, n = frame.shape
    if k > n:
        return WedgeVector(k)
    dets = blade_coefficients(frame)
    return WedgeVector(k, {WedgeIndex(i): d for i, d in zip(wedge_indices(n, k), dets)})


def _singular_values(A: np.ndarray) -> np.ndarray:
    # SVD rather than eigvalsh(A^T A): squaring A would turn a zero singular
    # value into sqrt(roundoff) ~ 1e-8
    return np.linalg.svd(A, compute_uv=False)


def wedge_norm_of_operator(A, k: int) -> float:
    """||^k A||, the product of the k largest singular values of A."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if not 1 <= k <= A.shape[1]:
        raise ValueError(f"grade {k} outside 1..{A.shape[1]}")
    return float(np.prod(_singular_values(A)[:k]))


def wedge_power(A, k: int) -> np.ndarray:
    """Dense matrix of ^k A in the blade basis (Cauchy-Binet minors)."""
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    idx = np.array(wedge_indices(n, k)) - 1
    # entry (I, J) = det A[I, J]
    sub = A[idx[:, None, :, None], idx[None, :, None, :]]
    return np.linalg.det(sub)


def b_hat_k(B, k: int) -> np.ndarray:
    """Derivation induced by B on the k-th wedge power.

    B^(k)(v_1 ^ ... ^ v_k) = sum_j v_1 ^ ... ^ B v_j ^ ... ^ v_k.  On blades,
    replacing e_{i_j} by B e_{i_j} and re-sorting gives entry (I, J) equal to
    sum_j B[i_j, i_j] when I = J, and (-1)^s B[a, b] when I and J differ in
    exactly one slot (J has b where I has a), with s the number of indices of
    the common part strictly between a and b.
    """
    B = np.asarray(B, dtype=float)
    n = B.shape[0]
    if B.shape != (n, n):
        raise ValueError("B must be square")
    indices = wedge_indices(n, k)
    pos = {idx: j for j, idx in enumerate(indices)}
    out = np.zeros((len(indices), len(indices)))
    diag = np.diag(B)
    for col, J in enumerate(indices):
        Jset = set(J)
        out[col, col] = sum(diag[j - 1] for j in J)
        for slot, b in enumerate(J):
            rest = J[:slot] + J[slot + 1 :]
            for a in range(1, n + 1):
                if a in Jset:
                    continue
                I = tuple(sorted(rest + (a,)))
                between = sum(1 for r in rest if min(a, b) < r < max(a, b))
                out[pos[I], col] += (-1) ** between * B[a - 1, b - 1]
    return out


def _frame_volumes(A: np.ndarray, frames: np.ndarray) -> np.ndarray:
    Q, _ = np.linalg.qr(frames)
    AQ = A @ Q
    gram = np.swapaxes(AQ, 1, 2) @ AQ
    return np.sqrt(np.clip(np.linalg.det(gram), 0.0, None))


def max_volume_brute_force(A, k: int, n_frames: int = 10_000, seed: int = 0,
                           adaptive: bool = False) -> float:
    """Max of |det(A restricted to E)| over random orthonormal k-frames E.

    With ``adaptive=False`` the frames are Haar-distributed.  With
    ``adaptive=True`` the first fifth is Haar-distributed and the rest are
    random perturbations of the incumbent best frame with a shrinking scale
    (a random local search).  Either way every candidate is a random frame
    and the result approaches ||^k A|| from below.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[1]
    rng = np.random.default_rng(seed)
    if not adaptive:
        return float(_frame_volumes(A, rng.standard_normal((n_frames, n, k))).max())
    n0 = max(1, n_frames // 5)
    frames = rng.standard_normal((n0, n, k))
    vols = _frame_volumes(A, frames)
    best = np.linalg.qr(frames[np.argmax(vols)])[0]
    best_vol = float(vols.max())
    remaining = n_frames - n0
    batch = 100
    scale = 0.5
    while remaining > 0:
        m = min(batch, remaining)
        cand = best[None] + scale * rng.standard_normal((m, n, k))
        v = _frame_volumes(A, cand)
        j = int(np.argmax(v))
        if v[j] > best_vol:
            best_vol = float(v[j])
            best = np.linalg.qr(cand[j])[0]
        else:
            scale *= 0.7
        remaining -= m
    return best_vol
