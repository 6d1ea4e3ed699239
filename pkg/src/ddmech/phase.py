"""Phase-space points, local metrics, and weighted global norms.

The state of a material point is a strain-stress pair ``z = (eps, sig)``.
States of a structure with ``M`` material points live in the product of the
local phase spaces, one factor per point. Every distance used by the
projection solvers derives from the quadratic local norm

    |z|^2 = C eps . eps + C^{-1} sig . sig

with ``C`` a symmetric positive-definite modulus-like matrix, and from the
volume-weighted global norm ``|z|^2 = sum_e w_e |z_e|^2``. The global square
distance therefore decomposes into independent per-point terms, which is what
makes the data-side projection a batch of local nearest-neighbour searches.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "LocalPhasePoint",
    "LocalMetric",
    "GlobalMetric",
    "GlobalState",
    "local_norm_sq",
    "local_distance_sq",
    "global_norm_sq",
    "global_distance_sq",
]


def _as_vector(x, name: str) -> np.ndarray:
    v = np.atleast_1d(np.asarray(x, dtype=float))
    if v.ndim != 1:
        raise ValueError(f"{name} must be a scalar or 1-D vector, got shape {v.shape}")
    if v.size == 0:
        raise ValueError(f"{name} must not be empty")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} must be finite")
    v.setflags(write=False)
    return v


@dataclass(frozen=True)
class LocalPhasePoint:
    """A (strain, stress) pair at one material point.

    Both components are vectors of the same dimension ``m >= 1`` (``m = 1``
    for truss bars). Scalars are promoted to 1-vectors.
    """

    strain: np.ndarray
    stress: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "strain", _as_vector(self.strain, "strain"))
        object.__setattr__(self, "stress", _as_vector(self.stress, "stress"))
        if self.strain.shape != self.stress.shape:
            raise ValueError(
                f"strain and stress dimensions differ: {self.strain.shape} vs {self.stress.shape}"
            )

    @property
    def dim(self) -> int:
        return self.strain.size

    def __sub__(self, other: "LocalPhasePoint") -> "LocalPhasePoint":
        if other.dim != self.dim:
            raise ValueError("phase points of different dimension")
        return LocalPhasePoint(self.strain - other.strain, self.stress - other.stress)


@dataclass(frozen=True)
class LocalMetric:
    """SPD matrix ``c`` and its inverse, defining the local phase-space norm.

    Construct through :meth:`from_matrix` or :meth:`from_modulus`; the
    initializer validates symmetry, positive definiteness and that ``c_inv``
    actually inverts ``c``.
    """

    c: np.ndarray
    c_inv: np.ndarray

    def __post_init__(self) -> None:
        c = np.atleast_2d(np.asarray(self.c, dtype=float))
        c_inv = np.atleast_2d(np.asarray(self.c_inv, dtype=float))
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"metric matrix must be square, got shape {c.shape}")
        if c.shape[0] < 1 or c.shape[0] > 3:
            raise ValueError("local dimension must be between 1 and 3")
        if c_inv.shape != c.shape:
            raise ValueError("c and c_inv shapes differ")
        if not np.all(np.isfinite(c)):
            raise ValueError("metric matrix must be finite")
        scale = np.linalg.norm(c)
        if np.linalg.norm(c - c.T) > 1e-12 * scale:
            raise ValueError("metric matrix must be symmetric")
        if np.min(np.linalg.eigvalsh(c)) <= 0.0:
            raise ValueError("metric matrix must be positive definite")
        eye = np.eye(c.shape[0])
        if np.linalg.norm(c @ c_inv - eye) > 1e-10 * max(1.0, scale):
            raise ValueError("c_inv does not invert c")
        c.setflags(write=False)
        c_inv.setflags(write=False)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "c_inv", c_inv)

    @classmethod
    def from_matrix(cls, c) -> "LocalMetric":
        c = np.atleast_2d(np.asarray(c, dtype=float))
        c = 0.5 * (c + c.T)
        return cls(c, np.linalg.inv(c))

    @classmethod
    def from_modulus(cls, value: float) -> "LocalMetric":
        """Scalar metric for one-dimensional local states."""
        value = float(value)
        if value <= 0.0:
            raise ValueError("modulus must be positive")
        return cls(np.array([[value]]), np.array([[1.0 / value]]))

    @property
    def dim(self) -> int:
        return self.c.shape[0]


class GlobalMetric:
    """Per-element local metrics plus positive volume weights.

    Provides a vectorized fast path when every local metric is scalar, which
    is the case for all truss computations.
    """

    __slots__ = ("locals", "weights", "c_diag", "c_inv_diag")

    def __init__(self, locals: Sequence[LocalMetric], weights) -> None:
        self.locals = tuple(locals)
        if not self.locals:
            raise ValueError("at least one local metric is required")
        w = np.asarray(weights, dtype=float).reshape(-1).copy()
        if w.size != len(self.locals):
            raise ValueError(
                f"{len(self.locals)} local metrics but {w.size} weights"
            )
        if not np.all(np.isfinite(w)) or np.any(w <= 0.0):
            raise ValueError("weights must be finite and positive")
        w.setflags(write=False)
        self.weights = w
        if all(m.dim == 1 for m in self.locals):
            c = np.array([m.c[0, 0] for m in self.locals])
            ci = np.array([m.c_inv[0, 0] for m in self.locals])
            c.setflags(write=False)
            ci.setflags(write=False)
            self.c_diag = c
            self.c_inv_diag = ci
        else:
            self.c_diag = None
            self.c_inv_diag = None

    @classmethod
    def uniform(cls, c_value: float, weights) -> "GlobalMetric":
        """Same scalar metric for every element."""
        w = np.asarray(weights, dtype=float).reshape(-1)
        m = LocalMetric.from_modulus(c_value)
        return cls([m] * w.size, w)

    @property
    def n_elements(self) -> int:
        return len(self.locals)

    @property
    def is_scalar(self) -> bool:
        return self.c_diag is not None


@dataclass(frozen=True)
class GlobalState:
    """Strain and stress arrays of shape ``(M, m)`` for the whole structure."""

    strain: np.ndarray
    stress: np.ndarray

    def __post_init__(self) -> None:
        eps = np.asarray(self.strain, dtype=float)
        sig = np.asarray(self.stress, dtype=float)
        if eps.ndim == 1:
            eps = eps[:, None]
        if sig.ndim == 1:
            sig = sig[:, None]
        if eps.ndim != 2 or sig.shape != eps.shape:
            raise ValueError(
                f"strain/stress must share shape (M, m), got {eps.shape} vs {sig.shape}"
            )
        if eps.shape[0] < 1:
            raise ValueError("state must hold at least one element")
        if not (np.all(np.isfinite(eps)) and np.all(np.isfinite(sig))):
            raise ValueError("state entries must be finite")
        eps = eps.copy()
        sig = sig.copy()
        eps.setflags(write=False)
        sig.setflags(write=False)
        object.__setattr__(self, "strain", eps)
        object.__setattr__(self, "stress", sig)

    @classmethod
    def zeros(cls, n_elements: int, dim: int = 1) -> "GlobalState":
        return cls(np.zeros((n_elements, dim)), np.zeros((n_elements, dim)))

    @classmethod
    def from_points(cls, points: Sequence[LocalPhasePoint]) -> "GlobalState":
        if not points:
            raise ValueError("at least one point is required")
        dims = {p.dim for p in points}
        if len(dims) != 1:
            raise ValueError("all points must share one local dimension")
        return cls(
            np.stack([p.strain for p in points]),
            np.stack([p.stress for p in points]),
        )

    @property
    def n_elements(self) -> int:
        return self.strain.shape[0]

    @property
    def dim(self) -> int:
        return self.strain.shape[1]

    def point(self, e: int) -> LocalPhasePoint:
        return LocalPhasePoint(self.strain[e], self.stress[e])

    def __iter__(self) -> Iterator[LocalPhasePoint]:
        return (self.point(e) for e in range(self.n_elements))


def local_norm_sq(z: LocalPhasePoint, metric: LocalMetric) -> float:
    """Quadratic local norm ``C eps . eps + C^{-1} sig . sig``."""
    if z.dim != metric.dim:
        raise ValueError(f"point dimension {z.dim} does not match metric dimension {metric.dim}")
    e, s = z.strain, z.stress
    return float(e @ metric.c @ e + s @ metric.c_inv @ s)


def local_distance_sq(a: LocalPhasePoint, b: LocalPhasePoint, metric: LocalMetric) -> float:
    return local_norm_sq(a - b, metric)


def _check_state(z: GlobalState, gm: GlobalMetric) -> None:
    if z.n_elements != gm.n_elements:
        raise ValueError(
            f"state has {z.n_elements} elements but metric has {gm.n_elements}"
        )


def global_norm_sq(z: GlobalState, gm: GlobalMetric) -> float:
    """Volume-weighted sum of local square norms."""
    _check_state(z, gm)
    if gm.is_scalar and z.dim == 1:
        e = z.strain[:, 0]
        s = z.stress[:, 0]
        return float(np.sum(gm.weights * (gm.c_diag * e * e + gm.c_inv_diag * s * s)))
    total = 0.0
    for e in range(z.n_elements):
        total += gm.weights[e] * local_norm_sq(z.point(e), gm.locals[e])
    return float(total)


def global_distance_sq(a: GlobalState, b: GlobalState, gm: GlobalMetric) -> float:
    """Square distance between two global states; decomposes over elements."""
    if a.strain.shape != b.strain.shape:
        raise ValueError("states of different shape")
    _check_state(a, gm)
    if gm.is_scalar and a.dim == 1:
        de = a.strain[:, 0] - b.strain[:, 0]
        ds = a.stress[:, 0] - b.stress[:, 0]
        return float(np.sum(gm.weights * (gm.c_diag * de * de + gm.c_inv_diag * ds * ds)))
    total = 0.0
    for e in range(a.n_elements):
        total += gm.weights[e] * local_distance_sq(a.point(e), b.point(e), gm.locals[e])
    return float(total)
