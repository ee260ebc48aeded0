"""Domain, density, vector-field-family and sampled-map types shared by every module.

All types are immutable after construction: arrays are copied and flagged
read-only, so instances can be shared freely between worker threads.
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .errors import (
    ConfigError,
    GridMismatchError,
    NegativeDensityError,
    NewtonDivergenceError,
    NonFiniteError,
    SingularFrameError,
    ZeroMassError,
)
from . import metrics

log = logging.getLogger("steering.core_types")

# normalization is skipped when the mass is already this close to 1 (keeps validate idempotent)
_MASS_SLACK = 1e-12
SINGULAR_DET = 1e-10


def _frozen(a: Any) -> np.ndarray:
    arr = np.array(a, dtype=float, copy=True)
    arr.flags.writeable = False
    return arr


def as_points(x) -> tuple[np.ndarray, bool]:
    """Return an (N, 2) float array and whether the input was a single point."""
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    return np.atleast_2d(pts), single


@dataclass(frozen=True)
class Domain:
    lower: tuple[float, float]
    upper: tuple[float, float]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        if len(lo) != 2 or len(hi) != 2:
            raise ValueError("domain corners must be points in R^2")
        if not all(h > l for l, h in zip(lo, hi)):
            raise ValueError(f"upper corner {hi} must exceed lower corner {lo} componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def unit(cls) -> "Domain":
        return cls((0.0, 0.0), (1.0, 1.0))

    @property
    def size(self) -> np.ndarray:
        return np.subtract(self.upper, self.lower)

    @property
    def diam(self) -> float:
        return float(np.hypot(*self.size))

    def inflate(self, fraction: float) -> "Domain":
        pad = self.size * fraction
        return Domain(tuple(np.subtract(self.lower, pad)), tuple(np.add(self.upper, pad)))

    def contains(self, pts) -> np.ndarray:
        pts, _ = as_points(pts)
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        return np.all((pts >= lo) & (pts <= hi), axis=1)

    def clip(self, pts) -> np.ndarray:
        return np.clip(pts, self.lower, self.upper)

    def to_dict(self) -> dict:
        return {"lower": list(self.lower), "upper": list(self.upper)}


# ---------------------------------------------------------------------------
# bilinear interpolation on tensor grids (clamped outside the node box)


def _locate(nodes: np.ndarray, q: np.ndarray):
    n = nodes.size
    if n == 1:
        zeros = np.zeros(q.shape, dtype=int)
        return zeros, zeros, np.zeros(q.shape), np.ones(q.shape), np.ones(q.shape, dtype=bool)
    qc = np.clip(q, nodes[0], nodes[-1])
    i0 = np.clip(np.searchsorted(nodes, qc, side="right") - 1, 0, n - 2)
    h = nodes[i0 + 1] - nodes[i0]
    w = (qc - nodes[i0]) / h
    outside = (q < nodes[0]) | (q > nodes[-1])
    return i0, i0 + 1, w, h, outside


def interp_bilinear(xs: np.ndarray, ys: np.ndarray, values: np.ndarray, pts: np.ndarray, gradient: bool = False):
    """Bilinear interpolation of node values[j, i] (optionally with trailing component axes).

    Queries outside the node box are clamped to it; the returned gradient is the
    exact cell-wise derivative and vanishes along clamped directions.
    """
    i0, i1, wx, hx, outx = _locate(xs, pts[:, 0])
    j0, j1, wy, hy, outy = _locate(ys, pts[:, 1])
    v00 = values[j0, i0]
    v10 = values[j0, i1]
    v01 = values[j1, i0]
    v11 = values[j1, i1]
    extra = (None,) * (values.ndim - 2)
    ax = wx[(slice(None),) + extra]
    ay = wy[(slice(None),) + extra]
    out = (1 - ax) * (1 - ay) * v00 + ax * (1 - ay) * v10 + (1 - ax) * ay * v01 + ax * ay * v11
    if not gradient:
        return out
    dx = ((1 - ay) * (v10 - v00) + ay * (v11 - v01)) / hx[(slice(None),) + extra]
    dy = ((1 - ax) * (v01 - v00) + ax * (v11 - v10)) / hy[(slice(None),) + extra]
    dx = np.where(outx[(slice(None),) + extra], 0.0, dx)
    dy = np.where(outy[(slice(None),) + extra], 0.0, dy)
    return out, np.stack([dx, dy], axis=-1)


# ---------------------------------------------------------------------------
# densities


@dataclass(frozen=True, eq=False)
class GridDensity:
    """Cell-centered density, values[j, i] with j the y index (row-major, y-major outer loop)."""

    domain: Domain
    values: np.ndarray
    positive: bool = False

    def __post_init__(self):
        vals = _frozen(self.values)
        if vals.ndim != 2 or min(vals.shape) < 1:
            raise ValueError(f"density values must be a non-empty (ny, nx) array, got shape {vals.shape}")
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_function(cls, domain: Domain, resolution: tuple[int, int], fn: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> "GridDensity":
        xs, ys = cell_centers(domain, *resolution)
        X, Y = np.meshgrid(xs, ys)
        return cls(domain, np.broadcast_to(fn(X, Y), X.shape))

    @classmethod
    def uniform(cls, domain: Domain, resolution: tuple[int, int]) -> "GridDensity":
        nx, ny = resolution
        area = float(np.prod(domain.size))
        return cls(domain, np.full((ny, nx), 1.0 / area), positive=True)

    @property
    def resolution(self) -> tuple[int, int]:
        ny, nx = self.values.shape
        return nx, ny

    @property
    def spacing(self) -> tuple[float, float]:
        nx, ny = self.resolution
        w, h = self.domain.size
        return w / nx, h / ny

    @property
    def cell_area(self) -> float:
        hx, hy = self.spacing
        return hx * hy

    @property
    def mass(self) -> float:
        # np.sum reduces contiguous arrays pairwise
        return float(np.sum(self.values) * self.cell_area)

    @property
    def centers(self) -> "NodeGrid":
        return NodeGrid(*cell_centers(self.domain, *self.resolution))

    def same_grid(self, other: "GridDensity") -> bool:
        return self.domain == other.domain and self.resolution == other.resolution

    def with_values(self, values: np.ndarray) -> "GridDensity":
        return GridDensity(self.domain, values)

    def weights(self) -> np.ndarray:
        return self.values * self.cell_area


def cell_centers(domain: Domain, nx: int, ny: int) -> tuple[np.ndarray, np.ndarray]:
    if nx < 1 or ny < 1:
        raise ValueError(f"resolution must be positive, got {(nx, ny)}")
    (x0, y0), (x1, y1) = domain.lower, domain.upper
    xs = x0 + (np.arange(nx) + 0.5) * (x1 - x0) / nx
    ys = y0 + (np.arange(ny) + 0.5) * (y1 - y0) / ny
    return xs, ys


def validate_density(d: GridDensity, require_positive: bool = False) -> GridDensity:
    v = d.values
    if not np.all(np.isfinite(v)):
        raise NonFiniteError("density contains non-finite values")
    if np.any(v < 0):
        raise NegativeDensityError(f"density has negative cells (min {v.min():.6g})")
    if require_positive and v.min() <= 0:
        raise NegativeDensityError(f"density must be strictly positive (min {v.min():.6g})")
    mass = d.mass
    if not mass > 0:
        raise ZeroMassError("density has zero total mass")
    positive = bool(v.min() > 0)
    if abs(mass - 1.0) <= _MASS_SLACK:
        if positive == d.positive:
            return d
        return GridDensity(d.domain, v, positive=positive)
    return GridDensity(d.domain, v / mass, positive=positive)


def sample_density(d: GridDensity, x):
    """Bilinear interpolation of the cell-centered values, clamped to the boundary centers."""
    pts, single = as_points(x)
    xs, ys = cell_centers(d.domain, *d.resolution)
    out = interp_bilinear(xs, ys, d.values, pts)
    return float(out[0]) if single else out


def coarsen(d: GridDensity, factor: int) -> GridDensity:
    """Average over factor x factor blocks; axes of length 1 are left alone. Mass is preserved."""
    nx, ny = d.resolution
    fx = factor if nx > 1 else 1
    fy = factor if ny > 1 else 1
    if nx % fx or ny % fy:
        raise GridMismatchError(f"resolution {(nx, ny)} is not divisible by {factor}")
    vals = d.values.reshape(ny // fy, fy, nx // fx, fx).mean(axis=(1, 3))
    return GridDensity(d.domain, vals, positive=d.positive)


def l1_norm(values: np.ndarray, cell_area: float) -> float:
    return float(np.sum(np.abs(values)) * cell_area)


def require_same_grid(a: GridDensity, b: GridDensity) -> None:
    if not a.same_grid(b):
        raise GridMismatchError(
            f"grids differ: {a.domain}/{a.resolution} vs {b.domain}/{b.resolution}"
        )


# ---------------------------------------------------------------------------
# vector field families


class VectorFieldFamily(ABC):
    """The fields f_1..f_m of the control system x' = sum_i u_i f_i(x)."""

    m: int = 2
    growth_constant: float = 1.0
    kind: str = "abstract"

    @abstractmethod
    def fields(self, pts: np.ndarray) -> np.ndarray:
        """(N, m, 2) field values."""

    @abstractmethod
    def jacobians(self, pts: np.ndarray) -> np.ndarray:
        """(N, m, 2, 2) Jacobians d f_i / dx."""

    def evaluate(self, i: int, x) -> np.ndarray:
        pts, single = as_points(x)
        out = self.fields(pts)[:, i]
        return out[0] if single else out

    def jacobian(self, i: int, x) -> np.ndarray:
        pts, single = as_points(x)
        out = self.jacobians(pts)[:, i]
        return out[0] if single else out

    @property
    def is_coordinate_frame(self) -> bool:
        return False

    @abstractmethod
    def to_dict(self) -> dict:
        ...


class CoordinateFrame(VectorFieldFamily):
    kind = "coordinate"

    def fields(self, pts):
        return np.broadcast_to(np.eye(2), (len(pts), 2, 2)).copy()

    def jacobians(self, pts):
        return np.zeros((len(pts), 2, 2, 2))

    @property
    def is_coordinate_frame(self) -> bool:
        return True

    def to_dict(self) -> dict:
        return {"kind": self.kind}


class RotatedFrame(VectorFieldFamily):
    """Constant frame f_1 = (cos a, sin a), f_2 = (-sin a, cos a)."""

    kind = "rotated"

    def __init__(self, theta: float):
        self.theta = float(theta)
        c, s = np.cos(self.theta), np.sin(self.theta)
        self._f = np.array([[c, s], [-s, c]])

    def fields(self, pts):
        return np.broadcast_to(self._f, (len(pts), 2, 2)).copy()

    def jacobians(self, pts):
        return np.zeros((len(pts), 2, 2, 2))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "theta": self.theta}


class LinearFamily(VectorFieldFamily):
    """Linear fields f_i(x) = A_i x."""

    kind = "linear"

    def __init__(self, matrices):
        self.matrices = _frozen(matrices)
        if self.matrices.ndim != 3 or self.matrices.shape[1:] != (2, 2):
            raise ValueError("linear family needs an (m, 2, 2) array of matrices")
        self.m = self.matrices.shape[0]
        self.growth_constant = float(max(np.linalg.norm(a, 2) for a in self.matrices))

    def fields(self, pts):
        return np.einsum("mkl,nl->nmk", self.matrices, pts)

    def jacobians(self, pts):
        return np.broadcast_to(self.matrices, (len(pts),) + self.matrices.shape).copy()

    def to_dict(self) -> dict:
        return {"kind": self.kind, "matrices": self.matrices.tolist()}


def family_from_dict(doc: dict) -> VectorFieldFamily:
    kind = doc.get("kind")
    if kind == "coordinate":
        return CoordinateFrame()
    if kind == "rotated":
        return RotatedFrame(doc["theta"])
    if kind == "linear":
        return LinearFamily(doc["matrices"])
    raise ConfigError(f"unknown vector field family {kind!r}")


def check_growth(family: VectorFieldFamily, box: Domain, n: int = 17) -> float:
    """Smallest alpha with |f_i(x)| <= alpha (1 + |x|) on an n x n sample grid of the box."""
    xs = np.linspace(box.lower[0], box.upper[0], n)
    ys = np.linspace(box.lower[1], box.upper[1], n)
    pts = np.stack(np.meshgrid(xs, ys), axis=-1).reshape(-1, 2)
    norms = np.linalg.norm(family.fields(pts), axis=2)
    alpha = float(np.max(norms / (1.0 + np.linalg.norm(pts, axis=1))[:, None]))
    if alpha > family.growth_constant * (1 + 1e-12):
        raise ConfigError(f"growth condition violated: need alpha {alpha:.6g} > declared {family.growth_constant:.6g}")
    return alpha


def frame_matrix(family: VectorFieldFamily, x):
    """Matrix [f_1(x) f_2(x)] (fields as columns) and its determinant."""
    if family.m != 2:
        raise SingularFrameError(f"frame matrix needs m = 2 fields, family has m = {family.m}")
    pts, single = as_points(x)
    mats = np.swapaxes(family.fields(pts), 1, 2)
    det = np.linalg.det(mats)
    if np.any(np.abs(det) < SINGULAR_DET):
        raise SingularFrameError(f"frame is singular (min |det| {np.abs(det).min():.3g})")
    if single:
        return mats[0], float(det[0])
    return mats, det


# ---------------------------------------------------------------------------
# sampled maps and isotopies


@dataclass(frozen=True, eq=False)
class NodeGrid:
    xs: np.ndarray
    ys: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "xs", _frozen(self.xs))
        object.__setattr__(self, "ys", _frozen(self.ys))

    @classmethod
    def vertices(cls, domain: Domain, nx: int, ny: int) -> "NodeGrid":
        return cls(np.linspace(domain.lower[0], domain.upper[0], nx + 1),
                   np.linspace(domain.lower[1], domain.upper[1], ny + 1))

    @property
    def shape(self) -> tuple[int, int]:
        return self.ys.size, self.xs.size

    def points(self) -> np.ndarray:
        X, Y = np.meshgrid(self.xs, self.ys)
        return np.stack([X.ravel(), Y.ravel()], axis=1)

    def refine(self, factor: int) -> "NodeGrid":
        def _ref(a):
            if factor <= 1 or a.size < 2:
                return a
            steps = np.linspace(0.0, 1.0, factor + 1)[:-1]
            inner = (a[:-1, None] + np.diff(a)[:, None] * steps[None, :]).ravel()
            return np.append(inner, a[-1])
        return NodeGrid(_ref(self.xs), _ref(self.ys))


@dataclass(frozen=True, eq=False)
class SampledMap:
    """A map R^2 -> R^2 sampled on grid nodes, values[j, i] = T(xs[i], ys[j]).

    Off-grid evaluation interpolates the displacement T - Id bilinearly; outside
    the node box the displacement is clamped, so the map extends as a translation.
    """

    grid: NodeGrid
    values: np.ndarray
    _displacement: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        vals = _frozen(self.values)
        if vals.shape != self.grid.shape + (2,):
            raise ValueError(f"map values shape {vals.shape} does not match grid {self.grid.shape}")
        object.__setattr__(self, "values", vals)
        X, Y = np.meshgrid(self.grid.xs, self.grid.ys)
        object.__setattr__(self, "_displacement", _frozen(vals - np.stack([X, Y], axis=-1)))

    @classmethod
    def identity(cls, grid: NodeGrid) -> "SampledMap":
        return cls(grid, grid.points().reshape(grid.shape + (2,)))

    @classmethod
    def from_function(cls, grid: NodeGrid, fn: Callable[[np.ndarray], np.ndarray]) -> "SampledMap":
        return cls(grid, fn(grid.points()).reshape(grid.shape + (2,)))

    def __call__(self, x):
        pts, single = as_points(x)
        out = pts + interp_bilinear(self.grid.xs, self.grid.ys, self._displacement, pts)
        return out[0] if single else out

    def with_jacobian(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        d, grad = interp_bilinear(self.grid.xs, self.grid.ys, self._displacement, pts, gradient=True)
        return pts + d, np.eye(2)[None] + grad

    def node_points(self) -> np.ndarray:
        return self.values.reshape(-1, 2)

    def node_jacobians(self) -> np.ndarray:
        """(ny, nx, 2, 2) Jacobians at the nodes by central differences (one-sided at the edges)."""
        jac = np.zeros(self.grid.shape + (2, 2))
        jac[..., 0, 0] = jac[..., 1, 1] = 1.0
        if self.grid.xs.size > 1:
            jac[..., :, 0] = np.gradient(self.values, self.grid.xs, axis=1)
        if self.grid.ys.size > 1:
            jac[..., :, 1] = np.gradient(self.values, self.grid.ys, axis=0)
        return jac

    def max_displacement(self) -> float:
        return float(np.max(np.linalg.norm(self._displacement, axis=-1)))


def newton_solve(fn_with_jac: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]], y: np.ndarray, x0: np.ndarray,
                 max_iter: int, tol: float) -> np.ndarray:
    """Solve F(x) = y point by point; fn_with_jac returns (F(x), DF(x))."""
    x = np.array(x0, dtype=float, copy=True)
    active = np.ones(len(x), dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        fx, jac = fn_with_jac(x[active])
        try:
            step = np.linalg.solve(jac, (fx - y[active])[..., None])[..., 0]
        except np.linalg.LinAlgError as e:
            metrics.inc_newton_failures()
            raise NewtonDivergenceError(f"singular Jacobian during Newton inversion: {e}; increase N") from e
        x[active] -= step
        done = np.linalg.norm(step, axis=1) <= tol
        idx = np.flatnonzero(active)
        active[idx[done]] = False
    if active.any():
        metrics.inc_newton_failures()
        raise NewtonDivergenceError(f"Newton inversion did not converge at {int(active.sum())} points; increase N")
    return x


class IsotopyPath(ABC):
    """A path of maps H(t, .) from the identity at t = 0 to a target map at t = 1."""

    method: str = "abstract"

    def __init__(self, grid: NodeGrid):
        self.grid = grid

    @abstractmethod
    def evaluate(self, t: float, pts: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def inverse(self, t: float, pts: np.ndarray) -> np.ndarray:
        ...

    def fragment(self, t0: float, t1: float, pts: np.ndarray) -> np.ndarray:
        """H(t1, .) o H(t0, .)^{-1} evaluated at pts."""
        return self.evaluate(t1, self.inverse(t0, pts))

    def endpoint(self) -> SampledMap:
        return SampledMap(self.grid, self.evaluate(1.0, self.grid.points()).reshape(self.grid.shape + (2,)))
