"""Dacorogna-Moser transport between two strictly positive grid densities.

One Neumann Poisson solve gives u with lap u = rho_nu - rho_mu; the flow of
w(t, x) = -grad u / ((1 - t) rho_mu + t rho_nu) then carries rho_mu to rho_nu.
The gradient lives on cell faces with zero normal component on the boundary,
so the discrete flux divergence reproduces lap_h u exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from . import metrics
from .config import Config, config
from .core_types import (
    CoordinateFrame,
    GridDensity,
    IsotopyPath,
    NodeGrid,
    SampledMap,
    require_same_grid,
    validate_density,
)
from .errors import IncompatibleSourceError, NonConvergenceError
from .flow_engine import FlowMap
from .schedule import FeedbackSchedule, FrameInversionControl, SchedulePiece, StaggeredGradientVelocity
from .worker_pool import WorkerPool

log = logging.getLogger("steering.moser_builder")

POISSON_TOL = 1e-8
COMPATIBILITY_TOL = 1e-8


def face_gradients(u: np.ndarray, hx: float, hy: float) -> tuple[np.ndarray, np.ndarray]:
    """Gradient on x-faces (ny, nx + 1) and y-faces (ny + 1, nx); boundary faces are zero."""
    ny, nx = u.shape
    gx = np.zeros((ny, nx + 1))
    gy = np.zeros((ny + 1, nx))
    gx[:, 1:-1] = np.diff(u, axis=1) / hx
    gy[1:-1, :] = np.diff(u, axis=0) / hy
    return gx, gy


def neumann_laplacian(u: np.ndarray, hx: float, hy: float) -> np.ndarray:
    """5-point Laplacian with ghost-cell reflection at the boundary."""
    gx, gy = face_gradients(u, hx, hy)
    return np.diff(gx, axis=1) / hx + np.diff(gy, axis=0) / hy


def solve_poisson_neumann(g, spacing: tuple[float, float] | None = None, tol: float = POISSON_TOL,
                          max_iter: int | None = None) -> np.ndarray:
    """Zero-mean u with lap_h u = g under homogeneous Neumann conditions.

    `g` is an (ny, nx) array of cell values or a GridDensity-shaped field; CG runs
    on -lap_h restricted to zero-mean vectors.
    """
    if isinstance(g, GridDensity):
        spacing = g.spacing
        g = g.values
    if spacing is None:
        raise ValueError("spacing is required for a bare array source")
    g = np.asarray(g, dtype=float)
    hx, hy = spacing
    ny, nx = g.shape
    total = float(g.sum() * hx * hy)
    if abs(total) > COMPATIBILITY_TOL:
        raise IncompatibleSourceError(f"Neumann source must integrate to zero, got {total:.3g}")
    rhs = g - g.mean()
    if not np.any(rhs):
        return np.zeros_like(rhs)
    n = nx * ny

    def matvec(v):
        v = v.reshape(ny, nx)
        v = v - v.mean()
        return -neumann_laplacian(v, hx, hy).ravel()

    op = spla.LinearOperator((n, n), matvec=matvec, dtype=float)
    with metrics.observe_stage("solve_poisson_neumann"):
        sol, info = spla.cg(op, -rhs.ravel(), rtol=0.0, atol=0.1 * tol, maxiter=max_iter or 10 * n)
    u = sol.reshape(ny, nx)
    u = u - u.mean()
    residual = float(np.max(np.abs(neumann_laplacian(u, hx, hy) - rhs)))
    if residual > tol:
        raise NonConvergenceError(f"Poisson CG residual {residual:.3g} above {tol:.1g} (info={info})", result=u)
    log.debug("poisson solved", extra={"cells": n, "residual": residual})
    return u


def moser_interpolation_field(rho_mu: GridDensity, rho_nu: GridDensity) -> StaggeredGradientVelocity:
    rho_mu = validate_density(rho_mu, require_positive=True)
    rho_nu = validate_density(rho_nu, require_positive=True)
    require_same_grid(rho_mu, rho_nu)
    hx, hy = rho_mu.spacing
    diff = rho_nu.values - rho_mu.values
    # both masses are 1 to rounding; remove the residue before the compatibility check
    diff = diff - diff.mean()
    u = solve_poisson_neumann(diff, (hx, hy))
    gx, gy = face_gradients(u, hx, hy)
    return StaggeredGradientVelocity(rho_mu.domain, gx, gy, rho_mu.values, rho_nu.values)


def field_schedule(field: StaggeredGradientVelocity, m: int = 2) -> FeedbackSchedule:
    """One frame-inversion piece whose flow is the flow of the field over [0, 1]."""
    return FeedbackSchedule(field.domain, m, (SchedulePiece(1.0, FrameInversionControl(field)),))


class FlowIsotopy(IsotopyPath):
    """H(t, .) = flow of a velocity field from 0 to t; inverses integrate backward."""

    method = "flow"

    def __init__(self, grid: NodeGrid, field: StaggeredGradientVelocity, cfg: Config = config,
                 pool: WorkerPool | None = None):
        super().__init__(grid)
        self.field = field
        self.flow = FlowMap(field_schedule(field), CoordinateFrame(), cfg.H_ODE, cfg, pool)

    def evaluate(self, t, pts):
        return self.flow.between(pts, 0.0, t)

    def inverse(self, t, pts):
        return self.flow.between(pts, t, 0.0)

    def fragment(self, t0, t1, pts):
        return self.flow.between(pts, t0, t1)


@dataclass(frozen=True, eq=False)
class MoserDiffeo:
    field: StaggeredGradientVelocity
    isotopy: FlowIsotopy
    endpoint: SampledMap
    # det of the endpoint Jacobian at the nodes, (ny + 1, nx + 1)
    det: np.ndarray

    @property
    def min_det(self) -> float:
        return float(self.det.min())

    def map_table(self) -> list[tuple[float, float, float, float, float]]:
        """Rows x, y, Tx, Ty, detJ on the grid nodes."""
        pts = self.endpoint.grid.points()
        img = self.endpoint.node_points()
        return [
            (float(p[0]), float(p[1]), float(q[0]), float(q[1]), float(d))
            for p, q, d in zip(pts, img, self.det.ravel())
        ]


def build_moser_diffeo(rho_mu: GridDensity, rho_nu: GridDensity, cfg: Config = config,
                       pool: WorkerPool | None = None) -> MoserDiffeo:
    """Integrate the Moser field from every grid vertex over [0, 1]."""
    with metrics.observe_stage("build_moser_diffeo"):
        field = moser_interpolation_field(rho_mu, rho_nu)
        nx, ny = rho_mu.resolution
        grid = NodeGrid.vertices(rho_mu.domain, nx, ny)
        iso = FlowIsotopy(grid, field, cfg, pool)
        img, jac = iso.flow.with_jacobian(grid.points(), 0.0, 1.0)
    det = np.linalg.det(jac).reshape(grid.shape)
    endpoint = SampledMap(grid, img.reshape(grid.shape + (2,)))
    log.info("moser diffeomorphism built", extra={
        "nodes": int(det.size), "min_det": float(det.min()), "max_displacement": endpoint.max_displacement(),
    })
    return MoserDiffeo(field, iso, endpoint, det)
