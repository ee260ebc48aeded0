"""Continuity-equation transport of densities and particles along a feedback flow."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import metrics
from .config import Config, config
from .core_types import GridDensity, VectorFieldFamily, cell_centers, require_same_grid, sample_density
from .errors import ExcessiveMassDriftError, GridMismatchError
from .flow_engine import FlowMap
from .schedule import FeedbackSchedule
from .worker_pool import WorkerPool

log = logging.getLogger("steering.density_transport")


@dataclass(frozen=True)
class WeightedPoints:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        w = np.asarray(self.weights, dtype=float).ravel()
        if pts.shape[0] != w.size:
            raise ValueError("points and weights differ in length")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return self.weights.size


@dataclass(frozen=True)
class PushforwardResult:
    density: GridDensity
    # total mass before renormalization
    mass_drift: float
    min_det: float
    time: float


def pushforward_density(rho0: GridDensity, schedule: FeedbackSchedule, family: VectorFieldFamily, t: float = 1.0,
                        cfg: Config = config, pool: WorkerPool | None = None,
                        t_start: float = 0.0) -> PushforwardResult:
    """rho_t(x) = rho0(z) / det grad Phi^t(z) with z = Phi^{-t}(x), sampled at the cell centers.

    With t_start > 0, rho0 is taken as the density at time t_start and transported to t.
    """
    xs, ys = cell_centers(rho0.domain, *rho0.resolution)
    X, Y = np.meshgrid(xs, ys)
    targets = np.stack([X.ravel(), Y.ravel()], axis=1)
    if t == t_start or schedule.is_zero():
        return PushforwardResult(rho0, rho0.mass, 1.0, t)
    flow = FlowMap(schedule, family, cfg.H_ODE, cfg, pool)
    with metrics.observe_stage("pushforward_density"):
        z = flow.between(targets, t, t_start)
        _, jac = flow.with_jacobian(z, t_start, t)
    det = np.linalg.det(jac)
    raw = sample_density(rho0, z) / det
    raw_density = GridDensity(rho0.domain, raw.reshape(rho0.values.shape))
    mass = raw_density.mass
    metrics.set_mass_drift(mass)
    if abs(mass - 1.0) > cfg.MASS_DRIFT_LIMIT:
        raise ExcessiveMassDriftError(mass)
    if abs(mass - 1.0) > 1e-3:
        log.warning("mass drift above 1e-3", extra={"mass_drift": mass, "t": t})
    density = GridDensity(rho0.domain, raw_density.values / mass, positive=bool(raw.min() > 0))
    return PushforwardResult(density, mass, float(det.min()), t)


def pushforward_particles(samples: WeightedPoints, schedule: FeedbackSchedule, family: VectorFieldFamily,
                          t: float = 1.0, cfg: Config = config, pool: WorkerPool | None = None) -> WeightedPoints:
    flow = FlowMap(schedule, family, cfg.H_ODE, cfg, pool)
    return WeightedPoints(flow.evaluate(samples.points, t), samples.weights)


def sample_particles(d: GridDensity, n: int, seed: int) -> WeightedPoints:
    """n equal-weight samples from the piecewise-constant density (uniform within the chosen cell)."""
    rng = np.random.default_rng(seed)
    p = d.weights().ravel()
    p = p / p.sum()
    cells = rng.choice(p.size, size=n, p=p)
    ny, nx = d.values.shape
    hx, hy = d.spacing
    j, i = np.divmod(cells, nx)
    x = d.domain.lower[0] + (i + rng.random(n)) * hx
    y = d.domain.lower[1] + (j + rng.random(n)) * hy
    return WeightedPoints(np.stack([x, y], axis=1), np.full(n, 1.0 / n))


def empirical_to_grid(samples: WeightedPoints, like: GridDensity) -> GridDensity:
    """Histogram of weighted points on the cells of `like` (points outside are clamped to edge cells)."""
    nx, ny = like.resolution
    hx, hy = like.spacing
    i = np.clip(((samples.points[:, 0] - like.domain.lower[0]) // hx).astype(int), 0, nx - 1)
    j = np.clip(((samples.points[:, 1] - like.domain.lower[1]) // hy).astype(int), 0, ny - 1)
    counts = np.zeros((ny, nx))
    np.add.at(counts, (j, i), samples.weights)
    return GridDensity(like.domain, counts / like.cell_area)


def simulate_series(rho0: GridDensity, schedule: FeedbackSchedule, family: VectorFieldFamily,
                    times: Sequence[float], cfg: Config = config, pool: WorkerPool | None = None) -> list[PushforwardResult]:
    return [pushforward_density(rho0, schedule, family, float(t), cfg, pool) for t in times]


def continuity_residual(rho_series: Sequence[GridDensity], times: Sequence[float], schedule: FeedbackSchedule,
                        family: VectorFieldFamily, cfg: Config = config) -> float:
    """max |d_t rho + div(F rho)| over interior cells and interior times, central differences."""
    if len(rho_series) != len(times) or len(rho_series) < 3:
        raise GridMismatchError("need at least three frames with matching times")
    first = rho_series[0]
    for r in rho_series[1:]:
        require_same_grid(first, r)
    dts = np.diff(np.asarray(times, dtype=float))
    if not np.allclose(dts, dts[0], rtol=1e-9, atol=0):
        raise GridMismatchError("frame times must be uniformly spaced")
    dt = float(dts[0])
    nx, ny = first.resolution
    if nx < 3 or ny < 3:
        raise GridMismatchError("residual needs at least 3 x 3 cells")
    hx, hy = first.spacing
    xs, ys = cell_centers(first.domain, nx, ny)
    X, Y = np.meshgrid(xs, ys)
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    flow = FlowMap(schedule, family, cfg.H_ODE, cfg)
    worst = 0.0
    for k in range(1, len(rho_series) - 1):
        rho = rho_series[k].values
        dtr = (rho_series[k + 1].values - rho_series[k - 1].values) / (2 * dt)
        vel = flow.velocity_at(float(times[k]), pts).reshape(ny, nx, 2)
        fx = vel[..., 0] * rho
        fy = vel[..., 1] * rho
        div = (fx[1:-1, 2:] - fx[1:-1, :-2]) / (2 * hx) + (fy[2:, 1:-1] - fy[:-2, 1:-1]) / (2 * hy)
        res = np.abs(dtr[1:-1, 1:-1] + div)
        worst = max(worst, float(res.max()))
    return worst
