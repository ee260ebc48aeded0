"""Optimal transport for the quadratic cost.

Two solvers with different duties: `solve_plan_exact` is the network-simplex
oracle for small weighted point sets, `solve_plan_sinkhorn` the log-domain
entropic solver for grid densities. On tensor grids the squared Euclidean cost
splits into an x part and a y part, so the Gibbs kernel is applied one axis at
a time and the dense (n x n) kernel is never formed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np
import ot
from scipy.special import logsumexp

from . import metrics
from .config import Config, config
from .core_types import GridDensity, NodeGrid, SampledMap, cell_centers, validate_density
from .density_transport import WeightedPoints
from .errors import (
    EmptyRowError,
    NonConvergenceError,
    NonPositive1DError,
    SizeExceededError,
    WeightMismatchError,
)

log = logging.getLogger("steering.ot_solver")

EXACT_MAX_SIZE = 512
WEIGHT_TOL = 1e-9
# sub-cell quadrature points per cell for 1D costs
QUADRATURE_POINTS = 8


# ---------------------------------------------------------------------------
# plans


@dataclass(frozen=True, eq=False)
class TransportPlan:
    """Dense coupling between two weighted point sets."""

    source: WeightedPoints
    target: WeightedPoints
    gamma: np.ndarray
    cost: float
    marginal_violation: float
    eps: float | None = None
    iterations: int = 0
    converged: bool = True

    @property
    def w2(self) -> float:
        return float(np.sqrt(max(self.cost, 0.0)))

    def row_sums(self) -> np.ndarray:
        return self.gamma.sum(axis=1)

    def summary(self) -> dict:
        return {
            "cost": self.cost,
            "w2": self.w2,
            "marginalViolation": self.marginal_violation,
            "eps": self.eps,
            "iters": self.iterations,
        }


def _axis_costs(mu: GridDensity, nu: GridDensity) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = cell_centers(mu.domain, *mu.resolution)
    xt, yt = cell_centers(nu.domain, *nu.resolution)
    return (xs[:, None] - xt[None, :]) ** 2, (ys[:, None] - yt[None, :]) ** 2


def _log_weights(d: GridDensity) -> np.ndarray:
    w = d.weights()
    with np.errstate(divide="ignore"):
        return np.log(w / w.sum())


def _lse_apply(h: np.ndarray, cx: np.ndarray, cy: np.ndarray, eps: float) -> np.ndarray:
    """out[i_y, i_x] = log sum_j exp(h[j_y, j_x] - C((i_x, i_y), (j_x, j_y)) / eps).

    h lives on the far grid (ny_t, nx_t); cx is (nx_s, nx_t), cy is (ny_s, ny_t).
    """
    inner = logsumexp(h[:, None, :] - cx[None, :, :] / eps, axis=2)  # (ny_t, nx_s)
    return logsumexp(inner[None, :, :] - cy[:, :, None] / eps, axis=1)  # (ny_s, nx_s)


@dataclass(frozen=True, eq=False)
class GridTransportPlan:
    """Entropic coupling between two grid densities kept in dual form.

    gamma[i, j] = exp((f_i + g_j - C_ij) / eps) a_i b_j with a, b the cell masses;
    cells are flattened row-major (x fastest).
    """

    mu: GridDensity
    nu: GridDensity
    f: np.ndarray
    g: np.ndarray
    eps: float
    iterations: int
    marginal_violation: float
    converged: bool
    entropic_cost: float
    # (eps, entropic cost) at the end of every eps-scaling stage
    ladder: tuple[tuple[float, float], ...] = ()
    cost: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "cost", self._transport_cost())

    @property
    def w2(self) -> float:
        return float(np.sqrt(max(self.cost, 0.0)))

    def _kernel_terms(self):
        cx, cy = _axis_costs(self.mu, self.nu)
        return cx, cy, _log_weights(self.mu), _log_weights(self.nu)

    def _log_rows(self) -> tuple[np.ndarray, np.ndarray]:
        """Per source cell: log of exp(f_i/eps) a_i and log sum_j exp((g_j - C_ij)/eps) b_j."""
        cx, cy, loga, logb = self._kernel_terms()
        return self.f / self.eps + loga, _lse_apply(self.g / self.eps + logb, cx, cy, self.eps)

    def row_sums(self) -> np.ndarray:
        left, right = self._log_rows()
        return np.exp(left + right)

    def col_sums(self) -> np.ndarray:
        cx, cy, loga, logb = self._kernel_terms()
        right = _lse_apply(self.f / self.eps + loga, cx.T, cy.T, self.eps)
        return np.exp(self.g / self.eps + logb + right)

    def barycenters(self) -> np.ndarray:
        """(ny, nx, 2) conditional means sum_j gamma_ij y_j / sum_j gamma_ij."""
        cx, cy, _, logb = self._kernel_terms()
        h = self.g / self.eps + logb
        base = _lse_apply(h, cx, cy, self.eps)
        xt, yt = cell_centers(self.nu.domain, *self.nu.resolution)
        # shift target coordinates to be positive so they can enter in log form
        lo = np.asarray(self.nu.domain.lower) - 1.0
        lx = np.log(xt - lo[0])[None, :]
        ly = np.log(yt - lo[1])[:, None]
        tx = np.exp(_lse_apply(h + lx, cx, cy, self.eps) - base) + lo[0]
        ty = np.exp(_lse_apply(h + ly, cx, cy, self.eps) - base) + lo[1]
        return np.stack([tx, ty], axis=-1)

    def _transport_cost(self) -> float:
        # <C, gamma> = sum r_i |x_i|^2 + sum c_j |y_j|^2 - 2 sum_i r_i x_i . bary_i
        rows = self.row_sums()
        cols = self.col_sums()
        xs, ys = cell_centers(self.mu.domain, *self.mu.resolution)
        xt, yt = cell_centers(self.nu.domain, *self.nu.resolution)
        Xs, Ys = np.meshgrid(xs, ys)
        Xt, Yt = np.meshgrid(xt, yt)
        bary = self.barycenters()
        cross = np.sum(rows * (Xs * bary[..., 0] + Ys * bary[..., 1]))
        total = np.sum(rows * (Xs ** 2 + Ys ** 2)) + np.sum(cols * (Xt ** 2 + Yt ** 2)) - 2.0 * cross
        return float(max(total, 0.0))

    def block(self, rows: np.ndarray) -> np.ndarray:
        """Dense plan rows gamma[rows, :] for flattened source indices."""
        nx_s, _ = self.mu.resolution
        xs, ys = cell_centers(self.mu.domain, *self.mu.resolution)
        xt, yt = cell_centers(self.nu.domain, *self.nu.resolution)
        Xt, Yt = np.meshgrid(xt, yt)
        tgt = np.stack([Xt.ravel(), Yt.ravel()], axis=1)
        jy, ix = np.divmod(rows, nx_s)
        src = np.stack([xs[ix], ys[jy]], axis=1)
        C = ot.dist(src, tgt)
        loga = _log_weights(self.mu).ravel()[rows]
        logb = _log_weights(self.nu).ravel()
        expo = (self.f.ravel()[rows, None] + self.g.ravel()[None, :] - C) / self.eps + loga[:, None] + logb[None, :]
        return np.exp(expo)

    def dense(self) -> np.ndarray:
        n = self.mu.values.size
        return self.block(np.arange(n))

    def summary(self) -> dict:
        return {
            "cost": self.cost,
            "w2": self.w2,
            "entropicCost": self.entropic_cost,
            "marginalViolation": self.marginal_violation,
            "eps": self.eps,
            "iters": self.iterations,
        }


# ---------------------------------------------------------------------------
# exact LP


def solve_plan_exact(mu: WeightedPoints, nu: WeightedPoints) -> TransportPlan:
    """Discrete Kantorovich problem with cost |x - y|^2 by network simplex."""
    if len(mu) > EXACT_MAX_SIZE or len(nu) > EXACT_MAX_SIZE:
        raise SizeExceededError(f"exact solver takes at most {EXACT_MAX_SIZE} points per side, got {len(mu)} x {len(nu)}")
    for name, w in (("source", mu.weights), ("target", nu.weights)):
        if abs(w.sum() - 1.0) > WEIGHT_TOL or np.any(w < 0):
            raise WeightMismatchError(f"{name} weights must be nonnegative and sum to 1, got sum {w.sum()!r}")
    M = ot.dist(mu.points, nu.points)
    with metrics.observe_stage("solve_plan_exact"):
        gamma, info = ot.emd(mu.weights, nu.weights, M, numItermax=1_000_000, log=True)
    if info.get("result_code", 1) != 1:
        raise NonConvergenceError(f"network simplex stopped: {info.get('warning')}")
    violation = float(np.abs(gamma.sum(axis=1) - mu.weights).sum() + np.abs(gamma.sum(axis=0) - nu.weights).sum())
    cost = float(np.sum(gamma * M))
    log.debug("exact plan", extra={"n": len(mu), "m": len(nu), "cost": cost})
    return TransportPlan(mu, nu, gamma, cost, violation)


def grid_points(d: GridDensity) -> WeightedPoints:
    """Cell centers and cell masses of a grid density (row-major, x fastest)."""
    X, Y = np.meshgrid(*cell_centers(d.domain, *d.resolution))
    w = d.weights().ravel()
    return WeightedPoints(np.stack([X.ravel(), Y.ravel()], axis=1), w / w.sum())


# ---------------------------------------------------------------------------
# Sinkhorn


def default_eps(d: GridDensity, cfg: Config = config) -> float:
    return cfg.EPS_FACTOR * d.domain.diam ** 2


def eps_ladder(eps0: float, target: float) -> list[float]:
    """eps0, eps0/2, ... down to the target (always last)."""
    ladder = []
    e = eps0
    while e > target:
        ladder.append(e)
        e /= 2.0
    ladder.append(target)
    return ladder


def _sinkhorn_stage(loga, logb, cx, cy, f, g, eps, max_iters, tol):
    """Alternating log-domain updates; the violation is read off the f update for free."""
    a = np.exp(loga)
    done = 0
    for _ in range(max_iters):
        r = _lse_apply(g / eps + logb, cx, cy, eps)
        violation = float(np.abs(np.exp(f / eps + loga + r) - a).sum())
        if violation < tol:
            return f, g, done, violation
        f = -eps * r
        g = -eps * _lse_apply(f / eps + loga, cx.T, cy.T, eps)
        done += 1
    r = _lse_apply(g / eps + logb, cx, cy, eps)
    violation = float(np.abs(np.exp(f / eps + loga + r) - a).sum())
    return f, g, done, violation


def _dual_value(f, g, loga, logb) -> float:
    a, b = np.exp(loga), np.exp(logb)
    return float(np.sum(f * a) + np.sum(g * b))


def solve_plan_sinkhorn(mu: GridDensity, nu: GridDensity, eps: float | None = None, max_iters: int | None = None,
                        cfg: Config = config, strict: bool = False) -> GridTransportPlan:
    """Entropic plan by alternating scaling with eps-scaling from diam^2 / 8 down to eps.

    Non-converged runs log a warning and return the best iterate; with strict=True
    they raise NonConvergenceError carrying that iterate.
    """
    mu = validate_density(mu)
    nu = validate_density(nu)
    target = eps if eps is not None else default_eps(mu, cfg)
    if not target > 0:
        raise ValueError("eps must be positive")
    max_iters = max_iters or cfg.SINKHORN_MAX_ITERS
    tol = cfg.SINKHORN_TOL
    cx, cy = _axis_costs(mu, nu)
    loga, logb = _log_weights(mu), _log_weights(nu)
    diam = max(mu.domain.diam, nu.domain.diam)
    f = np.zeros(mu.values.shape)
    g = np.zeros(nu.values.shape)
    total = 0
    ladder = []
    violation = np.inf
    stages = eps_ladder(diam ** 2 / 8.0, target)
    with metrics.observe_stage("solve_plan_sinkhorn"):
        for k, e in enumerate(stages):
            last = k == len(stages) - 1
            budget = max_iters - total if last else max(1, min(max_iters // len(stages), max_iters - total))
            # intermediate stages only need a warm start
            stage_tol = tol if last else max(tol, 1e-3)
            f, g, it, violation = _sinkhorn_stage(loga, logb, cx, cy, f, g, e, max(budget, 1), stage_tol)
            total += it
            ladder.append((e, _dual_value(f, g, loga, logb)))
    metrics.inc_sinkhorn_iterations(total)
    converged = violation < tol
    plan = GridTransportPlan(mu, nu, f, g, target, total, violation, converged, ladder[-1][1], tuple(ladder))
    if not converged:
        log.warning("sinkhorn did not converge", extra={"eps": target, "iters": total, "violation": violation})
        if strict:
            raise NonConvergenceError(f"sinkhorn marginal violation {violation:.3g} after {total} iterations", result=plan)
    else:
        log.debug("sinkhorn converged", extra={"eps": target, "iters": total, "cost": plan.cost})
    return plan


def sinkhorn_divergence(mu: GridDensity, nu: GridDensity, eps: float | None = None, cfg: Config = config) -> float:
    """OT_eps(mu, nu) - OT_eps(mu, mu)/2 - OT_eps(nu, nu)/2, clipped at 0."""
    cross = solve_plan_sinkhorn(mu, nu, eps, cfg=cfg).entropic_cost
    self_mu = solve_plan_sinkhorn(mu, mu, eps, cfg=cfg).entropic_cost
    self_nu = solve_plan_sinkhorn(nu, nu, eps, cfg=cfg).entropic_cost
    return max(cross - 0.5 * self_mu - 0.5 * self_nu, 0.0)


# ---------------------------------------------------------------------------
# maps


@dataclass(frozen=True, eq=False)
class QuantileMap:
    """Monotone 1D map T = G^{-1} o F between piecewise-constant densities."""

    centers: np.ndarray
    values: np.ndarray
    cost: float
    source_edges: np.ndarray
    source_cdf: np.ndarray
    target_edges: np.ndarray
    target_cdf: np.ndarray

    def __call__(self, x) -> np.ndarray:
        return _quantile(x, self.source_edges, self.source_cdf, self.target_edges, self.target_cdf)


def _quantile(x, edges_s, cdf_s, edges_t, cdf_t) -> np.ndarray:
    return np.interp(np.interp(x, edges_s, cdf_s), cdf_t, edges_t)


def _cdf(vals: np.ndarray, interval: tuple[float, float]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    vals = np.asarray(vals, dtype=float)
    if vals.ndim != 1 or vals.size < 1:
        raise ValueError("1D density values must be a non-empty vector")
    if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
        raise NonPositive1DError("1D densities must be strictly positive")
    edges = np.linspace(interval[0], interval[1], vals.size + 1)
    mass = vals * np.diff(edges)
    cdf = np.concatenate([[0.0], np.cumsum(mass)])
    total = cdf[-1]
    return edges, cdf / total, vals / total


def quantile_map_1d(mu_vals, nu_vals, interval: tuple[float, float] = (0.0, 1.0),
                    nu_interval: tuple[float, float] | None = None,
                    quadrature: int = QUADRATURE_POINTS) -> QuantileMap:
    """Sampled T at source cell centers and cost int |T(x) - x|^2 dmu by sub-cell midpoints."""
    edges_s, cdf_s, dens_s = _cdf(mu_vals, interval)
    edges_t, cdf_t, _ = _cdf(nu_vals, nu_interval or interval)
    centers = 0.5 * (edges_s[:-1] + edges_s[1:])
    h = np.diff(edges_s)
    offsets = (np.arange(quadrature) + 0.5) / quadrature
    pts = edges_s[:-1, None] + h[:, None] * offsets[None, :]
    disp = _quantile(pts, edges_s, cdf_s, edges_t, cdf_t) - pts
    cost = float(np.sum(disp ** 2 * (dens_s * h / quadrature)[:, None]))
    return QuantileMap(
        centers=centers,
        values=_quantile(centers, edges_s, cdf_s, edges_t, cdf_t),
        cost=cost,
        source_edges=edges_s,
        source_cdf=cdf_s,
        target_edges=edges_t,
        target_cdf=cdf_t,
    )


def barycentric_map(plan: TransportPlan | GridTransportPlan):
    """T(x_i) = sum_j gamma_ij y_j / sum_j gamma_ij.

    Grid plans give a SampledMap on the source cell centers (bilinear off-grid);
    point plans give an (n, 2) array aligned with the source points.
    """
    if isinstance(plan, GridTransportPlan):
        if np.any(plan.mu.weights() <= 0):
            raise EmptyRowError("source density has empty cells")
        grid = NodeGrid(*cell_centers(plan.mu.domain, *plan.mu.resolution))
        return SampledMap(grid, plan.barycenters())
    rows = plan.row_sums()
    if np.any(rows <= 0):
        raise EmptyRowError(f"{int(np.sum(rows <= 0))} plan rows carry no mass")
    return plan.gamma @ plan.target.points / rows[:, None]


@dataclass(frozen=True)
class MonotonicityReport:
    min_pairing: float
    violations: int
    pairs: int

    def to_dict(self) -> dict:
        return {"minPairing": self.min_pairing, "violations": self.violations, "pairs": self.pairs}


def check_monotone(tmap: SampledMap | Callable[[np.ndarray], np.ndarray], n_pairs: int = 2000, seed: int = 0,
                   points: np.ndarray | None = None, rel_tol: float = 1e-6) -> MonotonicityReport:
    """Pairing <T(x) - T(x'), x - x'> over random pairs of sample points."""
    if points is None:
        if not isinstance(tmap, SampledMap):
            raise ValueError("sample points are required for a plain callable map")
        points = tmap.grid.points()
    pts = np.asarray(points, dtype=float)
    images = tmap(pts)
    rng = np.random.default_rng(seed)
    i = rng.integers(0, len(pts), n_pairs)
    j = rng.integers(0, len(pts), n_pairs)
    keep = i != j
    i, j = i[keep], j[keep]
    dx = pts[i] - pts[j]
    pairing = np.sum((images[i] - images[j]) * dx, axis=1)
    bad = pairing < -rel_tol * np.sum(dx ** 2, axis=1)
    report = MonotonicityReport(float(pairing.min()) if pairing.size else 0.0, int(bad.sum()), int(pairing.size))
    if report.violations:
        log.info("monotonicity violations", extra=report.to_dict())
    return report


def plan_triplets(plan: TransportPlan | GridTransportPlan, threshold: float = 1e-12,
                  block: int = 256) -> Iterator[tuple[int, int, float]]:
    """(i, j, gamma_ij) with gamma_ij > threshold, materialized a block of rows at a time."""
    if isinstance(plan, TransportPlan):
        n = plan.gamma.shape[0]
        get = lambda rows: plan.gamma[rows]
    else:
        n = plan.mu.values.size
        get = plan.block
    for start in range(0, n, block):
        rows = np.arange(start, min(start + block, n))
        gam = get(rows)
        ii, jj = np.nonzero(gam > threshold)
        for a, b in zip(ii, jj):
            yield int(rows[a]), int(b), float(gam[a, b])
