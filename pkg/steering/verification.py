"""End-to-end steering checks and the W2 metric-axiom suite."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .config import Config, config
from .core_types import (
    GridDensity,
    VectorFieldFamily,
    coarsen,
    l1_norm,
    require_same_grid,
    validate_density,
)
from .density_transport import WeightedPoints, pushforward_density
from .errors import GridMismatchError
from .ot_solver import sinkhorn_divergence, solve_plan_exact
from .schedule import FeedbackSchedule
from .worker_pool import WorkerPool

log = logging.getLogger("steering.verification")

REPORT_SCHEMA = "VR1"
MAX_SUITE_POINTS = 64


def l1_distance(a: GridDensity, b: GridDensity) -> float:
    require_same_grid(a, b)
    return l1_norm(a.values - b.values, a.cell_area)


def _divides(d: GridDensity, factor: int) -> bool:
    # axes of length 1 are never coarsened
    return all(n == 1 or n % factor == 0 for n in d.resolution)


def _coarse_cells(d: GridDensity, factor: int) -> int:
    nx, ny = d.resolution
    return (nx // factor if nx > 1 else 1) * (ny // factor if ny > 1 else 1)


def _coarsening_factor(d: GridDensity, max_support: int) -> int:
    factor = 1
    while _coarse_cells(d, factor) > max_support or not _divides(d, factor):
        factor += 1
        if factor > max(d.resolution):
            raise GridMismatchError(f"cannot coarsen {d.resolution} to at most {max_support} cells")
    return factor


def w2_grid(a: GridDensity, b: GridDensity, eps: float | None = None,
            cfg: Config = config) -> tuple[float, float | None, int]:
    """sqrt of the Sinkhorn divergence, on grids coarsened to at most W2_MAX_SUPPORT cells.

    Returns (w2, subsampling error estimate or None, coarsening factor). The error
    estimate compares against the next coarser level.
    """
    require_same_grid(a, b)
    factor = _coarsening_factor(a, cfg.W2_MAX_SUPPORT)
    ca, cb = (coarsen(a, factor), coarsen(b, factor)) if factor > 1 else (a, b)
    w2 = float(np.sqrt(sinkhorn_divergence(ca, cb, eps, cfg)))
    if factor == 1:
        return w2, 0.0, 1
    log.warning("W2 computed on coarsened grids", extra={"factor": factor, "cells": int(ca.values.size)})
    if not _divides(a, 2 * factor):
        return w2, None, factor
    w2_coarse = float(np.sqrt(sinkhorn_divergence(coarsen(a, 2 * factor), coarsen(b, 2 * factor), eps, cfg)))
    return w2, abs(w2 - w2_coarse), factor


@dataclass
class VerificationReport:
    passed: bool
    l1: float
    w2: float
    w2_subsampling_error: float | None
    coarsening: int
    mass_drift: float
    min_det_jacobian: float
    tol_l1: float
    tol_w2: float
    runtime_seconds: float | None = None

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "passed": self.passed,
            "l1": self.l1,
            "w2": self.w2,
            "w2SubsamplingError": self.w2_subsampling_error,
            "coarsening": self.coarsening,
            "massDrift": self.mass_drift,
            "minDetJacobian": self.min_det_jacobian,
            "tolL1": self.tol_l1,
            "tolW2": self.tol_w2,
            "runtimeSeconds": self.runtime_seconds,
        }


def verify_steering(mu: GridDensity, nu: GridDensity, schedule: FeedbackSchedule, family: VectorFieldFamily,
                    tol_w2: float, tol_l1: float, cfg: Config = config,
                    pool: WorkerPool | None = None) -> VerificationReport:
    """Push mu through the schedule and compare the time-1 density with nu."""
    started = time.perf_counter()
    mu = validate_density(mu)
    nu = validate_density(nu)
    require_same_grid(mu, nu)
    with metrics.observe_stage("verify_steering"):
        pushed = pushforward_density(mu, schedule, family, 1.0, cfg, pool)
        l1 = l1_distance(pushed.density, nu)
        w2, w2_err, factor = w2_grid(pushed.density, nu, cfg=cfg)
    passed = l1 <= tol_l1 and w2 <= tol_w2 and pushed.min_det > 0
    report = VerificationReport(
        passed=bool(passed),
        l1=l1,
        w2=w2,
        w2_subsampling_error=w2_err,
        coarsening=factor,
        mass_drift=pushed.mass_drift,
        min_det_jacobian=pushed.min_det,
        tol_l1=tol_l1,
        tol_w2=tol_w2,
        runtime_seconds=time.perf_counter() - started,
    )
    log.info("steering verified", extra={"passed": report.passed, "l1": l1, "w2": w2})
    return report


# ---------------------------------------------------------------------------
# metric axioms


@dataclass
class MetricSuiteReport:
    trials: int
    max_symmetry_violation: float = 0.0
    max_triangle_violation: float = 0.0
    # W2^2(mu, mu), not its square root
    max_identity_violation: float = 0.0
    max_translation_violation: float = 0.0
    shift: tuple[float, float] = (0.3, 0.0)
    tolerance: float = 1e-9
    per_trial: list[dict] = field(default_factory=list)

    @property
    def max_violation(self) -> float:
        return max(self.max_symmetry_violation, self.max_triangle_violation,
                   self.max_identity_violation, self.max_translation_violation)

    @property
    def passed(self) -> bool:
        return self.max_violation <= self.tolerance

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "trials": self.trials,
            "passed": self.passed,
            "maxViolation": self.max_violation,
            "maxSymmetryViolation": self.max_symmetry_violation,
            "maxTriangleViolation": self.max_triangle_violation,
            "maxIdentityViolation": self.max_identity_violation,
            "maxTranslationViolation": self.max_translation_violation,
            "shift": list(self.shift),
        }


def _random_measure(rng: np.random.Generator) -> WeightedPoints:
    n = int(rng.integers(2, MAX_SUITE_POINTS + 1))
    pts = rng.random((n, 2))
    w = rng.dirichlet(np.ones(n))
    return WeightedPoints(pts, w / w.sum())


def _trial(seq: np.random.SeedSequence, shift: np.ndarray) -> dict:
    rng = np.random.default_rng(seq)
    a, b, c = (_random_measure(rng) for _ in range(3))
    w_ab = solve_plan_exact(a, b).w2
    w_ba = solve_plan_exact(b, a).w2
    w_ac = solve_plan_exact(a, c).w2
    w_cb = solve_plan_exact(c, b).w2
    same = solve_plan_exact(a, a).cost
    moved = solve_plan_exact(a, WeightedPoints(a.points + shift, a.weights)).w2
    return {
        "symmetry": abs(w_ab - w_ba),
        "triangle": max(0.0, w_ab - w_ac - w_cb),
        "identity": abs(same),
        "translation": abs(moved - float(np.linalg.norm(shift))),
    }


def metric_property_suite(seed: int, trials: int, shift=(0.3, 0.0), pool: WorkerPool | None = None,
                          tolerance: float = 1e-9) -> MetricSuiteReport:
    """Metric axioms of the exact W2 on random triples of at most 64-point measures."""
    shift = np.asarray(shift, dtype=float)
    report = MetricSuiteReport(trials, shift=(float(shift[0]), float(shift[1])), tolerance=tolerance)
    if trials <= 0:
        return report
    seqs = np.random.SeedSequence(seed).spawn(trials)
    run = pool.map_tasks if pool is not None else (lambda fn, items: [fn(i) for i in items])
    with metrics.observe_stage("metric_property_suite"):
        results = run(lambda s: _trial(s, shift), seqs)
    report.per_trial = results
    report.max_symmetry_violation = max(r["symmetry"] for r in results)
    report.max_triangle_violation = max(r["triangle"] for r in results)
    report.max_identity_violation = max(r["identity"] for r in results)
    report.max_translation_violation = max(r["translation"] for r in results)
    log.info("metric suite finished", extra={"trials": trials, "max_violation": report.max_violation})
    return report
