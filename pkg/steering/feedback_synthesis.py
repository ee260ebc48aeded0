"""Turning a target diffeomorphism into a feedback schedule.

Pipeline: target map -> isotopy H from the identity -> N near-identity fragments
Q_k = H(k/N) o H((k-1)/N)^{-1} -> two coordinate shears per fragment -> one
schedule piece per shear. A shear x -> x + d(x) along one axis is realized by
the control a(s, x) = d(h_s^{-1}(x)), h_s = Id + s d, whose trajectories are the
straight segments z -> z + d(z).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt, wait_none

from . import metrics
from .config import Config, config
from .core_types import (
    GridDensity,
    IsotopyPath,
    NodeGrid,
    SampledMap,
    VectorFieldFamily,
    frame_matrix,
    newton_solve,
    require_same_grid,
    validate_density,
)
from .errors import (
    FoldOverError,
    NewtonDivergenceError,
    NonMonotoneMapError,
    NotNearIdentityError,
    NumericalError,
    SynthesisError,
)
from .flow_engine import FlowMap
from .moser_builder import build_moser_diffeo
from .ot_solver import barycentric_map, check_monotone, solve_plan_sinkhorn
from .schedule import (
    Control,
    FeedbackSchedule,
    FrameInversionControl,
    SchedulePiece,
    ShearControl,
    ShearMap,
    ShearVelocity,
    VelocityField,
    check_shear,
)
from .worker_pool import WorkerPool

log = logging.getLogger("steering.feedback_synthesis")

ISOTOPY_TIMES = 9
METHODS = ("brenier", "moser")


# ---------------------------------------------------------------------------
# isotopies


class DisplacementIsotopy(IsotopyPath):
    """H(t, x) = (1 - t) x + t T(x)."""

    method = "displacement"

    def __init__(self, target: SampledMap, cfg: Config = config, min_det: float = 1.0):
        super().__init__(target.grid)
        self.target = target
        self.cfg = cfg
        # smallest det[(1 - t) Id + t DT] seen by the fold scan
        self.min_det = min_det

    def evaluate(self, t, pts):
        pts = np.asarray(pts, dtype=float)
        return pts + t * (self.target(pts) - pts)

    def _with_jacobian(self, t: float):
        def fn(x):
            img, jac = self.target.with_jacobian(x)
            return x + t * (img - x), np.eye(2)[None] + t * (jac - np.eye(2)[None])
        return fn

    def inverse(self, t, pts):
        pts = np.asarray(pts, dtype=float)
        if t == 0:
            return pts.copy()
        return newton_solve(self._with_jacobian(t), pts, pts, self.cfg.NEWTON_MAX_ITERS, self.cfg.NEWTON_TOL)


def displacement_isotopy(target: SampledMap, n_times: int = ISOTOPY_TIMES, cfg: Config = config) -> DisplacementIsotopy:
    """Straight-line isotopy to T, rejected if det[(1 - t) Id + t DT] <= 0 at any sampled time."""
    jac = target.node_jacobians()
    eye = np.eye(2)
    worst = np.inf
    for t in np.linspace(0.0, 1.0, n_times):
        det = np.linalg.det((1 - t) * eye + t * jac)
        worst = min(worst, float(det.min()))
        if det.min() <= 0:
            j, i = np.unravel_index(int(np.argmin(det)), det.shape)
            raise FoldOverError(
                f"displacement interpolation folds at t={t:.3f}, node ({target.grid.xs[i]:.4g}, {target.grid.ys[j]:.4g})"
            )
    return DisplacementIsotopy(target, cfg, worst)


# ---------------------------------------------------------------------------
# fragments


@dataclass(frozen=True, eq=False)
class Fragment:
    """Q = H(t1, .) o H(t0, .)^{-1}, evaluated exactly through the isotopy."""

    isotopy: IsotopyPath
    t0: float
    t1: float

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        return self.isotopy.fragment(self.t0, self.t1, np.asarray(pts, dtype=float))

    def sampled(self, grid: NodeGrid) -> SampledMap:
        return SampledMap.from_function(grid, self)


@dataclass(frozen=True, eq=False)
class FragmentSet:
    fragments: list[Fragment]
    maps: list[SampledMap]
    max_displacement: float
    displacement_bound: float
    composition_error: float

    @property
    def n(self) -> int:
        return len(self.fragments)


def fragment_isotopy(isotopy: IsotopyPath, n: int, pool: WorkerPool | None = None) -> FragmentSet:
    if n < 1:
        raise ValueError("N must be at least 1")
    grid = isotopy.grid
    nodes = grid.points()
    frags = [Fragment(isotopy, (k - 1) / n, k / n) for k in range(1, n + 1)]
    run = pool.map_tasks if pool is not None else (lambda fn, items: [fn(i) for i in items])
    maps = run(lambda f: f.sampled(grid), frags)
    max_disp = max(m.max_displacement() for m in maps)
    target = isotopy.evaluate(1.0, nodes)
    x = nodes
    for f in frags:
        x = f(x)
    comp = float(np.max(np.abs(x - target)))
    bound = float(np.max(np.linalg.norm(target - nodes, axis=1))) / n * 1.5
    log.info("isotopy fragmented", extra={"n": n, "max_displacement": max_disp, "composition_error": comp})
    return FragmentSet(frags, maps, max_disp, bound, comp)


# ---------------------------------------------------------------------------
# shears


@dataclass(frozen=True, eq=False)
class ShearFactorization:
    first: ShearMap
    second: ShearMap
    # |S2 o S1 - Q| at the centers of the refined cells, between tabulated nodes
    factorization_error: float
    # |S2 o S1 - Q| on the grid nodes
    tabulation_error: float

    def evaluate(self, pts: np.ndarray) -> np.ndarray:
        return self.second.evaluate(self.first.evaluate(pts))


def shear_factorization(q: Callable[[np.ndarray], np.ndarray], grid: NodeGrid,
                        refinement: int | None = None, cfg: Config = config) -> ShearFactorization:
    """Q = S2 o S1 with S1 = (Q_1(x, y), y) and S2 = Q o S1^{-1} moving only y.

    Both shears are tabulated from Q on the refined nodes. The lines of S2 are
    the images S1(x = const), so S2 o S1 reproduces Q on every refined node.
    """
    fine = grid.refine(refinement or cfg.SHEAR_REFINEMENT)
    ny, nx = fine.shape
    img = q(fine.points())
    first = ShearMap(0, fine.ys, fine.xs, img[:, 0].reshape(ny, nx))
    if not first.is_monotone():
        raise NotNearIdentityError("first shear is not monotone along x lines; increase N")
    # line i of S2 passes through S1(xs[i], ys[j]) at knot j
    second = ShearMap(1, first.table.T, fine.ys, img[:, 1].reshape(ny, nx).T)
    if not second.is_monotone():
        raise NotNearIdentityError("second shear is not monotone along y lines; increase N")
    fac = ShearFactorization(first, second, 0.0, 0.0)
    nodes = grid.points()
    tab = float(np.max(np.abs(fac.evaluate(nodes) - q(nodes))))
    if tab > cfg.SHEAR_TOL:
        raise NotNearIdentityError(f"shears miss the fragment by {tab:.3g} on the nodes; increase N")
    centers = NodeGrid(0.5 * (fine.xs[:-1] + fine.xs[1:]), 0.5 * (fine.ys[:-1] + fine.ys[1:])).points()
    between = float(np.max(np.abs(fac.evaluate(centers) - q(centers)))) if len(centers) else 0.0
    return ShearFactorization(first, second, between, tab)


def shear_to_schedule_piece(shear: ShearMap, family: VectorFieldFamily, duration: float = 1.0) -> SchedulePiece:
    check_shear(shear)
    if family.is_coordinate_frame:
        return SchedulePiece(duration, ShearControl(shear, shear.axis))
    return SchedulePiece(duration, FrameInversionControl(ShearVelocity(shear)))


def frame_inversion_controls(w: VelocityField, family: VectorFieldFamily, duration: float = 1.0,
                             checkpoints: np.ndarray | None = None) -> SchedulePiece:
    """v = [f_1 f_2]^{-1} w, after checking the frame on the check points."""
    frame_matrix(family, checkpoints if checkpoints is not None else np.zeros((1, 2)))
    return SchedulePiece(duration, FrameInversionControl(w))


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class StageReport:
    name: str
    error_metrics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "errorMetrics": self.error_metrics}


@dataclass
class SynthesisReport:
    method: str
    n: int
    stages: list[StageReport] = field(default_factory=list)
    final_sup_norm_deviation: float = 0.0
    composition_fidelity: float = 0.0
    min_det_jacobian: float = 1.0
    runtime_seconds: float | None = None

    def stage(self, name: str) -> StageReport:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "N": self.n,
            "stages": [s.to_dict() for s in self.stages],
            "finalSupNormDeviation": self.final_sup_norm_deviation,
            "compositionFidelity": self.composition_fidelity,
            "minDetJacobian": self.min_det_jacobian,
            "runtimeSeconds": self.runtime_seconds,
        }


@dataclass(frozen=True, eq=False)
class SynthesisResult:
    schedule: FeedbackSchedule
    report: SynthesisReport
    target: SampledMap | None


def _brenier_target(mu, nu, report, cfg, seed):
    plan = solve_plan_sinkhorn(mu, nu, cfg=cfg)
    tmap = barycentric_map(plan)
    mono = check_monotone(tmap, seed=seed)
    report.stages.append(StageReport("target", {**plan.summary(), **{
        "minPairing": mono.min_pairing, "violations": mono.violations,
        "maxDisplacement": tmap.max_displacement(),
    }}))
    if mono.violations:
        log.error("barycentric map is not monotone", extra=mono.to_dict())
        raise NonMonotoneMapError(
            f"barycentric map fails monotonicity on {mono.violations} of {mono.pairs} pairs "
            f"(min pairing {mono.min_pairing:.3g})"
        )
    return tmap


def _factorize(isotopy: IsotopyPath, n: int, family: VectorFieldFamily, cfg: Config, pool: WorkerPool | None):
    frags = fragment_isotopy(isotopy, n, pool)
    run = pool.map_tasks if pool is not None else (lambda fn, items: [fn(i) for i in items])
    facts = run(lambda f: shear_factorization(f, isotopy.grid, cfg=cfg), frags.fragments)
    controls: list[Control] = []
    for fac in facts:
        for shear in (fac.first, fac.second):
            controls.append(shear_to_schedule_piece(shear, family).control)
    return frags, facts, controls


def synthesize_schedule(mu: GridDensity, nu: GridDensity, method: str, family: VectorFieldFamily,
                        n: int | None = None, cfg: Config = config, pool: WorkerPool | None = None,
                        seed: int = 0) -> SynthesisResult:
    """Feedback schedule whose time-1 flow carries mu to nu.

    NotNearIdentity and NewtonDivergence during fragmentation double N, up to
    cfg.MAX_REFINEMENTS times. Numerical failures come out as SynthesisError
    naming the stage.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    started = time.perf_counter()
    n = n or cfg.FRAGMENTS
    report = SynthesisReport(method, n)
    stage = "validate"
    try:
        mu = validate_density(mu, require_positive=True)
        nu = validate_density(nu, require_positive=True)
        require_same_grid(mu, nu)
        domain = mu.domain
        if np.array_equal(mu.values, nu.values):
            log.info("densities coincide, returning the zero schedule")
            report.n = 0
            report.runtime_seconds = time.perf_counter() - started
            return SynthesisResult(FeedbackSchedule.zero(domain, family.m), report, None)

        stage = "target"
        with metrics.observe_stage("synthesis_target"):
            if method == "brenier":
                target = _brenier_target(mu, nu, report, cfg, seed)
                stage = "isotopy"
                isotopy = displacement_isotopy(target, cfg=cfg)
                report.stages.append(StageReport("isotopy", {"isotopyTimes": ISOTOPY_TIMES, "minDet": isotopy.min_det}))
            else:
                diffeo = build_moser_diffeo(mu, nu, cfg, pool)
                target = diffeo.endpoint
                isotopy = diffeo.isotopy
                report.stages.append(StageReport("target", {
                    "minDet": diffeo.min_det, "maxDisplacement": target.max_displacement(),
                }))

        nodes = target.grid.points()
        if method == "moser" and not family.is_coordinate_frame:
            stage = "assembly"
            piece = frame_inversion_controls(diffeo.field, family, checkpoints=nodes)
            schedule = FeedbackSchedule(domain, family.m, (piece,))
            composed = target.node_points()
            report.n = 1
        else:
            stage = "fragment"
            if not family.is_coordinate_frame:
                frame_matrix(family, nodes)
            retrying = Retrying(
                retry=retry_if_exception_type((NotNearIdentityError, NewtonDivergenceError)),
                stop=stop_after_attempt(cfg.MAX_REFINEMENTS + 1),
                wait=wait_none(),
                reraise=True,
            )
            for attempt in retrying:
                with attempt:
                    n_try = n * 2 ** (attempt.retry_state.attempt_number - 1)
                    if n_try != n:
                        metrics.inc_refinements()
                        log.warning("refining fragments", extra={"n": n_try})
                    with metrics.observe_stage("synthesis_fragment"):
                        frags, facts, controls = _factorize(isotopy, n_try, family, cfg, pool)
            report.n = frags.n
            report.stages.append(StageReport("fragment", {
                "N": frags.n,
                "maxDisplacement": frags.max_displacement,
                "displacementBound": frags.displacement_bound,
                "compositionError": frags.composition_error,
            }))
            report.stages.append(StageReport("factorization", {
                "maxFactorizationError": max(f.factorization_error for f in facts),
                "maxTabulationError": max(f.tabulation_error for f in facts),
                "pieces": len(controls),
            }))
            stage = "assembly"
            schedule = FeedbackSchedule.from_controls(domain, family.m, controls)
            composed = nodes
            for fac in facts:
                composed = fac.evaluate(composed)

        stage = "verify"
        with metrics.observe_stage("synthesis_verify"):
            flow = FlowMap(schedule, family, cfg.H_ODE, cfg, pool)
            img, jac = flow.with_jacobian(nodes, 0.0, 1.0)
        report.final_sup_norm_deviation = float(np.max(np.abs(img - target.node_points())))
        report.composition_fidelity = float(np.max(np.abs(img - composed)))
        report.min_det_jacobian = float(np.linalg.det(jac).min())
        report.stages.append(StageReport("verify", {
            "finalSupNormDeviation": report.final_sup_norm_deviation,
            "compositionFidelity": report.composition_fidelity,
            "minDetJacobian": report.min_det_jacobian,
        }))
    except NumericalError as exc:
        if isinstance(exc, SynthesisError):
            raise
        log.error("synthesis failed", extra={"stage": stage, "error": type(exc).__name__})
        raise SynthesisError(stage, exc) from exc
    report.runtime_seconds = time.perf_counter() - started
    log.info("schedule synthesized", extra={
        "method": method, "n": report.n, "pieces": len(schedule.pieces),
        "deviation": report.final_sup_norm_deviation,
    })
    return SynthesisResult(schedule, report, target)

