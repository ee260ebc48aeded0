"""Integration of x' = sum_i v_i(t, x) f_i(x) under a feedback schedule.

Classical RK4 with a fixed step, aligned to piece boundaries: controls are smooth
inside a piece and may jump only at its ends.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .config import Config, config
from .core_types import Domain, VectorFieldFamily, as_points, frame_matrix
from .errors import BlowUpError, OrientationLossError
from .schedule import (
    ConstantVelocity,
    FeedbackSchedule,
    FrameInversionControl,
    SchedulePiece,
    concatenate_schedules,
)
from .worker_pool import WorkerPool

log = logging.getLogger("steering.flow_engine")


def blowup_box(domain: Domain, cfg: Config = config) -> Domain:
    return domain.inflate(cfg.WORKING_MARGIN + cfg.BLOWUP_MARGIN)


def _segments(schedule: FeedbackSchedule, t0: float, t1: float):
    """Yield (piece index, tau_start, tau_end) covering real time t0 -> t1 in order."""
    if t0 == t1:
        return
    starts = schedule.starts
    ends = starts + np.array([p.duration for p in schedule.pieces])
    ends[-1] = 1.0
    lo, hi = min(t0, t1), max(t0, t1)
    segs = []
    for k, p in enumerate(schedule.pieces):
        a, b = max(lo, starts[k]), min(hi, ends[k])
        if b <= a:
            continue
        segs.append((k, (a - starts[k]) / p.duration, (b - starts[k]) / p.duration))
    if t1 < t0:
        segs = [(k, b, a) for k, a, b in reversed(segs)]
    yield from segs


def _n_steps(piece: SchedulePiece, tau_a: float, tau_b: float, h_ode: float) -> int:
    span = abs(tau_b - tau_a) * piece.duration
    return max(1, math.ceil(span / h_ode - 1e-9))


@dataclass(frozen=True)
class FlowMap:
    """Numerical flow Phi^t of a schedule acting through a vector field family."""

    schedule: FeedbackSchedule
    family: VectorFieldFamily
    h_ode: float = field(default_factory=lambda: config.H_ODE)
    cfg: Config = field(default_factory=lambda: config)
    pool: WorkerPool | None = None

    def _check_box(self, x: np.ndarray):
        inside = blowup_box(self.schedule.domain, self.cfg).contains(x)
        if not np.all(inside):
            bad = x[~inside][0]
            raise BlowUpError(f"trajectory left the working box at {bad.tolist()}")

    def _rhs(self, piece: SchedulePiece, tau: float, x: np.ndarray) -> np.ndarray:
        return piece.control.velocity(tau, x, self.family)

    def _rhs_var(self, piece: SchedulePiece, tau: float, x: np.ndarray, jac: np.ndarray):
        fam = self.family
        v = piece.control.values(tau, x, fam)
        dv = piece.control.gradients(tau, x, fam, self.cfg.H_FD)
        f = fam.fields(x)
        df = fam.jacobians(x)
        vel = np.einsum("nm,nmk->nk", v, f)
        dvel = np.einsum("nmk,nml->nkl", f, dv) + np.einsum("nm,nmkl->nkl", v, df)
        return vel, dvel @ jac

    def _integrate(self, x: np.ndarray, t0: float, t1: float) -> np.ndarray:
        x = np.array(x, dtype=float, copy=True)
        for k, ta, tb in _segments(self.schedule, t0, t1):
            piece = self.schedule.pieces[k]
            if piece.control.is_zero():
                continue
            n = _n_steps(piece, ta, tb, self.h_ode)
            h = (tb - ta) / n
            for i in range(n):
                tau = ta + i * h
                k1 = self._rhs(piece, tau, x)
                k2 = self._rhs(piece, tau + h / 2, x + h / 2 * k1)
                k3 = self._rhs(piece, tau + h / 2, x + h / 2 * k2)
                k4 = self._rhs(piece, tau + h, x + h * k3)
                x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
                self._check_box(x)
        return x

    def _integrate_var(self, x: np.ndarray, t0: float, t1: float) -> tuple[np.ndarray, np.ndarray]:
        x = np.array(x, dtype=float, copy=True)
        jac = np.broadcast_to(np.eye(2), (len(x), 2, 2)).copy()
        for k, ta, tb in _segments(self.schedule, t0, t1):
            piece = self.schedule.pieces[k]
            if piece.control.is_zero():
                continue
            n = _n_steps(piece, ta, tb, self.h_ode)
            h = (tb - ta) / n
            for i in range(n):
                tau = ta + i * h
                a1, b1 = self._rhs_var(piece, tau, x, jac)
                a2, b2 = self._rhs_var(piece, tau + h / 2, x + h / 2 * a1, jac + h / 2 * b1)
                a3, b3 = self._rhs_var(piece, tau + h / 2, x + h / 2 * a2, jac + h / 2 * b2)
                a4, b4 = self._rhs_var(piece, tau + h, x + h * a3, jac + h * b3)
                x = x + h / 6 * (a1 + 2 * a2 + 2 * a3 + a4)
                jac = jac + h / 6 * (b1 + 2 * b2 + 2 * b3 + b4)
                self._check_box(x)
            det = np.linalg.det(jac)
            if np.any(det <= 0):
                raise OrientationLossError(
                    f"Jacobian determinant {det.min():.3g} <= 0 after piece {k}; the schedule left Diff0"
                )
        return x, jac

    def _map(self, fn, pts: np.ndarray) -> np.ndarray:
        metrics.inc_flow_points(len(pts))
        if self.pool is None:
            return fn(pts)
        return self.pool.map_chunks(fn, pts)

    def between(self, x, t0: float, t1: float) -> np.ndarray:
        pts, single = as_points(x)
        out = self._map(lambda p: self._integrate(p, t0, t1), pts)
        return out[0] if single else out

    def evaluate(self, x, t: float = 1.0) -> np.ndarray:
        return self.between(x, 0.0, t)

    def inverse(self, y, t: float = 1.0) -> np.ndarray:
        return self.between(y, t, 0.0)

    def with_jacobian(self, x, t0: float = 0.0, t1: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
        pts, _ = as_points(x)

        def run(p):
            y, jac = self._integrate_var(p, t0, t1)
            return np.concatenate([y, jac.reshape(-1, 4)], axis=1)

        packed = self._map(run, pts)
        return packed[:, :2], packed[:, 2:].reshape(-1, 2, 2)

    def jacobian_det(self, x, t: float = 1.0) -> np.ndarray:
        pts, single = as_points(x)
        _, jac = self.with_jacobian(pts, 0.0, t)
        det = np.linalg.det(jac)
        return float(det[0]) if single else det

    def velocity_at(self, t: float, x) -> np.ndarray:
        pts, _ = as_points(x)
        k, tau = self.schedule.locate(t)
        piece = self.schedule.pieces[k]
        return piece.control.velocity(tau, pts, self.family) / piece.duration


def integrate_flow(schedule: FeedbackSchedule, family: VectorFieldFamily, x0, t: float = 1.0,
                   h_ode: float | None = None, cfg: Config = config, pool: WorkerPool | None = None):
    return FlowMap(schedule, family, h_ode or cfg.H_ODE, cfg, pool).evaluate(x0, t)


def integrate_between(schedule: FeedbackSchedule, family: VectorFieldFamily, x, t0: float, t1: float,
                      h_ode: float | None = None, cfg: Config = config, pool: WorkerPool | None = None):
    return FlowMap(schedule, family, h_ode or cfg.H_ODE, cfg, pool).between(x, t0, t1)


def invert_flow(schedule: FeedbackSchedule, family: VectorFieldFamily, y, t: float = 1.0,
                h_ode: float | None = None, cfg: Config = config, pool: WorkerPool | None = None):
    """Integrate the time-reversed schedule (pieces reversed, local time reversed, controls negated)."""
    return FlowMap(schedule, family, h_ode or cfg.H_ODE, cfg, pool).inverse(y, t)


def flow_jacobian_det(schedule: FeedbackSchedule, family: VectorFieldFamily, x0, t: float = 1.0,
                      h_ode: float | None = None, cfg: Config = config, pool: WorkerPool | None = None):
    return FlowMap(schedule, family, h_ode or cfg.H_ODE, cfg, pool).jacobian_det(x0, t)


def finite_difference_det(flow: FlowMap, x, t: float = 1.0, h_fd: float = 1e-4) -> np.ndarray:
    """Cross-check of det grad Phi^t by central differences of the flow map."""
    pts, _ = as_points(x)
    offsets = np.array([[h_fd, 0.0], [-h_fd, 0.0], [0.0, h_fd], [0.0, -h_fd]])
    stencil = (pts[None] + offsets[:, None]).reshape(-1, 2)
    img = flow.evaluate(stencil, t).reshape(4, len(pts), 2)
    jac = np.stack([img[0] - img[1], img[2] - img[3]], axis=-1) / (2 * h_fd)
    return np.linalg.det(jac)


def compose_schedules(s1: FeedbackSchedule, s2: FeedbackSchedule) -> FeedbackSchedule:
    """Schedule whose time-1 flow is Phi_s2 o Phi_s1."""
    return concatenate_schedules([s1, s2])


@dataclass(frozen=True)
class HorizonSchedule:
    """A unit-time schedule replayed over [0, horizon] with controls divided by the horizon."""

    schedule: FeedbackSchedule
    horizon: float
    control_bound: float

    def durations(self) -> list[float]:
        return [p.duration * self.horizon for p in self.schedule.pieces]

    def controls(self, t: float, x, family: VectorFieldFamily) -> np.ndarray:
        pts, _ = as_points(x)
        k, tau = self.schedule.locate(min(max(t / self.horizon, 0.0), 1.0))
        piece = self.schedule.pieces[k]
        return piece.control.values(tau, pts, family) / (piece.duration * self.horizon)


def control_bound(schedule: FeedbackSchedule, family: VectorFieldFamily, points: np.ndarray, n_tau: int = 5) -> float:
    """Sup-norm of the applied controls over sample points and sample local times."""
    bound = 0.0
    for p in schedule.pieces:
        for tau in np.linspace(0.0, 1.0, n_tau):
            vals = p.control.values(float(tau), points, family) / p.duration
            bound = max(bound, float(np.max(np.abs(vals))))
    return bound


def rescale_horizon(schedule: FeedbackSchedule, family: VectorFieldFamily, horizon: float,
                    points: np.ndarray | None = None) -> HorizonSchedule:
    """Linear-in-control time rescaling: reaching the time-1 target at time `horizon` with controls / horizon."""
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    if points is None:
        dom = schedule.domain
        xs = np.linspace(dom.lower[0], dom.upper[0], 9)
        ys = np.linspace(dom.lower[1], dom.upper[1], 9)
        points = np.stack(np.meshgrid(xs, ys), axis=-1).reshape(-1, 2)
    bound = control_bound(schedule, family, points) / horizon
    return HorizonSchedule(schedule, float(horizon), bound)


def steer_point(family: VectorFieldFamily, x0, x1, domain: Domain) -> FeedbackSchedule:
    """Open-loop steering of one point to another in time 1 along a straight line."""
    c = np.asarray(x1, dtype=float) - np.asarray(x0, dtype=float)
    frame_matrix(family, np.vstack([x0, x1]))
    if family.is_coordinate_frame:
        return FeedbackSchedule.constant(domain, c)
    return FeedbackSchedule(domain, family.m, (SchedulePiece(1.0, FrameInversionControl(ConstantVelocity(c))),))
