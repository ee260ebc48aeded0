"""Feedback schedules: ordered pieces, each activating controls v_i(s, x).

A piece of duration d stores its control on unit local time tau in [0, 1]; the
control actually applied at real local time s is base(s / d, x) / d. Changing a
piece's duration is therefore a pure time rescaling and leaves its flow intact.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core_types import (
    Domain,
    VectorFieldFamily,
    _frozen,
    _locate,
    cell_centers,
    frame_matrix,
    interp_bilinear,
)
from .errors import ConfigError, NonMonotoneShearError

DURATION_TOL = 1e-12


# ---------------------------------------------------------------------------
# coordinate shears


class ShearMap:
    """Coordinate shear moving only coordinate `axis`.

    `knots` are sorted positions along `axis` and table[l, k] = h_l(knots[k]) is
    the 1D monotone map on line l. `lines` holds the line coordinates on the
    other axis, either shared by all knots (shape (L,)) or given per knot
    (shape (L, K), increasing in l). Between lines the displacement is blended
    linearly, along a line it is piecewise linear, and beyond the end lines and
    knots it is held constant.
    """

    def __init__(self, axis: int, lines, knots, table):
        if axis not in (0, 1):
            raise ValueError("shear axis must be 0 or 1")
        self.axis = axis
        self.lines = _frozen(lines)
        self.knots = _frozen(knots)
        self.table = _frozen(table)
        if self.lines.ndim not in (1, 2):
            raise ValueError("shear lines must be a vector or a per-knot table")
        if self.table.shape != (self.lines.shape[0], self.knots.size):
            raise ValueError(f"shear table shape {self.table.shape} does not match lines x knots")
        if self.curved:
            if self.lines.shape != self.table.shape:
                raise ValueError("per-knot line positions must have the table's shape")
            if not np.all(np.diff(self.lines, axis=0) > 0):
                raise ValueError("per-knot line positions must increase along the lines")
        self.disp = _frozen(self.table - self.knots[None, :])

    @classmethod
    def translation(cls, axis: int, shift: float, lines, knots) -> "ShearMap":
        knots = np.asarray(knots, dtype=float)
        return cls(axis, lines, knots, np.broadcast_to(knots + shift, (len(lines), knots.size)))

    @property
    def other(self) -> int:
        return 1 - self.axis

    @property
    def curved(self) -> bool:
        return self.lines.ndim == 2

    def is_monotone(self) -> bool:
        if self.knots.size < 2:
            return True
        if not self.curved:
            return bool(np.all(np.diff(self.table, axis=1) > 0))
        # the gap between neighbouring knot images is piecewise linear across
        # the lines, so its breakpoints are the only places to check
        for k in range(self.knots.size - 1):
            at, nxt = self.lines[:, k], self.lines[:, k + 1]
            cs = np.concatenate([at, nxt])
            lo = self.knots[k] + np.interp(cs, at, self.disp[:, k])
            hi = self.knots[k + 1] + np.interp(cs, nxt, self.disp[:, k + 1])
            if not np.all(hi > lo):
                return False
        return True

    def is_identity(self) -> bool:
        return not np.any(self.disp)

    def _line_weights(self, c: np.ndarray):
        lines = self.lines
        if lines.size == 1:
            z = np.zeros(c.shape, dtype=int)
            return z, z, np.zeros(c.shape)
        cc = np.clip(c, lines[0], lines[-1])
        l0 = np.clip(np.searchsorted(lines, cc, side="right") - 1, 0, lines.size - 2)
        v = (cc - lines[l0]) / (lines[l0 + 1] - lines[l0])
        return l0, l0 + 1, v

    def _profile(self, c: np.ndarray):
        """Function k -> displacement at knot index k on the lines through coordinates c."""
        if not self.curved:
            l0, l1, v = self._line_weights(c)
            return lambda k: (1 - v) * self.disp[l0, k] + v * self.disp[l1, k]
        pos, disp = self.lines, self.disp
        n = pos.shape[0]

        def at(k):
            if n == 1:
                return np.broadcast_to(disp[0, k], c.shape).astype(float)
            cc = np.clip(c, pos[0, k], pos[-1, k])
            lo = np.zeros(c.shape, dtype=int)
            hi = np.full(c.shape, n - 1)
            while np.any(hi - lo > 1):
                mid = (lo + hi) // 2
                right = pos[mid, k] <= cc
                lo = np.where(right, mid, lo)
                hi = np.where(right, hi, mid)
            v = (cc - pos[lo, k]) / (pos[hi, k] - pos[lo, k])
            return (1 - v) * disp[lo, k] + v * disp[hi, k]

        return at

    def displacement(self, pts: np.ndarray) -> np.ndarray:
        """Displacement d(x) along `axis` at each point."""
        if self.curved:
            at = self._profile(pts[:, self.other])
            k0, k1, w, _, _ = _locate(self.knots, pts[:, self.axis])
            return (1 - w) * at(k0) + w * at(k1)
        if self.axis == 0:
            return interp_bilinear(self.knots, self.lines, self.disp, pts)
        return interp_bilinear(self.knots, self.lines, self.disp, pts[:, ::-1])

    def evaluate(self, pts: np.ndarray) -> np.ndarray:
        out = np.array(pts, dtype=float, copy=True)
        out[:, self.axis] += self.displacement(pts)
        return out

    def invert_partial(self, s: float, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pre-images z under h_s = Id + s d along the shear lines, and d(z)."""
        x = pts[:, self.axis]
        c = pts[:, self.other]
        at = self._profile(c)
        knots = self.knots
        K = knots.size
        d_first = at(0)
        d_last = at(K - 1)
        z = x - s * d_first
        d = d_first.copy()
        if K == 1:
            return z, d
        lo_val = knots[0] + s * d_first
        hi_val = knots[-1] + s * d_last
        right = x > hi_val
        z[right] = x[right] - s * d_last[right]
        d[right] = d_last[right]
        inside = ~(right | (x < lo_val))
        if inside.any():
            idx = np.flatnonzero(inside)
            xi = x[idx]
            at_in = self._profile(c[idx])
            lo = np.zeros(idx.size, dtype=int)
            hi = np.full(idx.size, K - 1)
            # bisection for the knot segment containing xi under h_s
            while np.any(hi - lo > 1):
                mid = (lo + hi) // 2
                val = knots[mid] + s * at_in(mid)
                go_right = val <= xi
                lo = np.where(go_right, mid, lo)
                hi = np.where(go_right, hi, mid)
            d_lo = at_in(lo)
            d_hi = at_in(hi)
            v_lo = knots[lo] + s * d_lo
            v_hi = knots[hi] + s * d_hi
            frac = np.clip((xi - v_lo) / (v_hi - v_lo), 0.0, 1.0)
            z[idx] = knots[lo] + frac * (knots[hi] - knots[lo])
            d[idx] = (1 - frac) * d_lo + frac * d_hi
        return z, d

    def inverse(self, pts: np.ndarray) -> np.ndarray:
        z, _ = self.invert_partial(1.0, pts)
        out = np.array(pts, dtype=float, copy=True)
        out[:, self.axis] = z
        return out

    def speed(self, s: float, pts: np.ndarray) -> np.ndarray:
        """Scalar control a(s, x) = (h - id)(h_s^{-1}(x)) moving x along the straight line z + s d(z)."""
        _, d = self.invert_partial(s, pts)
        return d

    def to_dict(self) -> dict:
        return {
            "axis": self.axis,
            "lines": self.lines.tolist(),
            "knots": self.knots.tolist(),
            "table": self.table.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ShearMap":
        return cls(doc["axis"], doc["lines"], doc["knots"], doc["table"])


# ---------------------------------------------------------------------------
# velocity tables realized by frame inversion


class VelocityField(ABC):
    kind: str = "abstract"

    @abstractmethod
    def velocity(self, tau: float, pts: np.ndarray) -> np.ndarray:
        """(N, 2) velocity at unit local time tau."""

    def is_zero(self) -> bool:
        return False

    @abstractmethod
    def to_dict(self) -> dict:
        ...


class ConstantVelocity(VelocityField):
    kind = "constant-velocity"

    def __init__(self, c):
        self.c = _frozen(c)

    def velocity(self, tau, pts):
        return np.broadcast_to(self.c, pts.shape).copy()

    def is_zero(self) -> bool:
        return not np.any(self.c)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "c": self.c.tolist()}


class ShearVelocity(VelocityField):
    kind = "shear-velocity"

    def __init__(self, shear: ShearMap):
        self.shear = shear

    def velocity(self, tau, pts):
        out = np.zeros_like(pts, dtype=float)
        out[:, self.shear.axis] = self.shear.speed(tau, pts)
        return out

    def is_zero(self) -> bool:
        return self.shear.is_identity()

    def to_dict(self) -> dict:
        return {"kind": self.kind, "shear": self.shear.to_dict()}


class StaggeredGradientVelocity(VelocityField):
    """w(t, x) = -grad u(x) / ((1 - t) rho_start(x) + t rho_end(x)).

    grad_x lives on the (ny, nx + 1) x-faces, grad_y on the (ny + 1, nx) y-faces,
    so the normal component vanishes on the domain boundary (homogeneous Neumann).
    """

    kind = "staggered-gradient"

    def __init__(self, domain: Domain, grad_x, grad_y, rho_start, rho_end):
        self.domain = domain
        self.grad_x = _frozen(grad_x)
        self.grad_y = _frozen(grad_y)
        self.rho_start = _frozen(rho_start)
        self.rho_end = _frozen(rho_end)
        ny, nx = self.rho_start.shape
        if self.grad_x.shape != (ny, nx + 1) or self.grad_y.shape != (ny + 1, nx) or self.rho_end.shape != (ny, nx):
            raise ValueError("staggered gradient arrays do not match the density grid")
        self.xc, self.yc = cell_centers(domain, nx, ny)
        self.xf = np.linspace(domain.lower[0], domain.upper[0], nx + 1)
        self.yf = np.linspace(domain.lower[1], domain.upper[1], ny + 1)

    def density(self, tau: float, pts: np.ndarray) -> np.ndarray:
        r0 = interp_bilinear(self.xc, self.yc, self.rho_start, pts)
        r1 = interp_bilinear(self.xc, self.yc, self.rho_end, pts)
        return (1 - tau) * r0 + tau * r1

    def velocity(self, tau, pts):
        gx = interp_bilinear(self.xf, self.yc, self.grad_x, pts)
        gy = interp_bilinear(self.xc, self.yf, self.grad_y, pts)
        rho = self.density(tau, pts)
        return -np.stack([gx, gy], axis=1) / rho[:, None]

    def is_zero(self) -> bool:
        return not (np.any(self.grad_x) or np.any(self.grad_y))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "domain": self.domain.to_dict(),
            "grad_x": self.grad_x.tolist(),
            "grad_y": self.grad_y.tolist(),
            "rho_start": self.rho_start.tolist(),
            "rho_end": self.rho_end.tolist(),
        }


def velocity_from_dict(doc: dict) -> VelocityField:
    kind = doc["kind"]
    if kind == ConstantVelocity.kind:
        return ConstantVelocity(doc["c"])
    if kind == ShearVelocity.kind:
        return ShearVelocity(ShearMap.from_dict(doc["shear"]))
    if kind == StaggeredGradientVelocity.kind:
        dom = Domain(tuple(doc["domain"]["lower"]), tuple(doc["domain"]["upper"]))
        return StaggeredGradientVelocity(dom, doc["grad_x"], doc["grad_y"], doc["rho_start"], doc["rho_end"])
    raise ConfigError(f"unknown velocity field kind {kind!r}")


# ---------------------------------------------------------------------------
# controls


class Control(ABC):
    kind: str = "abstract"
    # index of the only nonzero control, None when several may be active
    active: int | None = None

    @abstractmethod
    def values(self, tau: float, pts: np.ndarray, family: VectorFieldFamily) -> np.ndarray:
        """(N, m) control values at unit local time tau."""

    def gradients(self, tau: float, pts: np.ndarray, family: VectorFieldFamily, h_fd: float) -> np.ndarray:
        """(N, m, 2) spatial gradients of the controls, by central differences."""
        n = len(pts)
        offsets = np.array([[h_fd, 0.0], [-h_fd, 0.0], [0.0, h_fd], [0.0, -h_fd]])
        stencil = (pts[None, :, :] + offsets[:, None, :]).reshape(-1, 2)
        vals = self.values(tau, stencil, family).reshape(4, n, -1)
        return np.stack([(vals[0] - vals[1]), (vals[2] - vals[3])], axis=-1) / (2 * h_fd)

    def velocity(self, tau: float, pts: np.ndarray, family: VectorFieldFamily) -> np.ndarray:
        return np.einsum("nm,nmk->nk", self.values(tau, pts, family), family.fields(pts))

    def is_zero(self) -> bool:
        return False


class ConstantControl(Control):
    kind = "constant"

    def __init__(self, values):
        self.c = _frozen(values)
        nz = np.flatnonzero(self.c)
        self.active = int(nz[0]) if nz.size == 1 else None

    def values(self, tau, pts, family):
        return np.broadcast_to(self.c, (len(pts), self.c.size)).copy()

    def gradients(self, tau, pts, family, h_fd):
        return np.zeros((len(pts), self.c.size, 2))

    def is_zero(self) -> bool:
        return not np.any(self.c)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "values": self.c.tolist()}


class ShearControl(Control):
    """Only control `field_index` is nonzero: v_j(s, x) = a(s, x) for the stored shear."""

    kind = "shear"

    def __init__(self, shear: ShearMap, field_index: int):
        self.shear = shear
        self.active = int(field_index)

    def values(self, tau, pts, family):
        out = np.zeros((len(pts), family.m))
        out[:, self.active] = self.shear.speed(tau, pts)
        return out

    def is_zero(self) -> bool:
        return self.shear.is_identity()

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.shear.to_dict()}


class FrameInversionControl(Control):
    """v(s, x) = [f_1(x) f_2(x)]^{-1} w(s, x) for a stored velocity table w."""

    kind = "frame-inversion"

    def __init__(self, field: VelocityField):
        self.field = field

    def values(self, tau, pts, family):
        mats, _ = frame_matrix(family, pts)
        w = self.field.velocity(tau, pts)
        return np.linalg.solve(mats, w[..., None])[..., 0]

    def is_zero(self) -> bool:
        return self.field.is_zero()


@dataclass(frozen=True)
class SchedulePiece:
    duration: float
    control: Control

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError(f"piece duration must be positive, got {self.duration}")


@dataclass(frozen=True)
class FeedbackSchedule:
    domain: Domain
    m: int
    pieces: tuple[SchedulePiece, ...]

    def __post_init__(self):
        pieces = tuple(self.pieces)
        if not pieces:
            raise ValueError("a schedule needs at least one piece")
        total = sum(p.duration for p in pieces)
        if abs(total - 1.0) > DURATION_TOL * max(1, len(pieces)):
            raise ValueError(f"piece durations must sum to 1, got {total!r}")
        object.__setattr__(self, "pieces", pieces)

    @classmethod
    def zero(cls, domain: Domain, m: int) -> "FeedbackSchedule":
        return cls(domain, m, (SchedulePiece(1.0, ConstantControl(np.zeros(m))),))

    @classmethod
    def constant(cls, domain: Domain, values) -> "FeedbackSchedule":
        values = np.asarray(values, dtype=float)
        return cls(domain, values.size, (SchedulePiece(1.0, ConstantControl(values)),))

    @classmethod
    def from_controls(cls, domain: Domain, m: int, controls: Sequence[Control]) -> "FeedbackSchedule":
        """Equal-duration pieces; each control's flow over its piece is unchanged by the rescaling."""
        if not controls:
            return cls.zero(domain, m)
        k = len(controls)
        durations = _split_unit(k)
        return cls(domain, m, tuple(SchedulePiece(d, c) for d, c in zip(durations, controls)))

    @property
    def starts(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum([p.duration for p in self.pieces])[:-1]])

    def locate(self, t: float) -> tuple[int, float]:
        """Piece index and unit local time at real time t (right-continuous)."""
        starts = self.starts
        k = int(np.searchsorted(starts, t, side="right") - 1)
        k = min(max(k, 0), len(self.pieces) - 1)
        tau = (t - starts[k]) / self.pieces[k].duration
        return k, min(max(tau, 0.0), 1.0)

    def is_zero(self) -> bool:
        return all(p.control.is_zero() for p in self.pieces)

    def active_fields(self) -> list[int | None]:
        return [p.control.active for p in self.pieces]


def _split_unit(k: int) -> list[float]:
    # equal durations that sum to exactly 1 in floating point
    durations = [1.0 / k] * k
    durations[-1] = 1.0 - sum(durations[:-1])
    return durations


def concatenate_schedules(schedules: Sequence[FeedbackSchedule]) -> FeedbackSchedule:
    """Run the schedules one after another, each rescaled to a 1/k share of unit time."""
    if not schedules:
        raise ValueError("nothing to concatenate")
    first = schedules[0]
    for s in schedules[1:]:
        if s.m != first.m:
            raise ValueError("schedules act on families of different sizes")
    shares = _split_unit(len(schedules))
    pieces = []
    for share, s in zip(shares, schedules):
        pieces.extend(SchedulePiece(p.duration * share, p.control) for p in s.pieces)
    total = sum(p.duration for p in pieces)
    # absorb rounding into the last piece
    last = pieces[-1]
    pieces[-1] = SchedulePiece(last.duration + (1.0 - total), last.control)
    return FeedbackSchedule(first.domain, first.m, tuple(pieces))


def schedule_to_dict(schedule: FeedbackSchedule) -> dict:
    fields: dict[str, dict] = {}
    ids: dict[int, str] = {}
    pieces = []
    for p in schedule.pieces:
        c = p.control
        if isinstance(c, FrameInversionControl):
            key = ids.setdefault(id(c.field), f"f{len(ids)}")
            fields[key] = c.field.to_dict()
            control = {"kind": c.kind, "field": key}
        else:
            control = c.to_dict()
        pieces.append({
            "duration": p.duration,
            "active": "all" if c.active is None else c.active,
            "control": control,
        })
    return {
        "format": "FS1",
        "domain": schedule.domain.to_dict(),
        "m": schedule.m,
        "pieces": pieces,
        "fields": fields,
    }


def schedule_from_dict(doc: dict) -> FeedbackSchedule:
    dom = Domain(tuple(doc["domain"]["lower"]), tuple(doc["domain"]["upper"]))
    fields = {k: velocity_from_dict(v) for k, v in doc.get("fields", {}).items()}
    pieces = []
    for i, p in enumerate(doc["pieces"]):
        c = p["control"]
        kind = c["kind"]
        if kind == ConstantControl.kind:
            control = ConstantControl(c["values"])
        elif kind == ShearControl.kind:
            if p["active"] == "all":
                raise ConfigError(f"piece {i}: shear controls need a single active field")
            control = ShearControl(ShearMap.from_dict(c), p["active"])
        elif kind == FrameInversionControl.kind:
            if c["field"] not in fields:
                raise ConfigError(f"piece {i}: unknown field table {c['field']!r}")
            control = FrameInversionControl(fields[c["field"]])
        else:
            raise ConfigError(f"piece {i}: unknown control kind {kind!r}")
        pieces.append(SchedulePiece(float(p["duration"]), control))
    return FeedbackSchedule(dom, int(doc["m"]), tuple(pieces))


def check_shear(shear: ShearMap) -> None:
    if not shear.is_monotone():
        raise NonMonotoneShearError(f"shear on axis {shear.axis} is not monotone along its lines")
