import numpy as np
import pytest
from scipy.linalg import expm

from steering.config import config
from steering.core_types import CoordinateFrame, Domain, LinearFamily, RotatedFrame
from steering.errors import BlowUpError
from steering.flow_engine import (
    FlowMap,
    compose_schedules,
    finite_difference_det,
    flow_jacobian_det,
    integrate_between,
    integrate_flow,
    invert_flow,
    rescale_horizon,
    steer_point,
)
from steering.schedule import (
    ConstantControl,
    FeedbackSchedule,
    FrameInversionControl,
    SchedulePiece,
    ShearControl,
    ShearMap,
    VelocityField,
)

UNIT = Domain.unit()
A = np.array([[0.5, 1.0], [-1.0, 0.5]])
X0 = np.array([0.3, 0.2])


def linear_schedule():
    return FeedbackSchedule(UNIT, 1, (SchedulePiece(1.0, ConstantControl([1.0])),))


def sine_shear(amplitude=0.05):
    xs = np.linspace(0, 1, 17)
    ys = np.linspace(0, 1, 17)
    # moves y by amplitude * sin(pi x)
    table = ys[None, :] + amplitude * np.sin(np.pi * xs)[:, None]
    return ShearMap(1, xs, ys, table)


def test_constant_controls_translate():
    s = FeedbackSchedule.constant(UNIT, [0.1, -0.05])
    out = integrate_flow(s, CoordinateFrame(), [0.5, 0.5])
    assert np.allclose(out, [0.6, 0.45], atol=1e-12)
    back = invert_flow(s, CoordinateFrame(), out)
    assert np.allclose(back, [0.5, 0.5], atol=1e-12)


def test_zero_schedule_is_identity():
    pts = np.random.default_rng(1).random((10, 2))
    out = integrate_flow(FeedbackSchedule.zero(UNIT, 2), CoordinateFrame(), pts)
    assert np.array_equal(out, pts)


def test_rk4_order_on_linear_field():
    fam = LinearFamily([A])
    exact = expm(A) @ X0
    e1 = np.abs(integrate_flow(linear_schedule(), fam, X0, h_ode=0.1) - exact).max()
    e2 = np.abs(integrate_flow(linear_schedule(), fam, X0, h_ode=0.05) - exact).max()
    assert e1 / e2 >= 12


def test_liouville_determinant():
    fam = LinearFamily([A])
    det = flow_jacobian_det(linear_schedule(), fam, X0, t=0.7)
    assert det == pytest.approx(np.exp(0.7 * np.trace(A)), abs=1e-6)
    flow = FlowMap(linear_schedule(), fam, 1e-3)
    assert finite_difference_det(flow, X0[None], 0.7)[0] == pytest.approx(det, rel=1e-6)


def test_between_matches_split_integration():
    fam = LinearFamily([A])
    mid = integrate_between(linear_schedule(), fam, X0, 0.0, 0.4)
    end = integrate_between(linear_schedule(), fam, mid, 0.4, 1.0)
    assert np.allclose(end, integrate_flow(linear_schedule(), fam, X0), atol=1e-12)


def test_shear_control_realizes_its_shear():
    shear = sine_shear()
    s = FeedbackSchedule(UNIT, 2, (SchedulePiece(1.0, ShearControl(shear, 1)),))
    pts = np.random.default_rng(2).random((50, 2)) * 0.8 + 0.1
    out = integrate_flow(s, CoordinateFrame(), pts, h_ode=0.05)
    assert np.allclose(out, shear.evaluate(pts), atol=1e-9)


def test_group_law_for_composed_schedules():
    fam = CoordinateFrame()
    s1 = FeedbackSchedule.constant(UNIT, [0.1, 0.0])
    s2 = FeedbackSchedule(UNIT, 2, (SchedulePiece(1.0, ShearControl(sine_shear(), 1)),))
    pts = np.random.default_rng(4).random((100, 2)) * 0.7 + 0.1
    sequential = integrate_flow(s2, fam, integrate_flow(s1, fam, pts, h_ode=0.05), h_ode=0.05)
    composed = integrate_flow(compose_schedules(s1, s2), fam, pts, h_ode=0.05)
    assert np.abs(composed - sequential).max() <= 1e-6


def test_leaving_the_working_box_raises():
    s = FeedbackSchedule.constant(UNIT, [5.0, 0.0])
    with pytest.raises(BlowUpError):
        integrate_flow(s, CoordinateFrame(), [0.5, 0.5], h_ode=0.1)


def test_steer_point_with_rotated_frame():
    s = steer_point(RotatedFrame(0.3), [0.2, 0.2], [0.7, 0.6], UNIT)
    out = integrate_flow(s, RotatedFrame(0.3), [0.2, 0.2], h_ode=0.1)
    assert np.allclose(out, [0.7, 0.6], atol=1e-12)


def test_rescaled_horizon_divides_controls():
    s = FeedbackSchedule.constant(UNIT, [0.2, -0.4])
    hs = rescale_horizon(s, CoordinateFrame(), 4.0)
    assert hs.control_bound == pytest.approx(0.1)
    assert hs.durations() == [4.0]
    assert np.allclose(hs.controls(2.0, [[0.5, 0.5]], CoordinateFrame()), [[0.05, -0.1]])
    with pytest.raises(ValueError):
        rescale_horizon(s, CoordinateFrame(), 0.0)


def test_default_config_step():
    flow = FlowMap(FeedbackSchedule.zero(UNIT, 2), CoordinateFrame())
    assert flow.h_ode == config.H_ODE


def random_shear(axis, rng):
    lines = np.linspace(0, 1, 13)
    knots = np.linspace(0, 1, 21)
    amp = rng.uniform(0.01, 0.03)
    phase = rng.uniform(0, 2 * np.pi)
    disp = amp * np.sin(2 * np.pi * knots[None, :] + phase) * np.cos(np.pi * lines[:, None])
    return ShearMap(axis, lines, knots, knots[None, :] + disp)


def test_inverse_flow_undoes_a_random_shear_schedule():
    rng = np.random.default_rng(11)
    pieces = tuple(SchedulePiece(0.25, ShearControl(random_shear(axis, rng), axis)) for axis in (0, 1, 0, 1))
    s = FeedbackSchedule(UNIT, 2, pieces)
    pts = rng.uniform(0.1, 0.9, (100, 2))
    out = integrate_flow(s, CoordinateFrame(), pts, h_ode=0.05)
    assert np.abs(out - pts).max() > 1e-3
    back = invert_flow(s, CoordinateFrame(), out, h_ode=0.05)
    assert np.abs(back - pts).max() <= 1e-8


def test_curved_shear_control_realizes_its_shear():
    xs = np.linspace(0, 1, 9)
    ys = np.linspace(0, 1, 11)
    # line i sits at xs[i] + 0.02 sin(pi y) at knot y
    lines = xs[:, None] + 0.02 * np.sin(np.pi * ys)[None, :]
    table = ys[None, :] + 0.03 * np.sin(np.pi * xs)[:, None] * np.sin(np.pi * ys)[None, :]
    shear = ShearMap(1, lines, ys, table)
    assert shear.curved and shear.is_monotone()
    # on the tabulated points the shear hits the table exactly
    nodes = np.stack([lines.ravel(), np.broadcast_to(ys, lines.shape).ravel()], axis=1)
    assert np.allclose(shear.evaluate(nodes)[:, 1], table.ravel(), atol=1e-14)
    s = FeedbackSchedule(UNIT, 2, (SchedulePiece(1.0, ShearControl(shear, 1)),))
    pts = np.random.default_rng(5).uniform(0.1, 0.9, (60, 2))
    out = integrate_flow(s, CoordinateFrame(), pts, h_ode=0.05)
    assert np.allclose(out, shear.evaluate(pts), atol=1e-9)
    assert np.allclose(shear.inverse(out), pts, atol=1e-12)


def test_curved_shear_rejects_unordered_lines():
    ys = np.linspace(0, 1, 3)
    lines = np.array([[0.0, 0.0, 0.0], [0.5, 0.2, 0.5], [0.4, 1.0, 1.0]])
    with pytest.raises(ValueError):
        ShearMap(1, lines, ys, np.broadcast_to(ys, (3, 3)))


class _OutAndBack(VelocityField):
    kind = "out-and-back"

    def velocity(self, tau, pts):
        out = np.zeros_like(pts, dtype=float)
        out[:, 0] = 8.0 * np.cos(2 * np.pi * tau)
        return out

    def to_dict(self) -> dict:
        return {"kind": self.kind}


def test_excursion_inside_one_piece_raises():
    s = FeedbackSchedule(UNIT, 2, (SchedulePiece(1.0, FrameInversionControl(_OutAndBack())),))
    # the trajectory ends back at its start but peaks at x = 0.5 + 4 / pi
    with pytest.raises(BlowUpError):
        integrate_flow(s, CoordinateFrame(), [0.5, 0.5], h_ode=0.01)
    with pytest.raises(BlowUpError):
        flow_jacobian_det(s, CoordinateFrame(), [0.5, 0.5], h_ode=0.01)
