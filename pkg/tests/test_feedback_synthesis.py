import numpy as np
import pytest

from steering import feedback_synthesis
from steering.config import config
from steering.core_types import CoordinateFrame, Domain, LinearFamily, NodeGrid, RotatedFrame, SampledMap
from steering.errors import FoldOverError, NonMonotoneMapError, NotNearIdentityError, SynthesisError
from steering.feedback_synthesis import (
    displacement_isotopy,
    fragment_isotopy,
    frame_inversion_controls,
    shear_factorization,
    shear_to_schedule_piece,
    synthesize_schedule,
)
from steering.flow_engine import integrate_flow
from steering.ot_solver import MonotonicityReport, barycentric_map, check_monotone, solve_plan_sinkhorn
from steering.schedule import ConstantVelocity, FeedbackSchedule, FrameInversionControl, ShearControl, ShearMap
from steering.standard import cosine_pair, gaussian_bump_pair
from steering.verification import verify_steering
from steering.worker_pool import WorkerPool

GRID = NodeGrid(np.linspace(0, 1, 17), np.linspace(0, 1, 17))
FAST = config.replace(H_ODE=1e-2)


def bump_map(amplitude=0.05):
    def fn(p):
        s = np.sin(np.pi * p[:, 0]) * np.sin(np.pi * p[:, 1])
        return p + amplitude * np.stack([s, 0.5 * s], axis=1)
    return SampledMap.from_function(GRID, fn)


def test_displacement_isotopy_endpoints():
    target = bump_map()
    iso = displacement_isotopy(target)
    pts = GRID.points()
    assert np.array_equal(iso.evaluate(0.0, pts), pts)
    assert np.allclose(iso.evaluate(1.0, pts), target.node_points())
    mid = iso.evaluate(0.5, pts)
    assert np.allclose(iso.inverse(0.5, mid), pts, atol=1e-9)
    assert iso.min_det > 0


def test_fold_over_is_detected():
    flip = SampledMap.from_function(GRID, lambda p: np.stack([1 - p[:, 0], p[:, 1]], axis=1))
    with pytest.raises(FoldOverError):
        displacement_isotopy(flip)


def test_fragments_compose_to_the_target():
    iso = displacement_isotopy(bump_map())
    frags = fragment_isotopy(iso, 4)
    assert frags.n == 4
    assert frags.composition_error < 1e-8
    assert frags.max_displacement <= frags.displacement_bound
    with pytest.raises(ValueError):
        fragment_isotopy(iso, 0)


def test_translation_factors_exactly():
    shift = np.array([0.01, 0.02])
    fac = shear_factorization(lambda p: p + shift, GRID)
    assert fac.factorization_error < 1e-12
    assert fac.tabulation_error < 1e-12
    pts = GRID.points()
    assert np.allclose(fac.evaluate(pts), pts + shift)
    assert fac.first.axis == 0
    assert fac.second.axis == 1


def test_factorization_of_a_smooth_fragment():
    frags = fragment_isotopy(displacement_isotopy(bump_map()), 4)
    for frag in frags.fragments:
        fac = shear_factorization(frag, GRID)
        assert fac.tabulation_error <= 1e-6
        assert fac.factorization_error < 1e-3
        assert fac.second.curved
        assert np.abs(fac.evaluate(GRID.points()) - frag(GRID.points())).max() <= 1e-6


def smooth_near_identity(seed):
    """p + d(p) with each |d_c| <= 0.02, built from a few random low modes."""
    rng = np.random.default_rng(seed)
    modes = rng.integers(1, 4, size=(2, 4, 2))
    phases = rng.uniform(0, 2 * np.pi, size=(2, 4, 2))
    weights = rng.uniform(-1, 1, size=(2, 4))
    weights *= 0.02 / np.abs(weights).sum(axis=1, keepdims=True)

    def q(p):
        d = np.zeros_like(p)
        for c in range(2):
            for (mx, my), (px, py), w in zip(modes[c], phases[c], weights[c]):
                d[:, c] += w * np.sin(np.pi * mx * p[:, 0] + px) * np.cos(np.pi * my * p[:, 1] + py)
        return p + d
    return q


@pytest.mark.parametrize("seed", range(5))
def test_random_smooth_fragment_factors_on_the_nodes(seed):
    grid = NodeGrid(np.linspace(0, 1, 65), np.linspace(0, 1, 65))
    q = smooth_near_identity(seed)
    nodes = grid.points()
    assert np.linalg.norm(q(nodes) - nodes, axis=1).max() <= 0.02 * np.sqrt(2) + 1e-12
    fac = shear_factorization(q, grid)
    assert fac.tabulation_error <= 1e-6
    assert fac.factorization_error < 5e-4
    s = FeedbackSchedule.from_controls(Domain.unit(), 2, [
        shear_to_schedule_piece(fac.first, CoordinateFrame()).control,
        shear_to_schedule_piece(fac.second, CoordinateFrame()).control,
    ])
    sample = nodes[::37]
    out = integrate_flow(s, CoordinateFrame(), sample, h_ode=0.1)
    assert np.abs(out - q(sample)).max() <= 1e-6


def test_missed_node_tolerance_asks_for_more_fragments():
    frags = fragment_isotopy(displacement_isotopy(bump_map()), 4)
    with pytest.raises(NotNearIdentityError):
        shear_factorization(frags.fragments[0], GRID, cfg=config.replace(SHEAR_TOL=-1.0))


def test_reflection_is_not_near_identity():
    with pytest.raises(NotNearIdentityError):
        shear_factorization(lambda p: np.stack([1 - p[:, 0], p[:, 1]], axis=1), GRID)


def test_shear_pieces_per_family():
    shear = ShearMap.translation(0, 0.05, GRID.ys, GRID.xs)
    piece = shear_to_schedule_piece(shear, CoordinateFrame())
    assert isinstance(piece.control, ShearControl)
    assert piece.control.active == 0
    rotated = shear_to_schedule_piece(shear, RotatedFrame(0.4))
    assert isinstance(rotated.control, FrameInversionControl)
    assert rotated.control.active is None


def test_frame_inversion_follows_the_field():
    fam = RotatedFrame(1.1)
    piece = frame_inversion_controls(ConstantVelocity([0.1, 0.05]), fam)
    pts = np.array([[0.3, 0.3], [0.6, 0.2]])
    assert np.allclose(piece.control.velocity(0.3, pts, fam), [[0.1, 0.05], [0.1, 0.05]])


def test_equal_densities_give_the_zero_schedule():
    mu, _ = cosine_pair((8, 8))
    result = synthesize_schedule(mu, mu, "moser", CoordinateFrame())
    assert result.schedule.is_zero()
    assert result.report.n == 0
    assert result.target is None


def test_moser_synthesis_on_the_cosine_pair():
    mu, nu = cosine_pair((16, 16), amplitude=0.2)
    result = synthesize_schedule(mu, nu, "moser", CoordinateFrame(), n=4, cfg=FAST)
    report = result.report
    assert report.n >= 4
    assert len(result.schedule.pieces) == 2 * report.n
    assert all(a in (0, 1) for a in result.schedule.active_fields())
    assert report.final_sup_norm_deviation <= 5e-3 * mu.domain.diam
    assert report.min_det_jacobian > 0
    assert [s.name for s in report.stages] == ["target", "fragment", "factorization", "verify"]
    doc = report.to_dict()
    assert doc["N"] == report.n
    assert doc["stages"][-1]["errorMetrics"]["minDetJacobian"] == report.min_det_jacobian

    check = verify_steering(mu, nu, result.schedule, CoordinateFrame(), tol_w2=0.02 * mu.domain.diam,
                            tol_l1=0.02, cfg=FAST)
    assert check.passed


def test_brenier_synthesis_on_a_mild_pair():
    mu, nu = cosine_pair((16, 16), amplitude=0.2)
    result = synthesize_schedule(mu, nu, "brenier", CoordinateFrame(), n=4, cfg=FAST)
    report = result.report
    assert report.stage("target").error_metrics["violations"] == 0
    assert report.stage("isotopy").error_metrics["minDet"] > 0
    assert report.final_sup_norm_deviation <= 0.01
    assert report.min_det_jacobian > 0


def test_moser_on_rotated_frame_uses_one_piece():
    mu, nu = cosine_pair((8, 8), amplitude=0.2)
    fam = RotatedFrame(0.5)
    result = synthesize_schedule(mu, nu, "moser", fam, cfg=FAST)
    assert len(result.schedule.pieces) == 1
    assert result.report.n == 1
    out = integrate_flow(result.schedule, fam, result.target.grid.points(), cfg=FAST, h_ode=1e-2)
    assert np.allclose(out, result.target.node_points(), atol=1e-9)


def test_singular_frame_fails_with_stage():
    mu, nu = cosine_pair((8, 8), amplitude=0.2)
    fam = LinearFamily([[[1.0, 0.0], [0.0, 1.0]], [[2.0, 0.0], [0.0, 2.0]]])
    with pytest.raises(SynthesisError) as exc:
        synthesize_schedule(mu, nu, "moser", fam, cfg=FAST)
    assert exc.value.stage == "assembly"


def test_unknown_method():
    mu, nu = cosine_pair((8, 8))
    with pytest.raises(ValueError):
        synthesize_schedule(mu, nu, "geodesic", CoordinateFrame())


def test_non_monotone_barycentric_map_stops_brenier(monkeypatch):
    mu, nu = cosine_pair((8, 8), amplitude=0.2)
    monkeypatch.setattr(feedback_synthesis, "check_monotone", lambda tmap, seed=0: MonotonicityReport(-1.0, 3, 100))
    with pytest.raises(SynthesisError) as exc:
        synthesize_schedule(mu, nu, "brenier", CoordinateFrame(), n=2, cfg=FAST)
    assert exc.value.stage == "target"
    assert isinstance(exc.value.cause, NonMonotoneMapError)


def test_bump_pair_barycentric_map_is_monotone_and_unfolded():
    mu, nu = gaussian_bump_pair((64, 64))
    plan = solve_plan_sinkhorn(mu, nu)
    assert plan.converged
    tmap = barycentric_map(plan)
    assert check_monotone(tmap).violations == 0
    iso = displacement_isotopy(tmap)
    assert iso.min_det > 0


@pytest.mark.slow
def test_bump_pair_moser_synthesis_at_full_resolution():
    mu, nu = gaussian_bump_pair((64, 64))
    with WorkerPool(max(config.THREADS, 4)) as pool:
        coarse = synthesize_schedule(mu, nu, "moser", CoordinateFrame(), n=16, pool=pool).report
        fine = synthesize_schedule(mu, nu, "moser", CoordinateFrame(), n=32, pool=pool).report
    assert coarse.final_sup_norm_deviation <= 5e-3 * mu.domain.diam
    assert coarse.composition_fidelity <= 1e-8
    assert coarse.min_det_jacobian > 0
    assert fine.final_sup_norm_deviation <= 1.1 * coarse.final_sup_norm_deviation
