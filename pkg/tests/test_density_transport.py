import numpy as np
import pytest

from steering.config import config
from steering.core_types import (
    CoordinateFrame,
    Domain,
    GridDensity,
    LinearFamily,
    cell_centers,
    sample_density,
    validate_density,
)
from steering.density_transport import (
    WeightedPoints,
    continuity_residual,
    empirical_to_grid,
    pushforward_density,
    pushforward_particles,
    sample_particles,
    simulate_series,
)
from steering.errors import GridMismatchError
from steering.moser_builder import field_schedule, moser_interpolation_field
from steering.schedule import FeedbackSchedule
from steering.standard import cosine_pair, gaussian_bump_pair, translation_pair
from steering.verification import l1_distance, w2_grid

UNIT = Domain.unit()
FAM = CoordinateFrame()
# shifts by exactly four cells of a 32 x 32 grid
SHIFT = (0.125, 0.0)
CFG = config.replace(H_ODE=0.125)


def test_zero_schedule_leaves_density_unchanged():
    mu, _ = translation_pair((16, 16), floor=0.1)
    res = pushforward_density(mu, FeedbackSchedule.zero(UNIT, 2), FAM)
    assert np.array_equal(res.density.values, mu.values)
    assert res.mass_drift == pytest.approx(1.0)
    assert res.min_det == 1.0


def test_translation_moves_the_bump():
    mu, nu = translation_pair((32, 32), shift=SHIFT)
    res = pushforward_density(mu, FeedbackSchedule.constant(UNIT, SHIFT), FAM, cfg=CFG)
    assert l1_distance(res.density, nu) < 1e-8
    assert res.mass_drift == pytest.approx(1.0, abs=1e-12)
    assert res.min_det == pytest.approx(1.0)


def test_pushforward_semigroup_in_time():
    mu, nu = translation_pair((32, 32), shift=SHIFT)
    s = FeedbackSchedule.constant(UNIT, SHIFT)
    half = pushforward_density(mu, s, FAM, 0.5, CFG)
    rest = pushforward_density(half.density, s, FAM, 1.0, CFG, t_start=0.5)
    direct = pushforward_density(mu, s, FAM, 1.0, CFG)
    assert l1_distance(rest.density, direct.density) < 1e-8


def test_positive_density_stays_positive():
    mu, _ = translation_pair((16, 16), floor=0.2)
    res = pushforward_density(mu, FeedbackSchedule.constant(UNIT, (0.05, 0.02)), FAM, cfg=config.replace(H_ODE=0.1))
    assert res.density.values.min() > 0
    assert res.density.positive


def test_dirac_particle_follows_the_flow():
    pts = WeightedPoints([[0.3, 0.4]], [1.0])
    out = pushforward_particles(pts, FeedbackSchedule.constant(UNIT, (0.1, 0.2)), FAM, t=0.5, cfg=CFG)
    assert np.allclose(out.points, [[0.35, 0.5]])
    assert np.array_equal(out.weights, [1.0])


def test_weighted_points_length_mismatch():
    with pytest.raises(ValueError):
        WeightedPoints(np.zeros((3, 2)), np.ones(2))


def test_sample_particles_is_seeded():
    mu, _ = translation_pair((16, 16), floor=0.1)
    a = sample_particles(mu, 500, seed=7)
    b = sample_particles(mu, 500, seed=7)
    assert np.array_equal(a.points, b.points)
    assert a.weights.sum() == pytest.approx(1.0)
    assert np.all(UNIT.contains(a.points))


def test_empirical_histogram_is_a_density():
    mu, _ = translation_pair((8, 8), floor=0.1)
    grid = empirical_to_grid(sample_particles(mu, 4000, seed=1), mu)
    assert grid.mass == pytest.approx(1.0)
    assert grid.same_grid(mu)


def test_simulate_series_times():
    mu, _ = translation_pair((16, 16))
    frames = simulate_series(mu, FeedbackSchedule.constant(UNIT, (0.1, 0.0)), FAM, [0.0, 0.5, 1.0], CFG)
    assert [f.time for f in frames] == [0.0, 0.5, 1.0]
    assert np.array_equal(frames[0].density.values, mu.values)


def test_continuity_residual_static_and_corrupted():
    rho = GridDensity.uniform(UNIT, (8, 8))
    times = [0.0, 0.25, 0.5, 0.75, 1.0]
    series = [rho] * 5
    zero = FeedbackSchedule.zero(UNIT, 2)
    clean = continuity_residual(series, times, zero, FAM)
    assert clean == pytest.approx(0.0, abs=1e-12)
    corrupted = list(series)
    corrupted[2] = rho.with_values(rho.values * 1.1)
    assert continuity_residual(corrupted, times, zero, FAM) > 10 * clean + 0.1


def test_continuity_residual_needs_uniform_times():
    rho = GridDensity.uniform(UNIT, (8, 8))
    with pytest.raises(GridMismatchError):
        continuity_residual([rho] * 3, [0.0, 0.1, 1.0], FeedbackSchedule.zero(UNIT, 2), FAM)
    with pytest.raises(GridMismatchError):
        continuity_residual([rho] * 2, [0.0, 1.0], FeedbackSchedule.zero(UNIT, 2), FAM)


def test_translated_series_has_small_residual():
    mu = validate_density(GridDensity.from_function(UNIT, (32, 32), lambda X, Y: 1.0 + 0.2 * np.sin(np.pi * Y)))
    # translation along x leaves an x-independent density fixed
    s = FeedbackSchedule.constant(UNIT, (0.1, 0.0))
    times = [0.0, 0.5, 1.0]
    frames = simulate_series(mu, s, FAM, times, config.replace(H_ODE=0.1))
    assert continuity_residual([f.density for f in frames], times, s, FAM) < 1e-9


def test_particles_and_grid_agree_in_w2():
    mu, nu = gaussian_bump_pair((16, 16))
    s = field_schedule(moser_interpolation_field(mu, nu))
    cfg = config.replace(H_ODE=1e-2)
    grid = pushforward_density(mu, s, FAM, cfg=cfg).density
    particles = pushforward_particles(sample_particles(mu, 20000, seed=3), s, FAM, cfg=cfg)
    w2, _, factor = w2_grid(empirical_to_grid(particles, mu), grid)
    assert factor == 1
    assert w2 <= 0.05


def translation_frames(n, c=(0.25, 0.25)):
    mu, _ = translation_pair((n, n), shift=(0.0, 0.0))
    # one cell per time step along both axes, two cells per axis at t = 0.5 on the 16 x 16 grid
    dt = 1.0 / (n * c[0])
    times = [0.5 - dt, 0.5, 0.5 + dt]
    s = FeedbackSchedule.constant(UNIT, c)
    frames = simulate_series(mu, s, FAM, times, config.replace(H_ODE=1.0))
    return [f.density for f in frames], times, s


def test_continuity_residual_shrinks_under_refinement():
    coarse = continuity_residual(*translation_frames(16), FAM)
    fine = continuity_residual(*translation_frames(32), FAM)
    assert coarse > 0
    assert fine < 0.75 * coarse


def test_moser_flow_keeps_mass_on_a_fine_grid():
    mu, nu = cosine_pair((64, 64), amplitude=0.2)
    s = field_schedule(moser_interpolation_field(mu, nu))
    res = pushforward_density(mu, s, FAM, cfg=config.replace(H_ODE=1e-2))
    assert abs(res.mass_drift - 1.0) <= 1e-3
    assert res.min_det > 0
    assert l1_distance(res.density, nu) < 0.05


def test_doubling_x_halves_the_density():
    domain = Domain((-1.0, -1.0), (1.0, 1.0))
    rho0 = validate_density(GridDensity.from_function(
        domain, (64, 64), lambda X, Y: np.clip(1 - (X ** 2 + Y ** 2) / 0.16, 0, None) ** 3))
    # x' = ln 2 * x doubles x at t = 1 and leaves y alone
    fam = LinearFamily([[[np.log(2.0), 0.0], [0.0, 0.0]]])
    res = pushforward_density(rho0, FeedbackSchedule.constant(domain, [1.0]), fam, cfg=config.replace(H_ODE=1e-2))
    assert res.min_det == pytest.approx(2.0, rel=1e-9)
    assert res.mass_drift == pytest.approx(1.0, abs=1e-3)
    xs, ys = cell_centers(domain, 64, 64)
    X, Y = np.meshgrid(xs, ys)
    expected = 0.5 * sample_density(rho0, np.stack([X.ravel() / 2, Y.ravel()], axis=1)).reshape(64, 64)
    assert np.allclose(res.density.values * res.mass_drift, expected, atol=1e-8)
    assert res.density.values.max() * res.mass_drift == pytest.approx(0.5 * rho0.values.max(), rel=0.05)
