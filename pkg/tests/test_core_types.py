import numpy as np
import pytest

from steering.core_types import (
    CoordinateFrame,
    Domain,
    GridDensity,
    LinearFamily,
    NodeGrid,
    RotatedFrame,
    SampledMap,
    check_growth,
    coarsen,
    family_from_dict,
    frame_matrix,
    newton_solve,
    sample_density,
    validate_density,
)
from steering.errors import (
    ConfigError,
    GridMismatchError,
    NegativeDensityError,
    NewtonDivergenceError,
    NonFiniteError,
    SingularFrameError,
    ZeroMassError,
)


def test_domain_rejects_inverted_corners():
    with pytest.raises(ValueError):
        Domain((1.0, 0.0), (0.0, 1.0))


def test_domain_diam_and_inflate():
    d = Domain((0.0, 0.0), (3.0, 4.0))
    assert d.diam == pytest.approx(5.0)
    big = d.inflate(0.1)
    assert big.lower == pytest.approx((-0.3, -0.4))
    assert big.upper == pytest.approx((3.3, 4.4))


def test_validate_normalizes_mass():
    d = GridDensity(Domain.unit(), np.full((4, 4), 3.0))
    v = validate_density(d)
    assert v.mass == pytest.approx(1.0)
    assert v.positive
    # already normalized densities come back untouched
    assert validate_density(v) is v


def test_validate_contract_errors():
    dom = Domain.unit()
    with pytest.raises(NegativeDensityError):
        validate_density(GridDensity(dom, [[1.0, -0.1], [1.0, 1.0]]))
    with pytest.raises(ZeroMassError):
        validate_density(GridDensity(dom, np.zeros((2, 2))))
    with pytest.raises(NonFiniteError):
        validate_density(GridDensity(dom, [[1.0, np.nan], [1.0, 1.0]]))
    with pytest.raises(NegativeDensityError):
        validate_density(GridDensity(dom, [[1.0, 0.0], [1.0, 1.0]]), require_positive=True)


def test_density_values_are_read_only():
    d = GridDensity.uniform(Domain.unit(), (3, 2))
    assert d.values.shape == (2, 3)
    with pytest.raises(ValueError):
        d.values[0, 0] = 5.0


def test_coarsen_preserves_mass():
    rng = np.random.default_rng(3)
    d = validate_density(GridDensity(Domain.unit(), rng.random((8, 8)) + 0.1))
    c = coarsen(d, 4)
    assert c.resolution == (2, 2)
    assert c.mass == pytest.approx(1.0)
    with pytest.raises(GridMismatchError):
        coarsen(d, 3)


def test_sample_density_hits_cell_values_at_centers():
    rng = np.random.default_rng(0)
    d = GridDensity(Domain.unit(), rng.random((4, 5)))
    X, Y = np.meshgrid(d.centers.xs, d.centers.ys)
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    assert np.allclose(sample_density(d, pts), d.values.ravel())


def test_family_from_dict():
    assert isinstance(family_from_dict({"kind": "coordinate"}), CoordinateFrame)
    rot = family_from_dict({"kind": "rotated", "theta": 0.3})
    assert isinstance(rot, RotatedFrame)
    assert rot.to_dict() == {"kind": "rotated", "theta": 0.3}
    with pytest.raises(ConfigError):
        family_from_dict({"kind": "spiral"})


def test_frame_matrix_detects_singular_frames():
    mats, det = frame_matrix(RotatedFrame(0.7), np.array([[0.2, 0.3], [0.5, 0.5]]))
    assert np.allclose(det, 1.0)
    fam = LinearFamily([[[1.0, 0.0], [0.0, 1.0]], [[2.0, 0.0], [0.0, 2.0]]])
    with pytest.raises(SingularFrameError):
        frame_matrix(fam, np.array([[0.5, 0.5]]))


def test_check_growth_for_linear_family():
    fam = LinearFamily([[[0.0, -1.0], [1.0, 0.0]]])
    alpha = check_growth(fam, Domain.unit())
    assert 0 < alpha <= fam.growth_constant


def test_node_grid_refine_keeps_nodes():
    g = NodeGrid(np.linspace(0, 1, 5), np.linspace(0, 1, 3))
    r = g.refine(2)
    assert r.xs.size == 9
    assert r.ys.size == 5
    assert np.allclose(r.xs[::2], g.xs)


def test_sampled_map_identity():
    g = NodeGrid(np.linspace(0, 1, 5), np.linspace(0, 1, 5))
    ident = SampledMap.identity(g)
    pts = np.array([[0.13, 0.71], [0.5, 0.5], [1.2, -0.1]])
    assert np.allclose(ident(pts), pts)
    img, jac = ident.with_jacobian(pts)
    assert np.allclose(jac, np.eye(2))
    assert ident.max_displacement() == 0.0


def test_sampled_map_reproduces_affine_maps():
    g = NodeGrid(np.linspace(0, 1, 6), np.linspace(0, 1, 4))
    A = np.array([[1.1, 0.2], [-0.1, 0.9]])
    tmap = SampledMap.from_function(g, lambda p: p @ A.T + 0.05)
    pts = np.array([[0.31, 0.47], [0.9, 0.05]])
    assert np.allclose(tmap(pts), pts @ A.T + 0.05)
    assert np.allclose(tmap.node_jacobians(), A)


def test_newton_solve_inverts_a_scaling():
    y = np.array([[0.2, 0.4], [1.0, -2.0]])
    x = newton_solve(lambda p: (2 * p, np.broadcast_to(2 * np.eye(2), (len(p), 2, 2))), y, y.copy(), 20, 1e-12)
    assert np.allclose(x, y / 2)


def test_newton_solve_gives_up():
    # x^2 + 1 = 0 has no real root
    def fn(p):
        jac = np.zeros((len(p), 2, 2))
        jac[:, 0, 0] = 2 * p[:, 0]
        jac[:, 1, 1] = 1.0
        return np.stack([p[:, 0] ** 2 + 1, p[:, 1]], axis=1), jac

    with pytest.raises(NewtonDivergenceError):
        newton_solve(fn, np.zeros((1, 2)), np.array([[0.3, 0.0]]), 5, 1e-12)


def test_newton_solve_singular_jacobian_is_a_divergence():
    def fn(p):
        return p.copy(), np.zeros((len(p), 2, 2))

    with pytest.raises(NewtonDivergenceError, match="singular"):
        newton_solve(fn, np.ones((3, 2)), np.zeros((3, 2)), 5, 1e-12)
