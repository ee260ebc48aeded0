"""Standard density pairs used by tests, the `gen` command and the acceptance runs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_types import Domain, GridDensity, validate_density


@dataclass(frozen=True)
class BumpParams:
    mu_center: tuple[float, float] = (0.4, 0.45)
    mu_sigma: float = 0.12
    nu_center: tuple[float, float] = (0.6, 0.55)
    nu_sigma: float = 0.15
    # constant added before normalization; keeps both densities strictly positive
    floor: float = 0.25


def _gaussian(center, sigma):
    cx, cy = center
    return lambda X, Y: np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2 * sigma ** 2))


def gaussian_bump_pair(resolution: tuple[int, int] = (64, 64), params: BumpParams = BumpParams(),
                       domain: Domain | None = None) -> tuple[GridDensity, GridDensity]:
    """Two truncated Gaussian bumps on a positive floor, unit mass each."""
    domain = domain or Domain.unit()
    g_mu = _gaussian(params.mu_center, params.mu_sigma)
    g_nu = _gaussian(params.nu_center, params.nu_sigma)
    mu = GridDensity.from_function(domain, resolution, lambda X, Y: params.floor + g_mu(X, Y))
    nu = GridDensity.from_function(domain, resolution, lambda X, Y: params.floor + g_nu(X, Y))
    return validate_density(mu, require_positive=True), validate_density(nu, require_positive=True)


def cosine_pair(resolution: tuple[int, int] = (64, 64), amplitude: float = 0.1,
                domain: Domain | None = None) -> tuple[GridDensity, GridDensity]:
    """rho_mu uniform, rho_nu proportional to 1 + a cos(pi x) in the unit-box coordinate."""
    if not 0 <= amplitude < 1:
        raise ValueError("amplitude must lie in [0, 1)")
    domain = domain or Domain.unit()
    x0, w = domain.lower[0], domain.size[0]
    mu = GridDensity.uniform(domain, resolution)
    nu = GridDensity.from_function(domain, resolution, lambda X, Y: 1.0 + amplitude * np.cos(np.pi * (X - x0) / w))
    return validate_density(mu, require_positive=True), validate_density(nu, require_positive=True)


def _compact_bump(center, width):
    cx, cy = center

    def fn(X, Y):
        r2 = ((X - cx) ** 2 + (Y - cy) ** 2) / width ** 2
        return np.where(r2 < 1, (1 - np.minimum(r2, 1)) ** 3, 0.0)
    return fn


def translation_pair(resolution: tuple[int, int] = (64, 64), shift=(0.1, 0.0), center=(0.4, 0.5),
                     width: float = 0.2, floor: float = 0.0,
                     domain: Domain | None = None) -> tuple[GridDensity, GridDensity]:
    """A compactly supported C^2 bump and its translate by `shift`; floor > 0 makes both positive."""
    domain = domain or Domain.unit()
    target = np.add(center, shift)
    for c in (np.asarray(center), target):
        if np.any(c - width < domain.lower) or np.any(c + width > domain.upper):
            raise ValueError("bump support must stay inside the domain")
    b_mu = _compact_bump(center, width)
    b_nu = _compact_bump(tuple(target), width)
    mu = GridDensity.from_function(domain, resolution, lambda X, Y: floor + b_mu(X, Y))
    nu = GridDensity.from_function(domain, resolution, lambda X, Y: floor + b_nu(X, Y))
    return validate_density(mu), validate_density(nu)
