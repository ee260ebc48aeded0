import os
from dataclasses import dataclass, replace


def _bool_env(name, default=False):
    v = os.getenv(name)
    if v is None:
        return default
    return v.lower() in ("1", "true", "yes", "y")


def _float_env(name, default):
    return float(os.getenv(name, str(default)))


def _int_env(name, default):
    return int(os.getenv(name, str(default)))


@dataclass(frozen=True)
class Config:
    # fixed RK4 step in real time; steps are aligned to schedule piece boundaries
    H_ODE: float
    # central-difference step for control gradients
    H_FD: float
    # working box = domain inflated by this fraction per side
    WORKING_MARGIN: float
    # trajectories leaving the working box inflated by this extra fraction raise BlowUpError
    BLOWUP_MARGIN: float
    # target sinkhorn eps = EPS_FACTOR * diam(domain)**2
    EPS_FACTOR: float
    SINKHORN_MAX_ITERS: int
    SINKHORN_TOL: float
    W2_MAX_SUPPORT: int
    FRAGMENTS: int
    MAX_REFINEMENTS: int
    SHEAR_REFINEMENT: int
    # largest |S2 o S1 - Q| on the nodes before a fragment counts as not near the identity
    SHEAR_TOL: float
    NEWTON_MAX_ITERS: int
    NEWTON_TOL: float
    MASS_DRIFT_LIMIT: float
    THREADS: int
    LOG_LEVEL: str
    # omit wall-clock fields from written reports so reruns are byte-identical
    DETERMINISTIC: bool

    def replace(self, **overrides) -> "Config":
        return replace(self, **overrides)


config = Config(
    H_ODE=_float_env("STEERING_H_ODE", 1e-3),
    H_FD=_float_env("STEERING_H_FD", 1e-6),
    WORKING_MARGIN=_float_env("STEERING_WORKING_MARGIN", 0.1),
    BLOWUP_MARGIN=_float_env("STEERING_BLOWUP_MARGIN", 0.25),
    EPS_FACTOR=_float_env("STEERING_EPS_FACTOR", 1e-3),
    SINKHORN_MAX_ITERS=_int_env("STEERING_SINKHORN_MAX_ITERS", 5000),
    SINKHORN_TOL=_float_env("STEERING_SINKHORN_TOL", 1e-7),
    W2_MAX_SUPPORT=_int_env("STEERING_W2_MAX_SUPPORT", 1024),
    FRAGMENTS=_int_env("STEERING_FRAGMENTS", 16),
    MAX_REFINEMENTS=_int_env("STEERING_MAX_REFINEMENTS", 3),
    SHEAR_REFINEMENT=_int_env("STEERING_SHEAR_REFINEMENT", 2),
    SHEAR_TOL=_float_env("STEERING_SHEAR_TOL", 1e-6),
    NEWTON_MAX_ITERS=_int_env("STEERING_NEWTON_MAX_ITERS", 20),
    NEWTON_TOL=_float_env("STEERING_NEWTON_TOL", 1e-10),
    MASS_DRIFT_LIMIT=_float_env("STEERING_MASS_DRIFT_LIMIT", 1e-2),
    THREADS=_int_env("STEERING_THREADS", 1),
    LOG_LEVEL=os.getenv("STEERING_LOG_LEVEL", "INFO"),
    DETERMINISTIC=_bool_env("STEERING_DETERMINISTIC", default=True),
)
