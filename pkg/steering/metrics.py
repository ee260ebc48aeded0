import time
from contextlib import contextmanager

from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, write_to_textfile

# Prometheus metrics on a private registry; exported to a textfile by the CLI
REGISTRY = CollectorRegistry()

STAGE_SECONDS = Histogram(
    "steering_stage_seconds", "Wall time per pipeline stage", ["stage"], registry=REGISTRY,
)
FLOW_POINTS = Counter("steering_flow_points_total", "Points integrated by the flow engine", registry=REGISTRY)
SINKHORN_ITERATIONS = Counter("steering_sinkhorn_iterations_total", "Sinkhorn scaling iterations", registry=REGISTRY)
NEWTON_FAILURES = Counter("steering_newton_failures_total", "Newton inversions that did not converge", registry=REGISTRY)
REFINEMENTS = Counter("steering_refinements_total", "Fragment count doublings during synthesis", registry=REGISTRY)
ACTIVE_WORKERS = Gauge("steering_active_workers", "Worker threads currently evaluating chunks", registry=REGISTRY)
LAST_MASS_DRIFT = Gauge("steering_last_mass_drift", "Mass before renormalization of the last pushforward", registry=REGISTRY)


@contextmanager
def observe_stage(name: str):
    start = time.perf_counter()
    try:
        yield
    finally:
        STAGE_SECONDS.labels(stage=name).observe(time.perf_counter() - start)


def inc_flow_points(n: int):
    FLOW_POINTS.inc(n)


def inc_sinkhorn_iterations(n: int):
    SINKHORN_ITERATIONS.inc(n)


def inc_newton_failures():
    NEWTON_FAILURES.inc()


def inc_refinements():
    REFINEMENTS.inc()


def set_mass_drift(value: float):
    LAST_MASS_DRIFT.set(value)


def write_metrics(path) -> None:
    write_to_textfile(str(path), REGISTRY)
