import numpy as np
import pytest

from steering.config import config
from steering.core_types import CoordinateFrame, Domain, GridDensity
from steering.errors import GridMismatchError
from steering.schedule import FeedbackSchedule
from steering.standard import cosine_pair, translation_pair
from steering.verification import (
    REPORT_SCHEMA,
    l1_distance,
    metric_property_suite,
    verify_steering,
    w2_grid,
)
from steering.worker_pool import WorkerPool

UNIT = Domain.unit()
FAM = CoordinateFrame()


def test_l1_distance():
    mu, nu = cosine_pair((16, 16), amplitude=0.5)
    assert l1_distance(mu, mu) == 0.0
    assert l1_distance(mu, nu) == pytest.approx(1 / np.pi, rel=0.02)
    with pytest.raises(GridMismatchError):
        l1_distance(mu, GridDensity.uniform(UNIT, (8, 8)))


def test_equal_densities_pass_with_zero_schedule():
    mu, _ = cosine_pair((16, 16))
    report = verify_steering(mu, mu, FeedbackSchedule.zero(UNIT, 2), FAM, tol_w2=0.02, tol_l1=0.02)
    assert report.passed
    assert report.l1 == 0.0
    assert report.w2 == 0.0
    doc = report.to_dict()
    assert doc["schema"] == REPORT_SCHEMA
    assert doc["passed"] is True


def test_different_densities_fail_with_zero_schedule():
    mu, nu = cosine_pair((16, 16), amplitude=0.5)
    report = verify_steering(mu, nu, FeedbackSchedule.zero(UNIT, 2), FAM, tol_w2=0.02, tol_l1=0.02)
    assert not report.passed
    assert report.l1 > 0.3


def test_translation_schedule_passes():
    mu, nu = translation_pair((32, 32), shift=(0.125, 0.0), floor=0.1)
    report = verify_steering(mu, nu, FeedbackSchedule.constant(UNIT, (0.125, 0.0)), FAM, tol_w2=1e-3,
                             tol_l1=1e-6, cfg=config.replace(H_ODE=0.125))
    assert report.passed
    assert report.coarsening == 1
    assert report.w2_subsampling_error == 0.0


def test_w2_is_computed_on_coarsened_grids():
    mu, nu = cosine_pair((32, 32), amplitude=0.3)
    w2, err, factor = w2_grid(mu, nu, cfg=config.replace(W2_MAX_SUPPORT=256))
    assert factor == 2
    assert err is not None and err >= 0.0
    assert w2 > 0.0


def test_metric_suite_holds_for_exact_w2():
    report = metric_property_suite(seed=0, trials=5)
    assert report.trials == 5
    assert len(report.per_trial) == 5
    assert report.max_triangle_violation <= 1e-9
    assert report.max_translation_violation <= 1e-9
    assert report.passed
    assert report.to_dict()["maxViolation"] == report.max_violation


def test_metric_suite_is_seeded_and_pool_independent():
    a = metric_property_suite(seed=3, trials=4)
    b = metric_property_suite(seed=3, trials=4, pool=WorkerPool(3))
    assert a.per_trial == b.per_trial


def test_metric_suite_with_no_trials():
    report = metric_property_suite(seed=0, trials=0)
    assert report.passed
    assert report.per_trial == []
