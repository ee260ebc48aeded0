"""Command-line entry points: ot, synthesize, simulate, verify, oracle1d, gen.

Each command reads one JSON config document (see steering/schemas.py); --seed,
--threads and --output-dir override the matching config scalars. Relative paths
inside a config resolve against the config file's directory.

Exit codes: 0 success, 1 verification failed, 2 usage or config error,
3 numerical failure.
"""

import functools
import logging
import sys
import time
from contextlib import ExitStack
from dataclasses import dataclass, field
from pathlib import Path

import click
import numpy as np

from . import metrics
from .adapters import files
from .config import Config, config
from .core_types import Domain, SampledMap
from .density_transport import continuity_residual, simulate_series
from .errors import ConfigError, GridMismatchError, NumericalError
from .feedback_synthesis import synthesize_schedule
from .ot_solver import (
    barycentric_map,
    check_monotone,
    grid_points,
    plan_triplets,
    quantile_map_1d,
    solve_plan_exact,
    solve_plan_sinkhorn,
)
from .schedule import FeedbackSchedule
from .schemas import (
    GenConfig,
    Oracle1dConfig,
    OtConfig,
    Profile1D,
    RunSettings,
    SimulateConfig,
    SynthesizeConfig,
    VerifyConfig,
    load_config,
    resolve_path,
)
from .standard import BumpParams, cosine_pair, gaussian_bump_pair, translation_pair
from .verification import metric_property_suite, verify_steering
from .worker_pool import WorkerPool

log = logging.getLogger("steering.cli")

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


@dataclass
class _Run:
    """One command invocation: its files are staged and published together, and its pool is stopped on exit."""

    doc: RunSettings
    base: Path
    out: Path
    cfg: Config
    pool: WorkerPool
    started: float
    _stack: ExitStack = field(default_factory=ExitStack, repr=False)
    _stage: Path | None = None

    def __enter__(self) -> "_Run":
        self._stack.enter_context(self.pool)
        self._stage = self._stack.enter_context(files.staged_outputs(self.out))
        return self

    def __exit__(self, exc_type, exc, tb):
        suppress = self._stack.__exit__(exc_type, exc, tb)
        if exc_type is None and self.doc.metrics_path:
            metrics.write_metrics(self.path(self.doc.metrics_path))
        return suppress

    def path(self, p: str) -> Path:
        return resolve_path(self.base, p)

    def dest(self, name: str) -> Path:
        return self._stage / name

    def runtime(self) -> float | None:
        return None if self.cfg.DETERMINISTIC else time.perf_counter() - self.started


def _load_run(config_path, model, seed, threads, output_dir) -> _Run:
    started = time.perf_counter()
    config_path = Path(config_path)
    doc = load_config(config_path, model)
    overrides = {k: v for k, v in (("seed", seed), ("threads", threads), ("output_dir", output_dir)) if v is not None}
    if overrides:
        doc = doc.model_copy(update=overrides)
    base = config_path.parent
    out = Path(output_dir) if output_dir is not None else resolve_path(base, doc.output_dir)
    cfg = config.replace(THREADS=doc.threads or config.THREADS)
    log.info("command config loaded", extra={"config": str(config_path), "output_dir": str(out), "seed": doc.seed})
    return _Run(doc, base, out, cfg, WorkerPool(cfg.THREADS), started)


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            code = fn(*args, **kwargs)
        except ConfigError as e:
            log.error("config error", extra={"error": str(e)})
            click.echo(f"error: {e}", err=True)
            sys.exit(EXIT_CONFIG)
        except NumericalError as e:
            log.error("numerical failure", extra={"error": type(e).__name__, "detail": str(e)})
            click.echo(f"numerical failure: {type(e).__name__}: {e}", err=True)
            sys.exit(EXIT_NUMERICAL)
        sys.exit(code or EXIT_OK)
    return wrapper


def _run_options(fn):
    fn = click.option("--output-dir", type=click.Path(file_okay=False), default=None,
                      help="Overrides output_dir from the config.")(fn)
    fn = click.option("--threads", type=click.IntRange(min=1), default=None,
                      help="Worker threads (default STEERING_THREADS).")(fn)
    fn = click.option("--seed", type=int, default=None, help="Overrides the config seed.")(fn)
    fn = click.argument("config_path", type=click.Path(exists=True, dir_okay=False))(fn)
    return fn


def _map_rows(tmap: SampledMap):
    det = np.linalg.det(tmap.node_jacobians()).ravel()
    for p, q, d in zip(tmap.grid.points(), tmap.node_points(), det):
        yield float(p[0]), float(p[1]), float(q[0]), float(q[1]), float(d)


MAP_HEADER = ("x", "y", "Tx", "Ty", "detJ")


@click.group()
def cli():
    """Steer densities with feedback controls of driftless control-affine systems."""


@cli.command()
@_run_options
@_guarded
def ot(config_path, seed, threads, output_dir):
    """Sinkhorn plan (and exact LP on small supports), barycentric map and summary."""
    with _load_run(config_path, OtConfig, seed, threads, output_dir) as run:
        doc: OtConfig = run.doc
        mu = files.read_lvg1(run.path(doc.mu))
        nu = files.read_lvg1(run.path(doc.nu))
        plan = solve_plan_sinkhorn(mu, nu, doc.eps, doc.max_iters, run.cfg, strict=doc.strict)
        tmap = barycentric_map(plan)
        summary = {
            "sinkhorn": {**plan.summary(), "converged": plan.converged},
            "monotonicity": check_monotone(tmap, seed=doc.seed).to_dict(),
            "exact": None,
        }
        if max(mu.values.size, nu.values.size) <= doc.exact_max_support:
            summary["exact"] = solve_plan_exact(grid_points(mu), grid_points(nu)).summary()
        summary["runtimeSeconds"] = run.runtime()
        files.write_csv(run.dest("plan.csv"), ("i", "j", "gamma_ij"), plan_triplets(plan, doc.plan_threshold))
        files.write_csv(run.dest("map.csv"), MAP_HEADER, _map_rows(tmap))
        files.write_json(run.dest("summary.json"), summary)
    click.echo(files.dumps_json(summary), nl=False)


@cli.command()
@_run_options
@_guarded
def synthesize(config_path, seed, threads, output_dir):
    """Feedback schedule whose time-1 flow carries mu to nu."""
    with _load_run(config_path, SynthesizeConfig, seed, threads, output_dir) as run:
        doc: SynthesizeConfig = run.doc
        family = doc.family.to_family()
        mu = files.read_lvg1(run.path(doc.mu))
        nu = files.read_lvg1(run.path(doc.nu))
        result = synthesize_schedule(mu, nu, doc.method, family, doc.fragments, run.cfg, run.pool, doc.seed)
        report = result.report.to_dict()
        report["runtimeSeconds"] = run.runtime()
        files.write_schedule(run.dest("schedule.json"), result.schedule)
        files.write_json(run.dest("report.json"), report)
        if result.target is not None:
            files.write_csv(run.dest("target_map.csv"), MAP_HEADER, _map_rows(result.target))
    click.echo(files.dumps_json(report), nl=False)


def _check_family(schedule: FeedbackSchedule, family) -> None:
    if schedule.m != family.m:
        raise ConfigError(f"schedule has {schedule.m} controls but the family has {family.m} fields")


@cli.command()
@_run_options
@_guarded
def simulate(config_path, seed, threads, output_dir):
    """Density frames along a schedule, with a manifest and CSV exports."""
    with _load_run(config_path, SimulateConfig, seed, threads, output_dir) as run:
        doc: SimulateConfig = run.doc
        family = doc.family.to_family()
        rho0 = files.read_lvg1(run.path(doc.density))
        schedule = files.read_schedule(run.path(doc.schedule))
        _check_family(schedule, family)
        frames = simulate_series(rho0, schedule, family, doc.times, run.cfg, run.pool)
        try:
            residual = continuity_residual([f.density for f in frames], doc.times, schedule, family, run.cfg)
        except GridMismatchError:
            residual = None
        entries = []
        for k, (t, frame) in enumerate(zip(doc.times, frames)):
            name = f"frame_{k:03d}"
            files.write_lvg1(run.dest(f"{name}.lvg1"), frame.density)
            entry = {"index": k, "time": t, "file": f"{name}.lvg1", "massDrift": frame.mass_drift, "minDet": frame.min_det}
            if doc.export_csv:
                files.write_csv(run.dest(f"{name}.csv"), ("x", "y", "rho"), files.density_rows(frame.density))
                entry["csv"] = f"{name}.csv"
            entries.append(entry)
        manifest = {"frames": entries, "continuityResidual": residual, "runtimeSeconds": run.runtime()}
        files.write_json(run.dest("manifest.json"), manifest)
    click.echo(files.dumps_json(manifest), nl=False)


@cli.command()
@_run_options
@_guarded
def verify(config_path, seed, threads, output_dir):
    """Replay a schedule on mu and compare with nu; optionally run the W2 metric suite."""
    with _load_run(config_path, VerifyConfig, seed, threads, output_dir) as run:
        doc: VerifyConfig = run.doc
        family = doc.family.to_family()
        mu = files.read_lvg1(run.path(doc.mu))
        nu = files.read_lvg1(run.path(doc.nu))
        if doc.schedule is not None:
            schedule = files.read_schedule(run.path(doc.schedule))
            _check_family(schedule, family)
        else:
            schedule = FeedbackSchedule.zero(mu.domain, family.m)
        tol_w2 = doc.tol_w2 if doc.tol_w2 is not None else 0.02 * mu.domain.diam
        report = verify_steering(mu, nu, schedule, family, tol_w2, doc.tol_l1, run.cfg, run.pool)
        out = report.to_dict()
        passed = report.passed
        if doc.suite is not None:
            suite = metric_property_suite(doc.seed, doc.suite.trials, doc.suite.shift, run.pool)
            out["metricSuite"] = suite.to_dict()
            passed = passed and suite.passed
        out["passed"] = passed
        out["runtimeSeconds"] = run.runtime()
        files.write_json(run.dest("verification.json"), out)
    click.echo(files.dumps_json(out), nl=False)
    return EXIT_OK if passed else EXIT_VERIFY_FAILED


def _profile_values(p: Profile1D, cells: int) -> np.ndarray:
    if p.kind == "values":
        return np.asarray(p.values, dtype=float)
    if p.kind == "uniform":
        return np.ones(cells)
    edges = np.linspace(p.interval[0], p.interval[1], cells + 1)
    x = 0.5 * (edges[:-1] + edges[1:])
    return np.exp(-((x - p.mean) ** 2) / (2 * p.std ** 2))


@cli.command()
@_run_options
@_guarded
def oracle1d(config_path, seed, threads, output_dir):
    """Monotone quantile map and its cost between two 1D profiles."""
    with _load_run(config_path, Oracle1dConfig, seed, threads, output_dir) as run:
        doc: Oracle1dConfig = run.doc
        qmap = quantile_map_1d(_profile_values(doc.mu, doc.cells), _profile_values(doc.nu, doc.cells),
                               doc.mu.interval, doc.nu.interval)
        summary = {"cost": qmap.cost, "w2": float(np.sqrt(qmap.cost)), "cells": int(qmap.centers.size),
                   "runtimeSeconds": run.runtime()}
        files.write_csv(run.dest("oracle1d.csv"), ("x", "T"), zip(qmap.centers.tolist(), qmap.values.tolist()))
        files.write_json(run.dest("oracle1d.json"), summary)
    click.echo(files.dumps_json(summary), nl=False)


@cli.command()
@_run_options
@_guarded
def gen(config_path, seed, threads, output_dir):
    """Write a standard density pair as mu.lvg1 and nu.lvg1."""
    with _load_run(config_path, GenConfig, seed, threads, output_dir) as run:
        doc: GenConfig = run.doc
        domain = doc.domain.to_domain() if doc.domain is not None else Domain.unit()
        try:
            if doc.pair == "bumps":
                params = BumpParams(doc.mu_center, doc.mu_sigma, doc.nu_center, doc.nu_sigma,
                                    doc.floor if doc.floor is not None else BumpParams.floor)
                mu, nu = gaussian_bump_pair(doc.resolution, params, domain)
            elif doc.pair == "cosine":
                mu, nu = cosine_pair(doc.resolution, doc.amplitude, domain)
            else:
                mu, nu = translation_pair(doc.resolution, doc.shift, doc.center, doc.width,
                                          doc.floor if doc.floor is not None else 0.0, domain)
        except ValueError as e:
            raise ConfigError(f"{config_path}: {e}") from e
        files.write_lvg1(run.dest("mu.lvg1"), mu)
        files.write_lvg1(run.dest("nu.lvg1"), nu)
    click.echo(f"wrote {run.out / 'mu.lvg1'} and {run.out / 'nu.lvg1'}")
