"""File adapter for every artifact the pipeline reads or writes.

Features:
- LVG1 grid densities: header `LVG1 nx ny x0 y0 x1 y1`, then nx*ny values, y-major,
  written with 17 significant digits; read errors name the offending line.
- FS1 schedule documents (JSON), validated against the pydantic document model.
- CSV and JSON exports. JSON uses sorted keys and fixed separators so reruns diff clean.
- Every write goes to a temp file in the destination directory and is renamed into place.
- `staged_outputs` collects a command's whole output set and publishes it only on success.
"""

import csv
import io
import json
import logging
import math
import os
import shutil
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

import numpy as np
from pydantic import ValidationError

from ..core_types import Domain, GridDensity
from ..errors import ConfigError, DensityFileError
from ..schedule import FeedbackSchedule, schedule_from_dict, schedule_to_dict
from ..schemas import ScheduleDocument, format_validation_error

logger = logging.getLogger("steering.adapters.files")

MAGIC = "LVG1"


def atomic_write(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=str(path.parent))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise
    logger.debug("wrote file", extra={"path": str(path), "bytes": len(text)})
    return path


@contextmanager
def staged_outputs(out) -> Iterator[Path]:
    """Hidden staging directory inside `out`; its files move into `out` when the block exits cleanly.

    On an exception the staging directory is removed and `out` keeps no file from the block.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".staging-", dir=str(out)))
    try:
        yield stage
        published = sorted(p for p in stage.iterdir() if p.is_file())
        for src in published:
            os.replace(src, out / src.name)
        logger.debug("published outputs", extra={"dir": str(out), "files": [p.name for p in published]})
    finally:
        shutil.rmtree(stage, ignore_errors=True)


# ---------------------------------------------------------------------------
# LVG1


def format_lvg1(d: GridDensity) -> str:
    nx, ny = d.resolution
    (x0, y0), (x1, y1) = d.domain.lower, d.domain.upper
    lines = [f"{MAGIC} {nx} {ny} {x0!r} {y0!r} {x1!r} {y1!r}"]
    for row in d.values:
        lines.append(" ".join(f"{v:.16e}" for v in row))
    return "\n".join(lines) + "\n"


def write_lvg1(path, d: GridDensity) -> Path:
    return atomic_write(path, format_lvg1(d))


def parse_lvg1(text: str, path="<string>") -> GridDensity:
    lines = text.splitlines()
    if not lines:
        raise DensityFileError(path, 1, "empty file")
    header = lines[0].split()
    if not header or header[0] != MAGIC:
        raise DensityFileError(path, 1, f"expected {MAGIC} header, got {lines[0][:40]!r}")
    if len(header) != 7:
        raise DensityFileError(path, 1, "header must read: LVG1 nx ny x0 y0 x1 y1")
    try:
        nx, ny = int(header[1]), int(header[2])
        corners = [float(v) for v in header[3:]]
    except ValueError as e:
        raise DensityFileError(path, 1, f"bad header field: {e}") from e
    if nx < 1 or ny < 1:
        raise DensityFileError(path, 1, f"resolution must be positive, got {nx} x {ny}")
    if not all(math.isfinite(c) for c in corners):
        raise DensityFileError(path, 1, "domain corners must be finite")
    try:
        domain = Domain((corners[0], corners[1]), (corners[2], corners[3]))
    except ValueError as e:
        raise DensityFileError(path, 1, str(e)) from e
    values: list[float] = []
    expected = nx * ny
    last_line = 1
    for lineno, line in enumerate(lines[1:], start=2):
        for tok in line.split():
            if len(values) == expected:
                raise DensityFileError(path, lineno, f"more than nx*ny = {expected} values")
            try:
                values.append(float(tok))
            except ValueError:
                raise DensityFileError(path, lineno, f"not a number: {tok!r}") from None
            last_line = lineno
    if len(values) != expected:
        raise DensityFileError(path, last_line, f"expected {expected} values, found {len(values)}")
    return GridDensity(domain, np.array(values).reshape(ny, nx))


def read_lvg1(path) -> GridDensity:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DensityFileError(path, 0, f"cannot read: {e.strerror}") from e
    return parse_lvg1(text, path)


# ---------------------------------------------------------------------------
# JSON / CSV


def dumps_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, separators=(",", ": "), allow_nan=True) + "\n"


def write_json(path, obj: Any) -> Path:
    return atomic_write(path, dumps_json(obj))


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return atomic_write(path, buf.getvalue())


def density_rows(d: GridDensity):
    """Rows x, y, rho at the cell centers."""
    X, Y = np.meshgrid(d.centers.xs, d.centers.ys)
    for x, y, r in zip(X.ravel(), Y.ravel(), d.values.ravel()):
        yield float(x), float(y), float(r)


# ---------------------------------------------------------------------------
# FS1 schedules


def write_schedule(path, schedule: FeedbackSchedule) -> Path:
    return write_json(path, schedule_to_dict(schedule))


def read_schedule(path) -> FeedbackSchedule:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"{path}: cannot read: {e.strerror}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    try:
        ScheduleDocument.model_validate(doc)
    except ValidationError as e:
        raise ConfigError(f"{path}: {format_validation_error(e)}") from e
    try:
        return schedule_from_dict(doc)
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"{path}: malformed schedule: {e}") from e
