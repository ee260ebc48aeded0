"""pydantic models for command config documents and the FS1 schedule document."""

import json
from pathlib import Path
from typing import Literal, Optional, Type, TypeVar

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .core_types import Domain, VectorFieldFamily, family_from_dict
from .errors import ConfigError

M = TypeVar("M", bound=BaseModel)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DomainModel(_Strict):
    lower: tuple[float, float]
    upper: tuple[float, float]

    @model_validator(mode="after")
    def _ordered(self):
        if not all(h > l for l, h in zip(self.lower, self.upper)):
            raise ValueError("upper corner must exceed lower corner componentwise")
        return self

    def to_domain(self) -> Domain:
        return Domain(self.lower, self.upper)


class FamilyConfig(_Strict):
    kind: Literal["coordinate", "rotated", "linear"] = "coordinate"
    theta: Optional[float] = None
    matrices: Optional[list[list[list[float]]]] = None

    @model_validator(mode="after")
    def _params(self):
        if self.kind == "rotated" and self.theta is None:
            raise ValueError("rotated family needs theta")
        if self.kind == "linear" and not self.matrices:
            raise ValueError("linear family needs matrices")
        return self

    def to_family(self) -> VectorFieldFamily:
        try:
            return family_from_dict(self.model_dump(exclude_none=True))
        except ValueError as e:
            raise ConfigError(f"family: {e}") from e


class RunSettings(_Strict):
    output_dir: str = "out"
    seed: int = 0
    threads: Optional[int] = Field(None, ge=1)
    # Prometheus textfile written after the command, when set
    metrics_path: Optional[str] = None


class OtConfig(RunSettings):
    mu: str
    nu: str
    eps: Optional[float] = Field(None, gt=0)
    max_iters: Optional[int] = Field(None, ge=1)
    # the exact LP also runs when both supports have at most this many cells
    exact_max_support: int = Field(256, ge=0, le=512)
    plan_threshold: float = Field(1e-12, ge=0)
    strict: bool = False


class SynthesizeConfig(RunSettings):
    mu: str
    nu: str
    method: Literal["brenier", "moser"] = "moser"
    family: FamilyConfig = FamilyConfig()
    fragments: Optional[int] = Field(None, ge=1)


class SimulateConfig(RunSettings):
    density: str
    schedule: str
    family: FamilyConfig = FamilyConfig()
    times: list[float] = Field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0], min_length=1)
    export_csv: bool = True

    @field_validator("times")
    @classmethod
    def _unit_times(cls, v):
        if any(not 0.0 <= t <= 1.0 for t in v):
            raise ValueError("frame times must lie in [0, 1]")
        return v


class SuiteConfig(_Strict):
    trials: int = Field(100, ge=0)
    shift: tuple[float, float] = (0.3, 0.0)


class VerifyConfig(RunSettings):
    mu: str
    nu: str
    # no schedule means the zero schedule
    schedule: Optional[str] = None
    family: FamilyConfig = FamilyConfig()
    tol_l1: float = Field(0.02, ge=0)
    # defaults to 0.02 * diam(domain)
    tol_w2: Optional[float] = Field(None, ge=0)
    suite: Optional[SuiteConfig] = None


class Profile1D(_Strict):
    kind: Literal["uniform", "normal", "values"] = "uniform"
    mean: float = 0.5
    std: float = Field(0.1, gt=0)
    values: Optional[list[float]] = None
    interval: tuple[float, float] = (0.0, 1.0)

    @model_validator(mode="after")
    def _values(self):
        if self.kind == "values" and not self.values:
            raise ValueError("profile kind 'values' needs values")
        if not self.interval[1] > self.interval[0]:
            raise ValueError("interval must be increasing")
        return self


class Oracle1dConfig(RunSettings):
    mu: Profile1D
    nu: Profile1D
    cells: int = Field(4096, ge=1)


class GenConfig(RunSettings):
    pair: Literal["bumps", "cosine", "translation"] = "bumps"
    resolution: tuple[int, int] = (64, 64)
    domain: Optional[DomainModel] = None
    amplitude: float = Field(0.1, ge=0, lt=1)
    mu_center: tuple[float, float] = (0.4, 0.45)
    mu_sigma: float = Field(0.12, gt=0)
    nu_center: tuple[float, float] = (0.6, 0.55)
    nu_sigma: float = Field(0.15, gt=0)
    floor: Optional[float] = Field(None, ge=0)
    shift: tuple[float, float] = (0.1, 0.0)
    center: tuple[float, float] = (0.4, 0.5)
    width: float = Field(0.2, gt=0)

    @field_validator("resolution")
    @classmethod
    def _positive(cls, v):
        if min(v) < 1:
            raise ValueError("resolution must be positive")
        return v


# ---------------------------------------------------------------------------
# FS1 schedule document


class PieceModel(_Strict):
    duration: float = Field(gt=0)
    active: int | Literal["all"]
    control: dict


class ScheduleDocument(_Strict):
    format: Literal["FS1"]
    domain: DomainModel
    m: int = Field(ge=1)
    pieces: list[PieceModel] = Field(min_length=1)
    fields: dict[str, dict] = Field(default_factory=dict)


# ---------------------------------------------------------------------------
# loading


def format_validation_error(e: ValidationError) -> str:
    return "; ".join(f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors())


def load_config(path, model: Type[M]) -> M:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config: {e.strerror}") from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    try:
        return model.model_validate(doc)
    except ValidationError as e:
        raise ConfigError(f"{path}: {format_validation_error(e)}") from e


def resolve_path(base: Path, p: str) -> Path:
    """Config paths are relative to the config file's directory."""
    q = Path(p)
    return q if q.is_absolute() else base / q
