"""Pydantic models and shared enums for the simulator service."""

from enum import Enum
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .config import settings


class SimulatorError(Exception):
    """Base class for every error the simulator reports to the CLI."""

    module: str = "simulator"

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class ConfigError(SimulatorError):
    """Invalid or missing experiment configuration."""

    module = "cli"


class PolicyKind(str, Enum):
    """Serving systems and ablations that can drive a run."""

    DIFFSERVE = "diffserve"
    DIFFSERVE_STATIC = "diffserve_static"
    CLIPPER_LIGHT = "clipper_light"
    CLIPPER_HEAVY = "clipper_heavy"
    PROTEUS_LIKE = "proteus_like"
    ABL_STATIC_THRESHOLD = "abl_static_threshold"
    ABL_AIMD_BATCHING = "abl_aimd_batching"
    ABL_NO_QUEUING_MODEL = "abl_no_queuing_model"


class ModelRole(str, Enum):
    """Cascade stage a worker hosts."""

    LIGHT = "light"
    HEAVY = "heavy"


class ArrivalMode(str, Enum):
    """Intra-interval arrival process."""

    POISSON = "poisson"
    UNIFORM = "uniform"


class QueueModel(str, Enum):
    """How the allocator estimates queuing delay in the latency constraint."""

    LITTLES_LAW = "littles_law"
    TWICE_EXEC = "twice_exec"


class BatchBilling(str, Enum):
    """Which batch size a partial batch is billed at."""

    CONFIGURED = "configured"
    FORMED = "formed"


class Outcome(str, Enum):
    """Terminal outcome of a query."""

    SERVED_LIGHT = "served_light"
    SERVED_HEAVY = "served_heavy"
    DROPPED = "dropped"
    LATE = "late"


class QueryOutcomeModel(BaseModel):
    """Synthetic stand-in for the discriminator and per-query image quality.

    A query is "easy" when the light model's output is at least as good as the
    heavy model's (quality gap >= 0).
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    easy_fraction: float = Field(0.3, ge=0.0, le=1.0)
    quality_gap_scale: float = Field(1.0, gt=0.0)
    confidence_fidelity: float = Field(1.5, ge=0.0)
    noise_sigma: float = Field(0.15, ge=0.0)
    base_quality: float = 1.0
    base_quality_sigma: float = Field(0.1, ge=0.0)
    seed: int = Field(0, ge=0)


class PolicyParams(BaseModel):
    """Kind-specific policy parameters."""

    model_config = ConfigDict(extra="forbid")

    # Static-threshold ablation; None pins the threshold solved at peak demand
    fixed_threshold: float | None = Field(None, ge=0.0, le=1.0)
    # AIMD batching ablation
    aimd_add_step: int = Field(1, ge=1)
    aimd_mult_factor: float = Field(0.5, gt=0.0, lt=1.0)
    # ProteusLike: share of queries sent to the heavy variant when both are hosted
    random_split: float = Field(0.5, gt=0.0, lt=1.0)


class ExperimentConfig(BaseModel):
    """One simulation run, as read from an experiment YAML file."""

    model_config = ConfigDict(extra="forbid")

    name: str = "experiment"
    cascade: str = "cascade1"
    profiles_path: Path = Field(default_factory=lambda: settings.default_profiles_path)

    trace_path: Path
    trace_interval_seconds: float = Field(1.0, gt=0.0)
    trace_min_qps: float | None = Field(None, ge=0.0)
    trace_max_qps: float | None = Field(None, ge=0.0)
    arrival_mode: ArrivalMode = ArrivalMode.POISSON

    policy: PolicyKind = PolicyKind.DIFFSERVE
    policy_params: PolicyParams = Field(default_factory=PolicyParams)

    servers: int = Field(16, ge=1)
    seed: int = Field(0, ge=0)
    control_interval_seconds: float = Field(10.0, gt=0.0)
    overprovision_lambda: float = Field(1.05, ge=1.0)
    ewma_alpha: float = Field(0.3, gt=0.0, le=1.0)
    threshold_step: float = Field(0.01, gt=0.0, le=1.0)
    deferral_decay: float = Field(0.999, gt=0.0, le=1.0)
    replan_tolerance: float = Field(0.05, ge=0.0)
    switch_delay_seconds: float = Field(0.0, ge=0.0)
    batch_billing: BatchBilling = BatchBilling.FORMED

    outcome_model: QueryOutcomeModel = Field(default_factory=QueryOutcomeModel)

    output_dir: Path = Field(default_factory=lambda: settings.default_output_dir)
    record_solver_time: bool = False
    write_plots: bool = False

    @model_validator(mode="after")
    def _check_scaling_targets(self) -> "ExperimentConfig":
        if (self.trace_min_qps is None) != (self.trace_max_qps is None):
            raise ValueError("trace_min_qps and trace_max_qps must be set together")
        if self.trace_min_qps is not None and self.trace_max_qps is not None:
            if self.trace_min_qps > self.trace_max_qps:
                raise ValueError("trace_min_qps must not exceed trace_max_qps")
        return self

    def check_paths(self) -> None:
        """Raise ConfigError if a referenced file does not exist."""
        if not self.profiles_path.is_file():
            raise ConfigError(f"Profile file not found: {self.profiles_path}", field="profiles_path")
        if not self.trace_path.is_file():
            raise ConfigError(f"Trace file not found: {self.trace_path}", field="trace_path")


class RunSummary(BaseModel):
    """End-of-run totals, written as summary.json and one sweep.csv row."""

    name: str
    policy: PolicyKind
    cascade: str
    seed: int
    servers: int
    overprovision_lambda: float
    arrived: int = 0
    served_light: int = 0
    served_heavy: int = 0
    dropped: int = 0
    late: int = 0
    forced_light: int = 0
    deferred: int = 0
    light_batches: int = 0
    heavy_batches: int = 0
    violation_ratio: float | None = None
    mean_quality: float | None = None
    control_ticks: int = 0
    mean_solver_us: float = 0.0
    max_solver_us: float = 0.0
    wall_time_seconds: float = 0.0
    output_dir: str = ""
