"""Model execution profiles and the cascade's deferral curve.

Everything the allocator knows about the models comes from here:
- e(b): profiled execution latency of one batch of size b
- T(b) = b / e(b): throughput of a single worker
- f(t): fraction of queries whose discriminator confidence falls below t

Batch sizes are a discrete profiled set. There is no interpolation between
profiled points.
"""

import logging
import math
from collections.abc import Iterable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from ..models import SimulatorError

logger = logging.getLogger(__name__)

# Bins over [0, 1] at 0.01 granularity; the last bin holds confidence == 1.0
DEFAULT_CURVE_RESOLUTION = 100

# Absorbs representation error such as 0.29 * 100 == 28.999999999999996
_INDEX_EPS = 1e-9


class ProfileError(SimulatorError):
    """Base class for profile errors."""

    module = "profiles"


class ProfileLookupError(ProfileError):
    """Batch size is not in a model's profiled set."""


class ProfileFormatError(ProfileError):
    """Profile file could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        location = f" (line {line})" if line is not None else ""
        super().__init__(f"{message}{location}")
        self.line = line


class ProfileInvariantError(ProfileError):
    """A loaded profile violates a type invariant."""

    def __init__(self, invariant: str, detail: str):
        super().__init__(f"invariant '{invariant}' violated: {detail}")
        self.invariant = invariant


class DomainError(ProfileError):
    """Confidence or threshold outside [0, 1]."""


@dataclass(frozen=True)
class ModelProfile:
    """Per-batch-size execution latency table for one model variant."""

    name: str
    latency_table: dict[int, float]

    @property
    def batch_sizes(self) -> tuple[int, ...]:
        """Profiled batch sizes, ascending."""
        return tuple(sorted(self.latency_table))

    @property
    def max_batch_size(self) -> int:
        return max(self.latency_table)

    def exec_latency(self, b: int) -> float:
        """
        Profiled execution latency for a batch of size b.

        Raises:
            ProfileLookupError: If b was not profiled
        """
        try:
            return self.latency_table[b]
        except KeyError:
            raise ProfileLookupError(
                f"Model {self.name} has no profiled latency for batch size {b} "
                f"(profiled: {list(self.batch_sizes)})"
            ) from None

    def throughput(self, b: int) -> float:
        """Queries per second a single worker sustains at batch size b."""
        return b / self.exec_latency(b)

    def validate(self) -> None:
        """Check the latency-table invariants."""
        if not self.latency_table:
            raise ProfileInvariantError("latency_table non-empty", f"model {self.name} has no entries")

        for b, e in self.latency_table.items():
            if b < 1:
                raise ProfileInvariantError("batch sizes positive", f"model {self.name} has batch size {b}")
            if not e > 0:
                raise ProfileInvariantError("latencies positive", f"model {self.name} e({b})={e}")

        sizes = self.batch_sizes
        for smaller, larger in zip(sizes, sizes[1:]):
            if self.latency_table[smaller] > self.latency_table[larger]:
                raise ProfileInvariantError(
                    "latency non-decreasing in batch size",
                    f"model {self.name}: e({larger})={self.latency_table[larger]} "
                    f"< e({smaller})={self.latency_table[smaller]}",
                )
            if self.throughput(smaller) > self.throughput(larger):
                raise ProfileInvariantError(
                    "throughput non-decreasing in batch size",
                    f"model {self.name}: T({larger}) < T({smaller})",
                )


@dataclass
class DeferralCurve:
    """
    Binned empirical distribution of discriminator confidence scores.

    Bin j (j < resolution) covers [j/resolution, (j+1)/resolution); the last
    bin holds confidence exactly 1.0. f(t) is exact for thresholds on the
    1/resolution grid and rounds down to the grid elsewhere.

    Single writer: the cluster observes confidences while the controller reads
    copies.
    """

    resolution: int = DEFAULT_CURVE_RESOLUTION
    bin_mass: np.ndarray = field(default=None)  # type: ignore[assignment]
    total_mass: float = 0.0

    def __post_init__(self) -> None:
        if self.bin_mass is None:
            self.bin_mass = np.zeros(self.resolution + 1, dtype=np.float64)
        else:
            self.bin_mass = np.asarray(self.bin_mass, dtype=np.float64)
            if len(self.bin_mass) != self.resolution + 1:
                raise ProfileInvariantError(
                    "bin count matches resolution",
                    f"{len(self.bin_mass)} bins for resolution {self.resolution}",
                )

    @classmethod
    def from_samples(cls, samples: Iterable[float], resolution: int = DEFAULT_CURVE_RESOLUTION) -> "DeferralCurve":
        """Build a curve holding one unit of mass per sample."""
        curve = cls(resolution=resolution)
        for c in samples:
            curve.observe_confidence(c, decay=1.0)
        return curve

    @property
    def bin_edges(self) -> np.ndarray:
        """Lower edge of every bin, ascending in [0, 1]."""
        return np.arange(self.resolution + 1, dtype=np.float64) / self.resolution

    @property
    def is_empty(self) -> bool:
        return self.total_mass <= 0.0

    def _bin_index(self, value: float) -> int:
        return min(int(math.floor(value * self.resolution + _INDEX_EPS)), self.resolution)

    def _cumulative_mass(self) -> np.ndarray:
        """Entry k is the mass of bins [0, k)."""
        return np.concatenate(([0.0], np.cumsum(self.bin_mass)))

    def deferral_fraction(self, t: float) -> float:
        """
        Fraction of queries with confidence strictly below t.

        A query with confidence exactly t is not deferred. An empty curve
        defers nothing.

        Raises:
            DomainError: If t is outside [0, 1]
        """
        if not 0.0 <= t <= 1.0:
            raise DomainError(f"Threshold {t} outside [0, 1]")
        if self.is_empty:
            return 0.0
        k = self._bin_index(t)
        return float(min(1.0, self._cumulative_mass()[k] / self.total_mass))

    def fractions_on_grid(self, grid: Iterable[float]) -> np.ndarray:
        """Vectorized deferral_fraction over a threshold grid."""
        thresholds = np.asarray(list(grid), dtype=np.float64)
        if self.is_empty:
            return np.zeros_like(thresholds)
        if thresholds.size and (thresholds.min() < 0.0 or thresholds.max() > 1.0):
            raise DomainError("Threshold grid must lie in [0, 1]")
        cumulative = self._cumulative_mass()
        indices = np.minimum(np.floor(thresholds * self.resolution + _INDEX_EPS).astype(np.int64), self.resolution)
        return np.minimum(1.0, cumulative[indices] / self.total_mass)

    def observe_confidence(self, c: float, decay: float = 0.999) -> "DeferralCurve":
        """
        Fold one observed confidence into the curve.

        All existing mass decays by `decay`, then one unit lands in c's bin.

        Raises:
            DomainError: If c is outside [0, 1] or decay outside (0, 1]
        """
        if not 0.0 <= c <= 1.0:
            raise DomainError(f"Confidence {c} outside [0, 1]")
        if not 0.0 < decay <= 1.0:
            raise DomainError(f"Decay {decay} outside (0, 1]")

        if decay != 1.0:
            self.bin_mass *= decay
            self.total_mass *= decay
        self.bin_mass[self._bin_index(c)] += 1.0
        self.total_mass += 1.0
        return self

    def copy(self) -> "DeferralCurve":
        """Independent snapshot safe to hand to the allocator."""
        return DeferralCurve(resolution=self.resolution, bin_mass=self.bin_mass.copy(), total_mass=self.total_mass)

    def validate(self) -> None:
        """Check mass bookkeeping and the f(0) / f(1) bounds."""
        if np.any(self.bin_mass < 0):
            raise ProfileInvariantError("bin mass non-negative", "negative bin mass")
        mass = float(self.bin_mass.sum())
        if not math.isclose(mass, self.total_mass, rel_tol=1e-9, abs_tol=1e-12):
            raise ProfileInvariantError("bin mass sums to total_mass", f"{mass} != {self.total_mass}")
        if self.deferral_fraction(0.0) != 0.0:
            raise ProfileInvariantError("f(0) = 0", f"f(0)={self.deferral_fraction(0.0)}")


@dataclass
class CascadeProfile:
    """A light/heavy model pair with its deferral curve and SLO deadline."""

    name: str
    light: ModelProfile
    heavy: ModelProfile
    deferral: DeferralCurve
    slo_seconds: float

    def validate(self) -> None:
        """Check per-model invariants and the pairing invariants."""
        self.light.validate()
        self.heavy.validate()
        self.deferral.validate()

        shared = sorted(set(self.light.latency_table) & set(self.heavy.latency_table))
        if shared:
            b = shared[0]
            if not self.light.exec_latency(b) < self.heavy.exec_latency(b):
                raise ProfileInvariantError(
                    "light faster than heavy",
                    f"cascade {self.name}: e_light({b})={self.light.exec_latency(b)} "
                    f">= e_heavy({b})={self.heavy.exec_latency(b)}",
                )

        fastest = self.light.exec_latency(self.light.batch_sizes[0]) + self.heavy.exec_latency(
            self.heavy.batch_sizes[0]
        )
        if not self.slo_seconds > fastest:
            raise ProfileInvariantError(
                "SLO attainable",
                f"cascade {self.name}: slo {self.slo_seconds}s <= fastest cascade latency {fastest}s",
            )


# ---------------------------------------------------------------------------
# Profile file
# ---------------------------------------------------------------------------


class _ModelBlock(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    latency: dict[int, float] = Field(min_length=1)


class _DeferralBlock(BaseModel):
    model_config = ConfigDict(extra="forbid")

    samples: list[float] = Field(default_factory=list)


class _CascadeBlock(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    slo_seconds: float = Field(gt=0.0)
    light: _ModelBlock
    heavy: _ModelBlock
    deferral: _DeferralBlock | None = None


def _block_lines(text: str) -> list[int]:
    """1-based start line of every entry under the top-level `cascades` key."""
    root = yaml.compose(text)
    if not isinstance(root, yaml.MappingNode):
        return []
    for key_node, value_node in root.value:
        if key_node.value == "cascades" and isinstance(value_node, yaml.SequenceNode):
            return [item.start_mark.line + 1 for item in value_node.value]
    return []


def load_profiles(path: Path | str) -> list[CascadeProfile]:
    """
    Load and validate cascade profiles from a YAML profile file.

    Args:
        path: Profile file path

    Returns:
        Validated CascadeProfile list, in file order

    Raises:
        ProfileFormatError: File missing, unparseable, or with unknown keys
        ProfileInvariantError: A profile violates a type invariant
    """
    path = Path(path)
    if not path.is_file():
        raise ProfileFormatError(f"Profile file not found: {path}")

    text = path.read_text(encoding="utf-8")
    try:
        raw = yaml.safe_load(text)
        lines = _block_lines(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ProfileFormatError(f"Cannot parse {path}: {e}", line=mark.line + 1 if mark else None) from e

    if not isinstance(raw, dict) or set(raw) != {"cascades"} or not isinstance(raw["cascades"], list):
        raise ProfileFormatError(f"{path}: expected a single top-level 'cascades' list", line=1)

    profiles: list[CascadeProfile] = []
    for index, entry in enumerate(raw["cascades"]):
        line = lines[index] if index < len(lines) else None
        try:
            block = _CascadeBlock.model_validate(entry)
        except ValidationError as e:
            raise ProfileFormatError(f"{path}: invalid cascade block #{index + 1}: {e}", line=line) from e

        samples = block.deferral.samples if block.deferral else []
        try:
            deferral = DeferralCurve.from_samples(samples)
        except DomainError as e:
            raise ProfileFormatError(f"{path}: {e}", line=line) from e

        profile = CascadeProfile(
            name=block.name,
            light=ModelProfile(block.light.name, dict(block.light.latency)),
            heavy=ModelProfile(block.heavy.name, dict(block.heavy.latency)),
            deferral=deferral,
            slo_seconds=block.slo_seconds,
        )
        profile.validate()
        profiles.append(profile)

    logger.info(f"Loaded {len(profiles)} cascade profiles from {path}")
    return profiles


def get_cascade(profiles: list[CascadeProfile], name: str) -> CascadeProfile:
    """Select a cascade by name."""
    for profile in profiles:
        if profile.name == name:
            return profile
    raise ProfileLookupError(f"Cascade {name!r} not found (available: {[p.name for p in profiles]})")
