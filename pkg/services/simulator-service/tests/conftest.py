"""Pytest configuration and fixtures."""

import os
from pathlib import Path

import numpy as np
import pytest

# Set up environment variables for testing
os.environ.setdefault("ENVIRONMENT", "test")
os.environ.setdefault("LOG_LEVEL", "WARNING")

SERVICE_ROOT = Path(__file__).resolve().parent.parent
DATA_DIR = SERVICE_ROOT / "data"


@pytest.fixture(scope="session")
def profiles_path():
    """Checked-in profile file with Cascades 1-3."""
    return DATA_DIR / "profiles.yaml"


@pytest.fixture(scope="session")
def traces_dir():
    return DATA_DIR / "traces"


@pytest.fixture
def cascade1(profiles_path):
    """Cascade 1 profiles (SD-Turbo -> SDv1.5, SLO 5 s) with an empty curve."""
    from app.core.profiles import get_cascade, load_profiles

    return get_cascade(load_profiles(profiles_path), "cascade1")


@pytest.fixture
def linear_curve():
    """Deferral curve with f(t) = t on the 0.01 grid."""
    from app.core.profiles import DeferralCurve

    mass = np.ones(101)
    mass[100] = 0.0
    return DeferralCurve(resolution=100, bin_mass=mass, total_mass=100.0)


@pytest.fixture
def toy_cascade(linear_curve):
    """Light T(b)=10, heavy T(b)=1 at b=1, f(t)=t, loose SLO."""
    from app.core.profiles import CascadeProfile, ModelProfile

    return CascadeProfile(
        name="toy",
        light=ModelProfile("toy-light", {1: 0.1}),
        heavy=ModelProfile("toy-heavy", {1: 1.0}),
        deferral=linear_curve,
        slo_seconds=100.0,
    )


@pytest.fixture
def write_trace(tmp_path):
    """Factory writing a trace file (one rate per line) under tmp_path."""

    def _write(rates, name="trace.txt"):
        path = tmp_path / name
        path.write_text("".join(f"{r}\n" for r in rates), encoding="utf-8")
        return path

    return _write


@pytest.fixture
def make_config(tmp_path, write_trace, profiles_path):
    """Factory for ExperimentConfig objects backed by a temporary trace."""
    from app.models import ExperimentConfig

    def _make(rates=(8.0,) * 60, **overrides):
        fields = {
            "name": "test",
            "cascade": "cascade1",
            "profiles_path": profiles_path,
            "trace_path": write_trace(list(rates)),
            "output_dir": tmp_path / "out",
        }
        fields.update(overrides)
        return ExperimentConfig(**fields)

    return _make
