"""Configuration for simulator service."""

from pathlib import Path

from pydantic_settings import BaseSettings, SettingsConfigDict

SERVICE_ROOT = Path(__file__).resolve().parent.parent


class Settings(BaseSettings):
    """Ambient settings loaded from environment variables.

    Only logging and file locations are read from the environment; everything
    that changes simulation results lives in the experiment config file.
    """

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # Service metadata
    service_name: str = "simulator-service"
    version: str = "0.1.0"
    environment: str = "dev"

    # Data locations
    data_dir: Path = SERVICE_ROOT / "data"
    default_profiles_file: str = "profiles.yaml"
    default_output_dir: Path = Path("results")

    # Little's law: delay reported for a non-empty queue with zero arrivals
    stalled_queue_delay_seconds: float = 1e6

    # Logging
    log_level: str = "INFO"
    log_format: str = "text"  # "text" or "json"

    @property
    def default_profiles_path(self) -> Path:
        """Path of the checked-in cascade profile file."""
        return self.data_dir / self.default_profiles_file


settings = Settings()
