from pathlib import Path
from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict

# Get the path to the .env file (at the repository root)
BASE_DIR = Path(__file__).resolve().parent.parent.parent
ENV_FILE = BASE_DIR / ".env"


class Settings(BaseSettings):
    """Process-level settings, read from PERFRANK_* environment variables or .env."""

    # Worker count for the policy grid; overrides --threads when set
    THREADS: Optional[int] = None

    LOG_LEVEL: str = "INFO"

    # Where runs land when neither --out nor the config names a directory
    OUTPUT_DIR: Path = Path("runs")

    model_config = SettingsConfigDict(
        env_prefix="PERFRANK_",
        env_file=str(ENV_FILE),
        case_sensitive=True,
        extra="ignore",
    )


def get_settings() -> Settings:
    """Read settings fresh so environment changes made after import are honoured."""
    return Settings()

