from typing import Optional
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Runtime settings loaded from environment variables."""

    model_config = SettingsConfigDict(env_file=".env", env_file_encoding="utf-8", extra="ignore")

    # Logging Configuration
    log_level: str = Field(default="INFO", alias="FUNKRIG_LOG_LEVEL")
    log_format: str = Field(default="text", alias="FUNKRIG_LOG_FORMAT")
    log_file: Optional[str] = Field(default=None, alias="FUNKRIG_LOG_FILE")

    # Numerical defaults
    default_nugget: float = Field(default=1e-8, alias="FUNKRIG_NUGGET")
    default_seed: int = Field(default=20240101, alias="FUNKRIG_SEED")

    # Optimizer restarts may be spread over worker threads
    workers: int = Field(default=1, alias="FUNKRIG_WORKERS")

    # Oracle size caps (dense O(N^3) paths)
    dense_fit_cap: int = Field(default=512, alias="FUNKRIG_DENSE_FIT_CAP")
    dense_conditional_cap: int = Field(default=256, alias="FUNKRIG_DENSE_CONDITIONAL_CAP")
    benchmark_dense_cap: int = Field(default=4096, alias="FUNKRIG_BENCHMARK_DENSE_CAP")


# Global settings instance
settings = Settings()
