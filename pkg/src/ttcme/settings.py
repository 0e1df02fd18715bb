import os

from functools import lru_cache

from dotenv import load_dotenv
from pydantic import Field

from ttcme.base_model import BaseModel


class Settings(BaseModel):
    """Process-wide defaults read from the environment.

    Attributes:
        output_dir (str): Default directory for CSV artifacts (``TTCME_OUTPUT_DIR``)
        dense_cap (int): Largest number of entries any densification may
            materialize (``TTCME_DENSE_CAP``)
        oracle_cap (int): Largest state space the reference solvers accept
            (``TTCME_ORACLE_CAP``)
        log_level (str): Level of the package loggers (``TTCME_LOG_LEVEL``)
    """

    output_dir: str = "out"
    dense_cap: int = Field(default=2**22, ge=1)
    oracle_cap: int = Field(default=2_000_000, ge=1)
    log_level: str = "INFO"


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    """Load settings once per process; call ``get_settings.cache_clear()`` to reload."""
    load_dotenv()
    return Settings(
        output_dir=os.getenv("TTCME_OUTPUT_DIR", "out"),
        dense_cap=int(float(os.getenv("TTCME_DENSE_CAP", 2**22))),
        oracle_cap=int(float(os.getenv("TTCME_ORACLE_CAP", 2_000_000))),
        log_level=os.getenv("TTCME_LOG_LEVEL", "INFO").upper(),
    )
