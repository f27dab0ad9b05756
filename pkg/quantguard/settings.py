from pydantic import Field
from pydantic_settings import BaseSettings
from typing import Literal
from pathlib import Path

class Settings(BaseSettings):
    LOG_LEVEL: Literal['DEBUG','INFO','WARNING','ERROR','CRITICAL'] = 'INFO'
    LOGS_DIR: Path = Path("logs")
    DATA_DIR: Path = Path("data")
    RUNS_DIR: Path = Path("runs")
    MAX_WORKERS: int = Field(4, ge=1, le=64)
    CEGIS_MAX_ITERATIONS: int = Field(20, ge=1)
    VERIFIER_MAX_SUBPROBLEMS: int = Field(200_000, ge=1)
    DOWNLOAD_TIMEOUT: float = Field(30.0, gt=0)
    IRIS_URL: str = "https://archive.ics.uci.edu/ml/machine-learning-databases/iris/iris.data"
    SEEDS_URL: str = "https://archive.ics.uci.edu/ml/machine-learning-databases/00236/seeds_dataset.txt"

    class Config:
        env_file = '.env'
        extra = 'ignore'

def load_settings() -> 'Settings':
    return Settings()
