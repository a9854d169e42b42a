"""
Run settings for every command-line subcommand.

Each subcommand has one pydantic model. Values come from an optional JSON
file (``--config``); command-line flags that were actually given override
them. Unknown keys are rejected.
"""

import json
import logging
import os
from pathlib import Path
from typing import Dict, List, Optional, Type, TypeVar

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.services.acw_service import AcwTrainConfig
from src.services.datagen_service import CameraGridConfig, GenConfig
from src.services.errors import ConfigError
from src.services.eval_service import ToyConfig

load_dotenv()

THREADS_ENV = "DEPTHFORGE_THREADS"

S = TypeVar("S", bound=BaseModel)


class ToyModelSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(..., ge=0)
    v_rings: int = Field(32, ge=4)
    k_id: int = Field(20, ge=0)
    k_exp: int = Field(10, ge=0)
    out: str = "toy_model.mdl"


class CameraSettings(CameraGridConfig):
    model_config = ConfigDict(extra="forbid")


class GenerateSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model: str
    out_dir: str
    seed: int = Field(..., ge=0)
    n_identities: int = Field(10, ge=0)
    n_random_expressions: int = Field(40, ge=0)
    trunc: float = Field(3.0, gt=0)
    cameras: CameraSettings = Field(default_factory=CameraSettings)
    threads: Optional[int] = Field(None, ge=1)
    progress: bool = False

    def gen_config(self) -> GenConfig:
        return GenConfig(
            n_identities=self.n_identities,
            n_random_expressions=self.n_random_expressions,
            cameras=CameraGridConfig(**self.cameras.model_dump()),
            seed=self.seed,
            out_dir=self.out_dir,
            trunc=self.trunc,
        )


class VerifySettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dataset: str
    sample: Optional[int] = Field(None, gt=0)
    seed: int = Field(0, ge=0)
    against: Optional[str] = None


class ToyDataSettings(ToyConfig):
    model_config = ConfigDict(extra="forbid")

    out_dir: str


class TrainSettings(AcwTrainConfig):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    embeddings: Dict[str, str]
    gallery: Dict[str, str]
    out_dir: str
    seed: int = Field(..., ge=0)

    def train_config(self) -> AcwTrainConfig:
        return AcwTrainConfig(**{name: getattr(self, name) for name in AcwTrainConfig.model_fields})


class EvaluateSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    gallery: Dict[str, str]
    probes: Dict[str, str]
    heads: Dict[str, str] = Field(default_factory=dict)
    mode: str = "acw"
    weights: Optional[List[float]] = None
    tags: Optional[str] = None
    out_dir: str


class AblationSettings(ToyConfig):
    model_config = ConfigDict(extra="forbid")

    train: AcwTrainConfig = Field(default_factory=AcwTrainConfig)
    out_dir: str

    def toy_config(self) -> ToyConfig:
        return ToyConfig(**{name: getattr(self, name) for name in ToyConfig.model_fields})


def _describe(error: ValidationError) -> str:
    for item in error.errors():
        loc = ".".join(str(part) for part in item["loc"])
        if item["type"] == "extra_forbidden":
            return f"unknown config key '{loc}'"
        if item["type"] == "missing":
            return f"{loc} is required"
    item = error.errors()[0]
    loc = ".".join(str(part) for part in item["loc"])
    return f"{loc}: {item['msg']}"


def read_config_file(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def load_settings(model: Type[S], config_path: Optional[str] = None, overrides: Optional[dict] = None) -> S:
    """Merges the JSON config with the flags that were given; flags win."""
    values = read_config_file(config_path)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(values.get(key), dict):
            values[key] = {**values[key], **value}
        else:
            values[key] = value
    try:
        settings = model.model_validate(values)
    except ValidationError as e:
        raise ConfigError(_describe(e)) from e
    logging.debug(f"Settings for {model.__name__}: {settings.model_dump()}")
    return settings


def resolve_threads(flag: Optional[int]) -> int:
    if flag is not None:
        return flag
    env = os.getenv(THREADS_ENV)
    if env is None or env.strip() == "":
        return 1
    try:
        threads = int(env)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}")
    if threads < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {threads}")
    return threads


def parse_modality_paths(pairs: Optional[List[str]]) -> Optional[Dict[str, str]]:
    """["rgb=a.emb", "depth=b.emb"] -> {"rgb": "a.emb", "depth": "b.emb"}."""
    if not pairs:
        return None
    parsed: dict[str, str] = {}
    for pair in pairs:
        modality, sep, path = pair.partition("=")
        if not sep or not modality or not path:
            raise ConfigError(f"expected MODALITY=PATH, got {pair!r}")
        parsed[modality] = path
    return parsed
