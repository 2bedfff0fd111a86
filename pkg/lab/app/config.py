import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from pydantic_settings import BaseSettings

from common.hashing import config_hash

logger = logging.getLogger(__name__)

SIZE_BANDS = ("small", "medium", "large", "huge")


class Settings(BaseSettings):
    # Application
    APP_NAME: str = "DMT Lab"
    LOG_LEVEL: str = "INFO"
    OUT_DIR: str = "runs"

    # Run ledger
    DB_URL: str = "sqlite:///./dmt_lab.db"

    # Concurrency cap for ablation runs
    DMT_LAB_THREADS: int = 1

    class Config:
        env_file = ".env"
        case_sensitive = False


settings = Settings()


class ConfigError(Exception):
    """Invalid experiment configuration; ``keys`` names the offending fields"""

    def __init__(self, message: str, keys: Optional[List[str]] = None):
        self.keys = keys or []
        super().__init__(message)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class WorldConfig(_Section):
    """Synthetic audio-visual world"""

    canvas: int = Field(32, ge=4)
    channels: int = Field(3, ge=1)
    audio_dim: int = Field(16, ge=2)
    num_classes: int = Field(8, ge=2)
    map_size: int = Field(16, ge=2)
    min_objects: int = Field(1, ge=1)
    max_objects: int = Field(2, ge=1)
    size_mix: Dict[str, float] = Field(
        default_factory=lambda: {"small": 0.15, "medium": 0.4, "large": 0.3, "huge": 0.15}
    )
    audio_noise: float = Field(0.3, ge=0.0)
    fp_rate: float = Field(0.2, ge=0.0, le=1.0)
    labeled_fp_rate: float = Field(0.0, ge=0.0, le=1.0)
    val_fp_rate: float = Field(0.0, ge=0.0, le=1.0)
    test_fp_rate: float = Field(0.0, ge=0.0, le=1.0)
    labeled_pool_size: int = Field(4000, ge=1)
    labeled_ratio: float = Field(0.1, gt=0.0, le=1.0)
    unlabeled_size: int = Field(4000, ge=0)
    val_size: int = Field(500, ge=1)
    test_size: int = Field(500, ge=1)
    instrumented_size: int = Field(500, ge=0)
    universe_size: int = Field(20000, ge=1)

    @field_validator("size_mix")
    @classmethod
    def _check_mix(cls, mix: Dict[str, float]) -> Dict[str, float]:
        unknown = set(mix) - set(SIZE_BANDS)
        if unknown:
            raise ValueError(f"unknown size bands {sorted(unknown)}")
        if any(w < 0 for w in mix.values()) or sum(mix.values()) <= 0:
            raise ValueError("size band weights must be non-negative with a positive sum")
        return mix

    @property
    def labeled_size(self) -> int:
        return int(round(self.labeled_ratio * self.labeled_pool_size))

    @property
    def cell(self) -> int:
        """Canvas pixels per map cell along one axis"""
        return self.canvas // self.map_size


class DmtConfig(_Section):
    """Training hyperparameters"""

    delta: float = Field(0.6, gt=-1.0, lt=1.0)
    tau: float = Field(0.7, ge=0.0, le=1.0)
    beta: float = Field(0.999, ge=0.0, le=1.0)
    lambda_u: float = Field(1.0, ge=0.0)
    temperature: float = Field(0.07, ge=1e-3)
    lr: float = Field(1e-3, gt=0.0)
    warmup_epochs: int = Field(6, ge=0)
    epochs: int = Field(20, ge=0)
    batch_size: int = Field(32, ge=2)
    embed_dim: int = Field(16, ge=2)
    logit_scale: float = Field(0.25, gt=0.0)
    logit_bias: float = 0.0
    delta_eval: float = Field(0.6, ge=0.0, le=1.0)
    ciou_threshold: float = Field(0.5, ge=0.0, le=1.0)


class AblationSwitches(_Section):
    use_filter: bool = True
    use_ipl: bool = True
    use_ema: bool = True
    use_warmup: bool = True
    dual_teachers: bool = True
    heterogeneous: bool = True
    strong_augment: bool = True

    def label(self) -> str:
        if not self.dual_teachers:
            return "single-teacher"
        off = [name for name, on in (("filter", self.use_filter), ("ipl", self.use_ipl),
                                     ("ema", self.use_ema), ("warmup", self.use_warmup),
                                     ("hetero", self.heterogeneous), ("strongaug", self.strong_augment))
               if not on]
        return "full" if not off else "no-" + "-no-".join(off)


class ExperimentConfig(_Section):
    world: WorldConfig = Field(default_factory=WorldConfig)
    dmt: DmtConfig = Field(default_factory=DmtConfig)
    ablation: AblationSwitches = Field(default_factory=AblationSwitches)
    seeds: List[int] = Field(default_factory=lambda: [0])
    out_dir: str = settings.OUT_DIR

    def config_hash(self) -> str:
        return config_hash({
            "world": self.world.model_dump(),
            "dmt": self.dmt.model_dump(),
            "ablation": self.ablation.model_dump(),
        })


# CLI flag -> (section, field)
FLAG_FIELDS = {
    "delta": ("dmt", "delta"),
    "tau": ("dmt", "tau"),
    "beta": ("dmt", "beta"),
    "lambda_u": ("dmt", "lambda_u"),
    "temp": ("dmt", "temperature"),
    "lr": ("dmt", "lr"),
    "warmup_epochs": ("dmt", "warmup_epochs"),
    "epochs": ("dmt", "epochs"),
    "batch": ("dmt", "batch_size"),
    "labeled_ratio": ("world", "labeled_ratio"),
    "fp_rate": ("world", "fp_rate"),
}


def merge_raw(base: Dict[str, Any], override: Mapping[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = merge_raw(merged[key], value)
        else:
            merged[key] = value
    return merged


def build_config(raw: Mapping[str, Any]) -> ExperimentConfig:
    """Validate a nested dict, turning pydantic errors into ConfigError"""
    try:
        return ExperimentConfig.model_validate(dict(raw))
    except ValidationError as e:
        keys = [".".join(str(part) for part in err["loc"]) for err in e.errors()]
        details = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"Invalid configuration: {details}", keys) from None


def parse_config(path: Optional[str] = None, flags: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """
    Build an ExperimentConfig from a JSON file and command-line flags

    Args:
        path: optional JSON config file
        flags: flag values keyed by flag name (see FLAG_FIELDS) plus
            ``seed`` and ``out``; None values are ignored

    Returns:
        ExperimentConfig: flags override file values override defaults
    """
    raw: Dict[str, Any] = {}
    if path:
        file_path = Path(path)
        if not file_path.exists():
            raise ConfigError(f"Config file not found: {path}", ["config"])
        text = file_path.read_text().strip()
        if text:
            try:
                raw = json.loads(text)
            except json.JSONDecodeError as e:
                raise ConfigError(f"Config file {path} is not valid JSON: {e}", ["config"]) from None
        if not isinstance(raw, dict):
            raise ConfigError("Config file must hold a JSON object", ["config"])

    overrides: Dict[str, Any] = {}
    for name, value in (flags or {}).items():
        if value is None:
            continue
        if name == "seed":
            overrides["seeds"] = [int(value)]
        elif name == "out":
            overrides["out_dir"] = str(value)
        elif name in FLAG_FIELDS:
            section, field = FLAG_FIELDS[name]
            overrides.setdefault(section, {})[field] = value
        else:
            raise ConfigError(f"Unknown flag '{name}'", [name])

    config = build_config(merge_raw(raw, overrides))
    logger.info(f"Configuration loaded (hash {config.config_hash()[:12]})")
    return config
