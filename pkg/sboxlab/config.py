"""
Workbench Configuration

Loads campaign settings from config.yaml (JSON files are accepted too).
Each section can also be overridden through SBOXLAB_<SECTION>_<FIELD>
environment variables.
"""

import hashlib
import json
import os
from functools import lru_cache
from pathlib import Path
from typing import List, Optional

import yaml
from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .models.schemas import Design, FakeKeyPolicy, LeakageModel, Profile


class LoggingSettings(BaseSettings):
    """Logging configuration"""
    model_config = SettingsConfigDict(env_prefix="SBOXLAB_LOGGING_")

    level: str = "INFO"
    format: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class DesignSettings(BaseSettings):
    """Design under evaluation and its keys"""
    model_config = SettingsConfigDict(env_prefix="SBOXLAB_DESIGN_")

    design: Design = Design.UHLS
    profile: Profile = Profile.ROLLED
    key: int = Field(0x2B, ge=0, le=255)
    fake_key_policy: FakeKeyPolicy = FakeKeyPolicy.FROM_SEED
    fake_key: int = Field(0, ge=0, le=255, description="Used by the 'fixed' policy")


class TraceSettings(BaseSettings):
    """Trace synthesis"""
    model_config = SettingsConfigDict(env_prefix="SBOXLAB_TRACES_")

    leakage_model: LeakageModel = LeakageModel.HW
    sigma: float = Field(1.0, ge=0.0)
    glitch: bool = False
    n_traces: int = Field(100_000, gt=0)
    chunk_size: int = Field(4096, gt=0)


class TTestSettings(BaseSettings):
    """Fixed-vs-random leakage assessment"""
    model_config = SettingsConfigDict(env_prefix="SBOXLAB_TTEST_")

    n_per_set: int = Field(100_000, ge=100)
    fixed_plaintext: int = Field(0x00, ge=0, le=255)
    threshold: float = Field(4.5, gt=0.0)


class FaultSettings(BaseSettings):
    """Fault-injection campaigns"""
    model_config = SettingsConfigDict(env_prefix="SBOXLAB_FAULTS_")

    margin_of_error: float = Field(0.01, gt=0.0, lt=1.0)
    confidence: float = 0.99
    proportion: float = Field(0.5, gt=0.0, lt=1.0)
    multiplicities: List[int] = Field(default_factory=lambda: [2, 3, 4, 5])
    sbf_inputs: int = Field(8, gt=0)
    watchdog_factor: int = Field(4, ge=1)

    @field_validator("confidence")
    @classmethod
    def supported_confidence(cls, value: float) -> float:
        if round(value, 2) not in (0.90, 0.95, 0.99):
            raise ValueError(f"confidence must be 0.90, 0.95 or 0.99, got {value}")
        return round(value, 2)


class CpaSettings(BaseSettings):
    """Correlation power analysis"""
    model_config = SettingsConfigDict(env_prefix="SBOXLAB_CPA_")

    top_k: int = Field(8, ge=0, description="Descriptors plotted as correlation-vs-key")


class OutputSettings(BaseSettings):
    """Where results are written"""
    model_config = SettingsConfigDict(env_prefix="SBOXLAB_OUTPUT_")

    directory: str = "results"


class DeskSettings(BaseSettings):
    """Reduced campaign sizes applied by --desk"""
    model_config = SettingsConfigDict(env_prefix="SBOXLAB_DESK_")

    n_traces: int = 20_000
    n_per_set: int = 20_000
    margin_of_error: float = 0.02


class Settings(BaseSettings):
    """Main workbench settings"""
    model_config = SettingsConfigDict(env_prefix="SBOXLAB_")

    seed: int = Field(0, ge=0)
    jobs: int = Field(1, ge=1)
    logging: LoggingSettings = Field(default_factory=LoggingSettings)
    design: DesignSettings = Field(default_factory=DesignSettings)
    traces: TraceSettings = Field(default_factory=TraceSettings)
    ttest: TTestSettings = Field(default_factory=TTestSettings)
    faults: FaultSettings = Field(default_factory=FaultSettings)
    cpa: CpaSettings = Field(default_factory=CpaSettings)
    output: OutputSettings = Field(default_factory=OutputSettings)
    desk: DeskSettings = Field(default_factory=DeskSettings)

    @classmethod
    def from_yaml(cls, path: str = "config.yaml") -> "Settings":
        """Load settings from a YAML (or JSON) file"""
        config_path = Path(path)

        if config_path.exists():
            with open(config_path, 'r') as f:
                config_data = yaml.safe_load(f) or {}
        else:
            config_data = {}

        return cls(
            seed=config_data.get('seed', 0),
            jobs=config_data.get('jobs', 1),
            logging=LoggingSettings(**config_data.get('logging', {})),
            design=DesignSettings(**config_data.get('design', {})),
            traces=TraceSettings(**config_data.get('traces', {})),
            ttest=TTestSettings(**config_data.get('ttest', {})),
            faults=FaultSettings(**config_data.get('faults', {})),
            cpa=CpaSettings(**config_data.get('cpa', {})),
            output=OutputSettings(**config_data.get('output', {})),
            desk=DeskSettings(**config_data.get('desk', {})),
        )

    def with_desk(self) -> "Settings":
        """Copy with the reduced desk-scale campaign sizes."""
        return self.model_copy(update={
            "traces": self.traces.model_copy(update={"n_traces": self.desk.n_traces}),
            "ttest": self.ttest.model_copy(update={"n_per_set": self.desk.n_per_set}),
            "faults": self.faults.model_copy(update={"margin_of_error": self.desk.margin_of_error}),
        })

    def replay_config(self) -> dict:
        """Everything that affects results; worker count and output location do not."""
        return self.model_dump(mode="json", exclude={"jobs", "output"})

    def canonical_json(self) -> str:
        return json.dumps(self.replay_config(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        """sha256 of the effective configuration"""
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


def load_settings(path: Optional[str] = None) -> Settings:
    """Settings from an explicit file, or the default search path."""
    if path is not None:
        if not Path(path).exists():
            raise FileNotFoundError(f"Config file not found: {path}")
        return Settings.from_yaml(path)
    return get_settings()


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance"""
    config_paths = [
        "config.yaml",
        "../config.yaml",
        os.path.join(os.path.dirname(__file__), "..", "config.yaml")
    ]

    for path in config_paths:
        if Path(path).exists():
            return Settings.from_yaml(path)

    return Settings()
