"""Pydantic models for run configuration and provenance."""
import hashlib
import json
from pathlib import Path
from typing import Dict, Optional, Union

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, field_validator

from src import __version__
from src.config import (
    BETAS,
    CLIP_NORM,
    DEFAULT_BATCH_SIZE,
    DEFAULT_K,
    DEFAULT_SAMPLING_STEPS,
    DEFAULT_SEED,
    DEFAULT_STRATEGY,
    DEFAULT_TEMPERATURE,
    DEFAULT_TRAIN_STEPS,
    PEAK_LR,
    SUPPORTED_K,
    WARMUP_FRACTION,
    WEIGHT_DECAY,
)
from src.ml.model import TinyTransformerConfig
from src.ml.sampler import SamplerConfig, ScheduleKind, Strategy
from src.ml.seqio import vocab_size_for
from src.ml.train import TrainConfig

PATH_FIELDS = ("corpus", "checkpoint", "out")


class RunConfig(BaseModel):
    """Every knob of a run, with defaults.

    A run-config file is a flat ``key=value`` text file; command-line flags
    override file values.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    # tokenization
    k: int = Field(DEFAULT_K, description="k-mer width")
    skip_n_records: bool = Field(False, description="Drop FASTA records containing N instead of failing")

    # model
    layers: int = Field(2, ge=1)
    heads: int = Field(4, ge=1)
    model_dim: int = Field(64, ge=2)
    ff_dim: int = Field(171, ge=1)
    max_len: int = Field(256, ge=1)
    rope_base: float = Field(10000.0, gt=0)
    tie_embeddings: bool = False
    use_rope: bool = True

    # training
    steps: int = Field(DEFAULT_TRAIN_STEPS, description="Training steps")
    batch_size: int = Field(DEFAULT_BATCH_SIZE, ge=1)
    seed: int = Field(DEFAULT_SEED, ge=0)
    peak_lr: float = Field(PEAK_LR, gt=0)
    beta1: float = BETAS[0]
    beta2: float = BETAS[1]
    weight_decay: float = Field(WEIGHT_DECAY, ge=0)
    clip_norm: float = Field(CLIP_NORM, gt=0)
    warmup_fraction: float = Field(WARMUP_FRACTION, ge=0, le=1)
    precision: str = "float64"
    log_every: int = Field(100, ge=1)

    # sampling
    strategy: Strategy = Strategy(DEFAULT_STRATEGY)
    temperature: float = Field(DEFAULT_TEMPERATURE, gt=0)
    sampling_steps: int = Field(DEFAULT_SAMPLING_STEPS, ge=1)
    schedule: ScheduleKind = ScheduleKind.LINEAR

    # paths
    corpus: Optional[str] = None
    checkpoint: Optional[str] = None
    out: Optional[str] = None

    @field_validator("k")
    @classmethod
    def validate_k(cls, v):
        """Validate that k is a supported k-mer width."""
        if v not in SUPPORTED_K:
            raise ValueError(f"unsupported k={v}; expected one of {SUPPORTED_K}")
        return v

    @field_validator("steps")
    @classmethod
    def validate_steps(cls, v):
        if v < 1:
            raise ValueError("steps must be >= 1")
        return v

    def transformer_config(self) -> TinyTransformerConfig:
        return TinyTransformerConfig(
            layers=self.layers,
            heads=self.heads,
            model_dim=self.model_dim,
            ff_dim=self.ff_dim,
            vocab_size=vocab_size_for(self.k),
            max_len=self.max_len,
            rope_base=self.rope_base,
            tie_embeddings=self.tie_embeddings,
            use_rope=self.use_rope,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            seed=self.seed,
            peak_lr=self.peak_lr,
            beta1=self.beta1,
            beta2=self.beta2,
            weight_decay=self.weight_decay,
            clip_norm=self.clip_norm,
            warmup_fraction=self.warmup_fraction,
            precision=self.precision,
            log_every=self.log_every,
        )

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(
            strategy=self.strategy,
            temperature=self.temperature,
            steps=self.sampling_steps,
            seed=self.seed,
            schedule=self.schedule,
        )

    def config_hash(self) -> str:
        """Short digest of every non-path setting."""
        payload = self.model_dump(mode="json", exclude=set(PATH_FIELDS))
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:12]


def read_config_file(path: Union[str, Path]) -> Dict[str, str]:
    """Read a flat key=value run-config file; keys may use '-' or '_'."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return {key.strip().replace("-", "_"): value for key, value in dotenv_values(path).items() if value is not None}


def load_run_config(path: Optional[Union[str, Path]] = None, overrides: Optional[dict] = None) -> RunConfig:
    """File values first, then non-None overrides on top."""
    values: dict = read_config_file(path) if path else {}
    values.update({key: value for key, value in (overrides or {}).items() if value is not None})
    return RunConfig(**values)


class Provenance(BaseModel):
    """Header stamped on every output artefact."""

    tool: str = "maskdna"
    version: str = __version__
    command: str
    config_hash: str
    seed: int

    def comment_lines(self) -> list:
        return [f"{self.tool} {self.version} {self.command}", f"config_hash={self.config_hash} seed={self.seed}"]


def provenance_for(command: str, cfg: RunConfig, seed: Optional[int] = None) -> Provenance:
    return Provenance(command=command, config_hash=cfg.config_hash(), seed=cfg.seed if seed is None else seed)
