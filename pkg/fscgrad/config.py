"""Experiment configuration (YAML, validated by pydantic) and runtime settings from the environment."""
import hashlib
import json
import logging
import os
from enum import Enum
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, model_validator

from fscgrad.errors import ConfigError
from fscgrad.policy import DEFAULT_MEMORY, PROB_HI, PROB_LO, TieMode

logger = logging.getLogger(__name__)


class EstimatorTag(str, Enum):
    GPOMDP = "GPOMDP"
    B_TD = "B-TD"
    OL_TD = "OL-TD"


class ModelConfig(BaseModel):
    path: str = Field(..., description="Path to a .pomdp or .json model file")


class PolicyConfig(BaseModel):
    n_internal: int = Field(1, ge=1, description="Number of controller internal states (1 = reactive)")
    tie_mode: TieMode = Field(TieMode.FREE, description="FREE or TIED_MEMORY internal transitions")
    memory: float = Field(DEFAULT_MEMORY, gt=0.0, lt=1.0, description="Initial memory parameter when tied")
    theta: Optional[List[float]] = Field(None, description="Explicit initial parameters")
    checkpoint: Optional[str] = Field(None, description="Policy checkpoint to start from")
    bounds: Tuple[float, float] = Field((PROB_LO, PROB_HI), description="Box for every probability")


class CriticConfig(BaseModel):
    algorithm: Literal["lspe", "td"] = Field("lspe", description="LSPE(lambda) or stochastic TD(lambda)")
    mode: Literal["discounted", "average"] = Field("discounted", description="Critic target")
    center: bool = Field(True, description="Centre per-stage costs by the online average-cost estimate")
    eta_mode: Literal["ratio", "stepwise"] = Field("ratio", description="Online average-cost estimator")
    a: float = Field(1.0, gt=0.0, description="TD step size numerator")
    b: float = Field(1000.0, ge=0.0, description="TD step size offset")
    eta_factor: float = Field(10.0, gt=0.0, description="Average-cost rate multiple of the TD step")
    lspe_step: float = Field(1.0, gt=0.0, le=1.0, description="LSPE step size")
    ridge: float = Field(1e-8, ge=0.0, description="LSPE normal matrix regularisation")


class EstimatorConfig(BaseModel):
    tags: List[EstimatorTag] = Field(
        default_factory=lambda: [EstimatorTag.B_TD, EstimatorTag.OL_TD, EstimatorTag.GPOMDP],
        min_length=1,
    )
    beta: float = Field(0.9, ge=0.0, lt=1.0, description="Discount of GPOMDP and discounted critics")
    lam: float = Field(0.9, ge=0.0, le=1.0, description="Eligibility decay of the critics")
    T: int = Field(20000, ge=2, description="Trajectory length")
    seeds: int = Field(5, ge=1, description="Independent trajectories per estimator")


class SemiMarkovConfig(BaseModel):
    family: Literal["deterministic", "exponential", "two_point"] = "exponential"
    mean: Union[float, List[List[List[float]]]] = Field(1.0, description="Mean sojourn, scalar or [x][y][u] table")
    spread: float = Field(0.5, ge=0.0, lt=1.0, description="Two-point family: values mean*(1 +/- spread)")
    cost_mode: Literal["lump", "rate"] = Field("lump", description="Random cost equals g, or accrues at rate g/mean")


class RunConfig(BaseModel):
    mode: Literal["exact", "estimate", "compare", "train", "posmdp", "locate"] = "compare"
    seed: int = Field(0, ge=0)
    iterations: int = Field(200, ge=0)
    start_iter: int = Field(0, ge=0, description="First iteration index when resuming from a checkpoint")
    step: float = Field(0.01, ge=0.0, description="Constant step along the projected descent direction")
    alignment: Literal["plain", "projected"] = Field("plain", description="Cosine of raw or projected gradients")
    out_dir: Optional[str] = None
    save_trajectories: bool = False
    save_critics: bool = False


class ExperimentConfig(BaseModel):
    model: ModelConfig
    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    estimator: EstimatorConfig = Field(default_factory=EstimatorConfig)
    critic: CriticConfig = Field(default_factory=CriticConfig)
    run: RunConfig = Field(default_factory=RunConfig)
    semi_markov: SemiMarkovConfig = Field(default_factory=SemiMarkovConfig)

    @model_validator(mode="after")
    def _critic_needs_lambda_below_one(self):
        if self.critic.mode == "average" and self.estimator.lam >= 1.0:
            raise ValueError("average-cost critics need lambda < 1")
        return self


class RuntimeSettings(BaseModel):
    log_level: str = "INFO"
    out_dir: str = "./runs"
    workers: Literal["threads", "celery"] = "threads"
    max_threads: int = Field(4, ge=1)


def runtime_settings():
    load_dotenv()
    try:
        return RuntimeSettings(
            log_level=os.getenv("FSCGRAD_LOG_LEVEL", "INFO").upper(),
            out_dir=os.getenv("FSCGRAD_OUT_DIR", "./runs"),
            workers=os.getenv("FSCGRAD_WORKERS", "threads"),
            max_threads=int(os.getenv("FSCGRAD_MAX_THREADS", "4")),
        )
    except (ValidationError, ValueError) as e:
        raise ConfigError(f"invalid FSCGRAD_* environment settings: {e}") from e


def _set(data, dotted, value):
    node = data
    *parents, leaf = dotted.split(".")
    for key in parents:
        node = node.setdefault(key, {})
    node[leaf] = value


def build_config(data, base_dir=None, overrides=None):
    """Validate a config mapping; ``overrides`` maps dotted keys to replacement values."""
    data = json.loads(json.dumps(data or {}))
    for key, value in (overrides or {}).items():
        if value is not None:
            _set(data, key, value)
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid experiment config:\n{e}") from e
    if base_dir is not None:
        for section in (cfg.model, cfg.policy):
            attr = "path" if section is cfg.model else "checkpoint"
            value = getattr(section, attr)
            if value and not Path(value).is_absolute() and not Path(value).exists():
                candidate = Path(base_dir) / value
                if candidate.exists():
                    setattr(section, attr, str(candidate))
    if not Path(cfg.model.path).exists():
        raise ConfigError(f"model file not found: {cfg.model.path}")
    if cfg.policy.checkpoint and not Path(cfg.policy.checkpoint).exists():
        raise ConfigError(f"policy checkpoint not found: {cfg.policy.checkpoint}")
    return cfg


def load_config(path=None, overrides=None):
    data = {}
    base_dir = None
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"config file not found: {path}")
        with open(path, "r") as f:
            try:
                data = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"cannot parse {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path} must hold a mapping at the top level")
        base_dir = Path(path).parent
    return build_config(data, base_dir=base_dir, overrides=overrides)


def config_hash(cfg):
    canonical = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
