"""
Application Configuration
"""
from pathlib import Path
from typing import Dict, Literal, Optional

from pydantic import BaseModel, ConfigDict, ValidationError, model_validator
from pydantic_settings import BaseSettings

from app.core.errors import ConfigError


class Settings(BaseSettings):
    """Process-wide settings loaded from environment variables"""

    PROJECT_NAME: str = "Modular Prompt Lab"
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: Literal["text", "json"] = "text"
    SHOW_PROGRESS: bool = True

    # Defaults for run configs that leave these keys out
    OUTPUT_DIR: str = "runs"
    DEFAULT_SEED: int = 0

    class Config:
        env_file = ".env"
        case_sensitive = True


def _validated(model_cls, **values):
    """Build a derived config, reporting validation failures as ConfigError"""
    try:
        return model_cls(**values)
    except ValidationError as e:
        raise ConfigError(f"invalid {model_cls.__name__}: {e}") from e


class RunConfig(BaseModel):
    """
    Flat run configuration read from a `key = value` file.

    Covers the encoder, the synthetic suite, pre-training and fine-tuning.
    Variant-dependent fields left as None are passed on unset, and the
    derived pre-training and fine-tuning configs fill them per variant.
    """

    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    out: str = "runs/default"
    checkpoint: Optional[str] = None
    suite_dir: Optional[str] = None

    # Encoder
    n_layers: int = 4
    hidden: int = 64
    heads: int = 4
    max_seq: int = 256
    prompt_len: int = 8

    # Modular prompts
    variant: Literal["shallow", "deep"] = "deep"
    n_prompts: int = 8
    intrinsic_dim: int = 8
    tau: float = 0.5

    # Synthetic suite
    n_tasks: int = 12
    n_heldout: int = 4
    n_skills: int = 6
    n_groups: int = 4
    n_span_tasks: int = 0
    instances_per_task: int = 2000

    # Pre-training
    steps: int = 20000
    batch: int = 32
    fast_slow: Optional[bool] = None
    router_lr: Optional[float] = None
    prompt_lr: Optional[float] = None
    log_every: int = 100

    # Fine-tuning
    paradigm: Literal["gd", "bbt"] = "gd"
    stage: Literal["1", "2", "both"] = "both"
    task: Optional[str] = None
    shots: int = 32
    stage1_budget: Optional[int] = None
    stage2_budget: Optional[int] = None
    stage1_lr: Optional[float] = None
    stage2_lr: Optional[float] = None
    bbt_budget: int = 8000
    bo_rounds: int = 2
    cma_sigma: Optional[float] = None
    cma_sigma_inner: Optional[float] = None

    # Analysis
    cluster_groups: Optional[int] = None
    cluster_logits: bool = False

    @model_validator(mode="after")
    def check_ranges(self) -> "RunConfig":
        if self.hidden % self.heads != 0:
            raise ValueError("hidden must be divisible by heads")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.n_layers < 2:
            raise ValueError("n_layers must be at least 2")
        return self

    def encoder_config(self, vocab: int):
        """Build the encoder config for a given vocabulary size"""
        from app.models.encoder import EncoderConfig

        return _validated(
            EncoderConfig,
            n_layers=self.n_layers,
            hidden=self.hidden,
            heads=self.heads,
            vocab=vocab,
            max_seq=self.max_seq,
            prompt_len=self.prompt_len,
        )

    def suite_config(self):
        from app.schemas.task import SuiteConfig

        return _validated(
            SuiteConfig,
            seed=self.seed,
            n_tasks=self.n_tasks,
            n_heldout=self.n_heldout,
            n_skills=self.n_skills,
            n_groups=self.n_groups,
            n_span_tasks=self.n_span_tasks,
            instances_per_task=self.instances_per_task,
        )

    def pretrain_config(self):
        from app.schemas.training import PretrainConfig

        return _validated(
            PretrainConfig,
            steps=self.steps,
            batch=self.batch,
            router_lr=self.router_lr,
            prompt_lr=self.prompt_lr,
            fast_slow=self.fast_slow,
            variant=self.variant,
            tau=self.tau,
            seed=self.seed,
            log_every=self.log_every,
        )

    def finetune_config(self):
        from app.schemas.training import FinetuneConfig

        return _validated(
            FinetuneConfig,
            paradigm="blackbox" if self.paradigm == "bbt" else "gradient",
            variant=self.variant,
            stage1_budget=self.stage1_budget,
            stage2_budget=self.stage2_budget,
            stage1_lr=self.stage1_lr,
            stage2_lr=self.stage2_lr,
            total_budget=self.bbt_budget,
            bo_rounds=self.bo_rounds,
            cma_sigma=self.cma_sigma,
            cma_sigma_inner=self.cma_sigma_inner,
            # a checkpoint keeps its own temperature unless the config sets one
            tau=self.tau if "tau" in self.model_fields_set else None,
            seed=self.seed,
        )


def parse_config_text(text: str) -> Dict[str, str]:
    """
    Parse the line-oriented `key = value` format

    Blank lines and `#` comments are skipped. Duplicate keys are rejected.
    """
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def build_run_config(values: Dict[str, object]) -> RunConfig:
    """Validate raw values into a RunConfig, converting pydantic errors"""
    cleaned = {k: v for k, v in values.items() if v is not None}
    try:
        return RunConfig(**cleaned)
    except ValidationError as e:
        raise ConfigError(f"invalid run config: {e}") from e


def load_run_config(
    path: Optional[str], overrides: Optional[Dict[str, object]] = None
) -> RunConfig:
    """
    Load a RunConfig from a `key = value` file

    Args:
        path: Config file path, or None for pure defaults
        overrides: CLI values that take precedence over the file

    Returns:
        Validated RunConfig
    """
    values: Dict[str, object] = {"seed": settings.DEFAULT_SEED, "out": str(Path(settings.OUTPUT_DIR) / "default")}
    if path is not None:
        config_path = Path(path)
        if not config_path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_config_text(config_path.read_text(encoding="utf-8")))
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    return build_run_config(values)


# Global settings instance
settings = Settings()
