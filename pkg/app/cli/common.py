"""
Shared helpers for the subcommands: config resolution, suite and checkpoint loading
"""
import argparse
import json
import logging
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from app.config import RunConfig, load_run_config
from app.core.errors import ConfigError
from app.models.mp2_model import ModularPromptModel
from app.schemas.task import Suite
from app.services.checkpoint_service import CheckpointService
from app.services.synthetic_suite import SuiteBuilder
from app.services.task_service import TaskService

logger = logging.getLogger(__name__)

CHECKPOINT_DIR = "checkpoint"


def add_common_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value run configuration file")
    parser.add_argument("--seed", type=int, help="random seed (overrides the config)")
    parser.add_argument("--out", help="output directory (overrides the config)")


def resolve_config(args: argparse.Namespace, **extra) -> RunConfig:
    overrides: Dict[str, object] = {"seed": args.seed, "out": args.out}
    overrides.update(extra)
    return load_run_config(args.config, overrides)


def output_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    logger.info(f"Wrote {path}")


def build_task_service(cfg: RunConfig, suite: Optional[Suite] = None) -> TaskService:
    """Suite from (in order) the given object, ``suite_dir``, or fresh generation"""
    if suite is not None:
        return TaskService(suite)
    if cfg.suite_dir:
        return TaskService.load(Path(cfg.suite_dir))
    builder = SuiteBuilder(cfg.suite_config())
    return TaskService(builder.build(), builder.generator)


def checkpoint_path(cfg: RunConfig) -> Path:
    if not cfg.checkpoint:
        raise ConfigError("a checkpoint path is required (checkpoint = ... or --checkpoint)")
    return Path(cfg.checkpoint)


def load_checkpoint(cfg: RunConfig) -> Tuple[ModularPromptModel, TaskService]:
    """Model plus the suite it was pre-trained on"""
    path = checkpoint_path(cfg)
    model, extra = CheckpointService().load_with_extra(path)
    suite = Suite.model_validate(extra["suite"]) if "suite" in extra else None
    return model, build_task_service(cfg, suite)


def adopt_checkpoint_variant(cfg: RunConfig, model: ModularPromptModel) -> RunConfig:
    """Take the variant from the loaded model; a config that names another one is an error"""
    if "variant" in cfg.model_fields_set and cfg.variant != model.variant:
        raise ConfigError(f"config names the {cfg.variant} variant but the checkpoint is {model.variant}")
    return cfg.model_copy(update={"variant": model.variant})


def save_checkpoint(model: ModularPromptModel, tasks: TaskService, out: Path) -> Path:
    path = out / CHECKPOINT_DIR
    CheckpointService().save(model, path, extra={"suite": tasks.suite.model_dump()})
    return path


def init_model(cfg: RunConfig, tasks: TaskService) -> ModularPromptModel:
    rng = np.random.default_rng(cfg.seed)
    return ModularPromptModel.initialize(
        cfg.encoder_config(len(tasks.vocab)),
        cfg.variant,
        cfg.n_prompts,
        cfg.intrinsic_dim,
        [t.task_id for t in tasks.suite.tasks],
        rng,
        tau=cfg.tau,
    )
