"""finetune: two-stage adaptation to one task"""
import argparse
import logging

from app.cli.common import (
    add_common_args,
    adopt_checkpoint_variant,
    load_checkpoint,
    output_dir,
    resolve_config,
    save_checkpoint,
    write_json,
)
from app.config import settings
from app.core.errors import ConfigError
from app.core.logging import MetricsLogger
from app.services.finetune_service import FinetuneService

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("finetune", help="adapt a pre-trained checkpoint to a task")
    add_common_args(parser)
    parser.add_argument("--checkpoint", help="pre-trained checkpoint directory")
    parser.add_argument("--task", help="task name or numeric id")
    parser.add_argument("--paradigm", choices=["gd", "bbt"])
    parser.add_argument("--stage", choices=["1", "2", "both"])
    parser.add_argument("--router-only", action="store_true", help="run stage I only")
    parser.add_argument("--shots", type=int, help="few-shot train/dev size")
    parser.add_argument("--baseline", action="store_true", help="also run the random-prompt baseline")
    parser.set_defaults(func=run)


def run(args: argparse.Namespace) -> int:
    if args.router_only and args.stage not in (None, "1"):
        raise ConfigError("--router-only cannot be combined with --stage 2 or both")
    cfg = resolve_config(
        args,
        checkpoint=args.checkpoint,
        task=args.task,
        paradigm=args.paradigm,
        stage="1" if args.router_only else args.stage,
        shots=args.shots,
    )
    if not cfg.task:
        raise ConfigError("finetune needs a task (task = ... or --task)")
    model, tasks = load_checkpoint(cfg)
    cfg = adopt_checkpoint_variant(cfg, model)
    spec = tasks.task(cfg.task)
    split = tasks.split(spec, seed=cfg.seed, shots=cfg.shots)
    stages = ("1", "2") if cfg.stage == "both" else (cfg.stage,)
    out = output_dir(cfg)

    with MetricsLogger(out / "metrics.jsonl") as metrics:
        service = FinetuneService(
            model, spec, split, cfg.finetune_config(), metrics=metrics, show_progress=settings.SHOW_PROGRESS,
        )
        report = service.run(stages)
        if args.baseline:
            report.baseline = service.random_prompt_baseline()

    save_checkpoint(model, tasks, out)
    write_json(out / "finetune_report.json", report.model_dump())
    logger.info(f"{spec.name}: test {report.metric} {report.test_score:.4f}")
    return 0
