"""pretrain: multi-task pre-training of the prompt library"""
import argparse
import logging

from app.cli.common import (
    add_common_args, build_task_service, init_model, output_dir, resolve_config, save_checkpoint, write_json,
)
from app.config import settings
from app.core.logging import MetricsLogger
from app.services.pretrain_service import PretrainService

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("pretrain", help="pre-train banks, routers and the encoder")
    add_common_args(parser)
    parser.add_argument("--steps", type=int, help="number of pre-training steps")
    parser.add_argument("--variant", choices=["shallow", "deep"])
    parser.set_defaults(func=run)


def run(args: argparse.Namespace) -> int:
    cfg = resolve_config(args, steps=args.steps, variant=args.variant)
    tasks = build_task_service(cfg)
    out = output_dir(cfg)
    model = init_model(cfg, tasks)
    with MetricsLogger(out / "metrics.jsonl") as metrics:
        service = PretrainService(
            model, tasks.suite.tasks, tasks.pretrain_pools(), cfg.pretrain_config(),
            metrics=metrics, show_progress=settings.SHOW_PROGRESS,
        )
        summary = service.run()
    save_checkpoint(model, tasks, out)
    write_json(out / "pretrain_summary.json", summary.model_dump())
    logger.info(f"Mean task accuracy {summary.mean_accuracy:.3f}")
    return 0
