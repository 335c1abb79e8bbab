"""gen-tasks: generate and write a synthetic suite"""
import argparse
import logging

from app.cli.common import add_common_args, build_task_service, output_dir, resolve_config

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("gen-tasks", help="generate the synthetic task suite")
    add_common_args(parser)
    parser.set_defaults(func=run)


def run(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    cfg = cfg.model_copy(update={"suite_dir": None})
    tasks = build_task_service(cfg)
    out = output_dir(cfg)
    tasks.save(out)
    for spec in tasks.suite.all_tasks():
        role = "held-out" if spec.heldout else f"group {spec.group}"
        logger.info(f"{spec.name}: {spec.kind}, skills {spec.skill_set}, {len(spec.labels)} labels, {role}")
    return 0
