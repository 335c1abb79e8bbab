"""eval: test scores of a checkpoint on one or all tasks"""
import argparse
import logging

from app.cli.common import add_common_args, load_checkpoint, output_dir, resolve_config, write_json
from app.core.errors import ConfigError
from app.services.evaluation_service import evaluate, summarize_scores

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("eval", help="evaluate a checkpoint with binarized routers")
    add_common_args(parser)
    parser.add_argument("--checkpoint", help="checkpoint directory")
    parser.add_argument("--task", help="task name or id (default: every task with a router)")
    parser.set_defaults(func=run)


def run(args: argparse.Namespace) -> int:
    cfg = resolve_config(args, checkpoint=args.checkpoint, task=args.task)
    model, tasks = load_checkpoint(cfg)
    if cfg.task:
        specs = [tasks.task(cfg.task)]
    else:
        specs = [t for t in tasks.suite.all_tasks() if t.task_id in model.routers]
    if not specs:
        raise ConfigError("no task to evaluate")

    scores = {}
    for spec in specs:
        if spec.task_id not in model.routers:
            raise ConfigError(f"checkpoint has no router for task {spec.name}")
        metric = "span_f1" if spec.is_span else "accuracy"
        split = tasks.split(spec, seed=cfg.seed, shots=cfg.shots)
        scores[spec.name] = evaluate(model, spec.task_id, split.test, metric)
        logger.info(f"{spec.name}: {metric} {scores[spec.name]:.4f}")
    summary = summarize_scores(list(scores.values()))
    write_json(output_dir(cfg) / "eval.json", {"scores": scores, "summary": summary.model_dump()})
    return 0
