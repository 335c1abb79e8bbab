"""cluster: hierarchical clustering of pre-training task routers"""
import argparse
import logging

from app.cli.common import add_common_args, load_checkpoint, output_dir, resolve_config, write_json
from app.services.analysis_service import cluster_routers, router_matrix

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("cluster", help="cluster tasks by their routers")
    add_common_args(parser)
    parser.add_argument("--checkpoint", help="pre-trained checkpoint directory")
    parser.add_argument("--groups", type=int, help="number of groups to cut the tree into")
    parser.add_argument("--logits", action="store_true", help="cluster raw logits instead of binarized gates")
    parser.set_defaults(func=run)


def run(args: argparse.Namespace) -> int:
    cfg = resolve_config(
        args, checkpoint=args.checkpoint, cluster_groups=args.groups, cluster_logits=args.logits or None,
    )
    model, tasks = load_checkpoint(cfg)
    specs = [t for t in tasks.suite.tasks if t.task_id in model.routers]
    n_groups = cfg.cluster_groups or len({t.group for t in specs if t.group is not None}) or 1
    truth = [t.group for t in specs] if all(t.group is not None for t in specs) else None

    matrix = router_matrix(model, [t.task_id for t in specs], use_logits=cfg.cluster_logits)
    result = cluster_routers(
        matrix, n_groups, names=[t.name for t in specs], use_logits=cfg.cluster_logits, truth=truth,
    )
    out = output_dir(cfg)
    (out / "partition.tsv").write_text("\n".join(result.partition_lines()) + "\n", encoding="utf-8")
    (out / "dendrogram.txt").write_text(result.dendrogram.to_text() + "\n", encoding="utf-8")
    write_json(out / "cluster.json", result.model_dump())
    if result.adjusted_rand is not None:
        logger.info(f"Adjusted Rand index against planted groups: {result.adjusted_rand:.3f}")
    return 0
