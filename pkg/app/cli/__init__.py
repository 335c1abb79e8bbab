"""Command-line subcommands"""
import argparse

from app.cli import cluster, evaluate, finetune, gen_tasks, pretrain


def cli_router() -> argparse.ArgumentParser:
    """Parser with every subcommand registered"""
    parser = argparse.ArgumentParser(prog="mp2", description="Multi-task pre-trained modular prompts")
    subparsers = parser.add_subparsers(dest="command", required=True)
    gen_tasks.register(subparsers)
    pretrain.register(subparsers)
    finetune.register(subparsers)
    evaluate.register(subparsers)
    cluster.register(subparsers)
    return parser
