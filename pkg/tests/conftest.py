"""Shared fixtures: a tiny encoder, a tiny suite and seeded generators"""
import numpy as np
import pytest

from app.models.encoder import EncoderConfig
from app.models.mp2_model import ModularPromptModel
from app.services.synthetic_suite import generate_synthetic_suite
from app.services.task_service import TaskService


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow end-to-end tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_config():
    return EncoderConfig(n_layers=3, hidden=16, heads=2, vocab=40, max_seq=48, prompt_len=4)


@pytest.fixture(scope="session")
def tiny_tasks():
    suite, generator = generate_synthetic_suite(
        seed=0, n_tasks=4, n_skills=3, n_groups=2, n_heldout=1, instances_per_task=120,
    )
    return TaskService(suite, generator)


def make_model(tasks: TaskService, variant: str = "deep", seed: int = 0) -> ModularPromptModel:
    config = EncoderConfig(n_layers=3, hidden=16, heads=2, vocab=len(tasks.vocab), max_seq=64, prompt_len=4)
    return ModularPromptModel.initialize(
        config, variant, n_prompts=4, intrinsic_dim=4,
        task_ids=[t.task_id for t in tasks.suite.tasks], rng=np.random.default_rng(seed),
    )


@pytest.fixture
def tiny_model(tiny_tasks):
    return make_model(tiny_tasks)
