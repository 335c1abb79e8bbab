"""Synthetic suite generation, MRC unification, splits and batches"""
from collections import Counter

import numpy as np
import pytest

from app.core.errors import ShapeError, TaskError
from app.core.tokenizer import Vocabulary
from app.schemas.task import RawSample, TaskSpec
from app.services.synthetic_suite import generate_synthetic_suite, many_label_task
from app.services.task_service import (
    TaskService,
    build_fewshot_split,
    collate,
    next_pretrain_batch,
    render_query,
    span_to_label,
    to_mrc,
)


def _spec(labels, task_id=0, skills=None):
    skills = skills or [0]
    return TaskSpec(
        task_id=task_id, name="review", labels=labels, skill_set=skills,
        label_map=[i % len(labels) for i in range(2 ** len(skills))],
        template="{name} task : which option fits ?", generator_seed=1,
    )


def test_same_seed_same_suite():
    a, _ = generate_synthetic_suite(seed=3, n_tasks=4, n_skills=3, n_groups=2, n_heldout=1)
    b, _ = generate_synthetic_suite(seed=3, n_tasks=4, n_skills=3, n_groups=2, n_heldout=1)
    assert a == b


def test_planted_groups_share_skill_subsets(tiny_tasks):
    by_group = {}
    for spec in tiny_tasks.suite.tasks:
        by_group.setdefault(spec.group, set()).add(tuple(spec.skill_set))
    assert all(len(subsets) == 1 for subsets in by_group.values())
    assert len({s for subsets in by_group.values() for s in subsets}) == len(by_group)


def test_heldout_tasks_use_novel_subsets(tiny_tasks):
    seen = {tuple(t.skill_set) for t in tiny_tasks.suite.tasks}
    for spec in tiny_tasks.suite.heldout:
        assert spec.heldout
        assert tuple(spec.skill_set) not in seen


@pytest.mark.parametrize("seed", range(20))
def test_heldout_subsets_exist_for_every_seed(seed):
    suite, _ = generate_synthetic_suite(
        seed=seed, n_tasks=4, n_skills=3, n_groups=2, n_heldout=1, instances_per_task=120
    )
    seen = {tuple(t.skill_set) for t in suite.tasks}
    assert len(suite.heldout) == 1
    assert tuple(suite.heldout[0].skill_set) not in seen


def test_heldout_count_beyond_unused_subsets_rejected():
    # three skills admit seven subsets, two of them planted
    with pytest.raises(TaskError):
        generate_synthetic_suite(seed=0, n_tasks=4, n_skills=3, n_groups=2, n_heldout=6)


def test_labels_follow_rules(tiny_tasks):
    gen = tiny_tasks.generator
    spec = tiny_tasks.suite.tasks[0]
    for sample in gen.sample(spec, 50):
        assert gen.label_of(spec, sample.text.split()) == sample.label


def test_tasks_are_not_constant(tiny_tasks):
    for spec in tiny_tasks.suite.all_tasks():
        labels = {inst.label for inst in tiny_tasks.pool(spec)}
        assert len(labels) > 1


def test_query_lists_labels():
    text, spans = render_query(_spec(["negative", "positive"]))
    assert text.endswith("options : negative , positive .")
    assert len(spans) == 2


def test_mrc_gold_span_covers_label():
    spec = _spec(["negative", "positive"])
    vocab = Vocabulary(["negative", "positive", "review", "text"])
    inst = to_mrc(RawSample(text="review text", label="positive"), spec, vocab)
    assert vocab.decode(inst.span_tokens(tuple(inst.gold_span))) == "positive"
    assert span_to_label(inst, tuple(inst.gold_span), spec) == "positive"


def test_single_label_task_has_one_candidate():
    spec = _spec(["only"])
    inst = to_mrc(RawSample(text="x", label="only"), spec, Vocabulary(["only"]))
    assert inst.candidates == [tuple(inst.gold_span)]


def test_unknown_label_rejected(tiny_tasks):
    with pytest.raises(TaskError):
        to_mrc(RawSample(text="x", label="missing"), _spec(["a1", "b1"]), tiny_tasks.vocab)


@pytest.mark.parametrize("n_labels", [2, 7, 15, 30])
def test_many_label_round_trip(tiny_tasks, n_labels):
    suite, _ = generate_synthetic_suite(seed=0, n_tasks=4, n_skills=5, n_groups=2, n_heldout=1)
    service = TaskService(suite)
    spec = many_label_task(suite, n_labels)
    assert len(spec.labels) == n_labels
    for inst in service.pool(spec, 40):
        assert len(inst.candidates) == n_labels
        for label, cand in zip(spec.labels, inst.candidates):
            assert span_to_label(inst, tuple(cand), spec) == label


def test_span_task_instances():
    suite, generator = generate_synthetic_suite(seed=1, n_tasks=2, n_skills=2, n_groups=2, n_heldout=0, n_span_tasks=1)
    service = TaskService(suite, generator)
    spec = suite.tasks[-1]
    assert spec.is_span
    for inst in service.pool(spec, 20):
        assert inst.region == "context"
        words = service.vocab.decode(inst.context).split()
        gold = service.vocab.decode(inst.span_tokens(tuple(inst.gold_span))).split()
        inside = words[words.index("[") + 1:words.index("]")]
        assert gold == inside


def test_two_label_split_is_balanced(tiny_tasks):
    spec = next(t for t in tiny_tasks.suite.tasks if len(t.labels) == 2)
    split = tiny_tasks.split(spec, seed=0, shots=32)
    assert Counter(i.label for i in split.train) == {label: 16 for label in spec.labels}
    assert len(split.dev) == 32


def test_fifteen_labels_draw_eight_each():
    suite, _ = generate_synthetic_suite(seed=0, n_tasks=4, n_skills=5, n_groups=2, n_heldout=1)
    service = TaskService(suite)
    spec = many_label_task(suite, 15)
    split = build_fewshot_split(spec, service.pool(spec, 1200), seed=0, shots=32)
    assert len(split.train) == 120
    assert set(Counter(i.label for i in split.train).values()) == {8}


def test_split_is_deterministic_and_disjoint(tiny_tasks):
    spec = tiny_tasks.suite.tasks[1]
    a = tiny_tasks.split(spec, seed=5, shots=8)
    b = tiny_tasks.split(spec, seed=5, shots=8)
    assert a == b
    ids = lambda xs: {id(x) for x in xs}
    assert not ids(a.train) & ids(a.dev)
    assert not ids(a.train) & ids(a.test)


def test_split_needs_enough_instances(tiny_tasks):
    spec = tiny_tasks.suite.tasks[0]
    with pytest.raises(TaskError):
        build_fewshot_split(spec, tiny_tasks.pool(spec)[:10], seed=0, shots=32)


def test_pretrain_batch_single_task(tiny_tasks, rng):
    task_id, batch = next_pretrain_batch(tiny_tasks.suite.tasks, tiny_tasks.pretrain_pools(), 32, rng)
    assert len(batch) == 32
    assert {inst.task_id for inst in batch} == {task_id}


def test_pretrain_batch_one_task(tiny_tasks, rng):
    only = tiny_tasks.suite.tasks[:1]
    for _ in range(5):
        task_id, _ = next_pretrain_batch(only, tiny_tasks.pretrain_pools(), 4, rng)
        assert task_id == only[0].task_id


def test_pretrain_batch_task_frequencies(tiny_tasks):
    rng = np.random.default_rng(0)
    pools = tiny_tasks.pretrain_pools()
    tasks = tiny_tasks.suite.tasks
    counts = Counter(next_pretrain_batch(tasks, pools, 1, rng)[0] for _ in range(100_000))
    for spec in tasks:
        assert abs(counts[spec.task_id] / 100_000 - 1 / len(tasks)) < 0.01


def test_collate_positions(tiny_tasks):
    spec = tiny_tasks.suite.tasks[0]
    pool = tiny_tasks.pool(spec)[:3]
    batch = collate(pool, prompt_len=4)
    assert batch.tokens.shape == (3, pool[0].text_length)
    assert batch.gold_start[0] == 4 + len(pool[0].context) + 1 + pool[0].gold_span[0]


def test_collate_rejects_mixed_lengths(tiny_tasks):
    a = tiny_tasks.pool(tiny_tasks.suite.tasks[0])[0]
    b = a.model_copy(update={"context": a.context + [3]})
    with pytest.raises(ShapeError):
        collate([a, b], prompt_len=4)


def test_suite_round_trips_through_disk(tiny_tasks, tmp_path):
    tiny_tasks.save(tmp_path)
    loaded = TaskService.load(tmp_path)
    assert loaded.suite == tiny_tasks.suite
    spec = tiny_tasks.suite.tasks[0]
    assert [i.gold_span for i in loaded.pool(spec)] == [i.gold_span for i in tiny_tasks.pool(spec)]


def test_task_lookup_by_name_or_id(tiny_tasks):
    spec = tiny_tasks.suite.heldout[0]
    assert tiny_tasks.task(spec.name) is spec
    assert tiny_tasks.task(spec.task_id) is spec
    assert tiny_tasks.task(str(spec.task_id)) is spec
    with pytest.raises(TaskError):
        tiny_tasks.task("no-such-task")
