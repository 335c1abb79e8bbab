"""
MRC unification, few-shot splits, pre-training batches and suite I/O
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import ShapeError, TaskError
from app.core.tokenizer import SEP, Vocabulary
from app.schemas.task import FewShotSplit, MrcInstance, RawSample, Span, Suite, TaskSpec
from app.services.synthetic_suite import SuiteGenerator, generator_for

logger = logging.getLogger(__name__)

MAX_CANDIDATE_WORDS = 4
MANY_LABELS = 5  # above this, splits draw a fixed number per label
TSV_FIELDS = ("context", "query", "gold_start", "gold_end", "task_id")


def render_query(spec: TaskSpec) -> Tuple[str, List[Tuple[int, int]]]:
    """Query text plus the word span of every label, in label order"""
    words = spec.template.format(name=spec.name).split()
    if spec.is_span:
        return " ".join(words), []
    words += ["options", ":"]
    spans = []
    for i, label in enumerate(spec.labels):
        if i:
            words.append(",")
        start = len(words)
        words += label.split()
        spans.append((start, len(words) - 1))
    words.append(".")
    return " ".join(words), spans


def _word_offsets(vocab: Vocabulary, words: Sequence[str]) -> List[Tuple[int, int]]:
    """Token range of each word under the character fallback"""
    out, pos = [], 0
    for w in words:
        n = len(vocab.encode_word(w))
        out.append((pos, pos + n - 1))
        pos += n
    return out


def to_mrc(sample: RawSample, spec: TaskSpec, vocab: Vocabulary) -> MrcInstance:
    """
    Convert a raw sample into the unified context + query format

    Classification: the query enumerates every label once and the gold span
    covers the gold label. Span extraction: candidates are all context spans
    of up to four tokens.
    """
    context_words = sample.text.split()
    context = vocab.encode(sample.text)
    query_text, label_spans = render_query(spec)
    query_words = query_text.split()
    query = vocab.encode(query_text)

    if spec.is_span:
        if sample.answer is None:
            raise TaskError(f"task {spec.name}: span sample without an answer")
        offsets = _word_offsets(vocab, context_words)
        s, e = sample.answer
        if not 0 <= s <= e < len(offsets):
            raise TaskError(f"task {spec.name}: answer {sample.answer} outside the context")
        gold = (offsets[s][0], offsets[e][1])
        candidates = [
            (i, j) for i in range(len(context)) for j in range(i, min(i + MAX_CANDIDATE_WORDS, len(context)))
        ]
        return MrcInstance(
            task_id=spec.task_id, context=context, query=query,
            gold_span=gold, candidates=candidates, region="context",
        )

    if sample.label not in spec.labels:
        raise TaskError(f"task {spec.name}: label {sample.label!r} not in {spec.labels}")
    offsets = _word_offsets(vocab, query_words)
    candidates = [(offsets[s][0], offsets[e][1]) for s, e in label_spans]
    gold = candidates[spec.labels.index(sample.label)]
    return MrcInstance(
        task_id=spec.task_id, context=context, query=query,
        gold_span=gold, candidates=candidates, region="query", label=sample.label,
    )


def span_to_label(instance: MrcInstance, span: Span, spec: TaskSpec) -> str:
    """Inverse of to_mrc on the label: the label whose candidate span was decoded"""
    try:
        return spec.labels[[tuple(c) for c in instance.candidates].index(tuple(span))]
    except ValueError as e:
        raise TaskError(f"span {span} is not a label span of task {spec.name}") from e


def _per_label_counts(n_labels: int, shots: int) -> List[int]:
    if n_labels > MANY_LABELS:
        return [max(1, shots // 4)] * n_labels
    base, extra = divmod(shots, n_labels)
    return [base + (1 if i < extra else 0) for i in range(n_labels)]


def build_fewshot_split(
    spec: TaskSpec, pool: Sequence[MrcInstance], seed: int, shots: int = 32
) -> FewShotSplit:
    """
    Label-balanced disjoint train/dev draw; everything else becomes test

    Up to five labels share ``shots`` evenly; more labels get shots // 4 each.
    Span tasks draw ``shots`` instances without balancing.
    """
    if shots < 1:
        raise TaskError("shots must be positive")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pool))
    if spec.is_span:
        if len(pool) < 2 * shots + 1:
            raise TaskError(f"task {spec.name}: pool of {len(pool)} too small for {shots} shots")
        train_idx, dev_idx = order[:shots], order[shots:2 * shots]
    else:
        by_label: Dict[str, List[int]] = {label: [] for label in spec.labels}
        for i in order:
            by_label[pool[i].label].append(int(i))
        train_idx, dev_idx = [], []
        for label, n in zip(spec.labels, _per_label_counts(len(spec.labels), shots)):
            idx = by_label[label]
            if len(idx) < 2 * n:
                raise TaskError(
                    f"task {spec.name}: label {label!r} has {len(idx)} instances, need {2 * n}"
                )
            train_idx += idx[:n]
            dev_idx += idx[n:2 * n]
    used = set(int(i) for i in train_idx) | set(int(i) for i in dev_idx)
    test = [pool[i] for i in range(len(pool)) if i not in used]
    if not test:
        raise TaskError(f"task {spec.name}: no instances left for testing")
    return FewShotSplit(
        task_id=spec.task_id,
        train=[pool[i] for i in train_idx],
        dev=[pool[i] for i in dev_idx],
        test=test,
    )


def next_pretrain_batch(
    suite: Sequence[TaskSpec],
    pools: Mapping[int, Sequence[MrcInstance]],
    batch: int,
    rng: np.random.Generator,
) -> Tuple[int, List[MrcInstance]]:
    """Pick a task uniformly, then a batch from that task only"""
    if not suite:
        raise TaskError("cannot sample from an empty suite")
    spec = suite[int(rng.integers(len(suite)))]
    pool = pools[spec.task_id]
    idx = rng.choice(len(pool), size=batch, replace=len(pool) < batch)
    return spec.task_id, [pool[i] for i in idx]


@dataclass
class Batch:
    """Token matrix and absolute gold positions for one single-task batch"""

    tokens: np.ndarray  # (B, T)
    gold_start: np.ndarray
    gold_end: np.ndarray
    instances: List[MrcInstance]

    def __len__(self) -> int:
        return len(self.instances)


def collate(instances: Sequence[MrcInstance], prompt_len: int) -> Batch:
    """Stack instances as [context] [SEP] [query]; all must share one length"""
    if not instances:
        raise ShapeError("cannot collate an empty batch")
    rows = [inst.context + [SEP] + inst.query for inst in instances]
    lengths = {len(r) for r in rows}
    if len(lengths) != 1:
        raise ShapeError(f"instances of one batch have lengths {sorted(lengths)}")
    gold = [inst.absolute(tuple(inst.gold_span), prompt_len) for inst in instances]
    return Batch(
        tokens=np.asarray(rows, dtype=np.int64),
        gold_start=np.asarray([g[0] for g in gold], dtype=np.int64),
        gold_end=np.asarray([g[1] for g in gold], dtype=np.int64),
        instances=list(instances),
    )


class TaskService:
    """Suite-level access: vocabulary, instance pools and serialization"""

    def __init__(self, suite: Suite, generator: Optional[SuiteGenerator] = None):
        self.suite = suite
        self.generator = generator or generator_for(suite)
        self.vocab = Vocabulary(suite.words)
        self._pools: Dict[int, List[MrcInstance]] = {}

    def task(self, name_or_id) -> TaskSpec:
        for t in self.suite.all_tasks():
            if name_or_id in (t.name, t.task_id, str(t.task_id)):
                return t
        raise TaskError(f"unknown task {name_or_id!r}")

    def pool(self, spec: TaskSpec, n: Optional[int] = None) -> List[MrcInstance]:
        """MRC instances of a task, generated once and cached"""
        if spec.task_id not in self._pools:
            count = n or self.suite.config.instances_per_task
            samples = self.generator.sample(spec, count)
            self._pools[spec.task_id] = [to_mrc(s, spec, self.vocab) for s in samples]
        return self._pools[spec.task_id]

    def register_pool(self, spec: TaskSpec, instances: List[MrcInstance]) -> None:
        self._pools[spec.task_id] = instances

    def pretrain_pools(self) -> Dict[int, List[MrcInstance]]:
        return {t.task_id: self.pool(t) for t in self.suite.tasks}

    def split(self, spec: TaskSpec, seed: int, shots: int = 32) -> FewShotSplit:
        return build_fewshot_split(spec, self.pool(spec), seed, shots)

    # -- serialization ------------------------------------------------------

    def save(self, directory: Path) -> None:
        """Write suite.json, tasks.jsonl and one <task>.tsv per task"""
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "suite.json").write_text(self.suite.model_dump_json(indent=2), encoding="utf-8")
        with open(directory / "tasks.jsonl", "w", encoding="utf-8") as fh:
            for spec in self.suite.all_tasks():
                fh.write(spec.model_dump_json() + "\n")
        for spec in self.suite.all_tasks():
            self.write_tsv(directory / f"{spec.name}.tsv", self.pool(spec))
        logger.info(f"Wrote suite of {len(self.suite.all_tasks())} tasks to {directory}")

    def write_tsv(self, path: Path, instances: Sequence[MrcInstance]) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for inst in instances:
                fields = (
                    self.vocab.decode(inst.context),
                    self.vocab.decode(inst.query),
                    str(inst.gold_span[0]),
                    str(inst.gold_span[1]),
                    str(inst.task_id),
                )
                fh.write("\t".join(fields) + "\n")

    def read_tsv(self, path: Path, spec: TaskSpec) -> List[MrcInstance]:
        """Parse instances back; candidates are rebuilt from the task definition"""
        instances = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != len(TSV_FIELDS):
                    raise TaskError(f"{path}:{lineno}: expected {len(TSV_FIELDS)} fields, got {len(parts)}")
                context, query, start, end, task_id = parts
                if int(task_id) != spec.task_id:
                    raise TaskError(f"{path}:{lineno}: task id {task_id} != {spec.task_id}")
                gold = (int(start), int(end))
                if spec.is_span:
                    template = to_mrc(RawSample(text=context, answer=(0, 0)), spec, self.vocab)
                    instances.append(template.model_copy(update={"gold_span": gold}))
                else:
                    tokens = self.vocab.encode(query)
                    label = self.vocab.decode(tokens[gold[0]:gold[1] + 1])
                    instances.append(to_mrc(RawSample(text=context, label=label), spec, self.vocab))
        return instances

    @classmethod
    def load(cls, directory: Path) -> "TaskService":
        path = directory / "suite.json"
        if not path.is_file():
            raise TaskError(f"no suite found in {directory}")
        service = cls(Suite.model_validate_json(path.read_text(encoding="utf-8")))
        for spec in service.suite.all_tasks():
            tsv = directory / f"{spec.name}.tsv"
            if tsv.is_file():
                service.register_pool(spec, service.read_tsv(tsv, spec))
        return service

    def ground_truth_groups(self) -> Dict[str, int]:
        return {t.name: t.group for t in self.suite.tasks if t.group is not None}
