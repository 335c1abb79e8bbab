"""
Synthetic multi-task suite with planted compositional skill structure

Every classification task reads a subset of F primitive token-level rules
(skills) off its context and maps the resulting bit pattern to a label.
Tasks that read the same subset form a ground-truth group; held-out tasks
combine seen skills into subsets no pre-training task uses.
"""
import itertools
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from faker import Faker

from app.core.errors import TaskError
from app.core.tokenizer import TEMPLATE_WORDS
from app.schemas.task import MAX_LABELS, RawSample, Suite, SuiteConfig, TaskSpec

logger = logging.getLogger(__name__)

RULE_CYCLE = ["marker", "first_class", "majority", "marker", "last_class"]
CLASS_WORDS = 8
NEUTRAL_WORDS = 12
INTERIOR_CLASS_SLOTS = 8
MAJORITY_SPLIT = 6  # of INTERIOR_CLASS_SLOTS
LABEL_POOL = MAX_LABELS + 2
SPAN_CONTEXT_WORDS = 12
MAX_SPAN_WORDS = 3

CLASSIFICATION_TEMPLATE = "{name} task : which option fits ?"
SPAN_TEMPLATE = "{name} task : extract the marked phrase ."
MAX_REDRAWS = 20
EXTRA_NAMES = 8  # spare task names for many-label tasks


@dataclass
class SuiteVocabulary:
    """Word lists every rule and template draws from"""

    class_a: List[str]
    class_b: List[str]
    neutral: List[str]
    markers: List[str]
    labels: List[str]
    names: List[str]

    def all_words(self) -> List[str]:
        return self.class_a + self.class_b + self.neutral + self.markers + self.labels + self.names


def build_vocabulary(seed: int, n_markers: int, n_names: int) -> SuiteVocabulary:
    """Draw disjoint word lists from a seeded Faker instance"""
    fake = Faker("en_US")
    fake.seed_instance(seed)
    need = 2 * CLASS_WORDS + NEUTRAL_WORDS + n_markers + LABEL_POOL + n_names
    reserved = set(TEMPLATE_WORDS)
    words: List[str] = []
    seen = set()
    for _ in range(MAX_REDRAWS):
        for w in fake.words(nb=need * 2):
            w = w.lower()
            if len(w) >= 3 and w.isalpha() and w not in reserved and w not in seen:
                seen.add(w)
                words.append(w)
        if len(words) >= need:
            break
    if len(words) < need:
        raise TaskError(f"word list yielded {len(words)} usable words, need {need}")

    cuts = np.cumsum([CLASS_WORDS, CLASS_WORDS, NEUTRAL_WORDS, n_markers, LABEL_POOL, n_names])
    a, b, neutral, markers, labels, names, _ = np.split(np.array(words[:need], dtype=object), cuts)
    return SuiteVocabulary(
        class_a=list(a), class_b=list(b), neutral=list(neutral),
        markers=list(markers), labels=list(labels), names=list(names),
    )


@dataclass
class SkillRule:
    """One primitive rule: reads a single bit off a context"""

    index: int
    kind: str
    marker: Optional[str] = None

    def describe(self) -> str:
        return f"{self.kind}({self.marker})" if self.marker else self.kind


def build_rules(n_skills: int, vocab: SuiteVocabulary) -> List[SkillRule]:
    rules = []
    n_markers = 0
    for j in range(n_skills):
        kind = RULE_CYCLE[j] if j < len(RULE_CYCLE) else "marker"
        marker = None
        if kind == "marker":
            marker = vocab.markers[n_markers]
            n_markers += 1
        rules.append(SkillRule(j, kind, marker))
    return rules


def count_markers(n_skills: int) -> int:
    return sum(1 for j in range(n_skills) if j >= len(RULE_CYCLE) or RULE_CYCLE[j] == "marker")


class SuiteGenerator:
    """
    Renders contexts from skill bits and evaluates rules on rendered text

    Context layout: first class word, a shuffled interior of class words plus
    one slot per marker rule (marker or neutral filler), last class word.
    """

    def __init__(self, rules: Sequence[SkillRule], vocab: SuiteVocabulary):
        self.rules = list(rules)
        self.vocab = vocab
        self._class_a = set(vocab.class_a)

    def context_length(self) -> int:
        return 2 + INTERIOR_CLASS_SLOTS + sum(1 for r in self.rules if r.kind == "marker")

    def render(self, bits: Sequence[int], rng: np.random.Generator) -> List[str]:
        by_kind: Dict[str, int] = {r.kind: bits[r.index] for r in self.rules if r.kind != "marker"}
        first = by_kind.get("first_class", int(rng.integers(2)))
        last = by_kind.get("last_class", int(rng.integers(2)))
        majority = by_kind.get("majority")

        n_a = {1: MAJORITY_SPLIT, 0: INTERIOR_CLASS_SLOTS - MAJORITY_SPLIT}.get(
            majority, INTERIOR_CLASS_SLOTS // 2
        )
        interior = [self._class_word(1, rng) for _ in range(n_a)]
        interior += [self._class_word(0, rng) for _ in range(INTERIOR_CLASS_SLOTS - n_a)]
        for r in self.rules:
            if r.kind == "marker":
                interior.append(r.marker if bits[r.index] else str(rng.choice(self.vocab.neutral)))
        order = rng.permutation(len(interior))
        interior = [interior[i] for i in order]
        return [self._class_word(first, rng)] + interior + [self._class_word(last, rng)]

    def skill_bits(self, words: Sequence[str]) -> List[int]:
        """Evaluate every rule on a rendered context"""
        interior = words[1:-1]
        bits = []
        for r in self.rules:
            if r.kind == "marker":
                bits.append(int(r.marker in interior))
            elif r.kind == "first_class":
                bits.append(int(words[0] in self._class_a))
            elif r.kind == "last_class":
                bits.append(int(words[-1] in self._class_a))
            else:
                n_a = sum(1 for w in interior if w in self._class_a)
                n_b = sum(1 for w in interior if w in self.vocab.class_b)
                bits.append(int(n_a > n_b))
        return bits

    def label_of(self, spec: TaskSpec, words: Sequence[str]) -> str:
        bits = self.skill_bits(words)
        combo = sum(bits[s] << j for j, s in enumerate(spec.skill_set))
        return spec.labels[spec.label_map[combo]]

    def sample(self, spec: TaskSpec, n: int) -> List[RawSample]:
        """Draw n instances from a task's own generator seed"""
        rng = np.random.default_rng(spec.generator_seed)
        if spec.is_span:
            return [self._span_sample(rng) for _ in range(n)]
        out = []
        for _ in range(n):
            bits = rng.integers(0, 2, size=len(self.rules)).tolist()
            words = self.render(bits, rng)
            out.append(RawSample(text=" ".join(words), label=self.label_of(spec, words)))
        return out

    def _class_word(self, is_a: int, rng: np.random.Generator) -> str:
        pool = self.vocab.class_a if is_a else self.vocab.class_b
        return str(rng.choice(pool))

    def _span_sample(self, rng: np.random.Generator) -> RawSample:
        pool = self.vocab.class_a + self.vocab.class_b + self.vocab.neutral
        words = [str(w) for w in rng.choice(pool, size=SPAN_CONTEXT_WORDS)]
        k = int(rng.integers(1, MAX_SPAN_WORDS + 1))
        s = int(rng.integers(0, SPAN_CONTEXT_WORDS - k + 1))
        text = words[:s] + ["["] + words[s:s + k] + ["]"] + words[s + k:]
        # answer indexes the words between the brackets
        return RawSample(text=" ".join(text), answer=(s + 1, s + k))


def _label_map(n_skills_used: int, n_labels: int, rng: np.random.Generator) -> List[int]:
    """Surjective map from skill-bit combinations onto label indices"""
    return [int(i) % n_labels for i in rng.permutation(2 ** n_skills_used)]


def _planted_subsets(n_skills: int, n_groups: int, rng: np.random.Generator) -> List[Tuple[int, ...]]:
    singles = [(j,) for j in range(n_skills)]
    pairs = list(itertools.combinations(range(n_skills), 2))
    singles = [singles[i] for i in rng.permutation(len(singles))]
    pairs = [pairs[i] for i in rng.permutation(len(pairs))]
    if n_groups > len(singles) + len(pairs):
        raise TaskError(f"cannot plant {n_groups} distinct groups over {n_skills} skills")
    # alternate subset sizes so small suites still mix singles and pairs
    chosen: List[Tuple[int, ...]] = []
    for i in range(n_groups):
        preferred = pairs if i % 2 else singles
        pick = next((s for s in preferred if s not in chosen), None)
        if pick is None:
            pick = next(s for s in singles + pairs if s not in chosen)
        chosen.append(pick)
    return chosen


def _novel_subsets(
    used: Sequence[Tuple[int, ...]], n_skills: int, n: int, rng: np.random.Generator
) -> List[Tuple[int, ...]]:
    """Skill subsets no planted task uses; compositions first, then single skills"""
    candidates = []
    for size in (2, 3, 1):
        combos = [c for c in itertools.combinations(range(n_skills), size) if c not in used]
        candidates += [combos[i] for i in rng.permutation(len(combos))]
    if len(candidates) < n:
        raise TaskError(f"only {len(candidates)} novel skill subsets for {n} held-out tasks")
    return candidates[:n]


class SuiteBuilder:
    """Draws TaskSpecs for a SuiteConfig"""

    def __init__(self, config: SuiteConfig, vocab: Optional[SuiteVocabulary] = None, rng_seed: Optional[int] = None):
        self.config = config
        self.rng = np.random.default_rng(config.seed if rng_seed is None else rng_seed)
        self.vocab = vocab or suite_vocabulary(config)
        self.rules = build_rules(config.n_skills, self.vocab)
        self.generator = SuiteGenerator(self.rules, self.vocab)
        self._next_name = 0

    def build(self) -> Suite:
        cfg = self.config
        subsets = _planted_subsets(cfg.n_skills, min(cfg.n_groups, cfg.n_tasks), self.rng)
        tasks: List[TaskSpec] = []
        for i in range(cfg.n_tasks):
            group = i % len(subsets)
            tasks.append(self.classification_task(len(tasks), subsets[group], group=group))
        for _ in range(cfg.n_span_tasks):
            tasks.append(self.span_task(len(tasks)))

        heldout: List[TaskSpec] = []
        for subset in _novel_subsets(subsets, cfg.n_skills, cfg.n_heldout, self.rng):
            heldout.append(self.classification_task(len(tasks) + len(heldout), subset, heldout=True))

        logger.info(
            f"Generated suite: {len(tasks)} tasks, {len(heldout)} held-out, "
            f"rules {[r.describe() for r in self.rules]}"
        )
        return Suite(config=cfg, tasks=tasks, heldout=heldout, words=self.vocab.all_words())

    def classification_task(
        self,
        task_id: int,
        subset: Sequence[int],
        n_labels: Optional[int] = None,
        group: Optional[int] = None,
        heldout: bool = False,
    ) -> TaskSpec:
        """Draw labels and a label map for a skill subset, re-drawing degenerate tasks"""
        combos = 2 ** len(subset)
        for _ in range(MAX_REDRAWS):
            k = n_labels or int(self.rng.integers(2, min(combos, 4) + 1))
            if not 2 <= k <= min(combos, MAX_LABELS):
                raise TaskError(f"{k} labels cannot be read off {len(subset)} skills")
            labels = [str(w) for w in self.rng.choice(self.vocab.labels, size=k, replace=False)]
            spec = TaskSpec(
                task_id=task_id,
                name=self._take_name(),
                labels=labels,
                skill_set=list(subset),
                label_map=_label_map(len(subset), k, self.rng),
                template=CLASSIFICATION_TEMPLATE,
                generator_seed=int(self.rng.integers(2 ** 31)),
                group=group,
                heldout=heldout,
            )
            drawn = self.generator.sample(spec, 64)
            if len({s.label for s in drawn}) > 1:
                return spec
            logger.warning(f"Task {spec.name} produced a constant label, re-drawing")
        raise TaskError(f"could not draw a non-degenerate task over skills {list(subset)}")

    def span_task(self, task_id: int) -> TaskSpec:
        return TaskSpec(
            task_id=task_id,
            name=self._take_name(),
            kind="span",
            template=SPAN_TEMPLATE,
            generator_seed=int(self.rng.integers(2 ** 31)),
        )

    def _take_name(self) -> str:
        if self._next_name >= len(self.vocab.names):
            raise TaskError("ran out of task names")
        name = self.vocab.names[self._next_name]
        self._next_name += 1
        return name


def generate_synthetic_suite(
    seed: int, n_tasks: int, n_skills: int, **kwargs
) -> Tuple[Suite, SuiteGenerator]:
    """
    Generate a suite and the generator that samples its data

    Args:
        seed: Suite seed; equal seeds give identical suites
        n_tasks: Pre-training classification tasks
        n_skills: Number of primitive rules F
        **kwargs: Remaining SuiteConfig fields

    Returns:
        (suite, generator)
    """
    if n_tasks < 2 or n_skills < 2:
        raise TaskError("a suite needs at least two tasks and two skills")
    builder = SuiteBuilder(SuiteConfig(seed=seed, n_tasks=n_tasks, n_skills=n_skills, **kwargs))
    return builder.build(), builder.generator


def suite_vocabulary(config: SuiteConfig) -> SuiteVocabulary:
    n_names = config.n_tasks + config.n_heldout + config.n_span_tasks + EXTRA_NAMES
    return build_vocabulary(config.seed, count_markers(config.n_skills), n_names)


def generator_for(suite: Suite) -> SuiteGenerator:
    """Rebuild the data generator of a stored suite"""
    vocab = suite_vocabulary(suite.config)
    return SuiteGenerator(build_rules(suite.config.n_skills, vocab), vocab)


def many_label_task(suite: Suite, n_labels: int, task_id: Optional[int] = None) -> TaskSpec:
    """A task with n_labels (2..30) labels over a skill subset wide enough to separate them"""
    if not 2 <= n_labels <= MAX_LABELS:
        raise TaskError(f"label count must be in [2, {MAX_LABELS}], got {n_labels}")
    cfg = suite.config
    width = max(1, int(np.ceil(np.log2(n_labels))))
    if width > cfg.n_skills:
        raise TaskError(f"{n_labels} labels need {width} skills, suite has {cfg.n_skills}")
    builder = SuiteBuilder(cfg, rng_seed=cfg.seed + 7919 * n_labels)
    builder._next_name = cfg.n_tasks + cfg.n_heldout + cfg.n_span_tasks
    subset = tuple(sorted(int(j) for j in builder.rng.choice(cfg.n_skills, size=width, replace=False)))
    tid = task_id if task_id is not None else len(suite.all_tasks())
    return builder.classification_task(tid, subset, n_labels=n_labels, heldout=True)
