"""Task suite schemas"""
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, model_validator

Span = Tuple[int, int]

MAX_LABELS = 30


class SuiteConfig(BaseModel):
    """Parameters of a synthetic task suite"""
    seed: int = 0
    n_tasks: int = Field(default=12, ge=2)
    n_heldout: int = Field(default=4, ge=0)
    n_skills: int = Field(default=6, ge=2)
    n_groups: int = Field(default=4, ge=1)
    n_span_tasks: int = Field(default=0, ge=0)
    instances_per_task: int = Field(default=2000, ge=1)


class TaskSpec(BaseModel):
    """A synthetic task definition"""
    task_id: int
    name: str
    kind: Literal["classification", "span"] = "classification"
    labels: List[str] = []
    skill_set: List[int] = []
    label_map: List[int] = []  # skill-bit combination -> label index
    template: str
    generator_seed: int
    group: Optional[int] = None  # planted ground-truth group
    heldout: bool = False

    @model_validator(mode="after")
    def check_labels(self) -> "TaskSpec":
        if len(set(self.labels)) != len(self.labels):
            raise ValueError(f"task {self.name}: duplicate labels")
        if self.kind == "classification":
            if not self.skill_set:
                raise ValueError(f"task {self.name}: empty skill set")
            if not 1 <= len(self.labels) <= MAX_LABELS:
                raise ValueError(f"task {self.name}: {len(self.labels)} labels")
            if len(self.label_map) != 2 ** len(self.skill_set):
                raise ValueError(f"task {self.name}: label map does not cover skill combinations")
            if any(not 0 <= i < len(self.labels) for i in self.label_map):
                raise ValueError(f"task {self.name}: label map out of range")
        return self

    @property
    def is_span(self) -> bool:
        return self.kind == "span"


class RawSample(BaseModel):
    """A sample before MRC conversion"""
    text: str
    label: Optional[str] = None
    answer: Optional[Span] = None  # word span inside text for span tasks


class MrcInstance(BaseModel):
    """
    Unified sample: context + query, answer span inside `region`

    Spans are inclusive token indices into the query (classification) or the
    context (span extraction).
    """
    task_id: int
    context: List[int]
    query: List[int]
    gold_span: Span
    candidates: List[Span]
    region: Literal["query", "context"] = "query"
    label: Optional[str] = None

    @model_validator(mode="after")
    def check_spans(self) -> "MrcInstance":
        length = len(self.query) if self.region == "query" else len(self.context)
        for s, e in self.candidates:
            if not 0 <= s <= e < length:
                raise ValueError(f"candidate {(s, e)} outside the {self.region}")
        if tuple(self.gold_span) not in {tuple(c) for c in self.candidates}:
            raise ValueError("gold span is not a candidate")
        return self

    @property
    def text_length(self) -> int:
        """Tokens after the prompt: context, separator, query"""
        return len(self.context) + 1 + len(self.query)

    def region_offset(self) -> int:
        return len(self.context) + 1 if self.region == "query" else 0

    def absolute(self, span: Span, prompt_len: int) -> Span:
        """Map a region span to positions in the full prompted sequence"""
        off = prompt_len + self.region_offset()
        return span[0] + off, span[1] + off

    def span_tokens(self, span: Span) -> List[int]:
        tokens = self.query if self.region == "query" else self.context
        return tokens[span[0]:span[1] + 1]


class FewShotSplit(BaseModel):
    """Label-balanced train/dev draw plus the remaining test pool"""
    task_id: int
    train: List[MrcInstance]
    dev: List[MrcInstance]
    test: List[MrcInstance]


class Suite(BaseModel):
    """Generated suite: pre-training tasks, held-out tasks and the vocabulary"""
    config: SuiteConfig
    tasks: List[TaskSpec]
    heldout: List[TaskSpec]
    words: List[str]  # vocabulary words beyond the fixed template set

    def all_tasks(self) -> List[TaskSpec]:
        return self.tasks + self.heldout

    def by_name(self, name: str) -> TaskSpec:
        for t in self.all_tasks():
            if t.name == name:
                return t
        raise KeyError(name)
