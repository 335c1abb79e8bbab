"""
Forward passes, losses and scores over MRC instances
"""
from dataclasses import dataclass
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import TaskError
from app.core.numcore import Tensor
from app.models.encoder import extract_span, mrc_loss
from app.models.mp2_model import ModularPromptModel
from app.schemas.task import MrcInstance, Span
from app.schemas.training import ScoreSummary
from app.services.analysis_service import span_f1
from app.services.task_service import Batch, collate

Metric = Literal["accuracy", "span_f1"]
EVAL_CHUNK = 256


@dataclass
class SplitScore:
    """Metric and mean loss of one pass over a split"""

    score: float
    loss: float
    predictions: List[Span]


def batch_loss(model: ModularPromptModel, batch: Batch, prompts: Sequence[Optional[Tensor]]) -> Tensor:
    logits = model.forward(batch.tokens, prompts)
    return mrc_loss(logits, batch.gold_start, batch.gold_end, model.config.prompt_len)


def decode_batch(
    model: ModularPromptModel, batch: Batch, prompts: Sequence[Optional[Tensor]]
) -> Tuple[List[Span], float]:
    """Candidate-constrained spans (region coordinates) and the batch loss"""
    L = model.config.prompt_len
    logits = model.forward(batch.tokens, prompts)
    loss = mrc_loss(logits, batch.gold_start, batch.gold_end, L).item()
    start, end = logits.start.data, logits.end.data
    spans = []
    for row, inst in enumerate(batch.instances):
        off = L + inst.region_offset()
        absolute = [(s + off, e + off) for s, e in inst.candidates]
        s, e = extract_span(start[row], end[row], absolute)
        spans.append((s - off, e - off))
    return spans, loss


def _instance_score(inst: MrcInstance, span: Span, metric: Metric) -> float:
    if metric == "accuracy":
        return float(tuple(span) == tuple(inst.gold_span))
    return span_f1(inst.span_tokens(span), inst.span_tokens(tuple(inst.gold_span)))


def score_instances(
    model: ModularPromptModel,
    prompts: Sequence[Optional[Tensor]],
    instances: Sequence[MrcInstance],
    metric: Metric = "accuracy",
) -> SplitScore:
    """One model forward over a whole split, chunked internally"""
    if not instances:
        raise TaskError("cannot score an empty split")
    L = model.config.prompt_len
    predictions: List[Span] = []
    weighted_loss = 0.0
    for i in range(0, len(instances), EVAL_CHUNK):
        chunk = instances[i:i + EVAL_CHUNK]
        spans, loss = decode_batch(model, collate(chunk, L), prompts)
        predictions += spans
        weighted_loss += loss * len(chunk)
    scores = [_instance_score(inst, span, metric) for inst, span in zip(instances, predictions)]
    return SplitScore(score=float(np.mean(scores)), loss=weighted_loss / len(instances), predictions=predictions)


def evaluate(
    model: ModularPromptModel,
    task_id: int,
    instances: Sequence[MrcInstance],
    metric: Metric = "accuracy",
) -> float:
    """Deterministic test score with binarized gates (or the task's tuned prompts)"""
    if not instances:
        raise TaskError("empty test set")
    return score_instances(model, model.task_prompts(task_id), instances, metric).score


def summarize_scores(scores: Sequence[float]) -> ScoreSummary:
    """Mean and population standard deviation over runs"""
    if not scores:
        raise TaskError("no scores to summarize")
    values = np.asarray(scores, dtype=np.float64)
    return ScoreSummary(mean=float(values.mean()), std=float(values.std(ddof=0)), n=len(values), scores=list(map(float, values)))
