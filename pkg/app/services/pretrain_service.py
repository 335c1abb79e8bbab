"""Multi-task pre-training of the modular prompt library"""
import logging
import math
from typing import Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from app.core.errors import ConfigError, NumericFault
from app.core.logging import MetricsLogger
from app.core.numcore import GradTape
from app.core.optim import AdamState, adam_step
from app.models.mp2_model import ModularPromptModel
from app.schemas.task import MrcInstance, TaskSpec
from app.schemas.training import MetricRecord, PretrainConfig, PretrainSummary
from app.services.evaluation_service import batch_loss, score_instances
from app.services.task_service import collate, next_pretrain_batch

logger = logging.getLogger(__name__)


class PretrainService:
    """
    Trains routers (fast), prompt banks (slow) and the encoder body

    Each step samples one task uniformly, draws relaxed gates from that
    task's routers and takes one Adam step on the MRC loss.
    """

    def __init__(
        self,
        model: ModularPromptModel,
        tasks: Sequence[TaskSpec],
        pools: Dict[int, List[MrcInstance]],
        config: PretrainConfig,
        metrics: Optional[MetricsLogger] = None,
        show_progress: bool = False,
    ):
        self.model = model
        self.tasks = list(tasks)
        self.pools = pools
        self.config = config
        self.metrics = metrics or MetricsLogger()
        if config.variant != model.variant:
            raise ConfigError(f"pre-training config is for the {config.variant} variant, model is {model.variant}")
        self.show_progress = show_progress
        self.rng = np.random.default_rng(config.seed)
        self.optimizer = AdamState.create({
            "routers": (model.router_parameters(), config.router_lr),
            "prompts": (model.bank_parameters(), config.prompt_lr),
            "body": (model.encoder.body_parameters(), config.body_lr),
        })

    def step(self) -> float:
        """One pre-training step; returns the batch loss"""
        cfg = self.config
        task_id, instances = next_pretrain_batch(self.tasks, self.pools, cfg.batch, self.rng)
        batch = collate(instances, self.model.config.prompt_len)
        gates = self.model.sample_gates(task_id, self.rng, cfg.tau)
        with GradTape() as tape:
            loss = batch_loss(self.model, batch, self.model.composed_prompts(gates))
        value = loss.item()
        if not math.isfinite(value):
            raise NumericFault(f"non-finite pre-training loss at step {self.optimizer.step}")
        adam_step(self.optimizer, tape.backward(loss))
        return value

    def run(self) -> PretrainSummary:
        cfg = self.config
        losses: List[float] = []
        bar = tqdm(range(cfg.steps), desc="pretrain", disable=not self.show_progress)
        for step in bar:
            losses.append(self.step())
            if (step + 1) % cfg.log_every == 0 or step + 1 == cfg.steps:
                window = float(np.mean(losses[-cfg.log_every:]))
                bar.set_postfix(loss=f"{window:.4f}")
                self.metrics.log(MetricRecord(step=step + 1, stage="pretrain", task="all", loss=window))
                logger.debug(f"Step {step + 1}: loss {window:.4f}")

        accuracy = self.task_accuracy()
        mean_acc = float(np.mean(list(accuracy.values()))) if accuracy else 0.0
        for name, acc in accuracy.items():
            self.metrics.log(MetricRecord(step=cfg.steps, stage="pretrain", task=name, dev_acc=acc))
        logger.info(f"Pre-training finished after {cfg.steps} steps: mean accuracy {mean_acc:.3f}")
        return PretrainSummary(
            steps=cfg.steps,
            final_loss=losses[-1] if losses else None,
            task_accuracy=accuracy,
            mean_accuracy=mean_acc,
        )

    def task_accuracy(self) -> Dict[str, float]:
        """Accuracy (or span F1) with binarized routers on each task's first instances"""
        out = {}
        for spec in self.tasks:
            instances = self.pools[spec.task_id][: self.config.eval_instances]
            metric = "span_f1" if spec.is_span else "accuracy"
            prompts = self.model.task_prompts(spec.task_id)
            out[spec.name] = score_instances(self.model, prompts, instances, metric).score
        return out


def pretrain(
    model: ModularPromptModel,
    tasks: Sequence[TaskSpec],
    pools: Dict[int, List[MrcInstance]],
    config: PretrainConfig,
    metrics: Optional[MetricsLogger] = None,
    show_progress: bool = False,
) -> PretrainSummary:
    """Train ``model`` in place"""
    return PretrainService(model, tasks, pools, config, metrics, show_progress).run()
