"""
Two-stage downstream adaptation

Stage I learns a fresh router per bank with every other tensor frozen.
Stage II freezes the routers and tunes only the selected prompts. Both
stages run under the gradient paradigm (Adam) or the black-box paradigm
(GP-UCB for routers, CMA-ES over pre-fused intrinsic vectors).
"""
import hashlib
import logging
import math
import time
import warnings
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from app.core.errors import ConfigError, EmptySkillSetWarning, FrozenTensorError, OptimizerError
from app.core.logging import MetricsLogger
from app.core.numcore import GradTape, Tensor
from app.core.optim import AdamState, CmaesOptimizer, GpState, adam_step, bo_observe, bo_suggest
from app.models.modular_prompt import (
    PromptBank,
    binarize_router,
    compose_prompt,
    fuse_intrinsic,
    layer_prompts,
    materialize_intrinsic,
    sample_relaxed,
)
from app.models.mp2_model import ModularPromptModel
from app.schemas.task import FewShotSplit, TaskSpec
from app.schemas.training import FinetuneConfig, FinetuneReport, MetricRecord, StageResult
from app.services.evaluation_service import batch_loss, evaluate, score_instances
from app.services.task_service import collate

logger = logging.getLogger(__name__)

LOSS_WEIGHT = 1e-3  # black-box router objective: dev score - LOSS_WEIGHT * train loss


class ForwardCounter:
    """Counts batched model forwards against an optional budget"""

    def __init__(self, budget: Optional[int] = None):
        self.budget = budget
        self.used = 0

    @property
    def remaining(self) -> float:
        return math.inf if self.budget is None else self.budget - self.used

    def charge(self, n: int = 1) -> None:
        if n > self.remaining:
            raise OptimizerError(f"forward budget exhausted: {self.used} used of {self.budget}")
        self.used += n


def tensor_digest(t: Tensor) -> str:
    return hashlib.sha256(t.data.tobytes()).hexdigest()


class FreezeGuard:
    """Byte-level hashes of tensors that must not change"""

    def __init__(self, tensors: Dict[str, Tensor]):
        self.digests = {name: tensor_digest(t) for name, t in tensors.items()}
        self.tensors = dict(tensors)

    def changed(self) -> List[str]:
        return [n for n, t in self.tensors.items() if tensor_digest(t) != self.digests[n]]

    def verify(self) -> None:
        changed = self.changed()
        if changed:
            raise FrozenTensorError(f"frozen tensors changed: {changed[:5]}")

    def __enter__(self) -> "FreezeGuard":
        return self

    def __exit__(self, exc_type, *exc) -> None:
        if exc_type is None:
            self.verify()


@dataclass
class Incumbent:
    """Best-dev candidate of a stage; ties go to the lower train loss"""

    dev: float = -math.inf
    loss: float = math.inf
    payload: object = None

    def offer(self, dev: float, loss: float, payload: Callable[[], object]) -> bool:
        if (dev, -loss) > (self.dev, -self.loss):
            self.dev, self.loss, self.payload = dev, loss, payload()
            return True
        return False


def active_mask(logits: np.ndarray, layer: int) -> np.ndarray:
    """Binarized gates; an all-closed router falls back to its largest logit"""
    mask = binarize_router(logits).astype(np.float64)
    if not mask.any():
        warnings.warn(
            f"router of bank {layer} selects no prompt; using prompt {int(np.argmax(logits))}",
            EmptySkillSetWarning,
        )
        mask[int(np.argmax(logits))] = 1.0
    return mask


class FinetuneService:
    """Adapts a pre-trained model to one downstream task"""

    def __init__(
        self,
        model: ModularPromptModel,
        spec: TaskSpec,
        split: FewShotSplit,
        config: FinetuneConfig,
        metrics: Optional[MetricsLogger] = None,
        show_progress: bool = False,
    ):
        if config.variant != model.variant:
            raise ConfigError(f"fine-tuning config is for the {config.variant} variant, model is {model.variant}")
        self.model = model
        self.spec = spec
        self.split = split
        self.config = config
        self.metrics = metrics or MetricsLogger()
        self.show_progress = show_progress
        self.metric = "span_f1" if spec.is_span else "accuracy"
        self.rng = np.random.default_rng(config.seed)
        self.task_id = spec.task_id
        self.L = model.config.prompt_len
        self.train_batch = collate(split.train, self.L)
        self.stage1: Optional[StageResult] = None
        self.stage2: Optional[StageResult] = None
        self.stage2_prompts: List[PromptBank] = []
        self.forwards = ForwardCounter()

    # -- shared helpers -----------------------------------------------------

    def fresh_router(self) -> None:
        self.model.overrides.pop(self.task_id, None)
        self.model.add_router(self.task_id, self.rng, self.config.router_init_std)

    def ensure_router(self) -> None:
        if self.task_id not in self.model.routers:
            self.fresh_router()

    def _frozen_except_router(self) -> Dict[str, Tensor]:
        own = {r.w.name for r in self.model.routers[self.task_id]}
        return {n: t for n, t in self.model.named_tensors().items() if n not in own}

    def _score(self, prompts: Sequence[Optional[Tensor]]) -> Tuple[float, float]:
        """(dev score, train loss): one forward on each split"""
        self.forwards.charge(2)
        loss = batch_loss(self.model, self.train_batch, prompts).item()
        dev = score_instances(self.model, prompts, self.split.dev, self.metric).score
        return dev, loss

    def _dev_score(self, prompts: Sequence[Optional[Tensor]]) -> float:
        self.forwards.charge(1)
        return score_instances(self.model, prompts, self.split.dev, self.metric).score

    def _train_loss(self, prompts: Sequence[Optional[Tensor]]) -> float:
        self.forwards.charge(1)
        return batch_loss(self.model, self.train_batch, prompts).item()

    def _masked_prompts(self, logits: Sequence[np.ndarray]) -> List[Optional[Tensor]]:
        masks = [binarize_router(w).astype(np.float32) for w in logits]
        return self.model.composed_prompts(masks)

    def _log(self, step: int, stage: str, loss: Optional[float], dev: Optional[float]) -> None:
        self.metrics.log(MetricRecord(step=step, stage=stage, task=self.spec.name, loss=loss, dev_acc=dev))

    def _result(self, stage: str, inc: Incumbent, steps: int, started: float, forwards: int) -> StageResult:
        return StageResult(
            stage=stage, best_dev=inc.dev, best_train_loss=inc.loss,
            forwards=forwards, steps=steps, seconds=time.perf_counter() - started,
        )

    # -- stage I ------------------------------------------------------------

    def finetune_router_stage(self) -> StageResult:
        """Learn the task's routers with prompts, projections, encoder and head frozen"""
        cfg = self.config
        if cfg.stage1_budget == 0:
            raise OptimizerError("stage I budget is zero")
        started, before = time.perf_counter(), self.forwards.used
        self.fresh_router()
        routers = self.model.routers[self.task_id]
        with FreezeGuard(self._frozen_except_router()):
            if cfg.paradigm == "gradient":
                inc, steps = self._router_stage_gradient()
            else:
                inc, steps = self._router_stage_blackbox()
            for r, w in zip(routers, inc.payload):
                r.w.assign(w)
        self.stage1 = self._result("stage1", inc, steps, started, self.forwards.used - before)
        logger.info(f"[{self.spec.name}] stage I best dev {inc.dev:.4f} after {steps} steps")
        return self.stage1

    def _router_stage_gradient(self) -> Tuple[Incumbent, int]:
        cfg = self.config
        routers = self.model.routers[self.task_id]
        params = [r.w for r in routers]
        adam = AdamState.create({"routers": (params, cfg.stage1_lr)})
        tau = self.model.tau if cfg.tau is None else cfg.tau
        inc = Incumbent()

        def snapshot() -> List[np.ndarray]:
            return [p.numpy() for p in params]

        masked = self._masked_prompts([p.data for p in params])
        inc.offer(self._dev_score(masked), self._train_loss(masked), snapshot)

        for epoch in tqdm(range(cfg.stage1_budget), desc="stage I", disable=not self.show_progress):
            draws = [self.rng.uniform(1e-7, 1.0 - 1e-7, size=p.shape[0]) for p in params]
            with GradTape(auto_watch=False) as tape:
                tape.watch(*params)
                gates = [sample_relaxed(p, tau, u) for p, u in zip(params, draws)]
                loss = batch_loss(self.model, self.train_batch, self.model.composed_prompts(gates))
            self.forwards.charge(1)
            adam_step(adam, tape.backward(loss))
            dev = self._dev_score(self._masked_prompts([p.data for p in params]))
            inc.offer(dev, loss.item(), snapshot)
            self._log(epoch + 1, "stage1", loss.item(), dev)
        return inc, cfg.stage1_budget

    def _router_stage_blackbox(self) -> Tuple[Incumbent, int]:
        cfg = self.config
        routers = self.model.routers[self.task_id]
        n_banks, K = len(routers), self.model.K
        box = cfg.router_box
        current = [np.clip(r.w.data.astype(np.float64), -box, box) for r in routers]
        budget_evals = cfg.stage1_budget // 2
        if budget_evals < 1:
            raise OptimizerError(f"stage I budget {cfg.stage1_budget} cannot pay for one evaluation")
        cache: Dict[bytes, Tuple[float, float]] = {}

        def objective(logits: Sequence[np.ndarray]) -> Tuple[float, float, float]:
            key = np.concatenate([binarize_router(w) for w in logits]).tobytes()
            if key not in cache:
                cache[key] = self._score(self._masked_prompts(logits))
            dev, loss = cache[key]
            return dev - LOSS_WEIGHT * loss, dev, loss

        inc = Incumbent()
        value, dev, loss = objective(current)
        best_value = value
        inc.offer(dev, loss, lambda: [w.copy() for w in current])
        evals = 1
        rounds = 1 if n_banks == 1 else cfg.bo_rounds
        visits = rounds * n_banks
        per_visit = max(1, (budget_evals - 1) // visits)

        for visit in range(visits):
            layer = visit % n_banks
            gp = GpState.create(np.full(K, -box), np.full(K, box))
            bo_observe(gp, current[layer], best_value)
            for _ in range(per_visit):
                if evals >= budget_evals:
                    break
                x = bo_suggest(gp, self.rng)
                trial = list(current)
                trial[layer] = x
                value, dev, loss = objective(trial)
                evals += 1
                bo_observe(gp, x, value)
                inc.offer(dev, loss, lambda: [w.copy() for w in trial])
                if value > best_value:
                    best_value, current = value, trial
                self._log(evals, "stage1", loss, dev)
        return inc, evals

    # -- stage II -----------------------------------------------------------

    def finetune_prompt_stage(self) -> StageResult:
        """Tune only the prompts the binarized routers select"""
        cfg = self.config
        self.ensure_router()
        if cfg.stage2_budget == 0:
            raise OptimizerError("stage II budget is zero")
        if cfg.paradigm == "blackbox" and cfg.stage2_budget < 2:
            raise OptimizerError("stage II budget cannot pay for scoring the selected prompts")
        started, before = time.perf_counter(), self.forwards.used
        logits = [r.w.data.astype(np.float64) for r in self.model.routers[self.task_id]]
        masks = [active_mask(w, i) for i, w in enumerate(logits)]
        baseline_prompts = [compose_prompt(b, m) for b, m in zip(self.model.banks, masks)]

        with FreezeGuard(self.model.named_tensors()):
            dev, loss = self._score(layer_prompts(baseline_prompts, self.model.config.n_layers))
            inc = Incumbent()
            inc.offer(dev, loss, lambda: None)
            if cfg.paradigm == "gradient":
                steps = self._prompt_stage_gradient(masks, inc)
            else:
                steps = self._prompt_stage_blackbox(masks, inc)
        if inc.payload is not None:
            self.model.set_override(self.task_id, inc.payload)
        self.stage2 = self._result("stage2", inc, steps, started, self.forwards.used - before)
        logger.info(f"[{self.spec.name}] stage II best dev {inc.dev:.4f} after {steps} steps")
        return self.stage2

    def _prompt_stage_gradient(self, masks: List[np.ndarray], inc: Incumbent) -> int:
        cfg = self.config
        working = [PromptBank(b.layer_index, b.intrinsic, b.projection, b.prompt_len, b.hidden) for b in self.model.banks]
        params = [w.materialize() for w in working]
        self.stage2_prompts = working
        adam = AdamState.create({"prompts": (params, cfg.stage2_lr)})
        gate_tensors = [Tensor(m) for m in masks]
        n_layers = self.model.config.n_layers

        for epoch in tqdm(range(cfg.stage2_budget), desc="stage II", disable=not self.show_progress):
            with GradTape(auto_watch=False) as tape:
                tape.watch(*params)
                prompts = [compose_prompt(w, g) for w, g in zip(working, gate_tensors)]
                loss = batch_loss(self.model, self.train_batch, layer_prompts(prompts, n_layers))
            self.forwards.charge(1)
            grads = tape.backward(loss)
            for p, m in zip(params, masks):
                grads[p] = grads[p] * m[:, None, None]
            adam_step(adam, grads)
            current = [compose_prompt(w, g) for w, g in zip(working, gate_tensors)]
            dev = self._dev_score(layer_prompts(current, n_layers))
            inc.offer(dev, loss.item(), lambda: [c.numpy() for c in current])
            self._log(epoch + 1, "stage2", loss.item(), dev)
        return cfg.stage2_budget

    def _prompt_stage_blackbox(self, masks: List[np.ndarray], inc: Incumbent) -> int:
        bases = [fuse_intrinsic(b, m) for b, m in zip(self.model.banks, masks)]
        projections = [b.projection for b in self.model.banks]
        # two forwards already paid for scoring the unmodified prompts
        return self._cma_search(bases, projections, self.config.stage2_budget - 2, inc, "stage2")

    def _cma_search(
        self,
        bases: List[np.ndarray],
        projections: List[Tensor],
        budget: int,
        inc: Incumbent,
        stage: str,
    ) -> int:
        """
        CMA-ES over offsets added to intrinsic vectors, one optimizer per bank

        Fitness is train loss; each generation's best candidate is scored on dev.
        Deep banks are visited round-robin, ``cma_visit_evals`` forwards per visit.
        """
        cfg = self.config
        n_banks, n_layers = len(bases), self.model.config.n_layers
        L, D = self.L, self.model.config.hidden
        sigmas = [cfg.cma_sigma] + [cfg.cma_sigma_inner] * (n_banks - 1)
        optimizers = [
            CmaesOptimizer(np.zeros_like(z), s, seed=int(self.rng.integers(2 ** 31)))
            for z, s in zip(bases, sigmas)
        ]
        deltas = [np.zeros_like(z) for z in bases]

        def prompts_for(ds: Sequence[np.ndarray]) -> List[Optional[Tensor]]:
            ps = [materialize_intrinsic(z + d, A, L, D) for z, d, A in zip(bases, ds, projections)]
            return layer_prompts(ps, n_layers)

        spent, generations, layer = 0, 0, 0
        visit_limit = budget if n_banks == 1 else cfg.cma_visit_evals
        while budget - spent >= min(o.state.lam for o in optimizers) + 1:
            visit_spent = 0
            opt = optimizers[layer]
            cost = opt.state.lam + 1
            while visit_spent < visit_limit and budget - spent >= cost:
                xs = opt.ask()
                fitness = []
                for x in xs:
                    trial = list(deltas)
                    trial[layer] = x
                    fitness.append(self._train_loss(prompts_for(trial)))
                opt.tell(xs, fitness)
                deltas[layer] = opt.best_x
                best = int(np.argmin(fitness))
                trial = list(deltas)
                trial[layer] = xs[best]
                dev = self._dev_score(prompts_for(trial))
                inc.offer(dev, fitness[best], lambda: [p.numpy() for p in prompts_for(trial)[:n_banks]])
                spent += cost
                visit_spent += cost
                generations += 1
                self._log(generations, stage, fitness[best], dev)
            if visit_spent == 0:
                break
            layer = (layer + 1) % n_banks
        return generations

    # -- baseline and full runs ---------------------------------------------

    def random_prompt_baseline(self, budget: Optional[int] = None) -> StageResult:
        """
        Black-box tune randomly projected prompts from scratch

        No bank and no router: the search starts from a zero intrinsic vector
        behind fresh random projections, with the same CMA-ES settings.
        """
        cfg = self.config
        budget = cfg.total_budget if budget is None else budget
        started = time.perf_counter()
        outer, self.forwards = self.forwards, ForwardCounter(budget)
        n_banks = len(self.model.banks)
        d = self.model.banks[0].d
        LD = self.L * self.model.config.hidden
        projections = [Tensor(self.rng.normal(0.0, 1.0 / math.sqrt(d), size=(LD, d))) for _ in range(n_banks)]
        bases = [np.zeros(d) for _ in range(n_banks)]
        inc = Incumbent()
        try:
            with FreezeGuard(self.model.named_tensors()):
                dev, loss = self._score(self._zero_prompts(n_banks))
                inc.offer(dev, loss, lambda: None)
                steps = self._cma_search(bases, projections, budget - 2, inc, "baseline")
            result = self._result("baseline", inc, steps, started, self.forwards.used)
        finally:
            self.forwards = outer
        prompts = self._zero_prompts(n_banks) if inc.payload is None else layer_prompts(
            [Tensor(p) for p in inc.payload], self.model.config.n_layers
        )
        result.test_score = score_instances(self.model, prompts, self.split.test, self.metric).score
        logger.info(f"[{self.spec.name}] random-prompt baseline best dev {inc.dev:.4f}")
        return result

    def _zero_prompts(self, n_banks: int) -> List[Optional[Tensor]]:
        zeros = [Tensor(np.zeros((self.L, self.model.config.hidden))) for _ in range(n_banks)]
        return layer_prompts(zeros, self.model.config.n_layers)

    def run(self, stages: Sequence[str] = ("1", "2")) -> FinetuneReport:
        """Run the requested stages and score the adapted model on the test split"""
        cfg = self.config
        tapes_before = GradTape.constructed
        if cfg.paradigm == "blackbox":
            self.forwards = ForwardCounter(cfg.total_budget)
        if "1" in stages:
            self.finetune_router_stage()
        else:
            self.ensure_router()
        if "2" in stages:
            self.finetune_prompt_stage()
        test = evaluate(self.model, self.task_id, self.split.test, self.metric)
        routers = self.model.routers[self.task_id]
        return FinetuneReport(
            task=self.spec.name,
            paradigm=cfg.paradigm,
            variant=self.model.variant,
            seed=cfg.seed,
            stage1=self.stage1,
            stage2=self.stage2,
            test_score=test,
            metric=self.metric,
            router_masks=[binarize_router(r).tolist() for r in routers],
            router_logits=[r.w.data.astype(float).tolist() for r in routers],
            gradient_tapes=GradTape.constructed - tapes_before,
        )
