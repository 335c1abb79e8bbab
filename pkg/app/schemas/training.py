"""Training and fine-tuning schemas"""
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, Field, model_validator


class PretrainConfig(BaseModel):
    """
    Multi-task pre-training settings

    Rates left unset follow the variant: deep runs the fast-slow split
    (routers 5e-4, prompts 1e-4), shallow a single rate of 1e-3.
    """
    steps: int = Field(default=20000, ge=0)
    batch: int = Field(default=32, ge=1)
    router_lr: Optional[float] = None
    prompt_lr: Optional[float] = None
    body_lr: float = 1e-3  # encoder and span head, which have no pre-trained weights here
    fast_slow: Optional[bool] = None
    variant: Literal["shallow", "deep"] = "deep"
    tau: Optional[float] = Field(default=None, gt=0)  # None samples at the model temperature
    seed: int = 0
    log_every: int = Field(default=100, ge=1)
    eval_instances: int = Field(default=256, ge=1)

    @model_validator(mode="after")
    def resolve_learning_rates(self) -> "PretrainConfig":
        if self.fast_slow is None:
            self.fast_slow = self.variant == "deep"
        if self.router_lr is None:
            self.router_lr = 5e-4 if self.fast_slow else 1e-3
        if not self.fast_slow:
            self.prompt_lr = self.router_lr
        elif self.prompt_lr is None:
            self.prompt_lr = 1e-4
        if self.router_lr <= 0 or self.prompt_lr <= 0:
            raise ValueError("learning rates must be positive")
        return self


class FinetuneConfig(BaseModel):
    """
    Two-stage downstream tuning settings

    Gradient budgets count epochs; black-box budgets count model forwards.
    Unset learning rates, step sizes and budgets take the variant's defaults.
    """
    paradigm: Literal["gradient", "blackbox"] = "gradient"
    variant: Literal["shallow", "deep"] = "deep"
    stage1_budget: Optional[int] = None
    stage2_budget: Optional[int] = None
    total_budget: int = 8000
    stage1_lr: Optional[float] = None
    stage2_lr: Optional[float] = None
    router_init_std: float = 0.5
    router_box: float = 3.0
    bo_rounds: int = Field(default=2, ge=1)
    cma_sigma: Optional[float] = None
    cma_sigma_inner: Optional[float] = None
    cma_visit_evals: int = Field(default=200, ge=1)
    tau: Optional[float] = Field(default=None, gt=0)  # relaxed gates of gradient stage I
    seed: int = 0

    @model_validator(mode="after")
    def resolve_variant_defaults(self) -> "FinetuneConfig":
        deep = self.variant == "deep"
        if self.stage1_lr is None:
            self.stage1_lr = 3e-3 if deep else 1e-2
        if self.stage2_lr is None:
            self.stage2_lr = 2e-5 if deep else 3e-4
        if self.cma_sigma is None:
            self.cma_sigma = 5e-2 if deep else 0.1
        if self.cma_sigma_inner is None:
            self.cma_sigma_inner = 1e-2
        if min(self.stage1_lr, self.stage2_lr, self.cma_sigma, self.cma_sigma_inner) <= 0:
            raise ValueError("learning rates and step sizes must be positive")
        return self

    @model_validator(mode="after")
    def resolve_budgets(self) -> "FinetuneConfig":
        if self.paradigm == "gradient":
            if self.stage1_budget is None:
                self.stage1_budget = 500
            if self.stage2_budget is None:
                self.stage2_budget = 500
        else:
            if self.stage1_budget is None:
                self.stage1_budget = 100 if self.variant == "deep" else 200
            if self.stage2_budget is None:
                self.stage2_budget = self.total_budget - self.stage1_budget
            if self.stage1_budget + self.stage2_budget > self.total_budget:
                raise ValueError("stage budgets exceed the total forward budget")
        if self.stage1_budget < 0 or self.stage2_budget < 0:
            raise ValueError("budgets must be non-negative")
        return self


class MetricRecord(BaseModel):
    """One line of the metrics log"""
    step: int
    stage: str
    task: str
    loss: Optional[float] = None
    dev_acc: Optional[float] = None


class StageResult(BaseModel):
    """Outcome of one fine-tuning stage"""
    stage: Literal["stage1", "stage2", "baseline"]
    best_dev: float
    best_train_loss: float
    forwards: int = 0
    steps: int = 0
    seconds: float = 0.0
    test_score: Optional[float] = None


class FinetuneReport(BaseModel):
    """Summary of a downstream adaptation run"""
    task: str
    paradigm: str
    variant: str
    seed: int
    stage1: Optional[StageResult] = None
    stage2: Optional[StageResult] = None
    test_score: Optional[float] = None
    metric: str = "accuracy"
    router_masks: List[List[int]] = []
    router_logits: List[List[float]] = []
    gradient_tapes: int = 0  # tapes built during the run
    baseline: Optional[StageResult] = None


class ScoreSummary(BaseModel):
    """Mean and (population) standard deviation across runs"""
    mean: float
    std: float
    n: int
    scores: List[float]


class PretrainSummary(BaseModel):
    steps: int
    final_loss: Optional[float]
    task_accuracy: Dict[str, float]
    mean_accuracy: float
