"""
Prompted encoder plus its modular prompt library

The library holds one PromptBank per prompted layer (a single bank at the
input layer for the shallow variant) and one router per (task, bank).
Downstream stage-II results are kept as fixed per-layer prompt overrides.
"""
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Union

import numpy as np

from app.core.errors import CheckpointError, ShapeError
from app.core.numcore import Parameter, Tensor
from app.models.encoder import EncoderConfig, PromptedEncoder, SpanLogits
from app.models.modular_prompt import (
    GateSample,
    PromptBank,
    RouterLogits,
    binary_gates,
    compose_prompt,
    draw_gates,
    layer_prompts,
)

Variant = Literal["shallow", "deep"]
Gates = Union[GateSample, Tensor, Sequence[float]]


class ModularPromptModel:
    """Encoder, prompt banks, per-task routers and optional prompt overrides"""

    def __init__(
        self,
        encoder: PromptedEncoder,
        banks: List[PromptBank],
        variant: Variant,
        tau: float = 0.5,
    ):
        expected = 1 if variant == "shallow" else encoder.config.prompted_layers
        if len(banks) != expected:
            raise ShapeError(f"{variant} variant needs {expected} banks, got {len(banks)}")
        self.encoder = encoder
        self.banks = banks
        self.variant = variant
        self.tau = tau
        self.routers: Dict[int, List[RouterLogits]] = {}
        self.overrides: Dict[int, List[Parameter]] = {}

    @classmethod
    def initialize(
        cls,
        config: EncoderConfig,
        variant: Variant,
        n_prompts: int,
        intrinsic_dim: int,
        task_ids: Iterable[int],
        rng: np.random.Generator,
        tau: float = 0.5,
    ) -> "ModularPromptModel":
        encoder = PromptedEncoder.initialize(config, rng)
        n_banks = 1 if variant == "shallow" else config.prompted_layers
        banks = [
            PromptBank.initialize(i, n_prompts, config.prompt_len, config.hidden, intrinsic_dim, rng)
            for i in range(n_banks)
        ]
        model = cls(encoder, banks, variant, tau)
        for task_id in task_ids:
            model.add_router(task_id, rng)
        return model

    @property
    def config(self) -> EncoderConfig:
        return self.encoder.config

    @property
    def K(self) -> int:
        return self.banks[0].K

    def add_router(self, task_id: int, rng: np.random.Generator, std: float = 0.5) -> List[RouterLogits]:
        """Allocate a fresh Normal(0, std^2) router for every bank"""
        routers = [
            RouterLogits.initialize(b.layer_index, b.K, rng, std, name=f"router.{task_id}.{b.layer_index}")
            for b in self.banks
        ]
        self.routers[task_id] = routers
        return routers

    def router_parameters(self, task_id: Optional[int] = None) -> List[Parameter]:
        ids = [task_id] if task_id is not None else sorted(self.routers)
        return [r.w for tid in ids for r in self.routers[tid]]

    def bank_parameters(self) -> List[Parameter]:
        params: List[Parameter] = []
        for b in self.banks:
            params += [b.intrinsic, b.projection]
        return params

    # -- gates and prompts --------------------------------------------------

    def sample_gates(self, task_id: int, rng: np.random.Generator, tau: Optional[float] = None) -> List[GateSample]:
        """One relaxed gate sample per bank, at the model temperature unless ``tau`` is given"""
        tau = self.tau if tau is None else tau
        return [draw_gates(r, tau, rng) for r in self.routers[task_id]]

    def binary_gates(self, task_id: int) -> List[GateSample]:
        return [binary_gates(r) for r in self.routers[task_id]]

    def composed_prompts(self, gates: Sequence[Gates]) -> List[Optional[Tensor]]:
        if len(gates) != len(self.banks):
            raise ShapeError(f"{len(gates)} gate vectors for {len(self.banks)} banks")
        prompts = [compose_prompt(b, g) for b, g in zip(self.banks, gates)]
        return layer_prompts(prompts, self.config.n_layers)

    def task_prompts(self, task_id: int) -> List[Optional[Tensor]]:
        """Inference prompts: the stage-II override if present, else binarized routing"""
        if task_id in self.overrides:
            return layer_prompts(self.overrides[task_id], self.config.n_layers)
        return self.composed_prompts(self.binary_gates(task_id))

    def set_override(self, task_id: int, prompts: Sequence[Union[Tensor, np.ndarray]]) -> None:
        if len(prompts) != len(self.banks):
            raise ShapeError(f"{len(prompts)} override prompts for {len(self.banks)} banks")
        self.overrides[task_id] = [
            Parameter(p.data if isinstance(p, Tensor) else p, name=f"override.{task_id}.{i}")
            for i, p in enumerate(prompts)
        ]

    # -- forward ------------------------------------------------------------

    def forward(self, tokens: np.ndarray, prompts: Sequence[Optional[Tensor]]) -> SpanLogits:
        hidden = self.encoder.encode_with_prompts(tokens, prompts)
        return self.encoder.mrc_logits(hidden)

    # -- persistence --------------------------------------------------------

    def named_tensors(self) -> Dict[str, Parameter]:
        """Every live tensor under a unique name, in a stable order"""
        named: Dict[str, Parameter] = dict(self.encoder.params)
        for b in self.banks:
            named[b.intrinsic.name] = b.intrinsic
            named[b.projection.name] = b.projection
        for tid in sorted(self.routers):
            for r in self.routers[tid]:
                named[r.w.name] = r.w
        for tid in sorted(self.overrides):
            for p in self.overrides[tid]:
                named[p.name] = p
        return named

    def snapshot(self) -> dict:
        """Structural description stored next to the tensors"""
        return {
            "encoder": self.config.model_dump(),
            "variant": self.variant,
            "tau": self.tau,
            "n_prompts": self.K,
            "intrinsic_dim": self.banks[0].d,
            "router_tasks": sorted(self.routers),
            "override_tasks": sorted(self.overrides),
        }

    @classmethod
    def from_tensors(cls, snapshot: dict, tensors: Dict[str, np.ndarray]) -> "ModularPromptModel":
        """Rebuild a model; every expected tensor must be present exactly once"""
        try:
            config = EncoderConfig(**snapshot["encoder"])
            variant = snapshot["variant"]
            tau = float(snapshot["tau"])
            router_tasks = [int(t) for t in snapshot["router_tasks"]]
            override_tasks = [int(t) for t in snapshot.get("override_tasks", [])]
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"malformed config snapshot: {e}") from e

        remaining = dict(tensors)

        def take(name: str) -> Parameter:
            if name not in remaining:
                raise CheckpointError(f"tensor {name} missing from checkpoint")
            return Parameter(remaining.pop(name), name=name)

        template = PromptedEncoder.initialize(config, np.random.default_rng(0))
        encoder = PromptedEncoder(config, {})
        for name, param in template.params.items():
            p = take(name)
            if p.shape != param.shape:
                raise CheckpointError(f"tensor {name} has shape {p.shape}, expected {param.shape}")
            encoder.params[name] = p

        n_banks = 1 if variant == "shallow" else config.prompted_layers
        banks = [
            PromptBank(i, take(f"bank.{i}.intrinsic"), take(f"bank.{i}.projection"), config.prompt_len, config.hidden)
            for i in range(n_banks)
        ]

        model = cls(encoder, banks, variant, tau)
        for tid in router_tasks:
            model.routers[tid] = [RouterLogits(i, take(f"router.{tid}.{i}")) for i in range(n_banks)]
        for tid in override_tasks:
            model.overrides[tid] = [take(f"override.{tid}.{i}") for i in range(n_banks)]
        if remaining:
            raise CheckpointError(f"unexpected tensors in checkpoint: {sorted(remaining)[:5]}")
        return model
