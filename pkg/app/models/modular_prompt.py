"""Modular prompt banks, routers and relaxed-Bernoulli gating"""
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np

from app.core import numcore as nc
from app.core.errors import NumericFault, ShapeError
from app.core.numcore import Parameter, Tensor

LOGIT_CLAMP = 30.0


class PromptBank:
    """
    K modular prompts of one layer, stored as intrinsic vectors and a shared projection

    ``intrinsic`` has shape (K, d); ``projection`` has shape (L*D, d).
    ``materialized`` optionally replaces A·z_k by free (K, L, D) prompts.
    """

    def __init__(
        self,
        layer_index: int,
        intrinsic: Parameter,
        projection: Parameter,
        prompt_len: int,
        hidden: int,
    ):
        if intrinsic.data.ndim != 2 or projection.data.ndim != 2:
            raise ShapeError("bank tensors must be matrices")
        if projection.shape != (prompt_len * hidden, intrinsic.shape[1]):
            raise ShapeError(
                f"projection {projection.shape} does not map d={intrinsic.shape[1]} "
                f"to {prompt_len}x{hidden}"
            )
        self.layer_index = layer_index
        self.intrinsic = intrinsic
        self.projection = projection
        self.prompt_len = prompt_len
        self.hidden = hidden
        self.materialized: Optional[Parameter] = None

    @classmethod
    def initialize(
        cls,
        layer_index: int,
        n_prompts: int,
        prompt_len: int,
        hidden: int,
        intrinsic_dim: int,
        rng: np.random.Generator,
        std: float = 0.02,
    ) -> "PromptBank":
        """Intrinsic vectors ~ Normal(0, std^2); projection ~ Normal(0, 1/d)"""
        z = rng.normal(0.0, std, size=(n_prompts, intrinsic_dim))
        a = rng.normal(0.0, 1.0 / math.sqrt(intrinsic_dim), size=(prompt_len * hidden, intrinsic_dim))
        return cls(
            layer_index,
            Parameter(z, name=f"bank.{layer_index}.intrinsic"),
            Parameter(a, name=f"bank.{layer_index}.projection"),
            prompt_len,
            hidden,
        )

    @property
    def K(self) -> int:
        return self.intrinsic.shape[0]

    @property
    def d(self) -> int:
        return self.intrinsic.shape[1]

    def prompt_matrix(self) -> Tensor:
        """All K prompts flattened, shape (K, L*D)"""
        if self.materialized is not None:
            return nc.reshape(self.materialized, (self.K, self.prompt_len * self.hidden))
        return nc.matmul(self.intrinsic, nc.transpose(self.projection, (1, 0)))

    def materialize(self) -> Parameter:
        """Turn A·z_k into free full-width prompts"""
        values = self.intrinsic.data @ self.projection.data.T
        self.materialized = Parameter(
            values.reshape(self.K, self.prompt_len, self.hidden),
            name=f"bank.{self.layer_index}.materialized",
        )
        return self.materialized


@dataclass
class RouterLogits:
    """Per-layer, per-task router: K free logits"""

    layer_index: int
    w: Parameter

    @classmethod
    def initialize(
        cls, layer_index: int, n_prompts: int, rng: np.random.Generator, std: float = 0.5, name: str = ""
    ) -> "RouterLogits":
        w = rng.normal(0.0, std, size=n_prompts)
        return cls(layer_index, Parameter(w, name=name or f"router.{layer_index}"))

    @property
    def K(self) -> int:
        return self.w.shape[0]


@dataclass
class GateSample:
    """Gate values for one layer plus the uniform draws that produced them"""

    w_hat: Tensor
    tau: float
    u: Optional[np.ndarray] = None
    binarized: bool = False


def location_param(w_k: float) -> float:
    """alpha = sigma(w)/(1 - sigma(w)) = exp(w), with w clamped to +-30"""
    if not math.isfinite(w_k):
        raise NumericFault(f"router logit {w_k} is not finite")
    return math.exp(min(max(w_k, -LOGIT_CLAMP), LOGIT_CLAMP))


def sample_relaxed(
    w: Union[Tensor, float, Sequence[float]], tau: float, u: Union[float, np.ndarray]
) -> Tensor:
    """
    Relaxed Bernoulli gate: sigma((log alpha + log u - log(1-u)) / tau)

    Deterministic in (w, tau, u) and differentiable in w with u fixed.
    """
    if tau <= 0:
        raise NumericFault(f"temperature must be positive, got {tau}")
    u = np.asarray(u, dtype=np.float64)
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise NumericFault("uniform draws must lie strictly inside (0, 1)")
    log_alpha = nc.clip(nc.as_tensor(w), -LOGIT_CLAMP, LOGIT_CLAMP)
    noise = np.log(u) - np.log1p(-u)
    v = nc.add(log_alpha, noise)
    return nc.sigmoid(nc.mul(v, 1.0 / tau))


def draw_gates(router: RouterLogits, tau: float, rng: np.random.Generator) -> GateSample:
    """Fresh relaxed gate sample for one forward pass"""
    u = rng.uniform(1e-7, 1.0 - 1e-7, size=router.K)
    return GateSample(w_hat=sample_relaxed(router.w, tau, u), tau=tau, u=u)


def binarize_router(w: Union[RouterLogits, Tensor, Sequence[float]]) -> np.ndarray:
    """mask_k = 1 iff w_k > 0"""
    if isinstance(w, RouterLogits):
        w = w.w
    values = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise NumericFault("router logits are not finite")
    return (values > 0).astype(np.int64)


def binary_gates(w: Union[RouterLogits, Tensor, Sequence[float]]) -> GateSample:
    return GateSample(w_hat=Tensor(binarize_router(w).astype(np.float32)), tau=0.0, binarized=True)


def compose_prompt(bank: PromptBank, weights: Union[GateSample, Tensor, Sequence[float]]) -> Tensor:
    """p = (1/K) * sum_k w_k * p_k, shape (L, D)"""
    if isinstance(weights, GateSample):
        weights = weights.w_hat
    w = nc.as_tensor(weights)
    if w.shape != (bank.K,):
        raise ShapeError(f"{w.shape[0] if w.shape else 0} gate values for a bank of {bank.K}")
    flat = nc.matmul(nc.reshape(w, (1, bank.K)), bank.prompt_matrix())
    return nc.reshape(nc.mul(flat, 1.0 / bank.K), (bank.prompt_len, bank.hidden))


def materialize_intrinsic(z, A, prompt_len: int, hidden: int) -> Tensor:
    """p = reshape(A·z, L x D)"""
    z, A = nc.as_tensor(z), nc.as_tensor(A)
    if z.data.ndim != 1 or A.shape != (prompt_len * hidden, z.shape[0]):
        raise ShapeError(f"cannot project z{z.shape} with A{A.shape} to {prompt_len}x{hidden}")
    flat = nc.matmul(A, nc.reshape(z, (z.shape[0], 1)))
    return nc.reshape(flat, (prompt_len, hidden))


def fuse_intrinsic(bank: PromptBank, mask: Sequence[float]) -> np.ndarray:
    """Pre-fusion: z_fused = (1/K) * sum_k w_k z_k"""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (bank.K,):
        raise ShapeError(f"{mask.shape} gates for a bank of {bank.K}")
    return (mask @ bank.intrinsic.data.astype(np.float64)) / bank.K


def layer_prompts(
    prompts: Sequence[Optional[Tensor]], n_layers: int
) -> List[Optional[Tensor]]:
    """Pad per-bank prompts to one entry per prompted layer (shallow banks stop at layer 0)"""
    out: List[Optional[Tensor]] = list(prompts)
    if len(out) > n_layers - 1:
        raise ShapeError(f"{len(out)} prompts for {n_layers - 1} prompted layers")
    return out + [None] * (n_layers - 1 - len(out))
