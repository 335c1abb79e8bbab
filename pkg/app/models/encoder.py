"""Prompted transformer encoder with the MRC span head"""
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, model_validator

from app.core import numcore as nc
from app.core.errors import ShapeError, TaskError
from app.core.numcore import Parameter, Tensor
from app.schemas.task import Span


class EncoderConfig(BaseModel):
    """Encoder geometry; prompts are injected at layers 0..n_layers-2"""
    n_layers: int = 4
    hidden: int = 64
    heads: int = 4
    vocab: int
    max_seq: int = 256
    prompt_len: int = 8

    @model_validator(mode="after")
    def check_geometry(self) -> "EncoderConfig":
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden {self.hidden} not divisible by {self.heads} heads")
        if self.n_layers < 2:
            raise ValueError("need at least two layers")
        if self.prompt_len < 0 or self.prompt_len >= self.max_seq:
            raise ValueError("prompt length must be in [0, max_seq)")
        return self

    @property
    def prompted_layers(self) -> int:
        return self.n_layers - 1


@dataclass
class SpanLogits:
    """Per-token start and end scores, shape (B, S) each"""

    start: Tensor
    end: Tensor


class PromptedEncoder:
    """Pre-LN transformer encoder whose first L positions carry soft prompts"""

    def __init__(self, config: EncoderConfig, params: Dict[str, Parameter]):
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config: EncoderConfig, rng: np.random.Generator, std: float = 0.02) -> "PromptedEncoder":
        D = config.hidden
        shapes: Dict[str, Tuple[Tuple[int, ...], str]] = {
            "encoder.tok_emb": ((config.vocab, D), "normal"),
            "encoder.pos_emb": ((config.max_seq, D), "normal"),
            "encoder.ln_f.gamma": ((D,), "ones"),
            "encoder.ln_f.beta": ((D,), "zeros"),
            "head.start.weight": ((D, 1), "normal"),
            "head.start.bias": ((1,), "zeros"),
            "head.end.weight": ((D, 1), "normal"),
            "head.end.bias": ((1,), "zeros"),
        }
        for i in range(config.n_layers):
            p = f"encoder.layers.{i}"
            shapes.update({
                f"{p}.ln1.gamma": ((D,), "ones"),
                f"{p}.ln1.beta": ((D,), "zeros"),
                f"{p}.wq": ((D, D), "normal"),
                f"{p}.bq": ((D,), "zeros"),
                f"{p}.wk": ((D, D), "normal"),
                f"{p}.bk": ((D,), "zeros"),
                f"{p}.wv": ((D, D), "normal"),
                f"{p}.bv": ((D,), "zeros"),
                f"{p}.wo": ((D, D), "normal"),
                f"{p}.bo": ((D,), "zeros"),
                f"{p}.ln2.gamma": ((D,), "ones"),
                f"{p}.ln2.beta": ((D,), "zeros"),
                f"{p}.w1": ((D, 4 * D), "normal"),
                f"{p}.b1": ((4 * D,), "zeros"),
                f"{p}.w2": ((4 * D, D), "normal"),
                f"{p}.b2": ((D,), "zeros"),
            })
        params = {}
        for name, (shape, init) in shapes.items():
            if init == "normal":
                values = rng.normal(0.0, std, size=shape)
            elif init == "ones":
                values = np.ones(shape)
            else:
                values = np.zeros(shape)
            params[name] = Parameter(values, name=name)
        return cls(config, params)

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def body_parameters(self) -> List[Parameter]:
        return list(self.params.values())

    # -- blocks -------------------------------------------------------------

    def _attention(self, x: Tensor, i: int) -> Tensor:
        cfg = self.config
        B, S, D = x.shape
        H, dh = cfg.heads, cfg.hidden // cfg.heads
        p = f"encoder.layers.{i}"

        def heads(w: str, b: str) -> Tensor:
            proj = nc.add(nc.matmul(x, self[f"{p}.{w}"]), self[f"{p}.{b}"])
            return nc.transpose(nc.reshape(proj, (B, S, H, dh)), (0, 2, 1, 3))

        q, k, v = heads("wq", "bq"), heads("wk", "bk"), heads("wv", "bv")
        scores = nc.mul(nc.matmul(q, nc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        ctx = nc.matmul(nc.softmax(scores), v)
        merged = nc.reshape(nc.transpose(ctx, (0, 2, 1, 3)), (B, S, D))
        return nc.add(nc.matmul(merged, self[f"{p}.wo"]), self[f"{p}.bo"])

    def _block(self, h: Tensor, i: int) -> Tensor:
        p = f"encoder.layers.{i}"
        a = nc.layer_norm(h, self[f"{p}.ln1.gamma"], self[f"{p}.ln1.beta"])
        h = nc.add(h, self._attention(a, i))
        m = nc.layer_norm(h, self[f"{p}.ln2.gamma"], self[f"{p}.ln2.beta"])
        ff = nc.gelu(nc.add(nc.matmul(m, self[f"{p}.w1"]), self[f"{p}.b1"]))
        return nc.add(h, nc.add(nc.matmul(ff, self[f"{p}.w2"]), self[f"{p}.b2"]))

    # -- public ops ---------------------------------------------------------

    def encode_with_prompts(self, tokens: np.ndarray, prompts: Sequence[Optional[Tensor]]) -> Tensor:
        """
        Run the encoder with deep prompt injection

        Layer 0 sees [prompt_0 ; token embeddings]; before each layer l in
        [1, n_layers-1) the first L hidden states are replaced by prompt_l.
        A ``None`` prompt leaves that layer's prefix untouched (shallow variant).

        Args:
            tokens: (B, T) or (T,) token ids
            prompts: one (L, D) prompt or None per prompted layer

        Returns:
            Final hidden states of shape (B, L+T, D)
        """
        cfg = self.config
        ids = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        B, T = ids.shape
        L = cfg.prompt_len
        if len(prompts) != cfg.prompted_layers:
            raise ShapeError(f"expected {cfg.prompted_layers} prompts, got {len(prompts)}")
        if T + L > cfg.max_seq:
            raise ShapeError(f"sequence of {T} tokens plus {L} prompt positions exceeds {cfg.max_seq}")
        for p in prompts:
            if p is not None and p.shape != (L, cfg.hidden):
                raise ShapeError(f"prompt shape {p.shape} != {(L, cfg.hidden)}")

        pos = nc.slice_seq(self["encoder.pos_emb"], 0, T)
        h = nc.add(nc.embedding(self["encoder.tok_emb"], ids), pos)
        if L > 0:
            first = prompts[0] if prompts[0] is not None else Tensor(np.zeros((L, cfg.hidden)))
            h = nc.concat_seq([nc.broadcast_batch(first, B), h])
        for i in range(cfg.n_layers):
            if 1 <= i <= cfg.n_layers - 2 and L > 0 and prompts[i] is not None:
                h = nc.concat_seq([nc.broadcast_batch(prompts[i], B), nc.slice_seq(h, L, L + T)])
            h = self._block(h, i)
        return nc.layer_norm(h, self["encoder.ln_f.gamma"], self["encoder.ln_f.beta"])

    def mrc_logits(self, hidden: Tensor) -> SpanLogits:
        """Two independent per-token linear heads"""
        B, S, _ = hidden.shape

        def head(which: str) -> Tensor:
            score = nc.matmul(hidden, self[f"head.{which}.weight"])
            return nc.add(nc.reshape(score, (B, S)), self[f"head.{which}.bias"])

        return SpanLogits(start=head("start"), end=head("end"))


def mrc_loss(logits: SpanLogits, gold_start: Sequence[int], gold_end: Sequence[int], prompt_len: int) -> Tensor:
    """
    Per-token BCE on both heads, averaged over text positions

    loss = mean BCE(start) + mean BCE(end); prompt positions are masked out.
    """
    B, S = logits.start.shape
    gs = np.asarray(gold_start, dtype=np.int64).reshape(-1)
    ge = np.asarray(gold_end, dtype=np.int64).reshape(-1)
    if gs.shape != (B,) or ge.shape != (B,):
        raise ShapeError(f"gold indices for {len(gs)} rows, logits have {B}")
    if np.any(gs < prompt_len) or np.any(ge < prompt_len):
        raise TaskError("gold index falls in the prompt region")
    if np.any(gs >= S) or np.any(ge >= S):
        raise TaskError("gold index beyond the sequence")

    n_text = S - prompt_len
    weights = np.zeros((B, S))
    weights[:, prompt_len:] = 1.0 / (B * n_text)
    rows = np.arange(B)
    t_start = np.zeros((B, S))
    t_start[rows, gs] = 1.0
    t_end = np.zeros((B, S))
    t_end[rows, ge] = 1.0
    return nc.add(
        nc.bce_with_logits(logits.start, t_start, weights),
        nc.bce_with_logits(logits.end, t_end, weights),
    )


def extract_span(start: np.ndarray, end: np.ndarray, candidates: Sequence[Span]) -> Span:
    """argmax of start[s] + end[e] over candidates; ties go to the smallest (start, end)"""
    if not candidates:
        raise TaskError("no candidate spans to decode")
    start = np.asarray(start, dtype=np.float64)
    end = np.asarray(end, dtype=np.float64)
    if start.ndim != 1 or start.shape != end.shape:
        raise ShapeError(f"start and end logits must be matching vectors, got {start.shape} and {end.shape}")
    spans = sorted((int(s), int(e)) for s, e in candidates)
    for s, e in spans:
        if not 0 <= s <= e < len(start):
            raise ShapeError(f"candidate span ({s}, {e}) outside a sequence of length {len(start)}")
    best: Optional[Span] = None
    best_score = -math.inf
    for s, e in spans:
        score = start[s] + end[e]
        if score > best_score:
            best, best_score = (s, e), score
    return best
