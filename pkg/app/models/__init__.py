"""Numerical models"""
from app.models.encoder import EncoderConfig, PromptedEncoder, SpanLogits
from app.models.modular_prompt import GateSample, PromptBank, RouterLogits
from app.models.mp2_model import ModularPromptModel

__all__ = [
    "EncoderConfig",
    "PromptedEncoder",
    "SpanLogits",
    "GateSample",
    "PromptBank",
    "RouterLogits",
    "ModularPromptModel",
]
