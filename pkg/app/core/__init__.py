"""Core numerics, optimizers, tokenizer, errors and logging"""
