"""
Modular Prompt Lab
Multi-task pre-trained modular prompts with gradient and black-box tuning
"""

__version__ = "1.0.0"
