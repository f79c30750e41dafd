"""Unified MoE compression: expert trimming, expert slimming and cost accounting."""

from moetrim.engine import ModelConfig, MoEModel, generate_random_model, model_forward, toy_config

__version__ = "0.1.0"

__all__ = ["ModelConfig", "MoEModel", "generate_random_model", "model_forward", "toy_config", "__version__"]
