"""Verification engine for DNN semantic-communication pipelines under
power-constrained generative adversarial noise."""

__version__ = "0.1.0"
