"""Simulate multimodal LLM inference on a DRAM + RRAM near-memory chiplet system."""

from .cli import main

__all__ = ["main"]
