"""Curling match simulator, PPO flaw-finder, and LLM tree-refinement loop."""

__version__ = "0.1.0"
