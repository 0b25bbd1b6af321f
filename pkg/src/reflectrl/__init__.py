"""Two-attempt self-reflection episodes with reflection-only GRPO training."""

__version__ = "0.1.0"
