"""Co-serving simulator for LLM inference and parameter-efficient finetuning."""

__version__ = "0.1.0"
