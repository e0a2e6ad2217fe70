"""Gradient boosting with target-encoded categoricals for chat-activity subscription prediction."""

__version__ = "0.1.0"
