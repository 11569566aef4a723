"""Untranscribed-speech speaker adaptation for a compact TTS stack.

Self-contained: tensors and reverse-mode autodiff, Adam, the acoustic model,
staged training with strict parameter freezing, a synthetic oracle corpus,
objective evaluation, and a CLI. numpy is the only runtime dependency.
"""

__version__ = "0.1.0"
