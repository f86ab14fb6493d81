"""Subtask-first speaker-wise conditional end-to-end diarization."""

__version__ = "0.1.0"
