"""Speaker activity matrices, subtask reference labels and thresholding."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class SubtaskKind(str, enum.Enum):
    SAD = "sad"
    OD = "od"


@dataclass(frozen=True)
class ActivityMatrix:
    """Binary S x T speaker activity; S may be zero."""

    rows: np.ndarray
    frame_shift_s: float = 0.01

    def __post_init__(self):
        rows = np.asarray(self.rows)
        if rows.ndim == 1:
            rows = rows[None, :]
        if rows.ndim != 2:
            raise ValueError(f"activity must be 2-D, got shape {rows.shape}")
        if rows.size and not np.all((rows == 0) | (rows == 1)):
            raise ValueError("activity entries must be 0 or 1")
        if self.frame_shift_s <= 0:
            raise ValueError("frame_shift_s must be positive")
        object.__setattr__(self, "rows", rows.astype(np.int8))

    @property
    def n_speakers(self) -> int:
        return self.rows.shape[0]

    @property
    def n_frames(self) -> int:
        return self.rows.shape[1]


def _rows(a) -> np.ndarray:
    return a.rows if isinstance(a, ActivityMatrix) else np.atleast_2d(np.asarray(a))


def derive_sad(a) -> np.ndarray:
    rows = _rows(a)
    if rows.shape[0] == 0:
        return np.zeros(rows.shape[1], dtype=np.int8)
    return rows.max(axis=0).astype(np.int8)


def derive_od(a) -> np.ndarray:
    rows = _rows(a)
    return (rows.sum(axis=0) > 1).astype(np.int8)


def derive_subtask(a, kind: SubtaskKind) -> np.ndarray:
    kind = SubtaskKind(kind)
    if kind is SubtaskKind.SAD:
        return derive_sad(a)
    return derive_od(a)


def subtask_references(a, kinds) -> np.ndarray:
    """Stack reference rows for an ordered list of subtasks, shape (K, T)."""
    rows = _rows(a)
    if not kinds:
        return np.zeros((0, rows.shape[1]), dtype=np.int8)
    return np.stack([derive_subtask(rows, k) for k in kinds])


def threshold(p) -> np.ndarray:
    """Binary decisions ``p > 0.5``; ties at exactly 0.5 go to 0."""
    p = np.asarray(p, dtype=np.float64)
    if np.isnan(p).any():
        raise ValueError("NaN in probabilities")
    return (p > 0.5).astype(np.int8)
