"""Subtask BCE loss, permutation-invariant speaker loss and two-stage PIT."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from chaindiar.labels import SubtaskKind

EPS = 1e-7
MAX_PIT_SPEAKERS = 8


@dataclass(frozen=True)
class AdaptationPolicy:
    frame_drop_ratio: float = 0.7
    subtask_weight: float = 0.1
    applies_to: frozenset = frozenset({SubtaskKind.SAD})

    def __post_init__(self):
        if not 0.0 <= self.frame_drop_ratio <= 1.0:
            raise ValueError("frame_drop_ratio must lie in [0, 1]")
        object.__setattr__(self, "applies_to", frozenset(SubtaskKind(k) for k in self.applies_to))

    @property
    def effective_scale(self) -> float:
        """Expected multiplier on the affected subtask terms."""
        return (1.0 - self.frame_drop_ratio) * self.subtask_weight


@dataclass
class LossBreakdown:
    l_sub: float
    l_pit: float
    total: float
    best_perms: list
    graph: torch.Tensor | None = field(default=None, repr=False, compare=False)

    @property
    def best_perm(self) -> tuple:
        return self.best_perms[0]


def bce(p, y) -> float:
    """Summed binary cross-entropy of probabilities ``p`` against 0/1 targets."""
    p = np.clip(np.asarray(p, dtype=np.float64), EPS, 1.0 - EPS)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {y.shape}")
    return float(-np.sum(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def bce_logits(logits, y):
    """Elementwise BCE on logits (no reduction); the training-path twin of :func:`bce`."""
    return F.binary_cross_entropy_with_logits(logits, y.to(logits.dtype), reduction="none")


def pairwise_costs(z, y) -> np.ndarray:
    """C[s, r] = bce(z_s, y_r) for probability rows z and reference rows y."""
    return np.array([[bce(zs, yr) for yr in y] for zs in z])


def best_permutation(costs: np.ndarray) -> tuple[float, tuple]:
    """Exhaustive minimum of sum_s costs[s, perm[s]]; ties go to the lexicographically first perm."""
    n = costs.shape[0]
    if n > MAX_PIT_SPEAKERS:
        raise ValueError(f"exhaustive PIT limit: {n} > {MAX_PIT_SPEAKERS} speakers")
    if n == 0:
        return 0.0, ()
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.intp)
    # left-to-right accumulation keeps the sums bitwise equal to a plain loop
    totals = costs[0, perms[:, 0]].copy()
    for s in range(1, n):
        totals += costs[s, perms[:, s]]
    i = int(np.argmin(totals))
    return float(totals[i]), tuple(int(v) for v in perms[i])


def pit_loss(z, y) -> tuple[float, tuple]:
    """(min over perms of sum_s bce(z_s, y_perm[s])) / (S * T), with the argmin perm (0-based)."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if z.shape != y.shape:
        raise ValueError(f"shape mismatch {z.shape} vs {y.shape}")
    n_spk, n_frames = z.shape
    if n_spk < 1:
        raise ValueError("pit_loss needs at least one speaker")
    if n_spk > MAX_PIT_SPEAKERS:
        raise ValueError(f"exhaustive PIT limit: {n_spk} > {MAX_PIT_SPEAKERS} speakers")
    total, perm = best_permutation(pairwise_costs(z, y))
    return total / (n_spk * n_frames), perm


def drop_mask(policy: AdaptationPolicy, kinds, n_frames: int, rng: np.random.Generator) -> np.ndarray:
    """Keep-mask (K, T): one independent coin per (subtask, frame) for affected subtasks."""
    mask = np.ones((len(kinds), n_frames))
    for k, kind in enumerate(kinds):
        if SubtaskKind(kind) in policy.applies_to:
            mask[k] = rng.random(n_frames) >= policy.frame_drop_ratio
    return mask


def subtask_loss(logits, refs, kinds=(), policy: AdaptationPolicy | None = None, rng=None):
    """(1/T) * sum_k BCE(v_k, u*_k) for one sequence; ``logits`` and ``refs`` are (K, T).

    With a policy, dropped frames are excluded and the result is scaled by
    ``policy.subtask_weight``.
    """
    logits = torch.as_tensor(logits)
    refs = torch.as_tensor(refs, dtype=logits.dtype)
    n_sub, n_frames = logits.shape
    if n_sub == 0:
        return logits.sum() * 0.0
    elem = bce_logits(logits, refs)
    if policy is None:
        return elem.sum() / n_frames
    if rng is None:
        raise ValueError("frame dropping needs an rng")
    if len(kinds) != n_sub:
        raise ValueError("need one SubtaskKind per subtask row")
    mask = torch.from_numpy(drop_mask(policy, kinds, n_frames, rng)).to(logits.dtype)
    return (elem * mask).sum() / n_frames * policy.subtask_weight


def pit_costs_logits(logits, refs) -> np.ndarray:
    """Detached pairwise cost matrix from logits, for permutation search."""
    with torch.no_grad():
        n = logits.shape[0]
        elem = bce_logits(logits[:, None, :].expand(n, n, -1), refs[None, :, :].expand(n, n, -1))
        return elem.sum(-1).cpu().numpy()


def pad_speaker_refs(refs_list, n_rows: int, n_frames: int) -> torch.Tensor:
    """Stack (S_i, T) references into (B, n_rows, T), padding with silent rows."""
    out = torch.zeros(len(refs_list), n_rows, n_frames, dtype=torch.float64)
    for b, r in enumerate(refs_list):
        r = torch.as_tensor(np.asarray(r), dtype=torch.float64)
        out[b, : r.shape[0]] = r
    return out


def two_stage_pit(model, x, subtask_refs, speaker_refs, policy=None, rng=None, n_speakers=None):
    """Pick the speaker order free-running, then compute losses teacher-forced.

    ``x`` is (B, T, F); ``subtask_refs`` (B, K, T); ``speaker_refs`` (B, N, T)
    already padded with silent rows.  ``n_speakers[b]`` is the number of real
    speaker rows of item ``b``; only those are permuted and the silent rows
    stay after them, so the model learns to stop right after the last
    speaker.  By default every row is permuted.  Returns (LossBreakdown,
    ChainOutputs of the teacher-forced pass).  Losses are averaged over the
    batch.
    """
    x = torch.as_tensor(x, dtype=torch.float64)
    speaker_refs = torch.as_tensor(speaker_refs, dtype=torch.float64)
    subtask_refs = torch.as_tensor(subtask_refs, dtype=torch.float64)
    n_batch, n_rows, n_frames = speaker_refs.shape

    with torch.no_grad():
        first = model(x, n_speaker_steps=n_rows)
    if n_speakers is None:
        n_speakers = [n_rows] * n_batch
    perms = []
    for b in range(n_batch):
        n = n_speakers[b]
        _, perm = best_permutation(pit_costs_logits(first.speaker_logits[b, :n], speaker_refs[b, :n]))
        perms.append(tuple(perm) + tuple(range(n, n_rows)))
    permuted = torch.stack([speaker_refs[b, list(p)] for b, p in enumerate(perms)])

    out = model(x, subtask_refs=subtask_refs, speaker_refs=permuted)
    kinds = model.cfg.subtasks
    l_pit = bce_logits(out.speaker_logits, permuted).sum() / (n_rows * n_frames * n_batch)
    l_sub = sum(subtask_loss(out.subtask_logits[b], subtask_refs[b], kinds, policy, rng) for b in range(n_batch))
    l_sub = l_sub / n_batch if n_batch else l_sub
    total = l_sub + l_pit
    return LossBreakdown(float(l_sub.detach()), float(l_pit.detach()), float(total.detach()), perms, total), out
